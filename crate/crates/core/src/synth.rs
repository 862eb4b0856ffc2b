//! Ground-truth e-commerce simulator.
//!
//! Items live in categories and carry latent vectors built from a category
//! centre plus attribute offsets; titles are made of the same words, so a
//! bag-of-words title embedding can recover most of the latent. Users hold a
//! drifting set of category interests plus an attribute taste. Every few
//! weeks a user picks up a new interest, and searches for it the day before.
//!
//! Impressions are clicked with probability
//! `sigmoid(scale * <z_u, z_i> + offset + b_ctx(surface, device))`. The
//! first surface favours categories the user already knows, the last one
//! favours categories the user has never touched.
//!
//! Every title starts with a brand word. Brands carry no relevance, but each
//! one is promoted on a home surface and fills most of that surface's slots,
//! so a brand's raw click rate mirrors its surface's bias.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, EventKind, Signal};

const CATEGORIES: [(&str, [&str; 4]); 24] = [
    ("shirt", ["oxford", "flannel", "button", "collar"]),
    ("shoes", ["running", "sneaker", "lace", "sole"]),
    ("jacket", ["puffer", "zip", "hooded", "parka"]),
    ("dress", ["maxi", "evening", "wrap", "midi"]),
    ("lamp", ["desk", "floor", "bulb", "shade"]),
    ("sofa", ["sectional", "recliner", "cushion", "loveseat"]),
    ("kettle", ["electric", "boil", "spout", "whistle"]),
    ("blender", ["smoothie", "pitcher", "pulse", "motor"]),
    ("phone", ["smartphone", "dual", "sim", "unlocked"]),
    ("headphones", ["wireless", "earbuds", "noise", "bass"]),
    ("laptop", ["notebook", "ultrabook", "keyboard", "touchpad"]),
    ("camera", ["mirrorless", "lens", "tripod", "zoom"]),
    ("tent", ["camping", "dome", "waterproof", "poles"]),
    ("bicycle", ["mountain", "gear", "saddle", "pedal"]),
    ("dumbbell", ["weight", "adjustable", "grip", "barbell"]),
    ("yoga", ["mat", "block", "strap", "pilates"]),
    ("novel", ["paperback", "thriller", "mystery", "fiction"]),
    ("puzzle", ["jigsaw", "pieces", "brain", "teaser"]),
    ("lego", ["bricks", "minifigure", "builder", "kit"]),
    ("doll", ["plush", "toddler", "dollhouse", "outfit"]),
    ("shampoo", ["conditioner", "scalp", "keratin", "volume"]),
    ("perfume", ["fragrance", "eau", "musk", "floral"]),
    ("drill", ["cordless", "bit", "impact", "torque"]),
    ("hammer", ["claw", "mallet", "nail", "handle"]),
];

const ATTRIBUTES: [&str; 20] = [
    "red", "blue", "black", "white", "green", "grey", "pink", "gold", "cotton", "leather",
    "steel", "wooden", "plastic", "glass", "compact", "deluxe", "classic", "modern", "vintage",
    "sport",
];

const BRANDS: [&str; 9] = ["acme", "zenith", "nova", "orbit", "vega", "lumen", "terra", "aero", "kestrel"];

const FILLER: [&str; 8] = ["new", "best", "cheap", "sale", "buy", "top", "original", "gift"];

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("simulation needs at least 2 days, got {0}")]
    TooFewDays(u32),
    #[error("unknown user id {0}")]
    UnknownUser(u64),
    #[error("unknown item id {0}")]
    UnknownItem(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_days: u32,
    pub latent_dim: usize,
    pub n_categories: usize,
    pub n_surfaces: usize,
    pub n_devices: usize,
    pub bias_strength: f64,
    pub impression_size: usize,
    /// Probability that a user is active on a given day.
    pub activity: f64,
    /// Expected new interests per user per day.
    pub new_interest_rate: f64,
    pub click_scale: f64,
    pub click_offset: f64,
    /// Probability that an impression slot is filled from brands promoted on
    /// the request's surface.
    pub placement: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 500,
            n_days: 60,
            latent_dim: 8,
            n_categories: 24,
            n_surfaces: 3,
            n_devices: 2,
            bias_strength: 1.0,
            impression_size: 8,
            activity: 0.16,
            new_interest_rate: 0.04,
            click_scale: 5.0,
            click_offset: -3.0,
            placement: 0.7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.latent_dim < 2 {
            return bad(format!("latent_dim {} < 2", self.latent_dim));
        }
        if self.n_categories < 2 || self.n_categories > CATEGORIES.len() {
            return bad(format!("n_categories {} outside [2, {}]", self.n_categories, CATEGORIES.len()));
        }
        if self.n_surfaces < 2 {
            return bad(format!("n_surfaces {} < 2", self.n_surfaces));
        }
        if self.n_devices < 2 {
            return bad(format!("n_devices {} < 2", self.n_devices));
        }
        if self.n_items < self.n_categories {
            return bad(format!("{} items cannot fill {} categories", self.n_items, self.n_categories));
        }
        if self.n_users == 0 || self.impression_size == 0 {
            return bad("n_users and impression_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.activity) || !(0.0..=1.0).contains(&self.new_interest_rate) {
            return bad("activity and new_interest_rate must be probabilities".into());
        }
        if !(0.0..=1.0).contains(&self.placement) {
            return bad(format!("placement {} must be a probability", self.placement));
        }
        if self.bias_strength < 0.0 || !self.bias_strength.is_finite() {
            return bad(format!("bias_strength {} must be finite and non-negative", self.bias_strength));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub words: Vec<String>,
    pub centre: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub category: usize,
    pub title: String,
    /// Index into the brand list; brand `b` is promoted on surface `b % n_surfaces`.
    pub brand: usize,
    pub popularity: f64,
    pub latent: Vec<f64>,
}

/// One interest of a user, active on days `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interest {
    pub category: usize,
    pub start: u32,
    pub end: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: u64,
    pub taste: Vec<f64>,
    /// Probability of requesting from device 0; the rest is spread evenly.
    pub device_preference: f64,
    pub interests: Vec<Interest>,
}

impl User {
    pub fn active_interests(&self, day: u32) -> impl Iterator<Item = &Interest> {
        self.interests.iter().filter(move |i| i.start <= day && day < i.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub categories: Vec<Category>,
    pub attributes: Vec<(String, Vec<f64>)>,
    pub items: Vec<Item>,
    pub users: Vec<User>,
    pub surface_bias: Vec<f64>,
    pub device_bias: Vec<f64>,
}

/// Item record without latents, as exported to the catalog file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: u64,
    pub category: usize,
    pub title: String,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, m: usize, std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    (0..m).map(|_| n.sample(rng)).collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evenly spaced values from `hi` down to `lo` over `n` slots.
fn ramp(n: usize, hi: f64, lo: f64) -> Vec<f64> {
    (0..n)
        .map(|i| hi + (lo - hi) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SynthWorld, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.latent_dim;

    let categories: Vec<Category> = CATEGORIES[..config.n_categories]
        .iter()
        .map(|(name, words)| {
            let mut centre = gaussian(&mut rng, m, 1.0);
            unit(&mut centre);
            Category {
                name: name.to_string(),
                words: words.iter().map(|w| w.to_string()).collect(),
                centre,
            }
        })
        .collect();
    let attributes: Vec<(String, Vec<f64>)> = ATTRIBUTES
        .iter()
        .map(|w| (w.to_string(), gaussian(&mut rng, m, 0.35 / (m as f64).sqrt())))
        .collect();

    let pop = LogNormal::new(0.0, 0.8).expect("valid lognormal");
    let items = (0..config.n_items)
        .map(|i| {
            let category = i % config.n_categories;
            let cat = &categories[category];
            let mut latent = cat.centre.clone();
            let brand = rng.random_range(0..BRANDS.len());
            let mut words = vec![BRANDS[brand].to_string()];
            let n_attr = rng.random_range(1..=2);
            let mut chosen = BTreeSet::new();
            while chosen.len() < n_attr {
                chosen.insert(rng.random_range(0..attributes.len()));
            }
            for &a in &chosen {
                words.push(attributes[a].0.clone());
                axpy(&mut latent, 1.0, &attributes[a].1);
            }
            words.push(cat.words[rng.random_range(0..cat.words.len())].clone());
            if rng.random_bool(0.4) {
                words.push(cat.words[rng.random_range(0..cat.words.len())].clone());
            }
            words.push(cat.name.clone());
            axpy(&mut latent, 1.0, &gaussian(&mut rng, m, 0.1 / (m as f64).sqrt()));
            unit(&mut latent);
            Item {
                id: i as u64,
                category,
                title: words.join(" "),
                brand,
                popularity: pop.sample(&mut rng),
                latent,
            }
        })
        .collect();

    let mut direction = gaussian(&mut rng, m, 1.0);
    unit(&mut direction);
    let adoption = config.new_interest_rate;
    let users = (0..config.n_users)
        .map(|u| {
            let mut taste = vec![0.0; m];
            for _ in 0..2 {
                let a = rng.random_range(0..attributes.len());
                axpy(&mut taste, 1.0, &attributes[a].1);
            }
            let mut interests = Vec::new();
            let first = rng.random_range(0..config.n_categories);
            let mut second = rng.random_range(0..config.n_categories);
            while second == first {
                second = rng.random_range(0..config.n_categories);
            }
            for c in [first, second] {
                interests.push(Interest {
                    category: c,
                    start: 0,
                    end: config.n_days,
                    weight: rng.random_range(0.6..1.0),
                });
            }
            for day in 1..config.n_days {
                if rng.random_bool(adoption) {
                    let held: BTreeSet<usize> = interests
                        .iter()
                        .filter(|i| i.start <= day && day < i.end)
                        .map(|i| i.category)
                        .collect();
                    let fresh: Vec<usize> = (0..config.n_categories).filter(|c| !held.contains(c)).collect();
                    if fresh.is_empty() {
                        continue;
                    }
                    let c = fresh[rng.random_range(0..fresh.len())];
                    // An older interest fades when a new one arrives.
                    if held.len() >= 3 {
                        if let Some(old) = interests
                            .iter_mut()
                            .find(|i| i.start <= day && day < i.end)
                        {
                            old.end = day;
                        }
                    }
                    interests.push(Interest {
                        category: c,
                        start: day,
                        end: config.n_days,
                        weight: 1.4,
                    });
                }
            }
            User {
                id: u as u64,
                taste,
                device_preference: 0.0,
                interests,
            }
        })
        .collect::<Vec<_>>();

    let mut world = SynthWorld {
        config: config.clone(),
        seed,
        categories,
        attributes,
        items,
        users,
        surface_bias: ramp(config.n_surfaces, 0.8, -0.8)
            .into_iter()
            .map(|b| b * config.bias_strength)
            .collect(),
        device_bias: ramp(config.n_devices, 0.5, -0.5)
            .into_iter()
            .map(|b| b * config.bias_strength)
            .collect(),
    };
    // Device choice follows where the user's tastes sit in latent space.
    for u in 0..world.users.len() {
        let z = world.user_latent(u, 0);
        world.users[u].device_preference = crate::objectives::sigmoid(4.0 * dot(&z, &direction));
    }
    Ok(world)
}

impl SynthWorld {
    /// Unit latent of user `u` on `day`.
    pub fn user_latent(&self, u: usize, day: u32) -> Vec<f64> {
        let user = &self.users[u];
        let mut z = user.taste.clone();
        for i in user.active_interests(day) {
            axpy(&mut z, i.weight, &self.categories[i.category].centre);
        }
        unit(&mut z);
        z
    }

    pub fn context_bias(&self, surface: usize, device: usize) -> f64 {
        self.surface_bias[surface] + self.device_bias[device]
    }

    /// Context-free ground-truth relevance `<z_u(day), z_i>`.
    pub fn oracle_relevance(&self, user: u64, item: u64, day: u32) -> Result<f64, SynthError> {
        let u = self.user_index(user)?;
        let i = self.item_index(item)?;
        Ok(dot(&self.user_latent(u, day), &self.items[i].latent))
    }

    pub fn click_probability(&self, relevance: f64, surface: usize, device: usize) -> f64 {
        crate::objectives::sigmoid(
            self.config.click_scale * relevance + self.config.click_offset + self.context_bias(surface, device),
        )
    }

    /// Click probability with the context bias removed.
    pub fn unbiased_click_probability(&self, relevance: f64) -> f64 {
        crate::objectives::sigmoid(self.config.click_scale * relevance + self.config.click_offset)
    }

    pub fn user_index(&self, user: u64) -> Result<usize, SynthError> {
        usize::try_from(user)
            .ok()
            .filter(|&u| u < self.users.len())
            .ok_or(SynthError::UnknownUser(user))
    }

    pub fn item_index(&self, item: u64) -> Result<usize, SynthError> {
        usize::try_from(item)
            .ok()
            .filter(|&i| i < self.items.len())
            .ok_or(SynthError::UnknownItem(item))
    }

    pub fn catalog(&self) -> Vec<CatalogEntry> {
        self.items
            .iter()
            .map(|i| CatalogEntry {
                id: i.id,
                category: i.category,
                title: i.title.clone(),
            })
            .collect()
    }

    /// Funnel outcome of one exposure: click first, then possibly favourite,
    /// cart and purchase. Empty when not clicked.
    pub fn sample_signals(&self, rng: &mut impl Rng, click_probability: f64) -> Vec<Signal> {
        let mut out = Vec::new();
        if !rng.random_bool(click_probability.clamp(0.0, 1.0)) {
            return out;
        }
        out.push(Signal::Click);
        if rng.random_bool(0.15) {
            out.push(Signal::Fvrt);
        }
        if rng.random_bool(0.3) {
            out.push(Signal::Cart);
            if rng.random_bool(0.4) {
                out.push(Signal::Prch);
            }
        }
        out
    }
}

/// One line of the log file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Event {
        user: u64,
        #[serde(flatten)]
        event: Event,
    },
    Impression {
        day: u32,
        user: u64,
        surface: u32,
        device: u32,
        items: Vec<u64>,
        signals: Vec<Vec<Signal>>,
    },
}

impl LogRecord {
    pub fn day(&self) -> u32 {
        match self {
            LogRecord::Event { event, .. } => event.day,
            LogRecord::Impression { day, .. } => *day,
        }
    }

    pub fn user(&self) -> u64 {
        match self {
            LogRecord::Event { user, .. } | LogRecord::Impression { user, .. } => *user,
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SurfaceKind {
    Familiar,
    Mixed,
    Discovery,
}

fn surface_kind(s: usize, n: usize) -> SurfaceKind {
    if s == 0 {
        SurfaceKind::Familiar
    } else if s + 1 == n {
        SurfaceKind::Discovery
    } else {
        SurfaceKind::Mixed
    }
}

/// Item indices drawn in proportion to popularity.
struct Pool {
    items: Vec<usize>,
    weights: Option<WeightedIndex<f64>>,
}

impl Pool {
    fn new(world: &SynthWorld, keep: impl Fn(&Item) -> bool) -> Self {
        let items: Vec<usize> = (0..world.items.len()).filter(|&i| keep(&world.items[i])).collect();
        let weights = WeightedIndex::new(items.iter().map(|&i| world.items[i].popularity)).ok();
        Self { items, weights }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        self.weights.as_ref().map(|w| self.items[w.sample(rng)])
    }
}

struct Simulator<'w> {
    world: &'w SynthWorld,
    rng: ChaCha8Rng,
    by_category: Vec<Pool>,
    /// `[category][surface]`: items of the category promoted on the surface.
    promoted: Vec<Vec<Pool>>,
    all: Pool,
    promoted_all: Vec<Pool>,
    surface_weights: WeightedIndex<f64>,
    /// Categories each user has had a positive item interaction with.
    familiar: Vec<BTreeSet<usize>>,
    out: Vec<LogRecord>,
}

impl<'w> Simulator<'w> {
    fn new(world: &'w SynthWorld) -> Self {
        let nc = world.config.n_categories;
        let ns = world.config.n_surfaces;
        let by_category = (0..nc).map(|c| Pool::new(world, |it| it.category == c)).collect();
        let promoted = (0..nc)
            .map(|c| {
                (0..ns)
                    .map(|s| Pool::new(world, |it| it.category == c && it.brand % ns == s))
                    .collect()
            })
            .collect();
        let all = Pool::new(world, |_| true);
        let promoted_all = (0..ns).map(|s| Pool::new(world, |it| it.brand % ns == s)).collect();
        let surface_weights = WeightedIndex::new((0..ns).map(|s| match surface_kind(s, ns) {
            SurfaceKind::Familiar => 0.4,
            SurfaceKind::Mixed => 0.35 / (ns - 2) as f64,
            SurfaceKind::Discovery => 0.25,
        }))
        .expect("positive weights");
        Self {
            world,
            rng: ChaCha8Rng::seed_from_u64(world.seed ^ 0x9e37_79b9_7f4a_7c15),
            by_category,
            promoted,
            all,
            promoted_all,
            surface_weights,
            familiar: vec![BTreeSet::new(); world.users.len()],
            out: Vec::new(),
        }
    }

    fn item_from(&mut self, category: usize) -> usize {
        self.by_category[category].sample(&mut self.rng).expect("every category has items")
    }

    /// Impression slot: a promoted item with probability `placement`.
    fn placed(&mut self, category: Option<usize>, surface: usize) -> usize {
        if self.rng.random_bool(self.world.config.placement) {
            let pool = match category {
                Some(c) => &self.promoted[c][surface],
                None => &self.promoted_all[surface],
            };
            if let Some(i) = pool.sample(&mut self.rng) {
                return i;
            }
        }
        match category {
            Some(c) => self.item_from(c),
            None => self.all.sample(&mut self.rng).expect("catalog is not empty"),
        }
    }

    fn weighted_category(&mut self, interests: &[(usize, f64)]) -> usize {
        let w = WeightedIndex::new(interests.iter().map(|i| i.1)).expect("positive weights");
        interests[w.sample(&mut self.rng)].0
    }

    fn emit_event(&mut self, user: u64, day: u32, kind: EventKind, item: Option<usize>, text: String, surface: Option<u32>) {
        if let Some(i) = item {
            if kind != EventKind::WebQuery {
                self.familiar[user as usize].insert(self.world.items[i].category);
            }
        }
        self.out.push(LogRecord::Event {
            user,
            event: Event {
                day,
                kind,
                text,
                item: item.map(|i| i as u64),
                surface,
            },
        });
    }

    fn emit_signals(&mut self, user: u64, day: u32, item: usize, signals: &[Signal], surface: Option<u32>) {
        for s in signals {
            let title = self.world.items[item].title.clone();
            self.emit_event(user, day, s.event_kind(), Some(item), title, surface);
        }
    }

    fn query(&mut self, category: usize) -> String {
        let cat = &self.world.categories[category];
        let mut words = Vec::new();
        if self.rng.random_bool(0.5) {
            words.push(cat.words[self.rng.random_range(0..cat.words.len())].clone());
        }
        if self.rng.random_bool(0.3) {
            let a = self.rng.random_range(0..self.world.attributes.len());
            words.push(self.world.attributes[a].0.clone());
        }
        words.push(cat.name.clone());
        if self.rng.random_bool(0.3) {
            words.push(FILLER[self.rng.random_range(0..FILLER.len())].to_string());
        }
        words.join(" ")
    }

    fn impression(&mut self, u: usize, day: u32, interests: &[(usize, f64)]) {
        let w = self.world;
        let ns = w.config.n_surfaces;
        let surface = self.surface_weights.sample(&mut self.rng);
        let user = &w.users[u];
        let device = if self.rng.random_bool(user.device_preference) {
            0
        } else {
            self.rng.random_range(1..w.config.n_devices)
        };
        let familiar: Vec<(usize, f64)> = interests
            .iter()
            .copied()
            .filter(|(c, _)| self.familiar[u].contains(c))
            .collect();
        let unfamiliar: Vec<(usize, f64)> = interests
            .iter()
            .copied()
            .filter(|(c, _)| !self.familiar[u].contains(c))
            .collect();
        let n = w.config.impression_size;
        let (targeted, pool): (usize, &[(usize, f64)]) = match surface_kind(surface, ns) {
            SurfaceKind::Familiar => (n * 5 / 8, if familiar.is_empty() { interests } else { &familiar }),
            SurfaceKind::Mixed => (n / 2, interests),
            SurfaceKind::Discovery => (n * 3 / 8, &unfamiliar),
        };
        let mut items = Vec::with_capacity(n);
        let mut guard = 0;
        while items.len() < n && guard < 50 * n {
            guard += 1;
            let i = if items.len() < targeted && !pool.is_empty() {
                let c = self.weighted_category(pool);
                self.placed(Some(c), surface)
            } else {
                let i = self.placed(None, surface);
                if surface_kind(surface, ns) == SurfaceKind::Discovery
                    && self.familiar[u].contains(&w.items[i].category)
                {
                    continue;
                }
                i
            };
            if !items.contains(&i) {
                items.push(i);
            }
        }
        let z = w.user_latent(u, day);
        let signals: Vec<Vec<Signal>> = items
            .iter()
            .map(|&i| {
                let p = w.click_probability(dot(&z, &w.items[i].latent), surface, device);
                w.sample_signals(&mut self.rng, p)
            })
            .collect();
        self.out.push(LogRecord::Impression {
            day,
            user: u as u64,
            surface: surface as u32,
            device: device as u32,
            items: items.iter().map(|&i| i as u64).collect(),
            signals: signals.clone(),
        });
        for (i, s) in items.iter().zip(&signals) {
            self.emit_signals(u as u64, day, *i, s, Some(surface as u32));
        }
    }

    fn organic(&mut self, u: usize, day: u32, interests: &[(usize, f64)]) {
        let w = self.world;
        let z = w.user_latent(u, day);
        let c = self.weighted_category(interests);
        for _ in 0..2 {
            let i = self.item_from(c);
            // Organic browsing is intent-driven: no surface or device bias.
            let p = crate::objectives::sigmoid(w.config.click_scale * dot(&z, &w.items[i].latent) + w.config.click_offset + 1.0);
            let s = w.sample_signals(&mut self.rng, p);
            self.emit_signals(u as u64, day, i, &s, None);
        }
    }

    fn run(mut self, days: u32) -> Vec<LogRecord> {
        let w = self.world;
        for day in 0..days {
            for u in 0..w.users.len() {
                let user = &w.users[u];
                let today: Vec<(usize, f64)> = user.active_interests(day).map(|i| (i.category, i.weight)).collect();
                let tomorrow: Vec<(usize, f64)> = user.active_interests(day + 1).map(|i| (i.category, i.weight)).collect();
                let adopting: Vec<usize> = user
                    .interests
                    .iter()
                    .filter(|i| i.start == day + 1)
                    .map(|i| i.category)
                    .collect();
                let active = self.rng.random_bool(w.config.activity);
                if active && !today.is_empty() {
                    self.impression(u, day, &today);
                    self.organic(u, day, &today);
                }
                // Searches look one day ahead.
                let mut queries = Vec::new();
                for &c in &adopting {
                    queries.push(c);
                    if self.rng.random_bool(0.5) {
                        queries.push(c);
                    }
                }
                if active && !tomorrow.is_empty() && self.rng.random_bool(0.5) {
                    queries.push(self.weighted_category(&tomorrow));
                }
                for c in queries {
                    let text = self.query(c);
                    self.emit_event(u as u64, day, EventKind::WebQuery, None, text, None);
                }
            }
        }
        self.out
    }
}

/// Simulates `days` days of organic events, impressions and web queries,
/// ordered by day and then by user.
pub fn simulate_logs(world: &SynthWorld, days: u32) -> Result<Vec<LogRecord>, SynthError> {
    if days < 2 {
        return Err(SynthError::TooFewDays(days));
    }
    Ok(Simulator::new(world).run(days))
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

/// Writes one JSON object per line.
pub fn write_log<W: Write>(mut out: W, records: &[LogRecord]) -> Result<(), LogError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a log written by [`write_log`]; blank lines are skipped.
pub fn read_log<R: BufRead>(input: R) -> Result<Vec<LogRecord>, LogError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|source| LogError::Parse { line: n + 1, source })?;
        out.push(r);
    }
    Ok(out)
}
