//! Log records to pre-training samples and fine-tuning impression groups.
//!
//! Histories are stored once per user in stream order; samples and groups
//! refer to a window of that list, so a user's events are tokenized once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, EventKind, Labels, Signal};
use crate::model::EncodedEvent;
use crate::synth::LogRecord;
use crate::text::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// History events must be at least this many days older than the target.
    pub delay: u32,
    /// Interactions up to this many days after an impression still count
    /// as its positives; 0 is the same day.
    pub label_window: u32,
    pub max_history: usize,
    pub web_queries: bool,
    /// Purchase marks cart, cart and favourite mark click.
    pub funnel_closure: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            delay: 1,
            label_window: 0,
            max_history: 64,
            web_queries: true,
            funnel_closure: true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("split boundary {boundary} outside log range 0..={days}")]
    Boundary { boundary: u32, days: u32 },
}

/// `events[start..end]` of one user's history list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryRef {
    pub user: u64,
    pub start: usize,
    pub end: usize,
}

impl HistoryRef {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Histories {
    pub events: BTreeMap<u64, Vec<Event>>,
}

impl Histories {
    pub fn get(&self, h: &HistoryRef) -> &[Event] {
        match self.events.get(&h.user) {
            Some(v) => &v[h.start..h.end],
            None => &[],
        }
    }

    /// The latest `max_history` events a request on `day` may see.
    pub fn at(&self, user: u64, day: u32, delay: u32, max_history: usize) -> HistoryRef {
        let end = self.events.get(&user).map_or(0, |v| visible(v, day, delay));
        HistoryRef {
            user,
            start: end.saturating_sub(max_history),
            end,
        }
    }
}

fn visible(events: &[Event], day: u32, delay: u32) -> usize {
    events.partition_point(|e| e.day as u64 + delay as u64 <= day as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub user: u64,
    pub day: u32,
    pub history: HistoryRef,
    pub item: u64,
    pub signal: Signal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionGroup {
    pub user: u64,
    pub day: u32,
    pub surface: u32,
    pub device: u32,
    pub history: HistoryRef,
    pub items: Vec<u64>,
    pub labels: Vec<Labels>,
    /// Item's category had no interaction from this user before the request.
    pub novel: Vec<bool>,
}

impl ImpressionGroup {
    pub fn has_positive(&self) -> bool {
        self.labels.iter().any(|l| l.iter().any(|&b| b))
    }

    pub fn clicked(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l[Signal::Click.index()]).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub histories: Histories,
    pub pretrain: Vec<PretrainSample>,
    pub groups: Vec<ImpressionGroup>,
}

pub trait Dated {
    fn day(&self) -> u32;
}

impl Dated for PretrainSample {
    fn day(&self) -> u32 {
        self.day
    }
}

impl Dated for ImpressionGroup {
    fn day(&self) -> u32 {
        self.day
    }
}

impl Dated for LogRecord {
    fn day(&self) -> u32 {
        LogRecord::day(self)
    }
}

fn close_funnel(l: &mut Labels) {
    use Signal::*;
    if l[Prch.index()] {
        l[Cart.index()] = true;
    }
    if l[Cart.index()] || l[Fvrt.index()] {
        l[Click.index()] = true;
    }
}

impl Dataset {
    /// One pass over the log. Records are taken in day order, keeping the
    /// stream order within a day. `categories` maps item ids to category
    /// ids for the novelty mask; unknown items count as not novel.
    pub fn build(logs: &[LogRecord], categories: &HashMap<u64, usize>, cfg: &DatasetConfig) -> Self {
        let mut order: Vec<usize> = (0..logs.len()).collect();
        order.sort_by_key(|&i| logs[i].day());

        // Later positive interactions per (user, item), for the label window.
        let mut later: HashMap<(u64, u64), Vec<(usize, u32, Signal)>> = HashMap::new();
        for (pos, &i) in order.iter().enumerate() {
            if let LogRecord::Event { user, event } = &logs[i] {
                if let (Some(item), Some(s)) = (event.item, event.kind.signal()) {
                    later.entry((*user, item)).or_default().push((pos, event.day, s));
                }
            }
        }

        let mut histories = Histories::default();
        let mut seen: HashMap<u64, BTreeSet<usize>> = HashMap::new();
        let mut pretrain = Vec::new();
        let mut groups = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            match &logs[i] {
                LogRecord::Event { user, event } => {
                    if let (Some(item), Some(signal)) = (event.item, event.kind.signal()) {
                        pretrain.push(PretrainSample {
                            user: *user,
                            day: event.day,
                            history: histories.at(*user, event.day, cfg.delay, cfg.max_history),
                            item,
                            signal,
                        });
                        if let Some(&c) = categories.get(&item) {
                            seen.entry(*user).or_default().insert(c);
                        }
                    }
                    if event.kind != EventKind::WebQuery || cfg.web_queries {
                        histories.events.entry(*user).or_default().push(event.clone());
                    }
                }
                LogRecord::Impression {
                    day,
                    user,
                    surface,
                    device,
                    items,
                    signals,
                } => {
                    let mut labels: Vec<Labels> = signals
                        .iter()
                        .map(|s| {
                            let mut l = [false; 4];
                            s.iter().for_each(|x| l[x.index()] = true);
                            l
                        })
                        .collect();
                    labels.resize(items.len(), [false; 4]);
                    for (item, l) in items.iter().zip(labels.iter_mut()) {
                        for &(p, d, s) in later.get(&(*user, *item)).into_iter().flatten() {
                            if p > pos && d >= *day && d - *day <= cfg.label_window {
                                l[s.index()] = true;
                            }
                        }
                        if cfg.funnel_closure {
                            close_funnel(l);
                        }
                    }
                    let known = seen.get(user);
                    let novel = items
                        .iter()
                        .map(|it| match categories.get(it) {
                            Some(c) => !known.is_some_and(|k| k.contains(c)),
                            None => false,
                        })
                        .collect();
                    let group = ImpressionGroup {
                        user: *user,
                        day: *day,
                        surface: *surface,
                        device: *device,
                        history: histories.at(*user, *day, cfg.delay, cfg.max_history),
                        items: items.clone(),
                        labels,
                        novel,
                    };
                    if group.has_positive() {
                        groups.push(group);
                    }
                }
            }
        }
        Self {
            histories,
            pretrain,
            groups,
        }
    }

    /// Events of the user's history visible on `day`, or an empty slice.
    pub fn history(&self, h: &HistoryRef) -> &[Event] {
        self.histories.get(h)
    }
}

pub fn build_pretrain_samples(logs: &[LogRecord], cfg: &DatasetConfig) -> (Histories, Vec<PretrainSample>) {
    let d = Dataset::build(logs, &HashMap::new(), cfg);
    (d.histories, d.pretrain)
}

pub fn build_finetune_groups(
    logs: &[LogRecord],
    categories: &HashMap<u64, usize>,
    cfg: &DatasetConfig,
) -> (Histories, Vec<ImpressionGroup>) {
    let d = Dataset::build(logs, categories, cfg);
    (d.histories, d.groups)
}

/// Splits by day: records with `day >= boundary` are test. `days` is the
/// number of simulated days, so `boundary == days` leaves the test empty.
pub fn time_split<T: Dated>(records: Vec<T>, boundary: u32, days: u32) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if boundary > days {
        return Err(DatasetError::Boundary { boundary, days });
    }
    Ok(records.into_iter().partition(|r| r.day() < boundary))
}

/// Every checked history ends at least `delay` days before its target.
pub fn delay_violations<'a>(
    histories: &Histories,
    targets: impl IntoIterator<Item = (u32, &'a HistoryRef)>,
    delay: u32,
) -> usize {
    targets
        .into_iter()
        .filter(|(day, h)| {
            histories
                .get(h)
                .iter()
                .any(|e| e.day as u64 + delay as u64 > *day as u64)
        })
        .count()
}

/// Token ids for user histories and item titles, each computed once.
#[derive(Clone, Debug, Default)]
pub struct Encoded {
    pub histories: BTreeMap<u64, Vec<EncodedEvent>>,
    pub titles: HashMap<u64, Arc<[u32]>>,
}

impl Encoded {
    pub fn new<'a>(vocab: &Vocab, histories: &Histories, titles: impl IntoIterator<Item = (u64, &'a str)>) -> Self {
        let histories = histories
            .events
            .iter()
            .map(|(u, evs)| {
                let enc = evs
                    .iter()
                    .map(|e| EncodedEvent {
                        kind: e.kind,
                        tokens: vocab.tokenize(&e.text).into(),
                    })
                    .collect();
                (*u, enc)
            })
            .collect();
        let titles = titles
            .into_iter()
            .map(|(id, t)| (id, Arc::from(vocab.tokenize(t))))
            .collect();
        Self { histories, titles }
    }

    pub fn history(&self, h: &HistoryRef) -> &[EncodedEvent] {
        match self.histories.get(&h.user) {
            Some(v) => &v[h.start..h.end],
            None => &[],
        }
    }

    pub fn title(&self, item: u64) -> Option<&[u32]> {
        self.titles.get(&item).map(|t| &**t)
    }
}

#[cfg(test)]
mod tests;
