//! `ttrank`: pipelines from synthetic logs to trained towers, exported
//! embeddings and offline metrics.

use std::fmt::Write as _;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ttrank::checks::gradcheck_suite;
use ttrank::config::RunConfig;
use ttrank::dataset::delay_violations;
use ttrank::eval::ablation::{evaluate_model, run_ablation, seeds, AblationReport, Cell, CellMetrics};
use ttrank::model::{load_checkpoint, save_checkpoint, write_atomic, Model};
use ttrank::pipeline::{vocab_corpus, Corpus, Prepared};
use ttrank::serving::{export_items, export_users, EmbeddingTable, Scorer};
use ttrank::synth::{generate_world, read_log, simulate_logs, write_log, SynthWorld};
use ttrank::text::Vocab;
use ttrank::trainer::{continuous_finetune, finetune_run, pretrain_run, StageReport, TrainError};

const WORLD: &str = "world.json";
const LOGS: &str = "logs.ndjson";
const VOCAB: &str = "vocab.txt";
const PRETRAINED: &str = "pretrain.ckpt";
const FINETUNED: &str = "finetune.ckpt";
const CONTINUED: &str = "continuous.ckpt";
const USERS: &str = "users.emb";
const ITEMS: &str = "items.emb";

#[derive(Parser)]
#[command(name = "ttrank", version, about = "Two-tower ranking pipelines on synthetic e-commerce logs")]
struct Cli {
    /// TOML run configuration; defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.finetune.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (default from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the world and its event log.
    GenData,
    /// Build the subword vocabulary from titles and training-period queries.
    BuildVocab,
    /// Pre-train both towers with in-batch negatives.
    Pretrain,
    /// Fine-tune on impression groups.
    Finetune {
        /// Start from random weights instead of the pre-trained checkpoint.
        #[arg(long)]
        fresh: bool,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Resume fine-tuning on a later range of days.
    Continuous {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First day of new groups (default: the test boundary).
        #[arg(long)]
        from_day: Option<u32>,
        /// Day after the last new group (default: the end of the log).
        #[arg(long)]
        to_day: Option<u32>,
    },
    /// Write user and item embedding tables.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score item ids read from stdin against one user; prints `id<TAB>score`.
    Score {
        #[arg(long)]
        user: u64,
    },
    /// Test-period metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The checkpoint was fine-tuned without the context tower.
        #[arg(long)]
        no_context: bool,
    },
    /// Run the training-regime ablation over all configured seeds.
    Ablate {
        /// Comma-separated cells (default: all).
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Check every gradient against finite differences.
    Gradcheck,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, error: e.into() }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn invariant(msg: String) -> Failure {
    Failure {
        code: 4,
        error: anyhow!(msg),
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Path of an input that must already exist.
fn need(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure {
            code: 3,
            error: anyhow!("missing artifact {}", path.display()),
        })
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        need(self.path(name))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn world(&self) -> Result<SynthWorld> {
        let p = self.input(WORLD)?;
        let world: SynthWorld = serde_json::from_slice(&std::fs::read(&p)?).with_context(|| format!("reading {}", p.display()))?;
        if world.config != self.cfg.world || world.seed != self.cfg.seed {
            return Err(config_error(anyhow!(
                "{} was generated with a different seed or [world] section; rerun gen-data",
                p.display()
            )));
        }
        Ok(world)
    }

    fn corpus(&self) -> Result<Corpus> {
        let world = self.world()?;
        let p = self.input(LOGS)?;
        let logs = read_log(io::BufReader::new(std::fs::File::open(&p)?)).with_context(|| format!("reading {}", p.display()))?;
        let p = self.input(VOCAB)?;
        let vocab = Vocab::load(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Corpus::from_parts(world, logs, vocab, self.cfg.boundary()))
    }

    fn prepared(&self, corpus: &Corpus) -> Result<Prepared> {
        let data = corpus.prepare(&self.cfg.dataset)?;
        let d = &data.dataset;
        let delay = self.cfg.dataset.delay;
        let late = delay_violations(&d.histories, d.pretrain.iter().map(|s| (s.day, &s.history)), delay)
            + delay_violations(&d.histories, d.groups.iter().map(|g| (g.day, &g.history)), delay);
        let empty = d.groups.iter().filter(|g| !g.has_positive()).count();
        if late > 0 || empty > 0 {
            return Err(invariant(format!(
                "dataset contract broken: {late} targets see recent history, {empty} groups without a positive"
            )));
        }
        Ok(data)
    }

    fn checkpoint(&self, explicit: Option<PathBuf>, default: &str, corpus: &Corpus) -> Result<Model> {
        let p = match explicit {
            Some(p) => need(p)?,
            None => self.input(default)?,
        };
        let model = load_checkpoint(&p).with_context(|| format!("reading {}", p.display()))?;
        let expected = self.tower(corpus);
        if model.config != expected {
            return Err(config_error(anyhow!(
                "{} has tower shape {:?}, config asks for {:?}",
                p.display(),
                model.config,
                expected
            )));
        }
        Ok(model)
    }

    fn tower(&self, corpus: &Corpus) -> ttrank::model::TowerConfig {
        let c = &self.cfg;
        c.model.tower(corpus.vocab.len(), c.world.n_surfaces, c.world.n_devices)
    }

    fn save_model(&self, model: &Model, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        save_checkpoint(model, &p).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => invariant(e.to_string()),
        TrainError::Config(_) | TrainError::ConfigMismatch(_) => config_error(e),
        other => other.into(),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    stage: &'a str,
    samples: usize,
    steps: usize,
    epoch_loss: &'a [f64],
    degenerate_norms: usize,
}

fn report_stage(run: &Run, stage: &str, samples: usize, r: &StageReport, ckpt: &Path) -> Result<()> {
    run.write_json(
        &format!("{stage}_report.json"),
        &TrainSummary {
            stage,
            samples,
            steps: r.steps,
            epoch_loss: &r.epoch_loss,
            degenerate_norms: r.degenerate_norms,
        },
    )?;
    let last = r.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "{stage}: {samples} examples, {} steps, final epoch loss {last:.6} -> {}",
        r.steps,
        ckpt.display()
    );
    Ok(())
}

fn metrics_tsv(m: &CellMetrics) -> String {
    let v = serde_json::to_value(m).expect("metrics serialize");
    let obj = v.as_object().expect("metrics are a struct");
    let mut s = String::from("metric\tvalue\n");
    for (k, x) in obj {
        let _ = writeln!(s, "{k}\t{x}");
    }
    s
}

fn gen_data(run: &Run) -> Result<()> {
    let world = generate_world(&run.cfg.world, run.cfg.seed).map_err(config_error)?;
    let logs = simulate_logs(&world, run.cfg.world.n_days).map_err(config_error)?;
    let mut w = serde_json::to_vec(&world)?;
    w.push(b'\n');
    run.write(WORLD, &w)?;
    let mut buf = Vec::new();
    write_log(&mut buf, &logs)?;
    let p = run.write(LOGS, &buf)?;
    run.write("config.toml", run.cfg.to_toml().as_bytes())?;
    println!(
        "gen-data: {} items, {} users, {} log records -> {}",
        world.items.len(),
        world.users.len(),
        logs.len(),
        p.display()
    );
    Ok(())
}

fn build_vocab(run: &Run) -> Result<()> {
    let world = run.world()?;
    let p = run.input(LOGS)?;
    let logs = read_log(io::BufReader::new(std::fs::File::open(&p)?)).with_context(|| format!("reading {}", p.display()))?;
    let vocab = Vocab::build(&vocab_corpus(&world, &logs, run.cfg.boundary()), run.cfg.model.vocab_size).map_err(config_error)?;
    let mut buf = Vec::new();
    vocab.write_to(&mut buf)?;
    let p = run.write(VOCAB, &buf)?;
    println!("build-vocab: {} tokens -> {}", vocab.len(), p.display());
    Ok(())
}

fn pretrain(run: &Run) -> Result<()> {
    let corpus = run.corpus()?;
    let data = run.prepared(&corpus)?;
    let model = corpus.fresh_model(&run.cfg, run.cfg.seed).map_err(config_error)?;
    let tc = run.cfg.trainer_for(run.cfg.seed);
    let (model, report) = pretrain_run(model, &data.train_samples, &data.enc, &tc).map_err(train_failure)?;
    let p = run.save_model(&model, PRETRAINED)?;
    report_stage(run, "pretrain", data.train_samples.len(), &report, &p)
}

fn finetune(run: &Run, fresh: bool, init: Option<PathBuf>) -> Result<()> {
    let corpus = run.corpus()?;
    let data = run.prepared(&corpus)?;
    let start = if fresh {
        corpus.fresh_model(&run.cfg, run.cfg.seed).map_err(config_error)?
    } else {
        run.checkpoint(init, PRETRAINED, &corpus)?
    };
    let tc = run.cfg.trainer_for(run.cfg.seed);
    let (model, report) = finetune_run(start, &data.train_groups, &data.enc, &tc).map_err(train_failure)?;
    let p = run.save_model(&model, FINETUNED)?;
    report_stage(run, "finetune", data.train_groups.len(), &report, &p)
}

fn continuous(run: &Run, checkpoint: Option<PathBuf>, from: Option<u32>, to: Option<u32>) -> Result<()> {
    let corpus = run.corpus()?;
    let data = run.prepared(&corpus)?;
    let prev = run.checkpoint(checkpoint, FINETUNED, &corpus)?;
    let from = from.unwrap_or(run.cfg.boundary());
    let to = to.unwrap_or(run.cfg.world.n_days);
    let groups: Vec<_> = data
        .dataset
        .groups
        .iter()
        .filter(|g| (from..to).contains(&g.day))
        .cloned()
        .collect();
    let tc = run.cfg.trainer_for(run.cfg.seed);
    let expected = run.tower(&corpus);
    let (model, report) = continuous_finetune(prev, &expected, &groups, &data.enc, &tc).map_err(train_failure)?;
    let p = run.save_model(&model, CONTINUED)?;
    report_stage(run, "continuous", groups.len(), &report, &p)
}

fn export(run: &Run, checkpoint: Option<PathBuf>) -> Result<()> {
    let corpus = run.corpus()?;
    let data = run.prepared(&corpus)?;
    let model = run.checkpoint(checkpoint, FINETUNED, &corpus)?;
    // Embeddings for the day after the log, seeing history up to the delay.
    let day = run.cfg.world.n_days;
    let (delay, max) = (run.cfg.dataset.delay, model.config.max_history);
    let users: Vec<_> = corpus
        .world
        .users
        .iter()
        .map(|u| (u.id, data.dataset.histories.at(u.id, day, delay, max)))
        .collect();
    let users = export_users(&model, users.iter().map(|(id, h)| (*id, data.enc.history(h))))?;
    let titles = corpus
        .world
        .items
        .iter()
        .map(|i| data.enc.title(i.id).map(|t| (i.id, t)).ok_or_else(|| anyhow!("item {} has no title", i.id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let items = export_items(&model, titles)?;
    run.write(USERS, &users.to_bytes()?)?;
    run.write(ITEMS, &items.to_bytes()?)?;
    println!(
        "export: {} users, {} items, dim {} -> {}",
        users.records.len(),
        items.records.len(),
        users.dim,
        run.out.display()
    );
    Ok(())
}

fn score(run: &Run, user: u64) -> Result<()> {
    let users = EmbeddingTable::load(&run.input(USERS)?)?;
    let items = EmbeddingTable::load(&run.input(ITEMS)?)?;
    let scorer = Scorer::new(users, items)?;
    let mut ids = Vec::new();
    for line in io::stdin().lock().lines() {
        for tok in line?.split_whitespace() {
            ids.push(tok.parse::<u64>().map_err(|e| config_error(anyhow!("bad item id {tok:?}: {e}")))?);
        }
    }
    let mut out = BufWriter::new(io::stdout().lock());
    let results = scorer.score(user, &ids);
    let failed = results.iter().filter(|r| r.is_err()).count();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(s) => writeln!(out, "{id}\t{s}")?,
            Err(e) => writeln!(out, "{id}\tERROR {e}")?,
        }
    }
    out.flush()?;
    eprintln!("score: {} ids, {failed} errors", ids.len());
    Ok(())
}

fn evaluate(run: &Run, checkpoint: Option<PathBuf>, no_context: bool) -> Result<()> {
    let corpus = run.corpus()?;
    let data = run.prepared(&corpus)?;
    let model = run.checkpoint(checkpoint, FINETUNED, &corpus)?;
    let context = run.cfg.trainer.context_tower && !no_context;
    let m = evaluate_model(&model, &corpus, &data, &run.cfg, context, run.cfg.seed)?;
    run.write_json("metrics.json", &m)?;
    let p = run.write("metrics.tsv", metrics_tsv(&m).as_bytes())?;
    println!(
        "evaluate: nDCG retargeting {:.6}, discovery {:.6}, recall@{} {:.4} -> {}",
        m.ndcg_retargeting,
        m.ndcg_discovery,
        run.cfg.eval.recall_k,
        m.recall_at_k,
        p.display()
    );
    Ok(())
}

fn ablate(run: &Run, names: &[String]) -> Result<()> {
    let cells = if names.is_empty() {
        Cell::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| Cell::from_name(n).ok_or_else(|| config_error(anyhow!("unknown cell {n:?}"))))
            .collect::<Result<Vec<_>>>()?
    };
    let report: AblationReport = run_ablation(&run.cfg, &seeds(&run.cfg), &cells)?;
    run.write_json("ablation.json", &report)?;
    run.write("ablation.tsv", report.to_tsv().as_bytes())?;
    let summary = report.summary();
    run.write("ablation_summary.txt", summary.as_bytes())?;
    print!("{summary}");
    let passed = report.comparisons.iter().filter(|c| c.passed).count();
    println!(
        "ablate: {} rows, {passed}/{} comparisons hold -> {}",
        report.rows.len(),
        report.comparisons.len(),
        run.out.display()
    );
    Ok(())
}

fn gradcheck(run: &Run) -> Result<()> {
    let reports = gradcheck_suite(run.cfg.seed);
    let mut failed = 0;
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed += 1;
            eprintln!(
                "FAIL {}: max relative error {:e}{}",
                r.name,
                r.max_rel_error,
                r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
            );
        }
    }
    println!("gradcheck: {}/{} checks pass, worst relative error {worst:e}", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(invariant(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(config_error)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = Run { cfg, out };
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::BuildVocab => build_vocab(&run),
        Command::Pretrain => pretrain(&run),
        Command::Finetune { fresh, init } => finetune(&run, fresh, init),
        Command::Continuous {
            checkpoint,
            from_day,
            to_day,
        } => continuous(&run, checkpoint, from_day, to_day),
        Command::Export { checkpoint } => export(&run, checkpoint),
        Command::Score { user } => score(&run, user),
        Command::Evaluate { checkpoint, no_context } => evaluate(&run, checkpoint, no_context),
        Command::Ablate { cells } => ablate(&run, &cells),
        Command::Gradcheck => gradcheck(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
