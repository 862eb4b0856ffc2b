//! Shared steps from a run config to trained models: world, logs, vocab,
//! dataset split and encoded inputs.

use std::collections::HashMap;

use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{time_split, Dataset, DatasetConfig, DatasetError, Encoded, ImpressionGroup, PretrainSample};
use crate::event::EventKind;
use crate::model::{ConfigError, Model};
use crate::synth::{generate_world, simulate_logs, LogRecord, SynthError, SynthWorld};
use crate::text::{Vocab, VocabError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ConfigError),
}

/// Simulated world with its full log and the vocabulary built from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub world: SynthWorld,
    pub logs: Vec<LogRecord>,
    pub categories: HashMap<u64, usize>,
    pub vocab: Vocab,
    pub boundary: u32,
}

/// Item titles and the web queries issued before the test period.
pub fn vocab_corpus<'a>(world: &'a SynthWorld, logs: &'a [LogRecord], boundary: u32) -> Vec<&'a str> {
    let mut corpus: Vec<&str> = world.items.iter().map(|i| i.title.as_str()).collect();
    for r in logs {
        if let LogRecord::Event { event, .. } = r {
            if event.kind == EventKind::WebQuery && event.day < boundary {
                corpus.push(&event.text);
            }
        }
    }
    corpus
}

impl Corpus {
    pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Self, PipelineError> {
        let world = generate_world(&cfg.world, seed)?;
        let logs = simulate_logs(&world, cfg.world.n_days)?;
        let boundary = cfg.boundary();
        let vocab = Vocab::build(&vocab_corpus(&world, &logs, boundary), cfg.model.vocab_size)?;
        Ok(Self::from_parts(world, logs, vocab, boundary))
    }

    /// Reassembles a corpus from stored artifacts.
    pub fn from_parts(world: SynthWorld, logs: Vec<LogRecord>, vocab: Vocab, boundary: u32) -> Self {
        let categories = world.items.iter().map(|i| (i.id, i.category)).collect();
        Self {
            world,
            logs,
            categories,
            vocab,
            boundary,
        }
    }

    pub fn prepare(&self, dcfg: &DatasetConfig) -> Result<Prepared, PipelineError> {
        let days = self.world.config.n_days;
        let dataset = Dataset::build(&self.logs, &self.categories, dcfg);
        let enc = Encoded::new(
            &self.vocab,
            &dataset.histories,
            self.world.items.iter().map(|i| (i.id, i.title.as_str())),
        );
        let (train_samples, test_samples) = time_split(dataset.pretrain.clone(), self.boundary, days)?;
        let (train_groups, test_groups) = time_split(dataset.groups.clone(), self.boundary, days)?;
        Ok(Prepared {
            dataset,
            enc,
            train_samples,
            test_samples,
            train_groups,
            test_groups,
        })
    }

    pub fn fresh_model(&self, cfg: &RunConfig, seed: u64) -> Result<Model, PipelineError> {
        let tower = cfg
            .model
            .tower(self.vocab.len(), cfg.world.n_surfaces, cfg.world.n_devices);
        Ok(Model::new(tower, seed)?)
    }

    /// Context-free click probability of every item in every group, at the
    /// group's day.
    pub fn oracle_relevance(&self, groups: &[ImpressionGroup]) -> Result<Vec<Vec<f64>>, PipelineError> {
        groups
            .iter()
            .map(|g| {
                g.items
                    .iter()
                    .map(|&i| {
                        let r = self.world.oracle_relevance(g.user, i, g.day)?;
                        Ok(self.world.unbiased_click_probability(r))
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub enc: Encoded,
    pub train_samples: Vec<PretrainSample>,
    pub test_samples: Vec<PretrainSample>,
    pub train_groups: Vec<ImpressionGroup>,
    pub test_groups: Vec<ImpressionGroup>,
}

impl Prepared {
    /// Positive interactions per item over the training samples.
    pub fn popularity(&self) -> HashMap<u64, usize> {
        let mut p = HashMap::new();
        for s in &self.train_samples {
            *p.entry(s.item).or_default() += 1;
        }
        p
    }
}
