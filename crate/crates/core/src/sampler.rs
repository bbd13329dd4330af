//! Multi-dataset minibatch scheduling.
//!
//! Each batch is drawn from exactly one dataset. The `Alternating` strategy
//! cycles through the datasets round-robin; `Weighted` picks the source
//! dataset i.i.d. per step with probability proportional to dataset size,
//! which matches concatenating the datasets and drawing batches at random.
//! Per-dataset example indices come from independent without-replacement
//! shuffles that reshuffle on exhaustion; a partial batch at the end of a
//! shuffle wraps into the next one, keeping the batch size constant.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Dataset selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Alternating,
    Weighted,
}

/// Sampler configuration over the co-finetuning datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub dataset_sizes: Vec<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.dataset_sizes.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        if self.dataset_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_datasets(&self) -> usize {
        self.dataset_sizes.len()
    }
}

/// One scheduled minibatch: the selected dataset and its example indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchTicket {
    pub dataset_index: usize,
    pub example_indices: Vec<usize>,
}

/// ceil(sum(sizes) / batch_size): an epoch spans the sum of the dataset sizes.
pub fn steps_per_epoch(config: &SamplerConfig) -> usize {
    let total: usize = config.dataset_sizes.iter().sum();
    total.div_ceil(config.batch_size)
}

struct IndexStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl IndexStream {
    fn new(size: usize, seed: u64, dataset: usize) -> Self {
        let mut rng = derive_rng(seed, "sampler-stream", dataset as u64, 0);
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut rng);
        IndexStream {
            rng,
            order,
            cursor: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

/// Deterministic minibatch scheduler; single-owner, advanced sequentially.
pub struct Sampler {
    config: SamplerConfig,
    step: u64,
    choice_rng: ChaCha8Rng,
    weights: Option<WeightedIndex<usize>>,
    streams: Vec<IndexStream>,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let choice_rng = derive_rng(config.seed, "sampler-choice", 0, 0);
        let weights = match config.strategy {
            Strategy::Weighted => Some(
                WeightedIndex::new(config.dataset_sizes.iter().copied())
                    .map_err(|e| Error::Config(format!("bad sampling weights: {e}")))?,
            ),
            Strategy::Alternating => None,
        };
        let streams = config
            .dataset_sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| IndexStream::new(size, config.seed, i))
            .collect();
        Ok(Sampler {
            config,
            step: 0,
            choice_rng,
            weights,
            streams,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn pick_dataset(&mut self) -> usize {
        match self.config.strategy {
            Strategy::Alternating => (self.step % self.config.num_datasets() as u64) as usize,
            Strategy::Weighted => self
                .weights
                .as_ref()
                .expect("weights built for weighted strategy")
                .sample(&mut self.choice_rng),
        }
    }

    /// Draw the next ticket and advance the schedule.
    pub fn next_batch(&mut self) -> BatchTicket {
        let dataset_index = self.pick_dataset();
        let stream = &mut self.streams[dataset_index];
        let example_indices = (0..self.config.batch_size).map(|_| stream.next()).collect();
        self.step += 1;
        BatchTicket {
            dataset_index,
            example_indices,
        }
    }
}

/// Pure replay of the first `num_steps` dataset choices.
pub fn visit_counts(config: &SamplerConfig, num_steps: usize) -> Result<Vec<usize>> {
    let mut sampler = Sampler::new(config.clone())?;
    let mut counts = vec![0usize; config.num_datasets()];
    for _ in 0..num_steps {
        counts[sampler.next_batch().dataset_index] += 1;
    }
    Ok(counts)
}

/// Dump the first `num_steps` tickets (the `schedule-dump` interface).
pub fn dump_schedule(config: &SamplerConfig, num_steps: usize) -> Result<String> {
    let mut sampler = Sampler::new(config.clone())?;
    let mut out = String::from("step,dataset,example_indices\n");
    for step in 0..num_steps {
        let ticket = sampler.next_batch();
        let idx: Vec<String> = ticket.example_indices.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!(
            "{},{},{}\n",
            step,
            ticket.dataset_index,
            idx.join(" ")
        ));
    }
    Ok(out)
}
