//! Training: the co-finetuning driver (each step draws one single-dataset
//! minibatch through the shared backbone and that dataset's head) and the
//! sequential transfer-learning baseline (stage-by-stage finetuning with a
//! fresh head and optimizer per stage).

mod augment;
mod loss;
mod schedule;
mod sgd;

pub use augment::{augment, AugmentConfig};
pub use loss::{
    classification_loss, classification_loss_grad, detection_loss, detection_loss_terms,
    LossConfig,
};
pub use schedule::{learning_rate, ScheduleConfig};
pub use sgd::{sgd_step, OptimizerState};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClipDataset, Example, TaskKind};
use crate::error::{Error, Result};
use crate::model::{backward, forward_with_cache, EncodeMode, ModelState, Prediction, TaskTicket};
use crate::rng::derive_rng;
use crate::sampler::{steps_per_epoch, Sampler, SamplerConfig, Strategy};
use crate::scalar::Float;

/// Options shared by both training drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub momentum: f64,
    pub scale_jitter: (f64, f64),
    pub box_jitter_ratio: f64,
    pub label_smoothing: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            strategy: Strategy::Weighted,
            batch_size: 16,
            base_lr: 0.2,
            warmup_epochs: 2.5,
            total_epochs: 15.0,
            momentum: 0.9,
            scale_jitter: (0.65, 1.1),
            box_jitter_ratio: 0.15,
            label_smoothing: 0.1,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dataset: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step (dataset, loss, lr) records of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog(pub Vec<StepRecord>);

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,dataset,loss,lr\n");
        for r in &self.0 {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.dataset, r.loss, r.lr));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::parse("<log>", i + 1, "expected 4 columns"));
            }
            records.push(StepRecord {
                step: f[0].parse().map_err(|_| Error::parse("<log>", i + 1, "bad step"))?,
                dataset: f[1].parse().map_err(|_| Error::parse("<log>", i + 1, "bad dataset"))?,
                loss: f[2].parse().map_err(|_| Error::parse("<log>", i + 1, "bad loss"))?,
                lr: f[3].parse().map_err(|_| Error::parse("<log>", i + 1, "bad lr"))?,
            });
        }
        Ok(TrainLog(records))
    }
}

/// Stage-local seed: stage 0 keeps the experiment seed so a one-stage run is
/// step-for-step identical to single-dataset co-finetuning.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

enum ItemResult<F: Float> {
    Classification { grads: ModelState<F>, loss: F },
    Detection { grads: Option<Box<ModelState<F>>>, loss_sum: F, terms: usize },
}

/// Sequential single-owner training loop over one or more datasets.
pub struct Trainer<'a, F: Float> {
    datasets: Vec<&'a dyn ClipDataset<F>>,
    /// Model head driven by each dataset slot.
    head_indices: Vec<usize>,
    state: ModelState<F>,
    optimizer: OptimizerState<F>,
    sampler: Sampler,
    schedule: ScheduleConfig,
    augment_cfg: AugmentConfig,
    loss_cfg: LossConfig,
    run_seed: u64,
    step: usize,
    log: TrainLog,
}

impl<'a, F: Float> Trainer<'a, F> {
    /// Build a loop over `datasets`, slot `i` training model head
    /// `head_indices[i]`. `stage` salts the RNG streams (stage 0 == the
    /// plain co-finetuning streams).
    pub fn new(
        datasets: Vec<&'a dyn ClipDataset<F>>,
        head_indices: Vec<usize>,
        state: ModelState<F>,
        options: &TrainOptions,
        stage: u64,
    ) -> Result<Self> {
        if datasets.is_empty() || datasets.len() != head_indices.len() {
            return Err(Error::Config(
                "need one head index per training dataset".into(),
            ));
        }
        for (slot, (&head, ds)) in head_indices.iter().zip(&datasets).enumerate() {
            let spec = state
                .config
                .heads
                .get(head)
                .ok_or(Error::MissingHead(head))?;
            if spec.task != ds.spec().task || spec.num_classes != ds.spec().num_classes {
                return Err(Error::Config(format!(
                    "dataset slot {slot} ({}) does not match head {head}",
                    ds.spec().name
                )));
            }
        }
        let run_seed = stage_seed(options.seed, stage);
        let sampler_cfg = SamplerConfig {
            strategy: options.strategy,
            batch_size: options.batch_size,
            dataset_sizes: datasets.iter().map(|d| d.len()).collect(),
            seed: run_seed,
        };
        let schedule = ScheduleConfig {
            base_lr: options.base_lr,
            warmup_epochs: options.warmup_epochs,
            total_epochs: options.total_epochs,
            steps_per_epoch: steps_per_epoch(&sampler_cfg),
        };
        schedule.validate()?;
        let loss_cfg = LossConfig {
            label_smoothing: options.label_smoothing,
        };
        loss_cfg.validate()?;
        let augment_cfg = AugmentConfig {
            scale_low: options.scale_jitter.0,
            scale_high: options.scale_jitter.1,
            box_jitter_ratio: options.box_jitter_ratio,
            canvas_h: state.config.input_h,
            canvas_w: state.config.input_w,
        };
        augment_cfg.validate()?;
        let optimizer = OptimizerState::new(&state, options.momentum);
        Ok(Trainer {
            datasets,
            head_indices,
            state,
            optimizer,
            sampler: Sampler::new(sampler_cfg)?,
            schedule,
            augment_cfg,
            loss_cfg,
            run_seed,
            step: 0,
            log: TrainLog::default(),
        })
    }

    pub fn state(&self) -> &ModelState<F> {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }

    pub fn into_parts(self) -> (ModelState<F>, TrainLog) {
        (self.state, self.log)
    }

    fn run_item(
        &self,
        slot: usize,
        example_index: usize,
        dataset_slot: usize,
    ) -> Result<ItemResult<F>> {
        let dataset = self.datasets[dataset_slot];
        let head_index = self.head_indices[dataset_slot];
        let example = dataset.example(example_index)?;
        let mut aug_rng = derive_rng(self.run_seed, "augment", self.step as u64, slot as u64);
        let mut sd_rng = derive_rng(self.run_seed, "sdepth", self.step as u64, slot as u64);
        match example {
            Example::Classification { clip, label } => {
                let (clip, _) = augment(&clip, &[], &self.augment_cfg, &mut aug_rng)?;
                let ticket = TaskTicket {
                    dataset_index: head_index,
                    proposals: None,
                };
                let (pred, cache) =
                    forward_with_cache(&clip, &ticket, &self.state, EncodeMode::Train, Some(&mut sd_rng))?;
                let Prediction::Classification { logits } = pred else {
                    return Err(Error::Shape("classification head expected".into()));
                };
                let (loss, dlogits) =
                    classification_loss_grad(&logits, label, self.loss_cfg.label_smoothing)?;
                let grads = backward(&self.state, &cache, Some(&dlogits), None)?;
                Ok(ItemResult::Classification { grads, loss })
            }
            Example::Detection { clip, keyframe } => {
                let (clip, boxes) = augment(&clip, &keyframe.boxes, &self.augment_cfg, &mut aug_rng)?;
                if boxes.is_empty() {
                    return Ok(ItemResult::Detection {
                        grads: None,
                        loss_sum: F::zero(),
                        terms: 0,
                    });
                }
                let proposals: Vec<_> = boxes.iter().map(|b| b.coords).collect();
                let label_sets: Vec<_> = boxes.iter().map(|b| b.labels.clone()).collect();
                let ticket = TaskTicket {
                    dataset_index: head_index,
                    proposals: Some(proposals),
                };
                let (pred, cache) =
                    forward_with_cache(&clip, &ticket, &self.state, EncodeMode::Train, Some(&mut sd_rng))?;
                let Prediction::Detection { logits } = pred else {
                    return Err(Error::Shape("detection head expected".into()));
                };
                let (loss_sum, terms, dlogits) = detection_loss_terms(&logits, &label_sets)?;
                let grads = backward(&self.state, &cache, None, Some(&dlogits))?;
                Ok(ItemResult::Detection {
                    grads: Some(Box::new(grads)),
                    loss_sum,
                    terms,
                })
            }
        }
    }

    /// One parameter update: draw a ticket, compute the single-dataset batch
    /// loss, and apply SGD to the backbone and the selected head only.
    pub fn step(&mut self) -> Result<StepRecord> {
        let lr = learning_rate(self.step, &self.schedule);
        let ticket = self.sampler.next_batch();
        let dataset_slot = ticket.dataset_index;
        let head_index = self.head_indices[dataset_slot];
        let task = self.datasets[dataset_slot].spec().task;

        // Items are independent given their derived streams; results reduce
        // in slot order so parallelism cannot perturb the outcome.
        let items: Result<Vec<ItemResult<F>>> = ticket
            .example_indices
            .par_iter()
            .enumerate()
            .map(|(slot, &example_index)| self.run_item(slot, example_index, dataset_slot))
            .collect();
        let items = items?;

        let mut grad_acc = self.state.zeros_like();
        let loss = match task {
            TaskKind::Classification => {
                let scale = F::one() / F::from_usize(items.len());
                let mut total = F::zero();
                for item in &items {
                    let ItemResult::Classification { grads, loss } = item else {
                        return Err(Error::Shape("mixed item kinds in one batch".into()));
                    };
                    total += *loss;
                    add_scaled(&mut grad_acc, grads, scale, head_index);
                }
                total * scale
            }
            TaskKind::Detection => {
                let mut total = F::zero();
                let mut total_terms = 0usize;
                for item in &items {
                    let ItemResult::Detection { loss_sum, terms, .. } = item else {
                        return Err(Error::Shape("mixed item kinds in one batch".into()));
                    };
                    total += *loss_sum;
                    total_terms += terms;
                }
                if total_terms > 0 {
                    let scale = F::one() / F::from_usize(total_terms);
                    for item in &items {
                        let ItemResult::Detection { grads: Some(grads), .. } = item else {
                            continue;
                        };
                        add_scaled(&mut grad_acc, grads, scale, head_index);
                    }
                    total * scale
                } else {
                    F::zero()
                }
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} on dataset {}",
                self.step, dataset_slot
            )));
        }

        let mu = self.optimizer.mu;
        let lr_f = F::from_f64(lr);
        {
            let mut params = self.state.trainable_slices_mut(head_index);
            let grads = grad_acc.trainable_slices(head_index);
            let mut buffers = self.optimizer.momentum.trainable_slices_mut(head_index);
            let grads_ref: Vec<&[F]> = grads;
            sgd_step(&mut params, &grads_ref, &mut buffers, mu, lr_f)?;
        }
        self.optimizer.step += 1;

        let record = StepRecord {
            step: self.step,
            dataset: head_index,
            loss: loss.to_f64(),
            lr,
        };
        self.log.0.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    /// Run the full schedule.
    pub fn run(&mut self) -> Result<()> {
        let total = self.schedule.total_steps();
        while self.step < total {
            self.step()?;
        }
        Ok(())
    }
}

/// Accumulate `acc += delta * scale` over the backbone and one head.
fn add_scaled<F: Float>(acc: &mut ModelState<F>, delta: &ModelState<F>, scale: F, head: usize) {
    let mut dst = acc.trainable_slices_mut(head);
    let src = delta.trainable_slices(head);
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        for i in 0..d.len() {
            d[i] += s[i] * scale;
        }
    }
}

impl<F: Float> ModelState<F> {
    /// Backbone plus one head, as flat mutable views in a fixed order.
    pub fn trainable_slices_mut(&mut self, head: usize) -> Vec<&mut [F]> {
        let mut out = {
            let b = &mut self.backbone;
            let mut v: Vec<&mut [F]> = vec![
                b.patch_weight.as_slice_mut().unwrap(),
                b.patch_bias.as_slice_mut().unwrap(),
                b.pos_embed.as_slice_mut().unwrap(),
            ];
            for l in b.layers.iter_mut() {
                v.push(l.ln1_gamma.as_slice_mut().unwrap());
                v.push(l.ln1_beta.as_slice_mut().unwrap());
                v.push(l.wq.as_slice_mut().unwrap());
                v.push(l.bq.as_slice_mut().unwrap());
                v.push(l.wk.as_slice_mut().unwrap());
                v.push(l.bk.as_slice_mut().unwrap());
                v.push(l.wv.as_slice_mut().unwrap());
                v.push(l.bv.as_slice_mut().unwrap());
                v.push(l.wo.as_slice_mut().unwrap());
                v.push(l.bo.as_slice_mut().unwrap());
                v.push(l.ln2_gamma.as_slice_mut().unwrap());
                v.push(l.ln2_beta.as_slice_mut().unwrap());
                v.push(l.w1.as_slice_mut().unwrap());
                v.push(l.b1.as_slice_mut().unwrap());
                v.push(l.w2.as_slice_mut().unwrap());
                v.push(l.b2.as_slice_mut().unwrap());
            }
            v
        };
        match &mut self.heads[head] {
            crate::model::HeadParams::Classification { weight } => {
                out.push(weight.as_slice_mut().unwrap());
            }
            crate::model::HeadParams::Detection { weight, bias } => {
                out.push(weight.as_slice_mut().unwrap());
                out.push(bias.as_slice_mut().unwrap());
            }
        }
        out
    }

    /// Immutable counterpart of [`ModelState::trainable_slices_mut`].
    pub fn trainable_slices(&self, head: usize) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        let b = &self.backbone;
        out.push(b.patch_weight.as_slice().unwrap());
        out.push(b.patch_bias.as_slice().unwrap());
        out.push(b.pos_embed.as_slice().unwrap());
        for l in b.layers.iter() {
            out.push(l.ln1_gamma.as_slice().unwrap());
            out.push(l.ln1_beta.as_slice().unwrap());
            out.push(l.wq.as_slice().unwrap());
            out.push(l.bq.as_slice().unwrap());
            out.push(l.wk.as_slice().unwrap());
            out.push(l.bk.as_slice().unwrap());
            out.push(l.wv.as_slice().unwrap());
            out.push(l.bv.as_slice().unwrap());
            out.push(l.wo.as_slice().unwrap());
            out.push(l.bo.as_slice().unwrap());
            out.push(l.ln2_gamma.as_slice().unwrap());
            out.push(l.ln2_beta.as_slice().unwrap());
            out.push(l.w1.as_slice().unwrap());
            out.push(l.b1.as_slice().unwrap());
            out.push(l.w2.as_slice().unwrap());
            out.push(l.b2.as_slice().unwrap());
        }
        match &self.heads[head] {
            crate::model::HeadParams::Classification { weight } => {
                out.push(weight.as_slice().unwrap());
            }
            crate::model::HeadParams::Detection { weight, bias } => {
                out.push(weight.as_slice().unwrap());
                out.push(bias.as_slice().unwrap());
            }
        }
        out
    }
}

/// Co-finetune one model on all datasets simultaneously (dataset slot i
/// drives head i); a single optimizer state spans the whole run.
pub fn cofinetune<F: Float>(
    datasets: &[&dyn ClipDataset<F>],
    state: ModelState<F>,
    options: &TrainOptions,
) -> Result<(ModelState<F>, TrainLog)> {
    let head_indices: Vec<usize> = (0..datasets.len()).collect();
    let mut trainer = Trainer::new(datasets.to_vec(), head_indices, state, options, 0)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}

/// Sequential transfer-learning baseline: train on each dataset in order,
/// carrying over the backbone, freshly initializing the stage head, and
/// resetting the optimizer and schedule per stage.
///
/// `stage_epochs` overrides `options.total_epochs` per stage when provided.
pub fn sequential_finetune<F: Float>(
    stages: &[&dyn ClipDataset<F>],
    mut state: ModelState<F>,
    options: &TrainOptions,
    stage_epochs: Option<&[f64]>,
) -> Result<(ModelState<F>, Vec<TrainLog>)> {
    if stages.is_empty() {
        return Err(Error::Config("need at least one stage".into()));
    }
    if let Some(e) = stage_epochs {
        if e.len() != stages.len() {
            return Err(Error::Config(
                "stage_epochs must match the number of stages".into(),
            ));
        }
    }
    let mut logs = Vec::with_capacity(stages.len());
    for (k, dataset) in stages.iter().enumerate() {
        let spec = state
            .config
            .heads
            .get(k)
            .copied()
            .ok_or(Error::MissingHead(k))?;
        state.heads[k] = ModelState::init_head(&state.config, &spec, options.seed, k);
        let mut opts = options.clone();
        if let Some(e) = stage_epochs {
            opts.total_epochs = e[k];
        }
        let mut trainer = Trainer::new(vec![*dataset], vec![k], state, &opts, k as u64)?;
        trainer.run()?;
        let (next_state, log) = trainer.into_parts();
        state = next_state;
        logs.push(log);
    }
    Ok((state, logs))
}
