//! Synthetic desk-scale suite: a detection dataset with a long-tail class
//! distribution plus one or more classification datasets, all drawn from a
//! shared bank of moving rectangular motifs.
//!
//! A motif is an appearance (per-channel color and a stripe texture anchored
//! to the rectangle) combined with a motion signature (direction and speed).
//! A box's action label is the index of its motif, so the same visual
//! patterns carry both the classification labels and the detection labels
//! and features can genuinely transfer across the datasets.
//!
//! Generation is a pure function of the config (which includes the data
//! seed): metadata is materialized eagerly, pixels are rendered lazily and
//! deterministically from per-clip render seeds.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    BoxAnnotation, BoxCoords, ClipDataset, DatasetSpec, Example, Keyframe, TaskKind, VideoClip,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng::{derive_rng, uniform};
use crate::scalar::Float;

/// One classification dataset drawn from the shared motif bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsDatasetConfig {
    pub name: String,
    pub examples: usize,
}

/// Configuration of the synthetic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub data_seed: u64,
    /// Clip shape (T, H, W, C).
    pub clip_t: usize,
    pub clip_h: usize,
    pub clip_w: usize,
    pub clip_c: usize,
    /// Size of the shared motif bank; also the class count of every dataset.
    pub num_classes: usize,
    /// Detection class c receives a share proportional to `(c+1)^-exponent`.
    pub long_tail_exponent: f64,
    pub det_name: String,
    pub det_train_instances: usize,
    /// Validation boxes, spread evenly over the classes.
    pub det_val_instances: usize,
    pub min_boxes_per_keyframe: usize,
    pub max_boxes_per_keyframe: usize,
    pub classification: Vec<ClsDatasetConfig>,
    /// Background noise amplitude in `[0, 1)`.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            data_seed: 7,
            clip_t: 8,
            clip_h: 32,
            clip_w: 32,
            clip_c: 3,
            num_classes: 12,
            long_tail_exponent: 2.0,
            det_name: "synth-det".into(),
            det_train_instances: 1200,
            det_val_instances: 144,
            min_boxes_per_keyframe: 1,
            max_boxes_per_keyframe: 2,
            classification: vec![ClsDatasetConfig {
                name: "synth-cls".into(),
                examples: 600,
            }],
            noise: 0.08,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_t == 0 || self.clip_h == 0 || self.clip_w == 0 || self.clip_c == 0 {
            return Err(Error::Config("clip dimensions must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.min_boxes_per_keyframe == 0 || self.max_boxes_per_keyframe < self.min_boxes_per_keyframe
        {
            return Err(Error::Config("invalid boxes_per_keyframe range".into()));
        }
        if self.long_tail_exponent < 0.0 || !self.long_tail_exponent.is_finite() {
            return Err(Error::Config("long_tail_exponent must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Normalized power-law target distribution over the classes.
    pub fn target_distribution(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|c| ((c + 1) as f64).powf(-self.long_tail_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Appearance + motion signature of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub color: Vec<f64>,
    pub stripe_period: f64,
    pub stripe_axis: u8,
    pub stripe_phase: f64,
    pub angle: f64,
    pub speed: f64,
}

/// Shared bank of motifs; identical for every dataset of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifBank {
    pub motifs: Vec<Motif>,
}

impl MotifBank {
    pub fn new(rng: &mut ChaCha8Rng, num_classes: usize, channels: usize) -> Self {
        let motifs = (0..num_classes)
            .map(|m| Motif {
                color: (0..channels).map(|_| uniform(rng, 0.35, 1.0)).collect(),
                stripe_period: uniform(rng, 3.0, 7.0),
                stripe_axis: rng.random_range(0..2u8),
                stripe_phase: uniform(rng, 0.0, 2.0 * PI),
                angle: 2.0 * PI * m as f64 / num_classes as f64,
                speed: uniform(rng, 0.025, 0.045),
            })
            .collect();
        MotifBank { motifs }
    }
}

/// One rectangle instance inside a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifInstance {
    pub class: u32,
    /// Center at the keyframe, normalized.
    pub center: (f64, f64),
    /// Displacement per frame, normalized.
    pub velocity: (f64, f64),
    pub half_size: (f64, f64),
}

impl MotifInstance {
    pub fn box_at_keyframe(&self) -> Result<BoxCoords> {
        BoxCoords::new(
            (self.center.0 - self.half_size.0).clamp(0.0, 1.0),
            (self.center.1 - self.half_size.1).clamp(0.0, 1.0),
            (self.center.0 + self.half_size.0).clamp(0.0, 1.0),
            (self.center.1 + self.half_size.1).clamp(0.0, 1.0),
        )
    }
}

/// Everything needed to render one clip deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub render_seed: u64,
    pub instances: Vec<MotifInstance>,
}

/// Detection half of the suite, with train and validation splits.
pub struct SyntheticDetDataset<F> {
    spec: DatasetSpec,
    cfg: SyntheticConfig,
    bank: Arc<MotifBank>,
    train: Vec<ClipMeta>,
    val: Vec<ClipMeta>,
    train_keyframes: Vec<Keyframe>,
    val_keyframes: Vec<Keyframe>,
    _marker: std::marker::PhantomData<F>,
}

/// One classification dataset of the suite.
pub struct SyntheticClsDataset<F> {
    spec: DatasetSpec,
    cfg: SyntheticConfig,
    bank: Arc<MotifBank>,
    metas: Vec<ClipMeta>,
    labels: Vec<u32>,
    _marker: std::marker::PhantomData<F>,
}

/// The generated suite: one detection dataset plus the classification
/// datasets, all over the same motif bank.
pub struct SyntheticSuite<F> {
    pub config: SyntheticConfig,
    pub bank: Arc<MotifBank>,
    pub detection: SyntheticDetDataset<F>,
    pub classification: Vec<SyntheticClsDataset<F>>,
}

/// Deterministic largest-remainder apportionment of `total` instances to the
/// target distribution. Keeps the empirical frequencies on the power law
/// exactly (up to rounding), including the degenerate uniform case.
fn apportion(total: usize, dist: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = dist.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = dist
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(total - assigned) {
        counts[remainders[k % dist.len()].0] += 1;
    }
    counts
}

fn shuffled_class_sequence(counts: &[usize], rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut seq: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c as u32).take(n))
        .collect();
    seq.shuffle(rng);
    seq
}

fn spawn_instance(
    class: u32,
    bank: &MotifBank,
    rng: &mut ChaCha8Rng,
    half_range: (f64, f64),
    placed: &[BoxCoords],
) -> MotifInstance {
    let motif = &bank.motifs[class as usize];
    // Up to 20 placement attempts to keep same-keyframe boxes mostly apart.
    let mut best: Option<MotifInstance> = None;
    for _ in 0..20 {
        let half_size = (
            uniform(rng, half_range.0, half_range.1),
            uniform(rng, half_range.0, half_range.1),
        );
        let center = (
            uniform(rng, 0.5 - 0.22, 0.5 + 0.22),
            uniform(rng, 0.5 - 0.22, 0.5 + 0.22),
        );
        let angle = motif.angle + uniform(rng, -0.15, 0.15);
        let speed = motif.speed * uniform(rng, 0.85, 1.15);
        let inst = MotifInstance {
            class,
            center,
            velocity: (speed * angle.cos(), speed * angle.sin()),
            half_size,
        };
        let coords = inst.box_at_keyframe().expect("spawn inside canvas");
        let overlaps = placed.iter().any(|p| eval::iou(p, &coords) > 0.3);
        best = Some(inst.clone());
        if !overlaps {
            return inst;
        }
    }
    best.expect("at least one attempt")
}

fn keyframes_of(metas: &[ClipMeta]) -> Vec<Keyframe> {
    metas
        .iter()
        .map(|m| Keyframe {
            clip_id: m.clip_id.clone(),
            timestamp: 0.0,
            boxes: m
                .instances
                .iter()
                .map(|inst| BoxAnnotation {
                    coords: inst.box_at_keyframe().expect("valid keyframe box"),
                    labels: std::iter::once(inst.class).collect(),
                    score: None,
                    person_id: None,
                })
                .collect(),
        })
        .collect()
}

fn build_det_split(
    cfg: &SyntheticConfig,
    bank: &MotifBank,
    prefix: &str,
    classes: Vec<u32>,
    rng: &mut ChaCha8Rng,
) -> Vec<ClipMeta> {
    let mut metas = Vec::new();
    let mut cursor = 0;
    while cursor < classes.len() {
        let remaining = classes.len() - cursor;
        let want = rng.random_range(cfg.min_boxes_per_keyframe..=cfg.max_boxes_per_keyframe);
        let n = want.min(remaining);
        let render_seed: u64 = rng.random();
        let mut instances = Vec::with_capacity(n);
        let mut placed = Vec::with_capacity(n);
        for k in 0..n {
            let inst = spawn_instance(classes[cursor + k], bank, rng, (0.10, 0.18), &placed);
            placed.push(inst.box_at_keyframe().expect("valid box"));
            instances.push(inst);
        }
        metas.push(ClipMeta {
            clip_id: format!("{prefix}-{:05}", metas.len()),
            render_seed,
            instances,
        });
        cursor += n;
    }
    metas
}

impl<F: Float> SyntheticSuite<F> {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bank_rng = derive_rng(cfg.data_seed, "synth-motifs", 0, 0);
        let bank = Arc::new(MotifBank::new(&mut bank_rng, cfg.num_classes, cfg.clip_c));

        // Detection train split on the configured power law.
        let dist = cfg.target_distribution();
        let train_counts = apportion(cfg.det_train_instances, &dist);
        let mut train_rng = derive_rng(cfg.data_seed, "synth-det-train", 0, 0);
        let train_classes = shuffled_class_sequence(&train_counts, &mut train_rng);
        let train = build_det_split(cfg, &bank, "det-train", train_classes, &mut train_rng);

        // Validation split spread evenly so every class has AP support.
        let uniform_dist = vec![1.0 / cfg.num_classes as f64; cfg.num_classes];
        let val_counts = apportion(cfg.det_val_instances, &uniform_dist);
        let mut val_rng = derive_rng(cfg.data_seed, "synth-det-val", 0, 0);
        let val_classes = shuffled_class_sequence(&val_counts, &mut val_rng);
        let val = build_det_split(cfg, &bank, "det-val", val_classes, &mut val_rng);

        let train_keyframes = keyframes_of(&train);
        let val_keyframes = keyframes_of(&val);
        let spec = DatasetSpec {
            name: cfg.det_name.clone(),
            task: TaskKind::Detection,
            size: train.len(),
            num_classes: cfg.num_classes,
            label_frequency: DatasetSpec::frequency_of_keyframes(&train_keyframes),
        };
        let detection = SyntheticDetDataset {
            spec,
            cfg: cfg.clone(),
            bank: bank.clone(),
            train,
            val,
            train_keyframes,
            val_keyframes,
            _marker: Default::default(),
        };

        let mut classification = Vec::new();
        for (k, cls_cfg) in cfg.classification.iter().enumerate() {
            let counts = apportion(cls_cfg.examples, &uniform_dist);
            let mut rng = derive_rng(cfg.data_seed, "synth-cls", k as u64, 0);
            let labels = shuffled_class_sequence(&counts, &mut rng);
            let metas: Vec<ClipMeta> = labels
                .iter()
                .enumerate()
                .map(|(i, &label)| {
                    let render_seed: u64 = rng.random();
                    let inst = spawn_instance(label, &bank, &mut rng, (0.26, 0.38), &[]);
                    ClipMeta {
                        clip_id: format!("cls{k}-{i:05}"),
                        render_seed,
                        instances: vec![inst],
                    }
                })
                .collect();
            let mut freq = BTreeMap::new();
            for &l in &labels {
                *freq.entry(l).or_insert(0u64) += 1;
            }
            classification.push(SyntheticClsDataset {
                spec: DatasetSpec {
                    name: cls_cfg.name.clone(),
                    task: TaskKind::Classification,
                    size: metas.len(),
                    num_classes: cfg.num_classes,
                    label_frequency: freq,
                },
                cfg: cfg.clone(),
                bank: bank.clone(),
                metas,
                labels,
                _marker: Default::default(),
            });
        }

        Ok(SyntheticSuite {
            config: cfg.clone(),
            bank,
            detection,
            classification,
        })
    }
}

/// Render a clip from its meta. Pure: depends only on the arguments.
pub fn render_clip<F: Float>(
    cfg: &SyntheticConfig,
    bank: &MotifBank,
    meta: &ClipMeta,
) -> VideoClip<F> {
    let (t, h, w, c) = (cfg.clip_t, cfg.clip_h, cfg.clip_w, cfg.clip_c);
    let keyframe_index = (t / 2) as f64;
    let mut rng = derive_rng(meta.render_seed, "synth-render", 0, 0);
    let mut frames = Array4::<F>::zeros((t, h, w, c));
    // Background noise first, in scan order, so motif pixels overwrite it.
    for v in frames.iter_mut() {
        *v = F::from_f64(uniform(&mut rng, 0.0, cfg.noise));
    }
    for inst in &meta.instances {
        let motif = &bank.motifs[inst.class as usize];
        for tau in 0..t {
            let dt = tau as f64 - keyframe_index;
            let cx = inst.center.0 + inst.velocity.0 * dt;
            let cy = inst.center.1 + inst.velocity.1 * dt;
            let x1 = ((cx - inst.half_size.0) * w as f64).floor().max(0.0) as usize;
            let x2 = (((cx + inst.half_size.0) * w as f64).ceil() as usize).min(w);
            let y1 = ((cy - inst.half_size.1) * h as f64).floor().max(0.0) as usize;
            let y2 = (((cy + inst.half_size.1) * h as f64).ceil() as usize).min(h);
            for y in y1..y2 {
                for x in x1..x2 {
                    // Texture is anchored to the rectangle: it carries the
                    // appearance signature along the motion.
                    let rel = match motif.stripe_axis {
                        0 => y as f64 - (cy - inst.half_size.1) * h as f64,
                        _ => x as f64 - (cx - inst.half_size.0) * w as f64,
                    };
                    let tex = 0.65
                        + 0.35
                            * (2.0 * PI * rel / motif.stripe_period + motif.stripe_phase).sin();
                    for ch in 0..c {
                        frames[[tau, y, x, ch]] =
                            F::from_f64((motif.color[ch] * tex).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    VideoClip {
        id: meta.clip_id.clone(),
        frames,
        frame_stride: 1,
    }
}

impl<F: Float> SyntheticDetDataset<F> {
    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &MotifBank {
        &self.bank
    }

    pub fn train_metas(&self) -> &[ClipMeta] {
        &self.train
    }

    pub fn train_keyframes(&self) -> &[Keyframe] {
        &self.train_keyframes
    }

    pub fn val_keyframes(&self) -> &[Keyframe] {
        &self.val_keyframes
    }

    pub fn val_metas(&self) -> &[ClipMeta] {
        &self.val
    }

    pub fn render_val(&self, index: usize) -> VideoClip<F> {
        render_clip(&self.cfg, &self.bank, &self.val[index])
    }
}

impl<F: Float> ClipDataset<F> for SyntheticDetDataset<F> {
    fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn example(&self, index: usize) -> Result<Example<F>> {
        let meta = self
            .train
            .get(index)
            .ok_or_else(|| Error::Other(format!("detection index {index} out of range")))?;
        Ok(Example::Detection {
            clip: render_clip(&self.cfg, &self.bank, meta),
            keyframe: self.train_keyframes[index].clone(),
        })
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(&("synthetic-det", &self.cfg))
    }
}

impl<F: Float> SyntheticClsDataset<F> {
    pub fn metas(&self) -> &[ClipMeta] {
        &self.metas
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

impl<F: Float> ClipDataset<F> for SyntheticClsDataset<F> {
    fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn example(&self, index: usize) -> Result<Example<F>> {
        let meta = self
            .metas
            .get(index)
            .ok_or_else(|| Error::Other(format!("classification index {index} out of range")))?;
        Ok(Example::Classification {
            clip: render_clip(&self.cfg, &self.bank, meta),
            label: self.labels[index],
        })
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(&(("synthetic-cls", &self.spec.name), &self.cfg))
    }
}

fn fingerprint_of<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("serializable fingerprint input");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    format!("{:x}", hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            det_train_instances: 300,
            det_val_instances: 48,
            classification: vec![ClsDatasetConfig {
                name: "cls".into(),
                examples: 60,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_cfg();
        let a = SyntheticSuite::<f32>::generate(&cfg).unwrap();
        let b = SyntheticSuite::<f32>::generate(&cfg).unwrap();
        assert_eq!(a.detection.train, b.detection.train);
        assert_eq!(a.detection.train_keyframes, b.detection.train_keyframes);
        assert_eq!(a.classification[0].metas, b.classification[0].metas);
        let ca = render_clip::<f32>(&cfg, &a.bank, &a.detection.train[0]);
        let cb = render_clip::<f32>(&cfg, &b.bank, &b.detection.train[0]);
        assert_eq!(ca.frames, cb.frames);
    }

    #[test]
    fn exponent_zero_is_nearly_uniform() {
        let cfg = SyntheticConfig {
            long_tail_exponent: 0.0,
            ..small_cfg()
        };
        let suite = SyntheticSuite::<f32>::generate(&cfg).unwrap();
        let freq = &suite.detection.spec.label_frequency;
        let max = *freq.values().max().unwrap() as f64;
        let min = *freq.values().min().unwrap() as f64;
        let mean = cfg.det_train_instances as f64 / cfg.num_classes as f64;
        assert!(max <= mean * 1.1 && min >= mean * 0.9, "min={min}, max={max}");
    }

    #[test]
    fn frequency_table_matches_recount() {
        let suite = SyntheticSuite::<f32>::generate(&small_cfg()).unwrap();
        let recount = DatasetSpec::frequency_of_keyframes(suite.detection.train_keyframes());
        assert_eq!(recount, suite.detection.spec.label_frequency);
        let total: u64 = recount.values().sum();
        assert_eq!(total, small_cfg().det_train_instances as u64);
    }

    #[test]
    fn rendered_values_stay_in_range() {
        let cfg = small_cfg();
        let suite = SyntheticSuite::<f64>::generate(&cfg).unwrap();
        let clip = suite.detection.example(0).unwrap();
        let Example::Detection { clip, keyframe } = clip else {
            panic!("detection example expected")
        };
        clip.validate().unwrap();
        assert!(!keyframe.boxes.is_empty());
        for b in &keyframe.boxes {
            b.coords.validate().unwrap();
            assert!(!b.labels.is_empty());
        }
    }

    #[test]
    fn default_tail_is_under_one_percent_of_head() {
        let cfg = SyntheticConfig::default();
        let dist = cfg.target_distribution();
        let smallest = dist.last().unwrap() / dist[0];
        assert!(smallest < 0.01, "tail share {smallest}");
    }
}
