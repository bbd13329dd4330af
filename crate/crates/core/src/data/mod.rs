//! Dataset abstractions: domain types, CSV ingestion, proposal filtering
//! and the synthetic desk-scale suite.

mod ava_csv;
mod manifest;
mod store;
mod synthetic;

pub use ava_csv::{
    load_ava_csv, load_ava_predictions, load_ava_proposals, save_ava_csv, save_ava_predictions,
};
pub use manifest::{load_classification_manifest, save_classification_manifest};
pub use store::{load_clip_tensor, persist_suite, save_clip_tensor, ClipStore, StoreIndex};
pub use synthetic::{
    ClsDatasetConfig, MotifBank, SyntheticClsDataset, SyntheticConfig, SyntheticDetDataset,
    SyntheticSuite,
};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// A decoded video clip: `T x H x W x C` values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip<F> {
    pub id: String,
    pub frames: Array4<F>,
    pub frame_stride: u32,
}

impl<F: Float> VideoClip<F> {
    pub fn new(id: impl Into<String>, frames: Array4<F>, frame_stride: u32) -> Result<Self> {
        let clip = VideoClip {
            id: id.into(),
            frames,
            frame_stride,
        };
        clip.validate()?;
        Ok(clip)
    }

    /// (T, H, W, C)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w, c) = self.shape();
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "clip {} has empty dimension: {}x{}x{}x{}",
                self.id, t, h, w, c
            )));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be positive".into()));
        }
        for &v in self.frames.iter() {
            if !v.is_finite() || v < F::zero() || v > F::one() {
                return Err(Error::NonFinite(format!(
                    "clip {} has a value outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box, normalized to `[0, 1]` on the (possibly padded) canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCoords {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxCoords { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if ok {
            Ok(())
        } else {
            Err(Error::Other(format!(
                "invalid box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Total lexicographic order on (x1, y1, x2, y2); used for deterministic
    /// tie-breaking of equal scores.
    pub fn lex_cmp(&self, other: &BoxCoords) -> std::cmp::Ordering {
        self.as_array()
            .iter()
            .zip(other.as_array().iter())
            .map(|(a, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| *o != std::cmp::Ordering::Equal)
            .unwrap_or(std::cmp::Ordering::Equal)
    }

    /// Round coordinates to 6 decimals; this is the merge key used when the
    /// raw CSV repeats one box per action label.
    pub fn rounded_key(&self) -> [i64; 4] {
        let r = |v: f64| (v * 1e6).round() as i64;
        [r(self.x1), r(self.y1), r(self.x2), r(self.y2)]
    }
}

/// One person box on a keyframe with its multi-label action set.
///
/// Ground-truth boxes carry a non-empty label set; detector proposals and
/// model predictions carry a confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub coords: BoxCoords,
    pub labels: BTreeSet<u32>,
    pub score: Option<f64>,
    pub person_id: Option<i64>,
}

/// All annotated boxes for one `(clip, timestamp)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub clip_id: String,
    pub timestamp: f64,
    pub boxes: Vec<BoxAnnotation>,
}

impl Keyframe {
    /// Canonical key: timestamps compare by bit pattern with -0.0 folded
    /// into 0.0 so textual round-trips stay stable.
    pub fn key(&self) -> (String, u64) {
        (self.clip_id.clone(), canonical_ts_bits(self.timestamp))
    }
}

pub fn canonical_ts_bits(ts: f64) -> u64 {
    let ts = if ts == 0.0 { 0.0 } else { ts };
    ts.to_bits()
}

/// Task performed on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Detection,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Classification => write!(f, "classification"),
            TaskKind::Detection => write!(f, "detection"),
        }
    }
}

/// Summary of one ingested dataset.
///
/// `size` counts training examples (keyframes for detection); the paper does
/// not state whether AVA weighted sampling counts keyframes or clips, so the
/// keyframe count is exposed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub task: TaskKind,
    pub size: usize,
    pub num_classes: usize,
    pub label_frequency: BTreeMap<u32, u64>,
}

impl DatasetSpec {
    /// Recompute the label frequency table of detection keyframes.
    pub fn frequency_of_keyframes(keyframes: &[Keyframe]) -> BTreeMap<u32, u64> {
        let mut freq = BTreeMap::new();
        for kf in keyframes {
            for b in &kf.boxes {
                for &l in &b.labels {
                    *freq.entry(l).or_insert(0) += 1;
                }
            }
        }
        freq
    }
}

/// One training example handed to the driver.
#[derive(Debug, Clone)]
pub enum Example<F> {
    Classification { clip: VideoClip<F>, label: u32 },
    Detection { clip: VideoClip<F>, keyframe: Keyframe },
}

/// A dataset the training driver can sample from.
///
/// Implementations are pure given their construction inputs, so concurrent
/// `example` calls are safe.
pub trait ClipDataset<F>: Send + Sync {
    fn spec(&self) -> &DatasetSpec;
    fn len(&self) -> usize {
        self.spec().size
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn example(&self, index: usize) -> Result<Example<F>>;
    /// Content hash used by run comparisons to enforce "same total data".
    fn fingerprint(&self) -> String;
}

/// Keep only proposal boxes with `score >= threshold`.
///
/// Keyframes whose boxes are all removed are retained with zero boxes: they
/// still exist for evaluation, they just contribute no detection-loss terms.
pub fn filter_proposals(keyframes: &[Keyframe], threshold: f64) -> Result<Vec<Keyframe>> {
    let mut out = Vec::with_capacity(keyframes.len());
    for kf in keyframes {
        let mut boxes = Vec::new();
        for b in &kf.boxes {
            let score = b.score.ok_or_else(|| Error::MissingScore {
                context: format!("{} @ {}", kf.clip_id, kf.timestamp),
            })?;
            if score >= threshold {
                boxes.push(b.clone());
            }
        }
        out.push(Keyframe {
            clip_id: kf.clip_id.clone(),
            timestamp: kf.timestamp,
            boxes,
        });
    }
    Ok(out)
}

/// Canonically order keyframes and their boxes (by clip, timestamp, box
/// coordinates, person id). Ingestion and serialization both normalize
/// through this, which makes merges order-independent.
pub fn canonicalize(keyframes: &mut Vec<Keyframe>) {
    for kf in keyframes.iter_mut() {
        kf.boxes.sort_by(|a, b| {
            a.coords
                .lex_cmp(&b.coords)
                .then(a.person_id.cmp(&b.person_id))
        });
    }
    keyframes.sort_by(|a, b| {
        a.clip_id
            .cmp(&b.clip_id)
            .then(a.timestamp.partial_cmp(&b.timestamp).unwrap())
    });
}
