//! On-disk clip store: raw tensor files plus a JSON index.
//!
//! Each clip is one file of little-endian scalars in `(t, h, w, c)` C order
//! with no header; shape, dtype and file names live in `index.json`. The
//! exact byte layout is documented in the repository README.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_ava_csv, save_classification_manifest, ClipDataset, DatasetSpec, Example, Keyframe,
    SyntheticSuite, VideoClip,
};
use crate::data::synthetic::render_clip;
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Index entry for one stored clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub path: String,
    pub frame_stride: u32,
}

/// `index.json` schema for a persisted dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreIndex {
    pub dtype: String,
    pub byte_order: String,
    /// Value order within each file.
    pub layout: String,
    pub clip_shape: [usize; 4],
    pub datasets: Vec<DatasetSpec>,
    pub clips: Vec<ClipEntry>,
    /// Free-form provenance (generator config and seed, when synthetic).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Write one clip as raw little-endian scalars.
pub fn save_clip_tensor<F: Float>(path: impl AsRef<Path>, clip: &VideoClip<F>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(clip.frames.len() * 8);
    if F::DTYPE == "f32" {
        for &v in clip.frames.iter() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    } else {
        for &v in clip.frames.iter() {
            bytes.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read one clip back; `dtype` and `shape` come from the index.
pub fn load_clip_tensor<F: Float>(
    path: impl AsRef<Path>,
    dtype: &str,
    shape: [usize; 4],
    clip_id: &str,
    frame_stride: u32,
) -> Result<VideoClip<F>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let count = shape.iter().product::<usize>();
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    if bytes.len() != count * width {
        return Err(Error::Shape(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            count * width,
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    match dtype {
        "f32" => {
            for chunk in bytes.chunks_exact(4) {
                values.push(F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
            }
        }
        _ => {
            for chunk in bytes.chunks_exact(8) {
                values.push(F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
    }
    let frames = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(VideoClip {
        id: clip_id.to_string(),
        frames,
        frame_stride,
    })
}

/// A dataset directory opened for reading clips by id.
pub struct ClipStore {
    root: PathBuf,
    pub index: StoreIndex,
    by_id: BTreeMap<String, usize>,
}

impl ClipStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index_path = root.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: StoreIndex =
            serde_json::from_str(&text).map_err(|e| Error::parse(&index_path, 0, e.to_string()))?;
        let by_id = index
            .clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clip_id.clone(), i))
            .collect();
        Ok(ClipStore { root, index, by_id })
    }

    pub fn clip<F: Float>(&self, clip_id: &str) -> Result<VideoClip<F>> {
        let &i = self
            .by_id
            .get(clip_id)
            .ok_or_else(|| Error::Other(format!("clip {clip_id} not in store")))?;
        let entry = &self.index.clips[i];
        load_clip_tensor(
            self.root.join(&entry.path),
            &self.index.dtype,
            self.index.clip_shape,
            clip_id,
            entry.frame_stride,
        )
    }
}

/// Persist a synthetic suite: clip tensors, the JSON index, AVA-format GT
/// CSVs for both detection splits, a GT-score proposal CSV, and one
/// classification manifest per classification dataset.
pub fn persist_suite<F: Float>(suite: &SyntheticSuite<F>, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let clips_dir = root.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;

    let cfg = &suite.config;
    let mut clips = Vec::new();
    let mut write_meta_clip = |meta: &crate::data::synthetic::ClipMeta| -> Result<()> {
        let clip = render_clip::<F>(cfg, &suite.bank, meta);
        let rel = format!("clips/{}.bin", meta.clip_id);
        save_clip_tensor(root.join(&rel), &clip)?;
        clips.push(ClipEntry {
            clip_id: meta.clip_id.clone(),
            path: rel,
            frame_stride: 1,
        });
        Ok(())
    };
    for meta in suite.detection.train_metas() {
        write_meta_clip(meta)?;
    }
    for meta in suite.detection.val_metas() {
        write_meta_clip(meta)?;
    }
    for cls in &suite.classification {
        for meta in cls.metas() {
            write_meta_clip(meta)?;
        }
    }

    save_ava_csv(root.join("det_train.csv"), suite.detection.train_keyframes())?;
    save_ava_csv(root.join("det_val.csv"), suite.detection.val_keyframes())?;
    // GT boxes double as unit-score proposals.
    let mut proposals = suite.detection.train_keyframes().to_vec();
    for kf in proposals.iter_mut() {
        for b in kf.boxes.iter_mut() {
            b.score = Some(1.0);
            b.labels.clear();
        }
    }
    save_ava_csv(root.join("det_train_proposals.csv"), &proposals)?;

    let mut datasets = vec![suite.detection.spec().clone()];
    for cls in &suite.classification {
        let entries: Vec<(String, u32)> = cls
            .metas()
            .iter()
            .zip(cls.labels())
            .map(|(m, &l)| (format!("clips/{}.bin", m.clip_id), l))
            .collect();
        save_classification_manifest(root.join(format!("{}_manifest.csv", cls.spec().name)), &entries)?;
        datasets.push(cls.spec().clone());
    }

    let index = StoreIndex {
        dtype: F::DTYPE.to_string(),
        byte_order: "little".into(),
        layout: "t,h,w,c".into(),
        clip_shape: [cfg.clip_t, cfg.clip_h, cfg.clip_w, cfg.clip_c],
        datasets,
        clips,
        provenance: serde_json::to_value(cfg).expect("config serializes"),
    };
    let index_path = root.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))
}

/// Detection dataset backed by files: GT keyframes plus a clip store.
pub struct StoredDetDataset<F> {
    spec: DatasetSpec,
    keyframes: Vec<Keyframe>,
    store: std::sync::Arc<ClipStore>,
    fingerprint: String,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float> StoredDetDataset<F> {
    pub fn new(
        name: &str,
        num_classes: usize,
        keyframes: Vec<Keyframe>,
        store: std::sync::Arc<ClipStore>,
        fingerprint: String,
    ) -> Self {
        let spec = DatasetSpec {
            name: name.to_string(),
            task: crate::data::TaskKind::Detection,
            size: keyframes.len(),
            num_classes,
            label_frequency: DatasetSpec::frequency_of_keyframes(&keyframes),
        };
        StoredDetDataset {
            spec,
            keyframes,
            store,
            fingerprint,
            _marker: Default::default(),
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn store(&self) -> &ClipStore {
        &self.store
    }
}

impl<F: Float> ClipDataset<F> for StoredDetDataset<F> {
    fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn example(&self, index: usize) -> Result<Example<F>> {
        let kf = self
            .keyframes
            .get(index)
            .ok_or_else(|| Error::Other(format!("keyframe index {index} out of range")))?;
        Ok(Example::Detection {
            clip: self.store.clip(&kf.clip_id)?,
            keyframe: kf.clone(),
        })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Classification dataset backed by a manifest plus a clip store.
pub struct StoredClsDataset<F> {
    spec: DatasetSpec,
    entries: Vec<(String, u32)>,
    store: std::sync::Arc<ClipStore>,
    fingerprint: String,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Float> StoredClsDataset<F> {
    pub fn new(
        name: &str,
        num_classes: usize,
        entries: Vec<(String, u32)>,
        store: std::sync::Arc<ClipStore>,
        fingerprint: String,
    ) -> Self {
        let mut label_frequency = BTreeMap::new();
        for (_, l) in &entries {
            *label_frequency.entry(*l).or_insert(0u64) += 1;
        }
        let spec = DatasetSpec {
            name: name.to_string(),
            task: crate::data::TaskKind::Classification,
            size: entries.len(),
            num_classes,
            label_frequency,
        };
        StoredClsDataset {
            spec,
            entries,
            store,
            fingerprint,
            _marker: Default::default(),
        }
    }
}

impl<F: Float> ClipDataset<F> for StoredClsDataset<F> {
    fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    fn example(&self, index: usize) -> Result<Example<F>> {
        let (path, label) = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Other(format!("manifest index {index} out of range")))?;
        // Manifest paths are relative to the store root and name the clip by
        // its file stem.
        let clip_id = Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Other(format!("bad clip path {path}")))?;
        Ok(Example::Classification {
            clip: self.store.clip(clip_id)?,
            label: *label,
        })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
