//! Classification manifest: `clip_path,label` rows with 0-based labels.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Load a classification manifest; one `(clip reference, class index)` per row.
pub fn load_classification_manifest(
    path: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Vec<(String, u32)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (clip, label) = line.rsplit_once(',').ok_or_else(|| {
            Error::parse(path, line_no, "expected `clip_path,label`".to_string())
        })?;
        let label: u32 = label
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label: {label:?}")))?;
        if label as usize >= num_classes {
            return Err(Error::parse(
                path,
                line_no,
                format!("label {label} outside [0, {num_classes})"),
            ));
        }
        out.push((clip.trim().to_string(), label));
    }
    Ok(out)
}

pub fn save_classification_manifest(
    path: impl AsRef<Path>,
    entries: &[(String, u32)],
) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for (clip, label) in entries {
        writeln!(file, "{clip},{label}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
