//! On-disk dataset layout.
//!
//! ```text
//! <root>/<run_id>/index.json
//! <root>/<run_id>/<index>.<modality>.f32     little-endian f32, row-major [channels, samples]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DomainTag, Segment, Signals};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub index: usize,
    pub label: Option<usize>,
    pub domain_tag: DomainTag,
    pub start_time_s: f64,
    pub shapes: BTreeMap<String, [usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunIndex {
    pub run_id: String,
    pub segments: Vec<SegmentEntry>,
}

fn segment_file(index: usize, modality: &str) -> String {
    format!("{index}.{modality}.f32")
}

fn write_f32(path: &Path, data: &Array2<f32>) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, shape: [usize; 2]) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != shape[0] * shape[1] * 4 {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {:?} f32 values",
            path.display(),
            bytes.len(),
            shape
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((shape[0], shape[1]), values)
        .map_err(|e| Error::Dataset(e.to_string()))
}

/// Writes all segments of one run. Segment indices follow slice order.
pub fn write_run(root: &Path, run_id: &str, segments: &[&Segment]) -> Result<()> {
    let dir = root.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(segments.len());
    for (index, seg) in segments.iter().enumerate() {
        let mut shapes = BTreeMap::new();
        for (modality, signal) in &seg.signals {
            write_f32(&dir.join(segment_file(index, modality)), signal)?;
            shapes.insert(modality.clone(), [signal.nrows(), signal.ncols()]);
        }
        entries.push(SegmentEntry {
            index,
            label: seg.label,
            domain_tag: seg.domain,
            start_time_s: seg.start_time_s,
            shapes,
        });
    }
    let index = RunIndex {
        run_id: run_id.to_string(),
        segments: entries,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_run(run_dir: &Path) -> Result<Vec<Segment>> {
    let path = run_dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: RunIndex = serde_json::from_str(&text)?;
    index
        .segments
        .iter()
        .map(|entry| {
            let mut signals = Signals::new();
            for (modality, shape) in &entry.shapes {
                let file = run_dir.join(segment_file(entry.index, modality));
                signals.insert(modality.clone(), read_f32(&file, *shape)?);
            }
            Ok(Segment {
                signals,
                label: entry.label,
                domain: entry.domain_tag,
                run_id: index.run_id.clone(),
                start_time_s: entry.start_time_s,
            })
        })
        .collect()
}

/// Writes a dataset as one directory per run id. Segment order within a run
/// is kept.
pub fn write_dataset(root: &Path, segments: &[Segment]) -> Result<()> {
    let mut runs: BTreeMap<&str, Vec<&Segment>> = BTreeMap::new();
    for seg in segments {
        runs.entry(seg.run_id.as_str()).or_default().push(seg);
    }
    for (run_id, segs) in runs {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::Dataset(format!("run id `{run_id}` is not a valid directory name")));
        }
        write_run(root, run_id, &segs)?;
    }
    Ok(())
}

/// Reads every run directory under `root` in lexicographic order.
pub fn read_dataset(root: &Path) -> Result<Vec<Segment>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join(INDEX_FILE).is_file())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        out.extend(read_run(&dir)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ACOUSTIC, SEISMIC};

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |run: &str, k: usize| {
            let mut signals = Signals::new();
            signals.insert(
                ACOUSTIC.into(),
                Array2::from_shape_fn((1, 16), |(_, i)| (i * k) as f32 * 0.1 - 0.7),
            );
            signals.insert(
                SEISMIC.into(),
                Array2::from_shape_fn((2, 4), |(c, i)| (c + i + k) as f32 / 3.0),
            );
            Segment {
                signals,
                label: (k % 2 == 0).then_some(k),
                domain: DomainTag::SynthB,
                run_id: run.into(),
                start_time_s: k as f64 * 1.6,
            }
        };
        let segments = vec![mk("run-a", 0), mk("run-a", 1), mk("run-b", 2)];
        write_dataset(dir.path(), &segments).unwrap();
        assert!(dir.path().join("run-a/1.acoustic.f32").is_file());
        assert!(dir.path().join("run-b/index.json").is_file());
        assert_eq!(read_dataset(dir.path()).unwrap(), segments);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut signals = Signals::new();
        signals.insert(ACOUSTIC.into(), Array2::zeros((1, 8)));
        let seg = Segment {
            signals,
            label: None,
            domain: DomainTag::ModUnlabeled,
            run_id: "r".into(),
            start_time_s: 0.0,
        };
        write_dataset(dir.path(), &[seg]).unwrap();
        fs::write(dir.path().join("r/0.acoustic.f32"), [0u8; 5]).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap_err().code(), "DATASET_INVALID");
    }
}
