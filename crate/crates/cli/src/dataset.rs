//! Dataset directories: labels.json manifest plus one EVS1 file per sample.

use evspike_core::bench::LabeledStream;
use evspike_core::error::{Error, Result};
use evspike_core::events::{accumulate, decode_stream, AccumMode, AccumulationConfig};
use evspike_core::models::ModelGraph;
use evspike_core::train::TrainSample;
use rand::{seq::SliceRandom, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelEntry {
    pub file: String,
    pub label: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub samples: Vec<LabelEntry>,
}

pub fn load_dir(dir: &Path) -> Result<Vec<LabeledStream>> {
    let manifest_path = dir.join("labels.json");
    if !manifest_path.is_file() {
        return Err(Error::Validation(format!(
            "no labels.json manifest in {}",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let stream = decode_stream(&std::fs::read(&path)?)?;
        out.push(LabeledStream {
            id: entry.file.trim_end_matches(".evs").to_string(),
            stream,
            label: entry.label,
        });
    }
    Ok(out)
}

/// Deterministic split into (train, holdout).
pub fn split(data: &[LabeledStream], holdout_fraction: f64, seed: u64) -> (Vec<LabeledStream>, Vec<LabeledStream>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5711);
    order.shuffle(&mut rng);
    let n_holdout = ((data.len() as f64) * holdout_fraction).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_holdout.min(data.len()));
    let pick = |idx: &[usize]| {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|i| data[*i].clone()).collect::<Vec<_>>()
    };
    (pick(train_idx), pick(hold_idx))
}

/// Accumulate streams into framed training samples using the model's
/// timestep and input coding.
pub fn to_train_samples(graph: &ModelGraph, data: &[LabeledStream]) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(data.len());
    for sample in data {
        let cfg = AccumulationConfig {
            window_us: graph.meta.timestep_us,
            mode: if graph.meta.binary_input { AccumMode::Binary } else { AccumMode::Graded },
            width: sample.stream.width(),
            height: sample.stream.height(),
            group: 1,
        };
        let seq = accumulate(&sample.stream, &cfg)?;
        out.push(TrainSample { frames: seq.frames, label: sample.label });
    }
    Ok(out)
}
