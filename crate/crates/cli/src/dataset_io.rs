//! Dataset directory: `manifest.json`, `actions.txt` and one binary record
//! per sample under `samples/`.
//!
//! A record is `u32 N`, `u32 d` and then `N * d` `f32` values, all
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flowkin::kinematics::{build_instances, Category, Dataset, DatasetConfig, KinematicSample, Split};
use flowkin::PointCloud;
use serde::{Deserialize, Serialize};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub instance: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub category: Category,
    pub j_max: usize,
    pub instances: usize,
    pub samples_per_instance: usize,
    pub points: usize,
    pub point_dim: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub samples: Vec<SampleEntry>,
    /// Full generator config, so templates can be rebuilt for ground truth.
    pub config: DatasetConfig,
}

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        let c = &dataset.config;
        Self {
            format_version: DATASET_FORMAT_VERSION,
            category: c.spec.category,
            j_max: dataset.j_max(),
            instances: c.spec.instances,
            samples_per_instance: c.samples_per_instance,
            points: c.points,
            point_dim: c.point_dim(),
            seed: c.seed,
            train: dataset.split_ids(Split::Train),
            test: dataset.split_ids(Split::Test),
            samples: dataset
                .samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.id,
                    instance: s.instance,
                    split: s.split,
                })
                .collect(),
            config: c.clone(),
        }
    }
}

pub fn record_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("samples").join(format!("{id:06}.bin"))
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * cloud.data().len());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.dim() as u32).to_le_bytes());
    for &v in cloud.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    ensure!(bytes.len() >= 8, "record shorter than its header");
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, d) = (word(0), word(4));
    ensure!(
        bytes.len() == 8 + 4 * n * d,
        "record declares {n}x{d} values but holds {} bytes",
        bytes.len() - 8
    );
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(PointCloud::new(d, data)?)
}

fn format_action_line(sample: &KinematicSample) -> String {
    let mut line = format!("{} {} {}", sample.id, sample.instance, sample.split.name());
    for a in &sample.action {
        line.push(' ');
        line.push_str(&a.to_string());
    }
    line
}

/// Writes the dataset; refuses to overwrite an existing manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    ensure!(
        !dir.join("manifest.json").exists(),
        "{} already holds a dataset",
        dir.display()
    );
    fs::create_dir_all(dir.join("samples")).with_context(|| format!("creating {}", dir.display()))?;
    for s in &dataset.samples {
        fs::write(record_path(dir, s.id), encode_cloud(&s.cloud))?;
    }
    let mut actions = fs::File::create(dir.join("actions.txt"))?;
    writeln!(actions, "# id instance split angles...")?;
    for s in &dataset.samples {
        writeln!(actions, "{}", format_action_line(s))?;
    }
    let manifest = serde_json::to_string_pretty(&Manifest::of(dataset))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        manifest.format_version == DATASET_FORMAT_VERSION,
        "dataset format version {} is not supported",
        manifest.format_version
    );
    Ok(manifest)
}

fn read_actions(dir: &Path, j_max: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = fs::read_to_string(dir.join("actions.txt")).context("reading actions.txt")?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        ensure!(fields.len() == 3 + j_max, "malformed action line {line:?}");
        let id = fields[0].parse()?;
        let action = fields[3..].iter().map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        rows.push((id, action));
    }
    Ok(rows)
}

/// Loads a dataset directory. Templates are rebuilt from the stored config;
/// clouds come from the records (so they carry `f32` precision).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let actions = read_actions(dir, manifest.j_max)?;
    ensure!(
        actions.len() == manifest.samples.len(),
        "actions.txt has {} rows, manifest lists {} samples",
        actions.len(),
        manifest.samples.len()
    );
    let mut samples = Vec::with_capacity(actions.len());
    for (entry, (id, action)) in manifest.samples.iter().zip(actions) {
        if entry.id != id {
            bail!("actions.txt row for sample {id} is out of order");
        }
        let bytes = fs::read(record_path(dir, id)).with_context(|| format!("reading record {id}"))?;
        let cloud = decode_cloud(&bytes).with_context(|| format!("record {id}"))?;
        ensure!(
            cloud.len() == manifest.points && cloud.dim() == manifest.point_dim,
            "record {id} has shape {}x{}",
            cloud.len(),
            cloud.dim()
        );
        samples.push(KinematicSample {
            id,
            instance: entry.instance,
            cloud,
            action,
            split: entry.split,
        });
    }
    let templates = build_instances(&manifest.config.spec, manifest.config.seed)?;
    Ok(Dataset {
        config: manifest.config,
        templates,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let cloud = PointCloud::new(3, vec![0.1, -2.5, 3.0, 1e-3, 0.0, 7.25]).unwrap();
        let bytes = encode_cloud(&cloud);
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        let back = decode_cloud(&bytes).unwrap();
        for (a, b) in back.data().iter().zip(cloud.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(decode_cloud(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_cloud(&bytes[..4]).is_err());
    }
}
