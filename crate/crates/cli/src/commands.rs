//! The six pipeline commands as library functions; `main` only parses flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flowkin::kinematics::{generate_dataset, Category, Dataset, LimitPolicy, Split};
use flowkin::metrics::{chamfer_l2, emd, MetricReport};
use flowkin::nets::FlowModel;
use flowkin::rng::{stream, tag};
use flowkin::sampler::{slerp, IntegratorConfig, Method, Sampler};
use flowkin::train::{StepRecord, TrainingSet};
use flowkin::PointCloud;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset_io::{read_dataset, write_dataset};
use crate::ply::write_ply;
use crate::rundir::{read_jsonl, write_jsonl, DirLock, JsonlWriter};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(run: &Path, step: u64) -> PathBuf {
    run.join("checkpoints").join(format!("step-{step:06}.ckpt"))
}

/// Parses `"0.1,0.2"` or `"0.1 0.2"` into an action.
pub fn parse_action(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad angle {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    ensure!(!values.is_empty(), "empty action");
    Ok(values)
}

/// One action per non-empty, non-comment line.
pub fn read_actions_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_action)
        .collect()
}

/// `count` evenly spaced angles of one joint, other joints at zero.
pub fn sweep_actions(joint: usize, lo: f64, hi: f64, count: usize, j_max: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(joint < j_max, "joint {joint} out of range for J={j_max}");
    ensure!(count >= 1, "a sweep needs at least one angle");
    Ok((0..count)
        .map(|i| {
            let frac = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            let mut a = vec![0.0; j_max];
            a[joint] = lo + (hi - lo) * frac;
            a
        })
        .collect())
}

fn check_actions(actions: &[Vec<f64>], j_max: usize, category: Category, extrapolate: bool) -> Result<()> {
    ensure!(!actions.is_empty(), "no actions given");
    let [lo, hi] = category.joint_limit();
    for a in actions {
        ensure!(a.len() == j_max, "action {a:?} has length {}, the model expects J={j_max}", a.len());
        ensure!(a.iter().all(|v| v.is_finite()), "action {a:?} is not finite");
        if a.iter().any(|&v| v < lo || v > hi) {
            if extrapolate {
                warn!("action {a:?} lies outside the training range [{lo}, {hi}]; extrapolating");
            } else {
                bail!("action {a:?} lies outside [{lo}, {hi}]; pass --extrapolate to allow it");
            }
        }
    }
    Ok(())
}

fn integrator_for(ckpt: &Checkpoint, method: Option<Method>) -> IntegratorConfig {
    let mut config = ckpt.header.run.integrator;
    if let Some(m) = method {
        config.method = m;
    }
    config
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub j_max: usize,
}

pub fn generate_data(config: &RunConfig) -> Result<GenerateSummary> {
    let dir = &config.paths.dataset;
    let _lock = DirLock::acquire(dir)?;
    let dataset = generate_dataset(&config.dataset_config())?;
    write_dataset(&dataset, dir)?;
    let summary = GenerateSummary {
        samples: dataset.samples.len(),
        train: dataset.split_ids(Split::Train).len(),
        test: dataset.split_ids(Split::Test).len(),
        j_max: dataset.j_max(),
    };
    info!(
        "wrote {} samples ({} train, {} test) to {}",
        summary.samples,
        summary.train,
        summary.test,
        dir.display()
    );
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last: Option<StepRecord>,
}

/// Trains from scratch, or continues from `resume`. Writes the step-0
/// checkpoint, periodic ones, `final.ckpt` and one log record per step.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let run_dir = &config.paths.run;
    let _lock = DirLock::acquire(run_dir)?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    let dataset = read_dataset(&config.paths.dataset)?;
    let data = TrainingSet::from_dataset(&dataset, Split::Train)?;
    let log_path = run_dir.join(METRICS_LOG);

    let (mut trainer, run, mut log) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_compatible(data.point_dim(), data.action_dim())?;
            let stored = RunConfig {
                paths: config.paths.clone(),
                ..ckpt.header.run.clone()
            };
            if stored != *config {
                warn!("resuming with the configuration stored in {}", path.display());
            }
            let step = ckpt.step;
            let kept: Vec<StepRecord> = if log_path.exists() {
                read_jsonl::<StepRecord>(&log_path)?.into_iter().filter(|r| r.step < step).collect()
            } else {
                Vec::new()
            };
            ensure!(kept.len() as u64 == step, "metrics log holds {} records before step {step}", kept.len());
            write_jsonl(&log_path, &kept)?;
            (ckpt.trainer()?, stored, JsonlWriter::append(&log_path)?)
        }
        None => {
            let model = FlowModel::new(config.model_config(data.point_dim(), data.action_dim()))?;
            let trainer = flowkin::train::Trainer::new(model, config.train_config())?;
            Checkpoint::of(&trainer, config).save(&checkpoint_path(run_dir, 0))?;
            (trainer, config.clone(), JsonlWriter::create(&log_path)?)
        }
    };
    fs::write(run_dir.join("config.toml"), run.to_toml())?;

    let total = trainer.config.steps;
    let every = run.train.checkpoint_every;
    let mut last = None;
    while trainer.step() < total {
        let record = match trainer.train_step(&data) {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                return Err(anyhow::Error::new(e).context("training aborted"));
            }
        };
        log.write(&record)?;
        let done = trainer.step();
        if every > 0 && done % every == 0 && done < total {
            log.flush()?;
            Checkpoint::of(&trainer, &run).save(&checkpoint_path(run_dir, done))?;
        }
        if done % 1000 == 0 {
            info!("step {done}/{total}: loss {:.5}", record.loss);
        }
        last = Some(record);
    }
    log.flush()?;
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    Checkpoint::of(&trainer, &run).save(&final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        steps: trainer.step(),
        last,
    })
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub checkpoint: PathBuf,
    pub actions: Vec<Vec<f64>>,
    pub count: usize,
    /// Seeds the shape latents.
    pub seed: u64,
    /// Seeds the point noise; defaults to `seed`.
    pub point_seed: Option<u64>,
    /// Draw one shape code per sample and decode it under every action.
    pub shared_latent: bool,
    pub points: Option<usize>,
    pub extrapolate: bool,
    pub integrator: Option<Method>,
    pub out: PathBuf,
}

pub fn sample_file(out: &Path, sample: usize, action: usize) -> PathBuf {
    out.join(format!("sample-{sample:03}-action-{action:03}.ply"))
}

/// Writes one PLY per (sample, action) and returns the paths in that order.
pub fn sample(opts: &SampleOptions) -> Result<Vec<PathBuf>> {
    ensure!(opts.count >= 1, "count must be at least 1");
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let model = ckpt.model()?;
    let run = &ckpt.header.run;
    check_actions(&opts.actions, model.action_dim(), run.data.category, opts.extrapolate)?;
    let sampler = Sampler::new(&model, integrator_for(&ckpt, opts.integrator))?;
    let points = opts.points.unwrap_or(run.data.points);
    let point_seed = opts.point_seed.unwrap_or(opts.seed);
    fs::create_dir_all(&opts.out)?;
    let mut files = Vec::new();
    for s in 0..opts.count {
        let shared = if opts.shared_latent {
            let mut rng = stream(opts.seed, &[tag("latent"), s as u64]);
            Some(sampler.sample_latents(&opts.actions[..1], &mut rng)?.row(0).to_vec())
        } else {
            None
        };
        for (a, action) in opts.actions.iter().enumerate() {
            let z = match &shared {
                Some(z) => z.clone(),
                None => {
                    let mut rng = stream(opts.seed, &[tag("latent"), s as u64, a as u64]);
                    sampler.sample_latents(std::slice::from_ref(action), &mut rng)?.row(0).to_vec()
                }
            };
            let mut rng = stream(point_seed, &[tag("points"), s as u64, a as u64]);
            let cloud = sampler.sample_with_latent(&z, action, points, &mut rng)?;
            let path = sample_file(&opts.out, s, a);
            write_ply(&cloud, &path)?;
            files.push(path);
        }
    }
    Ok(files)
}

#[derive(Clone, Debug)]
pub struct SimulateOptions {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Dataset sample id of the observed cloud.
    pub reference: usize,
    pub actions: Vec<Vec<f64>>,
    pub seed: u64,
    pub extrapolate: bool,
    pub integrator: Option<Method>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateRecord {
    pub action: Vec<f64>,
    pub cd: f64,
    pub emd: f64,
    pub cd_x1e3: f64,
    pub emd_x1e3: f64,
    pub file: PathBuf,
}

fn load_pair(checkpoint: &Path, dataset: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = read_dataset(dataset)?;
    ckpt.check_compatible(dataset.config.point_dim(), dataset.j_max())?;
    Ok((ckpt, dataset))
}

/// Simulator mode: encodes the reference and decodes it under each action,
/// scoring against forward-kinematics ground truth of the same instance.
pub fn simulate(opts: &SimulateOptions) -> Result<Vec<SimulateRecord>> {
    let (ckpt, dataset) = load_pair(&opts.checkpoint, &opts.dataset)?;
    let model = ckpt.model()?;
    let reference = dataset
        .samples
        .get(opts.reference)
        .with_context(|| format!("dataset has no sample {}", opts.reference))?;
    check_actions(&opts.actions, dataset.j_max(), dataset.config.spec.category, opts.extrapolate)?;
    let limits = if opts.extrapolate { LimitPolicy::Clamp } else { LimitPolicy::Reject };
    let sampler = Sampler::new(&model, integrator_for(&ckpt, opts.integrator))?;
    let z = model.shape_code(&reference.cloud)?;
    let n = dataset.config.points;
    fs::create_dir_all(&opts.out)?;
    let mut records = Vec::new();
    for (a, action) in opts.actions.iter().enumerate() {
        let mut rng = stream(opts.seed, &[tag("points"), a as u64]);
        let prediction = sampler.sample_with_latent(&z, action, n, &mut rng)?;
        let mut rng = stream(opts.seed, &[tag("truth"), a as u64]);
        let truth = dataset.ground_truth(reference.instance, action, n, &mut rng, limits)?;
        let (cd, emd) = (chamfer_l2(&prediction, &truth)?, emd(&prediction, &truth)?);
        let file = opts.out.join(format!("simulate-{a:03}.ply"));
        write_ply(&prediction, &file)?;
        write_ply(&truth, &opts.out.join(format!("truth-{a:03}.ply")))?;
        records.push(SimulateRecord {
            action: action.clone(),
            cd,
            emd,
            cd_x1e3: cd * 1e3,
            emd_x1e3: emd * 1e3,
            file,
        });
    }
    write_jsonl(&opts.out.join("simulate.jsonl"), &records)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct InterpolateOptions {
    pub checkpoint: PathBuf,
    pub seed_a: u64,
    pub seed_b: u64,
    /// Seeds the point noise shared by every frame; defaults to `seed_a`.
    pub point_seed: Option<u64>,
    pub steps: usize,
    pub action: Vec<f64>,
    pub extrapolate: bool,
    pub integrator: Option<Method>,
    pub out: PathBuf,
}

/// Decodes `steps` shape codes along the slerp path between the latents
/// drawn from `seed_a` and `seed_b`. Frame 0 equals `sample` with seed
/// `seed_a` and the same point seed.
pub fn interpolate(opts: &InterpolateOptions) -> Result<Vec<PathBuf>> {
    ensure!(opts.steps >= 2, "interpolation needs at least 2 steps");
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let model = ckpt.model()?;
    let actions = [opts.action.clone()];
    check_actions(&actions, model.action_dim(), ckpt.header.run.data.category, opts.extrapolate)?;
    let sampler = Sampler::new(&model, integrator_for(&ckpt, opts.integrator))?;
    let latent = |seed: u64| -> Result<Vec<f64>> {
        let mut rng = stream(seed, &[tag("latent"), 0, 0]);
        Ok(sampler.sample_latents(&actions, &mut rng)?.row(0).to_vec())
    };
    let (za, zb) = (latent(opts.seed_a)?, latent(opts.seed_b)?);
    let point_seed = opts.point_seed.unwrap_or(opts.seed_a);
    fs::create_dir_all(&opts.out)?;
    let mut files = Vec::new();
    for k in 0..opts.steps {
        let alpha = k as f64 / (opts.steps - 1) as f64;
        let z = slerp(&za, &zb, alpha)?;
        let mut rng = stream(point_seed, &[tag("points"), 0, 0]);
        let cloud = sampler.sample_with_latent(&z, &opts.action, ckpt.header.run.data.points, &mut rng)?;
        let path = opts.out.join(format!("frame-{k:03}.ply"));
        write_ply(&cloud, &path)?;
        files.push(path);
    }
    Ok(files)
}

#[derive(Clone, Debug)]
pub struct EvaluateOptions {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    pub seed: u64,
    /// Evaluate only the first `limit` samples of the split.
    pub limit: Option<usize>,
    pub integrator: Option<Method>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub instance: usize,
    /// Sample whose cloud was encoded.
    pub reference: usize,
    pub cd: f64,
    pub emd: f64,
    pub color_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricReport,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let (cd, emd) = self.mean.scaled();
        format!(
            "split    samples  CD x1e3    EMD x1e3\n{:<8} {:>7}  {:>9.4}  {:>9.4}\n",
            self.split.name(),
            self.samples.len(),
            cd,
            emd
        )
    }
}

/// Reference observation for `instance`: its first train sample, or its
/// first sample when the whole instance is held out.
pub fn reference_for(dataset: &Dataset, instance: usize) -> Option<usize> {
    let of_instance = || dataset.samples.iter().filter(|s| s.instance == instance);
    of_instance()
        .find(|s| s.split == Split::Train)
        .or_else(|| of_instance().next())
        .map(|s| s.id)
}

/// Simulator-mode metrics on one split: each sample's instance is encoded
/// from its reference observation and decoded at the sample's action.
pub fn evaluate(opts: &EvaluateOptions) -> Result<EvaluationReport> {
    let (ckpt, dataset) = load_pair(&opts.checkpoint, &opts.dataset)?;
    let model = ckpt.model()?;
    let sampler = Sampler::new(&model, integrator_for(&ckpt, opts.integrator))?;
    let targets: Vec<_> = dataset.split(opts.split).take(opts.limit.unwrap_or(usize::MAX)).collect();
    ensure!(!targets.is_empty(), "the {} split is empty", opts.split.name());
    let mut samples = Vec::with_capacity(targets.len());
    let mut reports = Vec::with_capacity(targets.len());
    for target in targets {
        let reference = reference_for(&dataset, target.instance).expect("instance has samples");
        let mut rng = stream(opts.seed, &[tag("evaluate"), target.id as u64]);
        let prediction: PointCloud = sampler.simulate(
            &dataset.samples[reference].cloud,
            &target.action,
            target.cloud.len(),
            &mut rng,
        )?;
        let report = MetricReport::compare(&prediction, &target.cloud)?;
        samples.push(SampleMetrics {
            id: target.id,
            instance: target.instance,
            reference,
            cd: report.cd,
            emd: report.emd,
            color_error: report.color_error,
        });
        reports.push(report);
    }
    let report = EvaluationReport {
        split: opts.split,
        samples,
        mean: MetricReport::mean(&reports)?,
    };
    if let Some(out) = &opts.out {
        fs::create_dir_all(out)?;
        let name = opts.split.name();
        write_jsonl(&out.join(format!("evaluate-{name}.jsonl")), &report.samples)?;
        fs::write(
            out.join(format!("evaluate-{name}-summary.json")),
            serde_json::to_string_pretty(&report.mean)? + "\n",
        )?;
    }
    Ok(report)
}
