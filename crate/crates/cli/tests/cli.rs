use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowkin_cli::commands::{checkpoint_path, SampleMetrics, FINAL_CHECKPOINT, METRICS_LOG};
use flowkin_cli::dataset_io::read_manifest;
use flowkin_cli::ply::read_ply;
use flowkin_cli::rundir::read_jsonl;
use flowkin_cli::Checkpoint;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 5
[data]
instances = 2
samples_per_instance = 12
points = 32
[model]
latent_dim = 8
point_hidden = [16, 16]
latent_hidden = [16]
encoder_hidden = [16]
action_hidden = 16
fourier_features = 4
time_features = 4
adversary_hidden = 8
[train]
steps = 20
batch_size = 2
checkpoint_every = 10
[integrator]
latent_steps = 4
point_steps = 4
"#;

fn flowkin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowkin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowkin(args);
    assert!(
        out.status.success(),
        "flowkin {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = flowkin(args);
    assert!(!out.status.success(), "flowkin {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// Base flags for config-driven commands.
    fn config_args(&self, run: &str) -> Vec<String> {
        vec![
            "--config".into(),
            self.s("run.toml"),
            "--set".into(),
            format!("paths.dataset=\"{}\"", self.s("data")),
            "--set".into(),
            format!("paths.run=\"{}\"", self.s(run)),
        ]
    }

    fn run(&self, cmd: &str, run: &str, extra: &[&str]) -> String {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.config_args(run));
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn trained(config: &str) -> Self {
        let ws = Self::new(config);
        ws.run("generate-data", "run", &[]);
        ws.run("train", "run", &[]);
        ws
    }

    fn checkpoint(&self) -> String {
        self.s(&format!("run/{FINAL_CHECKPOINT}"))
    }
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn generate_data_counts_and_determinism() {
    let ws = Workspace::new("");
    let out = ws.run("generate-data", "run", &["--set", "data.points=16"]);
    assert!(out.contains("480 samples: 400 train, 80 test"), "{out}");
    let manifest = read_manifest(&ws.path("data")).unwrap();
    assert_eq!((manifest.train.len(), manifest.test.len(), manifest.j_max), (400, 80, 1));
    assert_eq!(fs::read_dir(ws.path("data/samples")).unwrap().count(), 480);
    let actions = fs::read_to_string(ws.path("data/actions.txt")).unwrap();
    assert_eq!(actions.lines().filter(|l| !l.starts_with('#')).count(), 480);

    ok(&[
        "generate-data",
        "--set",
        "data.points=16",
        "--out",
        &ws.s("again"),
    ]);
    assert_eq!(read_tree(&ws.path("data")), read_tree(&ws.path("again")));
    let err = fails(&["generate-data", "--set", "data.points=16", "--out", &ws.s("again")]);
    assert!(err.contains("already holds a dataset"), "{err}");
}

#[test]
fn mixed_dof_manifest_uses_the_largest() {
    let ws = Workspace::new("");
    ok(&[
        "generate-data",
        "--set",
        "data.category=arm3",
        "--set",
        "data.dof_choices=[1, 2, 3]",
        "--set",
        "data.instances=6",
        "--set",
        "data.samples_per_instance=6",
        "--set",
        "data.points=16",
        "--out",
        &ws.s("arm"),
    ]);
    assert_eq!(read_manifest(&ws.path("arm")).unwrap().j_max, 3);
}

#[test]
fn train_writes_log_and_loadable_checkpoints() {
    let ws = Workspace::trained(TINY);
    let log: Vec<flowkin::train::StepRecord> = read_jsonl(&ws.path(&format!("run/{METRICS_LOG}"))).unwrap();
    assert_eq!(log.len(), 20);
    assert!(log.iter().enumerate().all(|(i, r)| r.step == i as u64 && r.loss.is_finite()));
    for path in [checkpoint_path(&ws.path("run"), 0), checkpoint_path(&ws.path("run"), 10), ws.path("run/final.ckpt")] {
        let bytes = fs::read(&path).unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.to_bytes(), bytes, "{}", path.display());
        ckpt.model().unwrap();
    }
    assert_eq!(Checkpoint::load(&ws.path("run/final.ckpt")).unwrap().step, 20);
    assert!(!ws.path("run/.lock").exists());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let ws = Workspace::trained(TINY);
    fs::create_dir_all(ws.path("resumed")).unwrap();
    let mid = checkpoint_path(&ws.path("run"), 10);
    let partial: Vec<flowkin::train::StepRecord> = read_jsonl(&ws.path("run/metrics.jsonl")).unwrap();
    flowkin_cli::rundir::write_jsonl(&ws.path("resumed/metrics.jsonl"), &partial[..10]).unwrap();
    ws.run("train", "resumed", &["--resume", &mid.display().to_string()]);
    assert_eq!(
        fs::read(ws.path("run/final.ckpt")).unwrap(),
        fs::read(ws.path("resumed/final.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(ws.path("run/metrics.jsonl")).unwrap(),
        fs::read(ws.path("resumed/metrics.jsonl")).unwrap()
    );
}

#[test]
fn locked_run_directory_is_refused() {
    let ws = Workspace::new(TINY);
    ws.run("generate-data", "run", &[]);
    fs::create_dir_all(ws.path("run")).unwrap();
    fs::write(ws.path("run/.lock"), "1").unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(ws.config_args("run"));
    let err = fails(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("locked"), "{err}");
}

#[test]
fn sample_outputs() {
    let ws = Workspace::trained(TINY);
    let ck = ws.checkpoint();
    ok(&["sample", "--checkpoint", &ck, "--action", "0", "--out", &ws.s("a")]);
    let cloud = read_ply(&ws.path("a/sample-000-action-000.ply")).unwrap();
    assert_eq!((cloud.len(), cloud.dim()), (32, 3));
    ok(&["sample", "--checkpoint", &ck, "--action", "0", "--out", &ws.s("b")]);
    ok(&["sample", "--checkpoint", &ck, "--action", "0", "--seed", "1", "--out", &ws.s("c")]);
    let file = |d: &str| fs::read(ws.path(&format!("{d}/sample-000-action-000.ply"))).unwrap();
    assert_eq!(file("a"), file("b"));
    assert_ne!(file("a"), file("c"));

    let out = ok(&[
        "sample", "--checkpoint", &ck, "--sweep", "0:0:1.5:5", "--shared-latent", "--out", &ws.s("sweep"),
    ]);
    assert!(out.contains("wrote 5 files"), "{out}");
    assert_eq!(fs::read_dir(ws.path("sweep")).unwrap().count(), 5);

    let err = fails(&["sample", "--checkpoint", &ck, "--action", "0,0", "--out", &ws.s("d")]);
    assert!(err.contains("length 2"), "{err}");
    fails(&["sample", "--checkpoint", &ck, "--action", "3", "--out", &ws.s("d")]);
    ok(&["sample", "--checkpoint", &ck, "--action", "3", "--extrapolate", "--out", &ws.s("d")]);
}

#[test]
fn simulate_reports_both_metrics() {
    let ws = Workspace::trained(TINY);
    let base = [
        "simulate",
        "--checkpoint",
        &ws.checkpoint(),
        "--dataset",
        &ws.s("data"),
        "--reference",
        "0",
    ];
    let (sim, x) = (ws.s("sim"), ws.s("x"));
    let mut args = base.to_vec();
    args.extend(["--action", "0.2", "--action", "1.0", "--out", &sim]);
    let out = ok(&args);
    assert!(out.contains("CD x1e3") && out.contains("EMD x1e3"), "{out}");
    let records: Vec<flowkin_cli::commands::SimulateRecord> = read_jsonl(&ws.path("sim/simulate.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.cd > 0.0 && (r.cd_x1e3 - 1e3 * r.cd).abs() < 1e-12));

    let mut args = base.to_vec();
    args.extend(["--action", "2.0", "--out", &x]);
    fails(&args);
    args.push("--extrapolate");
    let out = flowkin(&args);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("outside the training range"), "{stderr}");
}

#[test]
fn interpolation_endpoints_match_direct_samples() {
    let ws = Workspace::trained(TINY);
    let ck = ws.checkpoint();
    let out = ok(&[
        "interpolate", "--checkpoint", &ck, "--seed-a", "3", "--seed-b", "4", "--seed", "9", "--steps", "5",
        "--action", "0.7", "--out", &ws.s("interp"),
    ]);
    assert!(out.contains("wrote 5 frames"));
    for (seed, frame) in [("3", 0), ("4", 4)] {
        let dir = format!("direct{seed}");
        ok(&[
            "sample", "--checkpoint", &ck, "--seed", seed, "--point-seed", "9", "--action", "0.7", "--out", &ws.s(&dir),
        ]);
        assert_eq!(
            fs::read(ws.path(&format!("interp/frame-{frame:03}.ply"))).unwrap(),
            fs::read(ws.path(&format!("{dir}/sample-000-action-000.ply"))).unwrap()
        );
    }
    fails(&["interpolate", "--checkpoint", &ck, "--seed-a", "3", "--seed-b", "4", "--steps", "1", "--out", &ws.s("i")]);
}

#[test]
fn evaluation_summary_matches_records() {
    let ws = Workspace::trained(TINY);
    let out = ok(&[
        "evaluate",
        "--checkpoint",
        &ws.checkpoint(),
        "--dataset",
        &ws.s("data"),
        "--split",
        "test",
        "--out",
        &ws.s("eval"),
    ]);
    assert!(out.contains("CD x1e3"), "{out}");
    let records: Vec<SampleMetrics> = read_jsonl(&ws.path("eval/evaluate-test.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    let summary: flowkin::metrics::MetricReport =
        serde_json::from_str(&fs::read_to_string(ws.path("eval/evaluate-test-summary.json")).unwrap()).unwrap();
    let mean = records.iter().map(|r| r.cd).sum::<f64>() / records.len() as f64;
    assert!((summary.cd - mean).abs() <= 1e-12);
    let mean = records.iter().map(|r| r.emd).sum::<f64>() / records.len() as f64;
    assert!((summary.emd - mean).abs() <= 1e-12);
    assert!(records.iter().all(|r| r.reference % 12 == 0));
}

#[test]
fn empty_split_is_an_error() {
    let ws = Workspace::new(&TINY.replace("samples_per_instance = 12", "samples_per_instance = 3"));
    ws.run("generate-data", "run", &[]);
    ws.run("train", "run", &["--steps", "2"]);
    let err = fails(&[
        "evaluate",
        "--checkpoint",
        &ws.checkpoint(),
        "--dataset",
        &ws.s("data"),
        "--split",
        "test",
    ]);
    assert!(err.contains("split is empty"), "{err}");
}

#[test]
fn colored_pipeline_writes_rgb() {
    let ws = Workspace::trained(&TINY.replace("points = 32", "points = 32\ncolored = true"));
    ok(&["sample", "--checkpoint", &ws.checkpoint(), "--out", &ws.s("rgb")]);
    let text = fs::read_to_string(ws.path("rgb/sample-000-action-000.ply")).unwrap();
    assert!(text.contains("property uchar red"));
    assert_eq!(read_ply(&ws.path("rgb/sample-000-action-000.ply")).unwrap().dim(), 6);
}

#[test]
fn variants_and_integrators_are_selectable() {
    let ws = Workspace::new(TINY);
    ws.run("generate-data", "run", &[]);
    for variant in ["cond", "uncond", "adv"] {
        let run = format!("run-{variant}");
        ws.run("train", &run, &["--variant", variant, "--steps", "12", "--integrator", "euler"]);
        let ckpt = Checkpoint::load(&ws.path(&format!("{run}/final.ckpt"))).unwrap();
        assert_eq!(ckpt.header.train.variant.name(), variant);
        assert_eq!(ckpt.header.run.integrator.method, flowkin::sampler::Method::Euler);
        assert_eq!(ckpt.adversary_optimizer.is_some(), variant == "adv");
    }
    let mut args = vec!["train".to_string()];
    args.extend(ws.config_args("bad"));
    args.extend(["--variant".into(), "nope".into()]);
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>());
}
