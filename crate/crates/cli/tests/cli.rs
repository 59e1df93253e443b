use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

const TINY: &str = r#"
seed = 3

[model]
local_width = 8
cell_width = 16
head_hidden = [32, 16, 16, 8]
attention_ff = 32

[model.scale]
scales = [1, 4]

[data]
num_shapes = 1
input_points = 500
surface_queries = 100
uniform_queries = 100
queries_per_step = 100

[train]
epochs = 150
batch_size = 1

[reconstruction]
resolution = 32

[eval]
samples = 2000
reference_resolution = 32
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lazysurf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// One trained tiny checkpoint, a scan and its reference mesh, shared by
/// every test in this binary.
struct Trained {
    f: Fixture,
    ck: PathBuf,
    cloud: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let f = Fixture::new();
        let ck = f.path("m.ckpt");
        ok(&["train", "--config", s(&f.path("tiny.toml")), "--output", s(&ck)]);
        let cloud = f.path("scan.xyz");
        ok(&["scan", "--seed", "4", "--points", "800", "--output", s(&cloud)]);
        Trained { f, ck, cloud }
    })
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.toml"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

}

#[test]
fn train_writes_checkpoint_and_loss_log() {
    let Trained { f, ck, .. } = trained();
    let log = std::fs::read_to_string(f.path("m.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr,total,magnitude,sign,regularizer");
    // one step per epoch
    assert_eq!(lines.len(), 151);
    let total = |l: &str| l.split(',').nth(3).unwrap().parse::<f64>().unwrap();
    assert!(total(lines[150]) < total(lines[1]));

    let info = ok(&["info", "--checkpoint", s(ck)]);
    let manifest: serde_json::Value = serde_json::from_slice(&info.stdout).unwrap();
    assert_eq!(manifest["epoch"], 150);
    assert_eq!(manifest["version"], 1);
    assert!(manifest["tensors"].as_array().unwrap().len() > 10);
}

#[test]
fn reconstruct_is_deterministic_and_reports_timings() {
    let Trained { f, ck, cloud } = trained();
    let a = f.path("a.ply");
    let b = f.path("b.ply");

    let out = ok(&["reconstruct", "--checkpoint", s(ck), "--input", s(cloud), "--output", s(&a)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["resolution"], 32);
    for stage in ["encode", "select", "evaluate", "propagate", "marching_cubes", "total"] {
        assert!(report["timings"][stage].as_f64().unwrap() >= 0.0, "{stage}");
    }
    ok(&["reconstruct", "--checkpoint", s(ck), "--input", s(cloud), "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn finer_resolution_takes_longer() {
    let Trained { f, ck, cloud } = trained();
    let time = |r: &str, out: &str| {
        let t = Instant::now();
        ok(&[
            "reconstruct",
            "--checkpoint",
            s(ck),
            "--input",
            s(cloud),
            "--output",
            s(&f.path(out)),
            "--resolution",
            r,
        ]);
        t.elapsed().as_secs_f64()
    };
    let coarse = time("64", "r64.obj");
    let fine = time("256", "r256.obj");
    assert!(f.path("r64.obj").exists() && f.path("r256.obj").exists());
    assert!(coarse < fine, "R=64 {coarse}s vs R=256 {fine}s");
}

#[test]
fn eval_of_mesh_against_itself() {
    let f = Fixture::new();
    let m = f.path("ref.obj");
    ok(&["scan", "--seed", "1", "--output", s(&f.path("c.xyz")), "--reference", s(&m)]);
    let out = ok(&["eval", "--input", s(&m), "--reference", s(&m), "--samples", "3000"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["chamfer_l2_x100"].as_f64().unwrap(), 0.0);
    assert!((r["normal_consistency"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    // byte-identical reports on repeat
    let again = ok(&["eval", "--input", s(&m), "--reference", s(&m), "--samples", "3000"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn ablate_emits_one_row_per_preset() {
    let f = Fixture::new();
    let table = f.path("ablation.csv");
    ok(&[
        "ablate",
        "--config",
        s(&f.path("tiny.toml")),
        "--output",
        s(&table),
        "--presets",
        "base,multiscale_attn,ew_1_4_16",
        "--epochs",
        "1",
        "--shapes",
        "2",
    ]);
    let csv = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("preset,scales,weighting,attention,mean_chamfer_x100"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["base", "multiscale_attn", "ew_1_4_16"]);
}

#[test]
fn exit_codes() {
    // usage errors
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["reconstruct", "--checkpoint", "x"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--output", "x", "--weighting", "cubic"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    // runtime failures
    let f = Fixture::new();
    let missing = f.path("missing.ckpt");
    let out = run(&["info", "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    std::fs::write(f.path("junk.ckpt"), b"garbage").unwrap();
    assert_eq!(run(&["info", "--checkpoint", s(&f.path("junk.ckpt"))]).status.code(), Some(1));
    std::fs::write(f.path("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(
        run(&["train", "--config", s(&f.path("bad.toml")), "--output", s(&f.path("o.ckpt"))]).status.code(),
        Some(1)
    );
}

#[test]
fn mismatched_config_is_refused() {
    let Trained { f, ck, cloud } = trained();
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        s(ck),
        "--input",
        s(cloud),
        "--output",
        s(&f.path("x.obj")),
        "--config",
        s(&f.path("tiny.toml")),
        "--knn",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
    // the matching config is accepted
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(ck),
        "--input",
        s(cloud),
        "--output",
        s(&f.path("y.obj")),
        "--config",
        s(&f.path("tiny.toml")),
    ]);
}

#[test]
fn thread_cap_is_honoured() {
    let f = Fixture::new();
    let out = bin()
        .env("SURFR_THREADS", "1")
        .args(["scan", "--output", s(&f.path("c.xyz"))])
        .output()
        .unwrap();
    assert!(out.status.success());
    let bad = bin()
        .env("SURFR_THREADS", "lots")
        .args(["scan", "--output", s(&f.path("c.xyz"))])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
