//! `lazysurf` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage errors (reported by clap), 1 on any
//! runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lazysurf::ablation::{csv_table, find_preset, run_ablation, standard_presets, Preset};
use lazysurf::checkpoint::Checkpoint;
use lazysurf::config::{parse_scales, Config, NoiseLevel, Weighting};
use lazysurf::data::{derive_seed, generate_corpus, sample_scan};
use lazysurf::geometry::normalize_cloud;
use lazysurf::geometry::PointCloud;
use lazysurf::io::{read_mesh, read_point_cloud, write_mesh, write_point_cloud, RawCloud};
use lazysurf::metrics::compare_meshes;
use lazysurf::reconstruct::reconstruct;
use lazysurf::train::Trainer;
use lazysurf::Error;

#[derive(Parser, Debug)]
#[command(name = "lazysurf", version, about = "Implicit surface reconstruction from point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a synthetic shape corpus and write a checkpoint.
    Train(TrainArgs),
    /// Reconstruct a mesh from a point cloud with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Compare two meshes (Chamfer-L2 x100, normal consistency).
    Eval(EvalArgs),
    /// Train and evaluate the scale/weighting presets; write a CSV table.
    Ablate(AblateArgs),
    /// Print a checkpoint's manifest.
    Info(InfoArgs),
    /// Write a simulated scan of a random synthetic shape.
    Scan(ScanArgs),
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid scales, e.g. "1,4,16".
    #[arg(long, value_parser = parse_scale_list)]
    scales: Option<Vec<usize>>,
    /// interpnn, ew or lw.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// Nearest neighbours per query.
    #[arg(long)]
    knn: Option<usize>,
    /// Scan noise: no, med or max.
    #[arg(long)]
    noise: Option<NoiseLevel>,
    /// Marching-cubes grid resolution.
    #[arg(long)]
    resolution: Option<usize>,
}

fn parse_scale_list(s: &str) -> Result<Vec<usize>, String> {
    parse_scales(s).map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn load(&self) -> lazysurf::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = &self.scales {
            cfg.model.scale.scales = s.clone();
        }
        if let Some(w) = self.weighting {
            cfg.model.scale.weighting = w;
        }
        if let Some(k) = self.knn {
            cfg.model.scale.knn_k = k;
        }
        if let Some(n) = self.noise {
            cfg.data.noise = n;
        }
        if let Some(r) = self.resolution {
            cfg.reconstruction.resolution = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether any model-shaping option was given explicitly.
    fn touches_model(&self) -> bool {
        self.config.is_some() || self.scales.is_some() || self.weighting.is_some() || self.knn.is_some()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long)]
    output: PathBuf,
    /// Loss log (CSV); defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of synthetic training shapes.
    #[arg(long)]
    shapes: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud (xyz/txt/pts/ply).
    #[arg(long)]
    input: PathBuf,
    /// Mesh to write (obj/ply).
    #[arg(long)]
    output: PathBuf,
    /// Also write the JSON report here (it always goes to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Mesh to score (obj/ply).
    #[arg(long)]
    input: PathBuf,
    /// Reference mesh (obj/ply).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// CSV table to write.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated preset names (default: all).
    #[arg(long)]
    presets: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of synthetic shapes to train and evaluate on.
    #[arg(long, default_value_t = 5)]
    shapes: usize,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Point cloud to write (xyz/ply).
    #[arg(long)]
    output: PathBuf,
    /// Also write the shape's reference mesh (obj/ply).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "no")]
    noise: NoiseLevel,
    #[arg(long, default_value_t = 6000)]
    points: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `SURFR_THREADS` caps worker parallelism.
fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SURFR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("SURFR_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cmd: Command) -> lazysurf::Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Info(a) => info(a),
        Command::Scan(a) => scan(a),
    }
}

fn write_text(path: &Path, text: &str) -> lazysurf::Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn train(a: TrainArgs) -> lazysurf::Result<()> {
    let mut trainer = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if a.cfg.touches_model() {
                ck.check_config(&a.cfg.load()?.model)?;
            }
            ck.trainer()?
        }
        None => Trainer::new(&a.cfg.load()?)?,
    };
    if let Some(e) = a.epochs {
        trainer.config.train.epochs = e;
    }
    if let Some(n) = a.shapes {
        trainer.config.data.num_shapes = n;
    }
    let shapes = generate_corpus(trainer.config.data.num_shapes, trainer.config.seed);
    let every = trainer.config.train.checkpoint_every;
    let out = a.output.clone();
    trainer.fit(&shapes, |t| {
        let last = t.log.last().map_or(f64::NAN, |r| r.total);
        eprintln!("epoch {}/{} loss {last:.5} lr {:.3e}", t.epoch, t.config.train.epochs, t.current_lr());
        if every > 0 && t.epoch % every == 0 {
            Checkpoint::from_trainer(t).save(&out)?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).save(&a.output)?;
    let log = a.log.unwrap_or_else(|| a.output.with_extension("csv"));
    write_text(&log, &trainer.log_csv())?;
    eprintln!("wrote {} and {}", a.output.display(), log.display());
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> lazysurf::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ck.manifest.config.clone();
    if a.cfg.touches_model() {
        let requested = a.cfg.load()?;
        ck.check_config(&requested.model)?;
        cfg.reconstruction = requested.reconstruction;
    }
    if let Some(r) = a.cfg.resolution {
        cfg.reconstruction.resolution = r;
    }
    let model = ck.model()?;
    let raw = read_point_cloud(&a.input)?;
    let (cloud, transform) = normalize_cloud(&PointCloud::new(raw.points, None)?)?;
    let rec = reconstruct(&model, &cloud, &transform, &cfg.reconstruction)?;
    if rec.mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    write_mesh(&a.output, &rec.mesh)?;
    let json = serde_json::to_string_pretty(&rec.report)?;
    println!("{json}");
    if let Some(p) = &a.report {
        write_text(p, &json)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> lazysurf::Result<()> {
    let m = read_mesh(&a.input)?;
    let r = read_mesh(&a.reference)?;
    let report = compare_meshes(&m, &r, a.samples, a.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &a.output {
        write_text(p, &json)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> lazysurf::Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let presets: Vec<Preset> = match &a.presets {
        None => standard_presets(),
        Some(list) => list
            .split(',')
            .map(|n| find_preset(n.trim()).ok_or_else(|| Error::Config(format!("unknown preset {n:?}"))))
            .collect::<lazysurf::Result<_>>()?,
    };
    let shapes = generate_corpus(a.shapes, cfg.seed);
    let results = run_ablation(&cfg, &presets, &shapes, |m| eprintln!("{m}"))?;
    let rows: Vec<_> = results.into_iter().map(|r| r.row).collect();
    let table = csv_table(&rows);
    write_text(&a.output, &table)?;
    print!("{table}");
    Ok(())
}

fn info(a: InfoArgs) -> lazysurf::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&ck.manifest)?);
    Ok(())
}

fn scan(a: ScanArgs) -> lazysurf::Result<()> {
    let shape = generate_corpus(1, a.seed).remove(0);
    let cloud = sample_scan(&shape, a.points, a.noise.sigma(), derive_seed(a.seed, &[0x5CA7]))?;
    write_point_cloud(
        &a.output,
        &RawCloud {
            points: cloud.points().to_vec(),
            normals: cloud.normals().map(<[_]>::to_vec),
        },
    )?;
    if let Some(p) = &a.reference {
        write_mesh(p, &shape.mesh(128))?;
    }
    eprintln!("{} scan with {} points", shape.kind(), a.points);
    Ok(())
}
