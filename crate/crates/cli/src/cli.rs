//! Command definitions and their implementations.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use slpgen_core::checkpoint::{load_autoencoder, load_ddpm, save_autoencoder, save_ddpm};
use slpgen_core::data::{load_dataset, make_dataset, read_ply, read_ply_dir, save_dataset, write_ply, DatasetConfig, ShapeKind};
use slpgen_core::diffusion::{DdpmConfig, DdpmKind, LatentDdpm, ScheduleConfig};
use slpgen_core::edit::Models;
use slpgen_core::eval::{evaluate, Metric, ReportTable};
use slpgen_core::geometry::{chamfer, PointCloud};
use slpgen_core::nets::{AeConfig, Autoencoder};
use slpgen_core::train::{train_autoencoder, train_feature_ddpm, train_position_ddpm, EpochRecord, Stage, TrainConfig, TrainReport};

use crate::api::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "slpgen", version, about = "Sparse latent point shape generation and editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset (PLY files plus a JSON manifest).
    GenData(GenDataArgs),
    /// Train the autoencoder.
    TrainAe(TrainAeArgs),
    /// Train the position or feature DDPM on a frozen autoencoder.
    TrainLatent(TrainLatentArgs),
    /// Generate shapes and write them as PLY.
    Sample(SampleArgs),
    /// Compare two directories of PLY clouds.
    Eval(EvalArgs),
    /// Convert clouds between PLY and JSON.
    Export(ExportArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shapes per family.
    #[arg(long, default_value_t = 50)]
    pub per_family: usize,
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    Toy,
    Desk,
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainCommon {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training config (TOML, or JSON with a `.json` extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch losses as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainAeArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    pub model: ModelSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LatentStage {
    Pos,
    Feat,
}

#[derive(Debug, Args)]
pub struct TrainLatentArgs {
    #[arg(long, value_enum)]
    pub stage: LatentStage,
    #[arg(long)]
    pub ae: PathBuf,
    #[command(flatten)]
    pub common: TrainCommon,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub ae: PathBuf,
    #[arg(long)]
    pub pos: PathBuf,
    #[arg(long)]
    pub feat: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub count: usize,
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long)]
    pub out: PathBuf,
    /// Shape `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cd,
    Emd,
    Nc,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cd => Metric::Chamfer,
            MetricArg::Emd => Metric::Emd,
            MetricArg::Nc => Metric::NormalConsistency,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// May be repeated.
    #[arg(long, value_enum, default_values_t = [MetricArg::Cd])]
    pub metric: Vec<MetricArg>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Ply,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// A `.ply` or `.json` cloud, or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Format,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub models: ModelPaths,
    /// Append every created shape to this JSON-lines file and reload it on start.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainAe(a) => train_ae(&a),
        Command::TrainLatent(a) => train_latent(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::Export(a) => export(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let config = DatasetConfig {
        counts: ShapeKind::ALL.iter().map(|&k| (k, a.per_family)).collect(),
        points: a.points,
        val_fraction: a.val_fraction,
        seed: a.seed,
    };
    let dataset = make_dataset(&config)?;
    let manifest = save_dataset(&dataset, &a.out)?;
    println!("wrote {} train and {} val shapes, manifest {}", dataset.train.len(), dataset.val.len(), manifest.display());
    Ok(())
}

fn train_config(common: &TrainCommon, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::for_stage(stage),
    };
    cfg.stage = stage;
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(r: &EpochRecord) {
    eprintln!("epoch {:>4}  loss {:.6}  {:.1}s", r.epoch, r.total, r.seconds);
}

fn write_log(report: &TrainReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        report.write_jsonl(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    Ok(())
}

fn train_ae(a: &TrainAeArgs) -> Result<()> {
    let cfg = train_config(&a.common, Stage::Ae)?;
    let dataset = load_dataset(&a.common.data).with_context(|| format!("loading dataset {}", a.common.data.display()))?;
    let model = match a.model {
        ModelSize::Toy => AeConfig::toy(),
        ModelSize::Desk => AeConfig::desk(),
        ModelSize::Paper => AeConfig::paper(),
    };
    if model.points != dataset.config.points {
        bail!("model expects {} points per cloud, dataset has {}", model.points, dataset.config.points);
    }
    let mut ae = Autoencoder::new(model, cfg.seed)?;
    let report = train_autoencoder(&mut ae, &dataset.train_clouds(), &cfg, progress)?;
    save_autoencoder(&ae, cfg.seed, &a.common.out)?;
    write_log(&report, a.common.log.as_deref())?;
    let val = dataset.val_clouds();
    if !val.is_empty() {
        let cd: f64 = val.iter().map(|c| Ok(chamfer(c, &ae.reconstruct(c)?))).sum::<Result<f64>>()? / val.len() as f64;
        println!("validation reconstruction CD {cd:.6}");
    }
    println!("final loss {:.6}, {:.1}s, checkpoint {}", report.final_total().unwrap_or(f64::NAN), report.wall_clock, a.common.out.display());
    Ok(())
}

fn train_latent(a: &TrainLatentArgs) -> Result<()> {
    let stage = match a.stage {
        LatentStage::Pos => Stage::PosDdpm,
        LatentStage::Feat => Stage::FeatDdpm,
    };
    let cfg = train_config(&a.common, stage)?;
    let ae = load_autoencoder(&a.ae).with_context(|| format!("loading autoencoder {}", a.ae.display()))?;
    let dataset = load_dataset(&a.common.data).with_context(|| format!("loading dataset {}", a.common.data.display()))?;
    let clouds = dataset.train_clouds();
    let base = match a.stage {
        LatentStage::Pos => DdpmConfig::position(),
        LatentStage::Feat => DdpmConfig::feature(ae.config().latent_dim),
    };
    let config = DdpmConfig { schedule: ScheduleConfig::scaled(a.steps), ..base };
    let mut model = LatentDdpm::new(config, cfg.seed)?;
    let report = match a.stage {
        LatentStage::Pos => train_position_ddpm(&mut model, &ae, &clouds, &cfg, progress)?,
        LatentStage::Feat => train_feature_ddpm(&mut model, &ae, &clouds, &cfg, progress)?,
    };
    save_ddpm(&model, cfg.seed, &a.common.out)?;
    write_log(&report, a.common.log.as_deref())?;
    println!("final loss {:.6}, {:.1}s, checkpoint {}", report.final_total().unwrap_or(f64::NAN), report.wall_clock, a.common.out.display());
    Ok(())
}

pub fn load_models(paths: &ModelPaths) -> Result<Models> {
    let ae = load_autoencoder(&paths.ae).with_context(|| format!("loading {}", paths.ae.display()))?;
    let pos = load_ddpm(&paths.pos, DdpmKind::Position).with_context(|| format!("loading {}", paths.pos.display()))?;
    let feat = load_ddpm(&paths.feat, DdpmKind::Feature).with_context(|| format!("loading {}", paths.feat.display()))?;
    Ok(Models::new(ae, pos, feat)?)
}

fn sample(a: &SampleArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let models = load_models(&a.models)?;
    fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let latent = models.generate(a.seed.wrapping_add(i as u64))?;
        write_ply(&models.decode(&latent)?, a.out.join(format!("sample_{i:04}.ply")))?;
    }
    println!("wrote {} shapes to {}", a.count, a.out.display());
    Ok(())
}

fn clouds_in(dir: &Path) -> Result<Vec<PointCloud>> {
    Ok(read_ply_dir(dir).with_context(|| format!("reading {}", dir.display()))?.into_iter().map(|(_, c)| c).collect())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let gen = clouds_in(&a.gen)?;
    let reference = clouds_in(&a.reference)?;
    let reports = a.metric.iter().map(|&m| evaluate(&gen, &reference, m.into())).collect::<slpgen_core::Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        print!("{}", ReportTable(&reports));
    }
    Ok(())
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_slice(&fs::read(path)?).with_context(|| format!("parsing {}", path.display()))?)
    } else {
        Ok(read_ply(path).with_context(|| format!("reading {}", path.display()))?)
    }
}

fn write_cloud(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Ply => write_ply(cloud, path)?,
        Format::Json => fs::write(path, serde_json::to_vec(cloud)?)?,
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let ext = match a.format {
        Format::Ply => "ply",
        Format::Json => "json",
    };
    if a.input.is_dir() {
        fs::create_dir_all(&a.out)?;
        let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ply" || e == "json"))
            .collect();
        inputs.sort();
        if inputs.is_empty() {
            bail!("no .ply or .json clouds in {}", a.input.display());
        }
        for p in &inputs {
            let name = p.file_stem().context("file without a name")?;
            write_cloud(&read_cloud(p)?, &a.out.join(name).with_extension(ext), a.format)?;
        }
        println!("converted {} clouds into {}", inputs.len(), a.out.display());
    } else {
        write_cloud(&read_cloud(&a.input)?, &a.out, a.format)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let models = load_models(&a.models)?;
    let state = match &a.store {
        Some(p) => AppState::with_log(models, p)?,
        None => AppState::new(models),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        api::serve(listener, Arc::new(state)).await?;
        Ok(())
    })
}
