use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pseco::io::config::{load_config, TrainConfig};
use pseco::io::dataset::{load_dataset, save_dataset};
use pseco::io::metrics::{
    load_params, save_params, write_metrics, write_precision_curve, write_sigma_scatter, write_table, ParamsFile,
    ABLATION_HEADER, PARAMS_VERSION,
};
use pseco::sim::ablation::{run_ablation, Axis};
use pseco::sim::analysis::{curve_thresholds, diagnose, PseudoDiagnostics, TeacherSource};
use pseco::sim::noise::NoiseConfig;
use pseco::sim::scene::{gen_dataset, Dataset, DatasetSpec, Split};
use pseco::sim::train::{train, Mode};
use pseco::sim::world::{evaluate, World};
use pseco::Error;

#[derive(Parser)]
#[command(name = "pseco", version, about = "Semi-supervised detection experiments on a synthetic detection world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Pseco,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        categories: usize,
        #[arg(long, default_value_t = 0.1)]
        labeled_frac: f64,
        /// Checked against the known presets; proposals are drawn at training time.
        #[arg(long, default_value = "default")]
        noise_preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train supervised-only or semi-supervised, writing per-step metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        metrics: PathBuf,
        /// Where to write the trained teacher.
        #[arg(long)]
        save_params: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// COCO-style AP of trained parameters on every scene of a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-box precision against latent truth across IoU thresholds.
    AnalyzePseudo {
        #[arg(long)]
        data: PathBuf,
        /// Trained teacher; the synthetic teacher is used when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency votes of pseudo boxes paired with their true IoUs.
    AnalyzePcv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one setting of the semi-supervised run.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: String,
        /// Dataset to train on; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: Error,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Version { .. } => 3,
        _ => 1,
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure { code: exit_code(&err), err }
    }
}

/// Any problem with a config file, including its version, is a config error.
fn config_or_default(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => load_config(p).map_err(|err| Failure { code: 2, err }),
        None => Ok(TrainConfig::default()),
    }
}

/// Any problem with a dataset or params file is a data error.
fn data_file<T>(r: pseco::Result<T>) -> Result<T, Failure> {
    r.map_err(|err| Failure { code: 3, err })
}

fn world_from_params(data: Dataset, p: &ParamsFile) -> Result<World, Failure> {
    if data.n_categories != p.params.n_categories {
        return Err(Error::Data(format!(
            "dataset has {} categories but the params were trained for {}",
            data.n_categories, p.params.n_categories
        ))
        .into());
    }
    Ok(World::build(data, p.noise, p.feature_dim, p.seed)?)
}

/// Unlabeled scenes when there are any, since that is where pseudo labels live.
fn analysis_scenes(mut data: Dataset) -> Dataset {
    if data.unlabeled().next().is_some() {
        data.scenes.retain(|s| s.split == Split::Unlabeled);
    }
    data
}

fn run_diagnostics(
    data: &Path,
    params: Option<&Path>,
    config: Option<&Path>,
) -> Result<PseudoDiagnostics, Failure> {
    let mut cfg = config_or_default(config)?;
    let data = analysis_scenes(data_file(load_dataset(data))?);
    match params {
        Some(p) => {
            let p = data_file(load_params(p))?;
            cfg.nms_iou = p.nms_iou;
            let world = world_from_params(data, &p)?;
            Ok(diagnose(&world, TeacherSource::Trained(&p.params), &cfg)?)
        }
        None => {
            let world = World::build(data, cfg.noise_config()?, cfg.feature_dim, cfg.seed)?;
            Ok(diagnose(&world, TeacherSource::Synthetic, &cfg)?)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { seed, scenes, categories, labeled_frac, noise_preset, out } => {
            NoiseConfig::preset(&noise_preset)?;
            if !(labeled_frac > 0.0 && labeled_frac <= 1.0) {
                return Err(Error::Config(format!("--labeled-frac must be in (0, 1], got {labeled_frac}")).into());
            }
            if categories == 0 {
                return Err(Error::Config("--categories must be positive".into()).into());
            }
            let data = gen_dataset(&DatasetSpec::new(seed, scenes, categories, labeled_frac))
                .map_err(|e| Failure { code: 2, err: e })?;
            save_dataset(&data, &out)?;
            println!(
                "wrote {} scenes ({} labeled) to {}",
                data.scenes.len(),
                data.labeled().count(),
                out.display()
            );
        }
        Command::Train { config, data, mode, metrics, save_params: params_out, seed } => {
            let mut cfg = config_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = data_file(load_dataset(&data))?;
            let world = World::build(data, cfg.noise_config()?, cfg.feature_dim, cfg.seed)?;
            let mode = match mode {
                ModeArg::Supervised => Mode::Supervised,
                ModeArg::Pseco => Mode::Pseco,
            };
            let out = train(&cfg, &world, mode)?;
            write_metrics(&metrics, &out.metrics)?;
            if let Some(path) = params_out {
                let file = ParamsFile {
                    version: PARAMS_VERSION,
                    seed: cfg.seed,
                    noise: cfg.noise_config()?,
                    feature_dim: cfg.feature_dim,
                    nms_iou: cfg.nms_iou,
                    params: out.teacher.clone(),
                };
                save_params(&file, &path)?;
            }
            if let Some(ap) = &out.final_ap {
                println!("final mAP {:.4}", ap.map);
            }
        }
        Command::Eval { params, data, out } => {
            let p = data_file(load_params(&params))?;
            let world = world_from_params(data_file(load_dataset(&data))?, &p)?;
            let ap = evaluate(&p.params, &world, p.nms_iou).map_err(|e| match e {
                Error::InvalidInput(m) => Error::Data(m),
                other => other,
            })?;
            std::fs::write(&out, serde_json::to_string_pretty(&ap).map_err(Error::from)?).map_err(Error::from)?;
            println!("mAP {:.4}", ap.map);
        }
        Command::AnalyzePseudo { data, params, config, out } => {
            let d = run_diagnostics(&data, params.as_deref(), config.as_deref())?;
            write_precision_curve(&out, &d.precision.points)?;
            let at = |t: f64| d.precision_at(t).unwrap_or(f64::NAN);
            println!(
                "{} pseudo boxes; precision {:.3} at IoU 0.3, {:.3} at IoU 0.9 over {} thresholds",
                d.n_pseudo,
                at(0.3),
                at(0.9),
                curve_thresholds().len()
            );
        }
        Command::AnalyzePcv { data, params, config, out } => {
            let d = run_diagnostics(&data, params.as_deref(), config.as_deref())?;
            write_sigma_scatter(&out, &d.sigmas, &d.true_ious)?;
            match d.sigma_pearson {
                Some(r) => println!("{} voted pseudo boxes; pearson {r:.4}", d.sigmas.len()),
                None => println!("{} voted pseudo boxes; correlation undefined", d.sigmas.len()),
            }
        }
        Command::Ablate { config, axis, data, out } => {
            let cfg = config_or_default(config.as_deref())?;
            let axis: Axis = axis.parse()?;
            let world = match data {
                Some(p) => World::build(data_file(load_dataset(&p))?, cfg.noise_config()?, cfg.feature_dim, cfg.seed)?,
                None => World::from_config(&cfg).map_err(|e| Failure { code: 2, err: e })?,
            };
            let rows = run_ablation(&cfg, &world, axis)?;
            let table: Vec<Vec<String>> = rows.iter().map(|r| r.fields()).collect();
            write_table(&out, ABLATION_HEADER, &table)?;
            for r in &rows {
                println!("{}={}: mAP {:.4}", r.axis, r.value, r.map);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}
