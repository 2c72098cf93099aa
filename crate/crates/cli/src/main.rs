use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fosnet_core::data::{generate_dataset, read_dataset, write_dataset, ChannelStats, Dataset, SyntheticSceneSpec};
use fosnet_core::losses::GridScores;
use fosnet_core::model::{export_cam_grid, write_cam, FosNet, ObjectModel};
use fosnet_core::runner::{
    ablation_run, evaluate_topk, fusion_sweep, gamma_sweep, pretrain_object, prepare_network, report_from_checkpoints,
    ten_crop_eval, train, warm_start, AblationVariant, PretrainConfig, TrainConfig,
};
use fosnet_core::tensor::read_tensor;
use fosnet_core::Error;

#[derive(Parser, Debug)]
#[command(name = "fosnet", version, about = "Scene recognition with coherence loss and gated object fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset.
    Generate {
        /// Generator settings as JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the object network on multi-label object presence.
    PretrainObject(JobArgs),
    /// Train a scene network, optionally fused with a pretrained object network.
    Train(JobArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Average softmax over ten crops instead of scoring the whole image.
        #[arg(long)]
        ten_crop: bool,
    },
    /// Export the class activation map of one image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `[H,W,3]` image in `[0,1]` stored as a FOST tensor.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Pixels per grid cell in the PGM rendering.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Train every variant of a sweep over several seeds and summarize.
    Ablate {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Rebuild the report from checkpoints of an earlier run instead of training.
        #[arg(long)]
        report_only: bool,
    },
}

#[derive(Args, Debug)]
struct JobArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pretrained object network checkpoint for fused models.
    #[arg(long)]
    object: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sweep {
    Gamma,
    Fusion,
}

fn default_data() -> PathBuf {
    PathBuf::from("data")
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_gammas() -> Vec<f64> {
    vec![0.0, 10.0, 1.0, 0.1, 0.01, 0.001]
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobConfig {
    #[serde(default = "default_data")]
    data: PathBuf,
    #[serde(default = "default_out")]
    out: PathBuf,
    #[serde(default)]
    object_checkpoint: Option<PathBuf>,
    /// Pretrained PlacesNet whose weights initialize the scene stream.
    #[serde(default)]
    places_checkpoint: Option<PathBuf>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_gammas")]
    gammas: Vec<f64>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_job(args: &JobArgs) -> CliResult<JobConfig> {
    let mut job: JobConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => serde_json::from_str("{}").expect("every field has a default"),
    };
    if let Some(d) = &args.data {
        job.data = d.clone();
    }
    if let Some(o) = &args.out {
        job.out = o.clone();
    }
    if let Some(s) = args.seed {
        job.train.seed = s;
        job.pretrain.seed = s;
        job.seeds = vec![s];
    }
    if let Some(g) = args.gamma {
        job.train.gamma = g;
    }
    if let Some(e) = args.epochs {
        job.train.epochs = e;
        job.pretrain.epochs = e;
    }
    if let Some(o) = &args.object {
        job.object_checkpoint = Some(o.clone());
    }
    job.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if job.train.warm_start_classifier && job.places_checkpoint.is_none() {
        return Err(Failure::Usage("warm_start_classifier needs places_checkpoint".into()));
    }
    Ok(job)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io { path: path.to_path_buf(), source: e }))
}

fn object_model(job: &JobConfig, data: &Dataset, seed: u64) -> CliResult<ObjectModel> {
    if let Some(path) = &job.object_checkpoint {
        return Ok(ObjectModel::load(path)?.0);
    }
    log::info!("pretraining an object network for seed {seed}");
    let mut obj = ObjectModel::build(job.train.object_backbone(), data.spec.num_objects, seed)?;
    pretrain_object(&mut obj, data, &PretrainConfig { seed, ..job.pretrain.clone() })?;
    Ok(obj)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let spec: SyntheticSceneSpec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| Failure::Usage(format!("cannot read spec {}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::Usage(format!("invalid spec {}: {e}", path.display())))?
                }
                None => SyntheticSceneSpec::default(),
            };
            let ds = generate_dataset(&spec, seed)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} train and {} val samples to {}", ds.train.len(), ds.val.len(), out.display());
        }
        Command::PretrainObject(args) => {
            let job = load_job(&args)?;
            let data = read_dataset(&job.data)?;
            let mut obj = ObjectModel::build(job.train.object_backbone(), data.spec.num_objects, job.pretrain.seed)?;
            let log = pretrain_object(&mut obj, &data, &job.pretrain)?;
            fs::create_dir_all(&job.out).map_err(|e| Error::Io { path: job.out.clone(), source: e })?;
            obj.save(&job.out.join("object"), Some(&data.stats))?;
            write_json(&job.out.join("pretrain_log.json"), &log)?;
            if let Some(last) = log.last() {
                println!("object presence accuracy {:.4}", last.val_accuracy);
            }
        }
        Command::Train(args) => {
            let job = load_job(&args)?;
            let data = read_dataset(&job.data)?;
            let object = match job.train.fusion {
                Some(_) => Some(object_model(&job, &data, job.train.seed)?),
                None => None,
            };
            let mut net = prepare_network(&job.train, &data, object.as_ref())?;
            if let Some(path) = &job.places_checkpoint {
                warm_start(&mut net, &FosNet::load(path)?.0, &job.train)?;
            }
            let report = train(&mut net, &data, &job.train, Some(&job.out))?;
            write_json(&job.out.join("config.json"), &job)?;
            println!(
                "best epoch {}: top1 {:.4} top5 {:.4}",
                report.best_epoch, report.best.top1, report.best.top5
            );
            println!("last epoch: top1 {:.4} top5 {:.4}", report.last.top1, report.last.top5);
        }
        Command::Eval { checkpoint, data, split, ten_crop } => {
            let (net, stats) = FosNet::load(&checkpoint)?;
            let ds = read_dataset(&data)?;
            let stats: ChannelStats = stats.unwrap_or_else(|| ds.stats.clone());
            let split = match split {
                SplitArg::Train => &ds.train,
                SplitArg::Val => &ds.val,
            };
            let c = net.config.num_scenes;
            let m = if ten_crop {
                ten_crop_eval(&net, split, &stats, c)?
            } else {
                evaluate_topk(&net, split, &stats, c, 5.min(c))?
            };
            println!("{}", serde_json::to_string_pretty(&m).expect("plain data serializes"));
        }
        Command::Cam { checkpoint, image, class, out, scale } => {
            let (net, stats) = FosNet::load(&checkpoint)?;
            let img = read_tensor(&image)?;
            if img.rank() != 3 {
                return Err(Failure::Usage(format!("{} must hold an [H,W,3] image", image.display())));
            }
            if class >= net.config.num_scenes {
                return Err(Failure::Usage(format!("class {class} out of range for {} scenes", net.config.num_scenes)));
            }
            let img = match stats {
                Some(s) => s.normalize(&img)?,
                None => img,
            };
            let grid = net
                .predict(&img)?
                .grid
                .ok_or_else(|| Failure::Usage("this checkpoint has no grid head".into()))?;
            let cam = export_cam_grid(&GridScores::new(grid)?, class)?;
            let stem = format!(
                "{}_class{class}",
                image.file_stem().map_or("cam".into(), |s| s.to_string_lossy())
            );
            let (pgm, csv) = write_cam(&out, &stem, &cam, scale)?;
            println!("wrote {} and {}", pgm.display(), csv.display());
        }
        Command::Ablate { job: args, sweep, report_only } => {
            let job = load_job(&args)?;
            let data = read_dataset(&job.data)?;
            let variants: Vec<AblationVariant> = match sweep {
                Sweep::Gamma => gamma_sweep(&job.train, &job.gammas),
                Sweep::Fusion => fusion_sweep(&job.train, data.spec.num_scenes, data.spec.num_objects),
            };
            let report = if report_only {
                let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                let r = report_from_checkpoints(&job.out, &names, &job.seeds, job.train.select, &data)?;
                r.write(&job.out)?;
                r
            } else {
                ablation_run(&variants, &job.seeds, &data, |seed| object_model(&job, &data, seed).map(Some).map_err(|f| match f {
                    Failure::Runtime(e) => e,
                    Failure::Usage(m) => Error::Invalid(m),
                }), Some(&job.out))?
            };
            print!("{}", report.summary_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
