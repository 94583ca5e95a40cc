//! Command-line entry point: generate, train, eval, infer and render.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{tokenize, CommandError};
use crate::dataset::{generate_dataset, load_dataset, save_dataset, DatasetConfig, DatasetError, Split};
use crate::eval::{evaluate, infer, run_methods, EvalError, Method, Models};
use crate::geometry::Grasp5D;
use crate::model::{load_checkpoint, ModelConfig, ModelError};
use crate::pipeline::{load_models, Role};
use crate::render::{render, write_png, Overlay};
use crate::train::{train, TrainConfig, TrainError, FINAL_CHECKPOINT};

/// Environment variable that relocates relative `--out` paths.
pub const OUT_ROOT_ENV: &str = "CGNET_OUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error("{0}")]
    Render(#[from] png::EncodingError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Dataset(DatasetError::Config(_)) | CliError::Model(ModelError::Config(_)) => "config",
            CliError::Train(TrainError::Config(_)) => "config",
            CliError::Usage(_) | CliError::Eval(EvalError::UnknownMethod(_)) => "usage",
            CliError::Io { .. } | CliError::Dataset(DatasetError::Io(_)) | CliError::Model(ModelError::Io(_)) => "io",
            CliError::Dataset(_) => "data",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Command(_) => "command",
            CliError::Render(_) => "render",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

/// Every tunable of a run, one table per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml(&fs::read_to_string(p).map_err(|e| io_err(p, e))?),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "cgnet", version, about = "Command-conditioned grasp detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with optional [dataset], [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate scenes, commands and the train/test split.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network (or all three) on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Output root; each network gets a subdirectory.
        #[arg(long)]
        out: PathBuf,
        /// cgnet, agnostic, retrieval or all.
        #[arg(long, default_value = "cgnet")]
        role: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Score methods on a split and write the comparison table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding cgnet/, agnostic/ and retrieval/ checkpoints.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "cgnet")]
        methods: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the no-target rejection rate of each method.
        #[arg(long)]
        nt: bool,
    },
    /// Run one command on one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        command: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Annotated PNG to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw top-k predictions (or ground truth without --models) as PNGs.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value = "cgnet")]
        methods: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Relative outputs go under the override root when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(())
}

fn load_ds(path: &Path) -> Result<crate::dataset::Dataset, CliError> {
    load_dataset(path).map_err(|e| match e {
        DatasetError::Io(source) => io_err(path, source),
        other => other.into(),
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Generate { common, out } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?.dataset;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let (ds, stats) = generate_dataset(&cfg)?;
            let out = resolve_out(&out);
            ensure_parent(&out)?;
            save_dataset(&ds, &out).map_err(|e| match e {
                DatasetError::Io(source) => io_err(&out, source),
                other => other.into(),
            })?;
            let total = stats.have_target + stats.no_target;
            println!("scenes: {} (train {}, test {})", ds.scenes.len(), ds.train_scenes.len(), ds.test_scenes.len());
            println!("have-target: {}", stats.have_target);
            println!(
                "no-target: {} ({:.1}%)",
                stats.no_target,
                100.0 * stats.no_target as f64 / total.max(1) as f64
            );
            println!("wrote {}", out.display());
        }
        Cmd::Train { common, dataset, out, role, resume, iterations } => {
            let rc = RunConfig::load(common.config.as_deref())?;
            let mut tc = rc.train;
            if let Some(s) = common.seed {
                tc.seed = s;
            }
            if let Some(n) = iterations {
                tc.iterations = n;
            }
            let roles: Vec<Role> = if role == "all" {
                Role::ALL.to_vec()
            } else {
                vec![role.parse().map_err(CliError::Usage)?]
            };
            if resume.is_some() && roles.len() != 1 {
                return Err(CliError::Usage("--resume needs a single --role".into()));
            }
            let ds = load_ds(&dataset)?;
            let root = resolve_out(&out);
            for r in roles {
                let dir = r.dir(&root);
                let ck = resume.as_deref().map(load_checkpoint).transpose()?;
                let res = train(&ds, &r.model_config(&rc.model), &r.train_config(&tc), Some(&dir), ck)?;
                let first = res.history.first().map(|h| h.parts.total());
                let last = res.history.last().map(|h| h.parts.total());
                if let (Some(a), Some(b)) = (first, last) {
                    println!("{}: loss {a:.4} -> {b:.4} over {} iterations", r.name(), res.history.len());
                }
                println!("wrote {}", dir.join(FINAL_CHECKPOINT).display());
            }
        }
        Cmd::Eval { common, dataset, models, methods, split, out, nt } => {
            let methods = Method::parse_list(&methods)?;
            if methods.is_empty() {
                return Err(CliError::Usage("no methods given".into()));
            }
            let _ = RunConfig::load(common.config.as_deref())?;
            let ds = load_ds(&dataset)?;
            let m = load_models(&models)?;
            let report = evaluate(&ds, &m, &methods, split, common.seed.unwrap_or(0))?;
            print!("{}", report.to_table());
            println!("chance floor: {:.1}", 100.0 * report.chance_floor);
            if nt {
                for r in &report.rows {
                    println!("{} no-target rejection: {:.1}% of {}", r.method, 100.0 * r.nt_rejection, r.no_target);
                }
            }
            if let Some(o) = out {
                let o = resolve_out(&o);
                report.write(&o).map_err(|e| match e {
                    EvalError::Io(source) => io_err(&o, source),
                    other => other.into(),
                })?;
            }
        }
        Cmd::Infer { checkpoint, dataset, scene, command, top_k, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_ds(&dataset)?;
            let sc = ds
                .scenes
                .get(scene)
                .ok_or_else(|| CliError::Usage(format!("scene {scene} out of range (dataset has {})", ds.scenes.len())))?;
            let words: Vec<&str> = command.split_whitespace().collect();
            let tokens = tokenize(&words, &ck.vocab)?;
            let dets = infer(&sc.image, &tokens, &ck.weights)?;
            if dets.is_empty() {
                println!("no grasp");
            }
            for d in dets.iter().take(top_k) {
                let g = &d.grasp;
                println!(
                    "x={:.1} y={:.1} theta={:.3} w={:.1} h={:.1} score={:.3}",
                    g.x(),
                    g.y(),
                    g.theta(),
                    g.w(),
                    g.h(),
                    d.score
                );
            }
            if let Some(o) = out {
                let o = resolve_out(&o);
                ensure_parent(&o)?;
                let overlay = Overlay { grasps: dets.iter().take(top_k).map(|d| d.grasp).collect(), region: None };
                write_png(&render(&sc.image, &overlay), &o)?;
            }
        }
        Cmd::Render { common, dataset, models, methods, split, top_k, limit, out } => {
            let methods = Method::parse_list(&methods)?;
            let ds = load_ds(&dataset)?;
            let root = resolve_out(&out);
            match models {
                None => {
                    let dir = root.join("ground_truth");
                    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                    for &si in ds.sample_indices(split).iter().take(limit) {
                        let s = &ds.samples[si];
                        let grasps: Vec<Grasp5D> = s.target_grasps().into_iter().take(top_k).collect();
                        let img = render(&ds.scenes[s.scene].image, &Overlay { grasps, region: None });
                        write_png(&img, &dir.join(format!("sample_{si:05}.png")))?;
                    }
                }
                Some(mroot) => {
                    let m: Models = load_models(&mroot)?;
                    let (outputs, _) = run_methods(&ds, &m, &methods, split, common.seed.unwrap_or(0))?;
                    for (method, dets) in &outputs.detections {
                        let dir = root.join(method.name());
                        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                        for (p, &si) in outputs.samples.iter().enumerate().take(limit) {
                            let region = matches!(method, Method::RetGr | Method::CgRet)
                                .then(|| outputs.retrieval[p])
                                .flatten();
                            let grasps = dets[p].iter().take(top_k).map(|d| d.grasp).collect();
                            let img = render(&ds.scenes[ds.samples[si].scene].image, &Overlay { grasps, region });
                            write_png(&img, &dir.join(format!("sample_{si:05}.png")))?;
                        }
                    }
                }
            }
            println!("wrote {}", root.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, and map failures to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
