use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use etc_core::data::{generate_dataset, Dataset, GeneratorConfig};
use etc_core::evidence::DirichletField;
use etc_core::fusion::ds_combine;
use etc_core::model::{TriBranchNet, BRANCHES};
use etc_core::trainer::{
    evaluate, resolve_config, run_training, RunOptions, TrainConfig, ENSEMBLE,
};
use etc_core::{EtcError, Result, Tensor};

use crate::pgm;

pub const THREADS_ENV: &str = "ETC_NUM_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "etc",
    version,
    about = "Evidential tri-branch semi-supervised segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Render a synthetic segmentation dataset.
    GenerateData(ConfigArgs),
    /// Train the three-branch network (resumes from a checkpoint if present).
    Train(ConfigArgs),
    /// Evaluate saved weights on the test dataset.
    Eval(EvalArgs),
    /// Dempster-Shafer fusion of two evidence tensors of shape (K,H,W).
    Fuse(FuseArgs),
    /// Write per-branch uncertainty maps of one sample as 8-bit PGM files.
    UncertaintyMap(UncertaintyArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON config file; keys not given fall back to their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs (after all other flags).
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Weight file; defaults to `<output_dir>/weights.bin`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct FuseArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output directory for `u_ecb.pgm`, `u_epb.pgm`, `u_efb.pgm`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Flat config of `generate-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            output_dir: PathBuf::from("data/train"),
            seed: g.seed,
            n: g.n,
            height: g.height,
            width: g.width,
            classes: g.classes,
            noise_sigma: g.noise_sigma,
            blur_radius: g.blur_radius,
        }
    }
}

impl GenerateConfig {
    fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            n: self.n,
            height: self.height,
            width: self.width,
            classes: self.classes,
            noise_sigma: self.noise_sigma,
            blur_radius: self.blur_radius,
        }
    }
}

fn keys_help<T: Serialize + Default>() -> String {
    let v = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut out =
        String::from("Config keys (JSON file or `--key value` overrides) and defaults:\n");
    for (k, v) in v.as_object().expect("object") {
        out.push_str(&format!("  {k:<18} {v}\n"));
    }
    out
}

pub fn command() -> clap::Command {
    let keys = keys_help::<TrainConfig>();
    let env =
        format!("\nEnvironment:\n  {THREADS_ENV}  worker threads for evaluation (default 1)\n");
    Cli::command()
        .mut_subcommand("generate-data", |c| {
            c.after_help(keys_help::<GenerateConfig>())
        })
        .mut_subcommand("train", |c| c.after_help(format!("{keys}{env}")))
        .mut_subcommand("eval", |c| c.after_help(format!("{keys}{env}")))
}

/// Sizes the global worker pool from `ETC_NUM_THREADS` (default 1).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                EtcError::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| EtcError::Config(format!("{THREADS_ENV}: {e}")))
}

/// Parses `--key value` and `--key=value` pairs; dashes in keys become
/// underscores.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| EtcError::Config(format!("expected `--key value`, got {tok:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| EtcError::Config(format!("override `--{key}` has no value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn resolve<T>(args: &ConfigArgs) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    resolve_config(args.config.as_deref(), &parse_overrides(&args.overrides)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> EtcError {
    EtcError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData(args) => {
            let cfg: GenerateConfig = resolve(&args)?;
            generate_dataset(&cfg.output_dir, &cfg.generator())?;
            write_json(&cfg.output_dir.join("config.resolved.json"), &cfg)?;
            println!(
                "{}",
                json!({ "output_dir": cfg.output_dir, "samples": cfg.n })
            );
            Ok(())
        }
        Cmd::Train(args) => {
            let cfg: TrainConfig = resolve(&args)?;
            let summary = run_training(&cfg, RunOptions::default())?;
            let last = summary
                .evaluations
                .last()
                .map(|(t, ev)| json!({ "t": t, "ensemble_dsc": ev.report.mean_dsc(ENSEMBLE) }));
            println!(
                "{}",
                json!({
                    "output_dir": cfg.output_dir,
                    "iterations": summary.state.t,
                    "resumed_from": summary.resumed_from,
                    "conflict_overflows": summary.state.conflict_overflows,
                    "last_evaluation": last,
                })
            );
            Ok(())
        }
        Cmd::Eval(args) => {
            let cfg: TrainConfig = resolve(&args.cfg)?;
            let test_dir = cfg
                .test_dataset
                .clone()
                .ok_or_else(|| EtcError::Config("test_dataset: required for eval".into()))?;
            let weights = args
                .weights
                .unwrap_or_else(|| cfg.output_dir.join("weights.bin"));
            let net = TriBranchNet::load(&weights)?;
            let test = Dataset::load(&test_dir)?;
            let ev = evaluate(&net, &test)?;
            write_json(&cfg.output_dir.join("config.resolved.json"), &cfg)?;
            let report = ev.to_json();
            write_json(&cfg.output_dir.join("eval.json"), &report)?;
            println!("{report}");
            Ok(())
        }
        Cmd::Fuse(args) => {
            let a = DirichletField::from_evidence(&Tensor::load(&args.a)?)?;
            let b = DirichletField::from_evidence(&Tensor::load(&args.b)?)?;
            let fused = ds_combine(&a, &b)?;
            fused.prob.save(&args.out)?;
            let mut record = args.out.clone().into_os_string();
            record.push(".config.json");
            write_json(Path::new(&record), &args)?;
            println!(
                "{}",
                json!({ "out": args.out, "conflict_overflows": fused.conflict_overflows })
            );
            Ok(())
        }
        Cmd::UncertaintyMap(args) => {
            let net = TriBranchNet::load(&args.weights)?;
            let data = Dataset::load(&args.dataset)?;
            let sample = data.samples.get(args.index).ok_or_else(|| {
                EtcError::Config(format!(
                    "index: {} out of range for {} samples",
                    args.index,
                    data.samples.len()
                ))
            })?;
            let (h, w) = (data.meta.height, data.meta.width);
            let evidence = net.infer(&sample.image.clone().reshape(&[1, 1, h, w])?)?;
            fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
            let mut files = Vec::new();
            for (name, e) in BRANCHES.iter().zip(&evidence) {
                let u = DirichletField::from_evidence(e)?.uncertainty;
                let path = args.out.join(format!("u_{name}.pgm"));
                pgm::write_unit_map(&path, u.data(), h, w).map_err(|e| io_err(&path, e))?;
                files.push(path);
            }
            write_json(&args.out.join("config.resolved.json"), &args)?;
            println!("{}", json!({ "files": files }));
            Ok(())
        }
    }
}
