//! Semi-supervised training loop, checkpointing and evaluation.
//!
//! One step runs the shared encoder and all three decoders on a batch of
//! `batch_labeled` labeled plus `batch_unlabeled` unlabeled images, assembles
//! [`total_loss`] and applies SGD with momentum:
//!
//! ```text
//! v <- momentum * v + grad
//! w <- w - lr(t) * v,     lr(t) = lr0 * (1 - t / iterations)^poly_power
//! ```
//!
//! Output directory layout: `config.resolved.json`, `loss.csv`,
//! `metrics.jsonl`, `weights.bin` (final) and `checkpoint/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Graph;
use crate::data::{split, BatchSampler, Dataset, SegBatch};
use crate::error::{EtcError, Result};
use crate::evidence::{argmax_classes, DirichletField};
use crate::losses::{total_loss, LossBundle, Schedule};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{TriBranchNet, BRANCHES};
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "t,lr,lambda,lambda_kl,l_ecb,l_epb,l_cs12,l_cs21,l_efb,l_total";
pub const ENSEMBLE: &str = "ensemble";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    /// Ramp-up length for the unsupervised weight; `None` means `iterations`.
    pub t_max: Option<u64>,
    pub w_max: f64,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub classes: usize,
    pub widths: [usize; 3],
    pub dataset: PathBuf,
    pub test_dataset: Option<PathBuf>,
    pub labeled_fraction: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Fixed unsupervised weight; `Some(0.0)` gives supervised-only training.
    pub lambda_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            iterations: 2000,
            t_max: None,
            w_max: 0.1,
            lr0: 0.1,
            poly_power: 0.9,
            momentum: 0.9,
            batch_labeled: 2,
            batch_unlabeled: 2,
            classes: 3,
            widths: [16, 32, 64],
            dataset: PathBuf::from("data/train"),
            test_dataset: Some(PathBuf::from("data/test")),
            labeled_fraction: 0.1,
            eval_every: 500,
            checkpoint_every: 250,
            output_dir: PathBuf::from("runs/etc"),
            lambda_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(EtcError::Config(format!("{key}: {why}")));
        if self.iterations == 0 {
            return bad("iterations", "must be > 0".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return bad(
                "labeled_fraction",
                format!("must be in (0,1), got {}", self.labeled_fraction),
            );
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(
                "momentum",
                format!("must be in [0,1), got {}", self.momentum),
            );
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return bad(
                "poly_power",
                format!("must be >= 0, got {}", self.poly_power),
            );
        }
        if !(self.w_max >= 0.0 && self.w_max.is_finite()) {
            return bad("w_max", format!("must be >= 0, got {}", self.w_max));
        }
        if self
            .lambda_override
            .is_some_and(|l| !(l >= 0.0 && l.is_finite()))
        {
            return bad("lambda_override", "must be finite and >= 0".into());
        }
        if self.t_max == Some(0) {
            return bad("t_max", "must be > 0".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled", "must be > 0".into());
        }
        if self.classes < 2 {
            return bad("classes", format!("must be >= 2, got {}", self.classes));
        }
        if self.widths.contains(&0) {
            return bad("widths", "must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be > 0".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be > 0".into());
        }
        Ok(())
    }

    pub fn t_max(&self) -> u64 {
        self.t_max.unwrap_or(self.iterations)
    }

    /// Poly-decayed learning rate before step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        let frac = (t.min(self.iterations) as f64) / self.iterations as f64;
        self.lr0 * (1.0 - frac).powf(self.poly_power)
    }
}

/// Builds a config from its defaults, an optional JSON file, then
/// `key=value` overrides (values parsed as JSON, else taken as strings).
/// Unknown keys are rejected by name.
pub fn resolve_config<T>(file: Option<&Path>, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    let known: Vec<String> = value
        .as_object()
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default();
    let obj = value.as_object_mut().expect("config is a JSON object");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| EtcError::io(path, e))?;
        let from_file: Value = serde_json::from_str(&text)
            .map_err(|e| EtcError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(entries) = from_file else {
            return Err(EtcError::Config(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        for (k, v) in entries {
            if !known.contains(&k) {
                return Err(EtcError::Config(format!(
                    "unknown config key `{k}` in {}",
                    path.display()
                )));
            }
            obj.insert(k, v);
        }
    }
    for (k, raw) in overrides {
        if !known.contains(k) {
            return Err(EtcError::Config(format!("unknown config key `{k}`")));
        }
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        obj.insert(k.clone(), v);
    }
    serde_json::from_value(value).map_err(|e| EtcError::Config(e.to_string()))
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub lr: f64,
    pub bundle: LossBundle,
    pub conflict_overflows: usize,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let b = &self.bundle;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.lr,
            b.lambda,
            b.lambda_kl,
            b.l_ecb,
            b.l_epb,
            b.l_cs12,
            b.l_cs21,
            b.l_efb,
            b.l_total
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    t: u64,
    sampler: BatchSampler,
    conflict_overflows: u64,
    checkpoints_written: u64,
}

/// Everything needed to continue training bitwise-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: TriBranchNet,
    /// Number of completed optimizer steps.
    pub t: u64,
    pub velocity: Vec<Tensor>,
    pub sampler: BatchSampler,
    pub conflict_overflows: u64,
    pub checkpoints_written: u64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        if data.meta.classes != cfg.classes {
            return Err(EtcError::Config(format!(
                "classes: config says {}, dataset has {}",
                cfg.classes, data.meta.classes
            )));
        }
        let net = TriBranchNet::init(cfg.seed, cfg.classes, cfg.widths)?;
        let (labeled, unlabeled) = split(data.samples.len(), cfg.labeled_fraction, cfg.seed)?;
        let sampler = BatchSampler::new(
            labeled,
            unlabeled,
            cfg.batch_labeled,
            cfg.batch_unlabeled,
            cfg.seed,
        )?;
        let velocity = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Self {
            net,
            t: 0,
            velocity,
            sampler,
            conflict_overflows: 0,
            checkpoints_written: 0,
        })
    }

    /// Writes the checkpoint atomically: a temporary directory is filled,
    /// then renamed over the previous one.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.checkpoints_written += 1;
        let tmp = dir.with_extension("tmp");
        let old = dir.with_extension("old");
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp).map_err(|e| EtcError::io(&tmp, e))?;
        self.net.save(&tmp.join("weights.bin"))?;
        let mut buf = Vec::new();
        for v in &self.velocity {
            v.write_etns(&mut buf).expect("vec write");
        }
        let vpath = tmp.join("velocity.etns");
        fs::write(&vpath, buf).map_err(|e| EtcError::io(&vpath, e))?;
        let meta = StateMeta {
            t: self.t,
            sampler: self.sampler.clone(),
            conflict_overflows: self.conflict_overflows,
            checkpoints_written: self.checkpoints_written,
        };
        let spath = tmp.join("state.json");
        fs::write(
            &spath,
            serde_json::to_string_pretty(&meta).expect("state serializes"),
        )
        .map_err(|e| EtcError::io(&spath, e))?;
        let _ = fs::remove_dir_all(&old);
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| EtcError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| EtcError::io(dir, e))?;
        let _ = fs::remove_dir_all(&old);
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let net = TriBranchNet::load(&dir.join("weights.bin"))?;
        let vpath = dir.join("velocity.etns");
        let bytes = fs::read(&vpath).map_err(|e| EtcError::io(&vpath, e))?;
        let mut reader = &bytes[..];
        let mut velocity = Vec::new();
        while let Some(t) = Tensor::read_etns(&mut reader)? {
            velocity.push(t);
        }
        let shapes_match = velocity.len() == net.params().len()
            && velocity
                .iter()
                .zip(net.params())
                .all(|(v, p)| v.shape() == p.value.shape());
        if !shapes_match {
            return Err(EtcError::Format(format!(
                "{}: velocity does not match weights",
                vpath.display()
            )));
        }
        let spath = dir.join("state.json");
        let text = fs::read_to_string(&spath).map_err(|e| EtcError::io(&spath, e))?;
        let meta: StateMeta = serde_json::from_str(&text)
            .map_err(|e| EtcError::Format(format!("{}: {e}", spath.display())))?;
        Ok(Self {
            net,
            t: meta.t,
            velocity,
            sampler: meta.sampler,
            conflict_overflows: meta.conflict_overflows,
            checkpoints_written: meta.checkpoints_written,
        })
    }
}

/// One forward/backward pass and SGD update.
pub fn train_step(
    state: &mut TrainState,
    batch: &SegBatch,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let t = state.t;
    let lr = cfg.lr(t);
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let (out, params) = state.net.forward(&mut g, x, t).map_err(|e| match e {
        EtcError::Numeric { iteration, message } => EtcError::Numeric {
            iteration,
            message: format!("{message}, lr={lr}"),
        },
        other => other,
    })?;
    let schedule = Schedule {
        t,
        t_max: cfg.t_max(),
        w_max: cfg.w_max,
        lambda_override: cfg.lambda_override,
    };
    let y = batch.labeled_onehot()?;
    let obj = total_loss(&mut g, out.evidence, &y, batch.n_labeled(), schedule)?;
    let b = obj.bundle;
    if !b.is_finite() {
        return Err(EtcError::Numeric {
            iteration: t,
            message: format!(
                "non-finite loss (l_ecb={}, l_epb={}, l_cs12={}, l_cs21={}, l_efb={}, l_total={}), lr={lr}",
                b.l_ecb, b.l_epb, b.l_cs12, b.l_cs21, b.l_efb, b.l_total
            ),
        });
    }
    let mut grads = g.backward(obj.total)?;
    for ((p, var), v) in state
        .net
        .params_mut()
        .iter_mut()
        .zip(params)
        .zip(state.velocity.iter_mut())
    {
        let vel = v.data_mut();
        if let Some(gr) = grads.take(var) {
            for (vi, gi) in vel.iter_mut().zip(&gr) {
                *vi = cfg.momentum * *vi + gi;
            }
        } else {
            vel.iter_mut().for_each(|vi| *vi *= cfg.momentum);
        }
        for (w, vi) in p.value.data_mut().iter_mut().zip(vel.iter()) {
            *w -= lr * vi;
        }
        if !p.value.is_finite() {
            return Err(EtcError::Numeric {
                iteration: t,
                message: format!("parameter {} became non-finite, lr={lr}", p.name),
            });
        }
    }
    state.t += 1;
    state.conflict_overflows += obj.conflict_overflows as u64;
    Ok(StepRecord {
        t,
        lr,
        bundle: b,
        conflict_overflows: obj.conflict_overflows,
    })
}

/// Mean `u` over correctly and incorrectly classified pixels; `None` when
/// the corresponding pixel set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySplit {
    pub on_correct: Option<f64>,
    pub on_wrong: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct SplitAcc {
    correct: (f64, usize),
    wrong: (f64, usize),
}

impl SplitAcc {
    fn add(&mut self, pred: &[usize], truth: &[usize], u: &[f64]) {
        for ((&p, &t), &uu) in pred.iter().zip(truth).zip(u) {
            let slot = if p == t {
                &mut self.correct
            } else {
                &mut self.wrong
            };
            slot.0 += uu;
            slot.1 += 1;
        }
    }

    fn finish(&self) -> UncertaintySplit {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        UncertaintySplit {
            on_correct: mean(self.correct),
            on_wrong: mean(self.wrong),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per branch (`ecb`, `epb`, `efb`).
    pub uncertainty: BTreeMap<String, UncertaintySplit>,
}

impl Evaluation {
    pub fn to_json(&self) -> Value {
        json!({ "report": self.report.to_json(), "uncertainty": self.uncertainty })
    }
}

/// Per-sample predictions of the three branches plus the ensemble, and the
/// branch uncertainty maps.
struct SamplePrediction {
    labels: [Vec<usize>; 4],
    uncertainty: [Vec<f64>; 3],
}

fn predict_sample(net: &TriBranchNet, image: &Tensor) -> Result<SamplePrediction> {
    let shape = image.shape();
    let x = image.clone().reshape(&[1, 1, shape[1], shape[2]])?;
    predictions_from_evidence(&net.infer(&x)?)
}

fn predictions_from_evidence(evidence: &[Tensor; 3]) -> Result<SamplePrediction> {
    let fields = evidence
        .iter()
        .map(DirichletField::from_evidence)
        .collect::<Result<Vec<_>>>()?;
    let mut mean = fields[0].prob.clone();
    for f in &fields[1..] {
        for (m, p) in mean.data_mut().iter_mut().zip(f.prob.data()) {
            *m += p;
        }
    }
    mean.data_mut().iter_mut().for_each(|m| *m /= 3.0);
    Ok(SamplePrediction {
        labels: [
            argmax_classes(&fields[0].prob)?,
            argmax_classes(&fields[1].prob)?,
            argmax_classes(&fields[2].prob)?,
            argmax_classes(&mean)?,
        ],
        uncertainty: [
            fields[0].uncertainty.data().to_vec(),
            fields[1].uncertainty.data().to_vec(),
            fields[2].uncertainty.data().to_vec(),
        ],
    })
}

/// Full-image evaluation of every branch and the ensemble (argmax of the
/// mean expected probability). Samples may be processed in parallel; the
/// aggregation order is fixed.
pub fn evaluate(net: &TriBranchNet, data: &Dataset) -> Result<Evaluation> {
    let (h, w, k) = (data.meta.height, data.meta.width, data.meta.classes);
    if k != net.classes() {
        return Err(EtcError::Config(format!(
            "classes: network has {}, dataset has {k}",
            net.classes()
        )));
    }
    let preds = data
        .samples
        .par_iter()
        .map(|s| predict_sample(net, &s.image))
        .collect::<Vec<_>>();
    let names = [BRANCHES[0], BRANCHES[1], BRANCHES[2], ENSEMBLE];
    let mut accs: Vec<MetricAccumulator> =
        names.iter().map(|_| MetricAccumulator::new(k)).collect();
    let mut splits = vec![SplitAcc::default(); 3];
    for (pred, sample) in preds.into_iter().zip(&data.samples) {
        let pred = pred?;
        for (acc, labels) in accs.iter_mut().zip(&pred.labels) {
            acc.add(labels, &sample.label, h, w)?;
        }
        for (b, split) in splits.iter_mut().enumerate() {
            split.add(&pred.labels[b], &sample.label, &pred.uncertainty[b]);
        }
    }
    let branches = names
        .iter()
        .zip(&accs)
        .map(|(n, a)| (n.to_string(), a.finish()))
        .collect();
    let excluded_surface_cases = accs.iter().map(|a| a.excluded()).sum();
    let uncertainty = BRANCHES
        .iter()
        .zip(&splits)
        .map(|(n, s)| (n.to_string(), s.finish()))
        .collect();
    Ok(Evaluation {
        report: MetricReport {
            branches,
            excluded_surface_cases,
        },
        uncertainty,
    })
}

/// Mean `u` on correct versus wrong pixels for each branch.
pub fn mean_uncertainty_split(
    net: &TriBranchNet,
    data: &Dataset,
) -> Result<BTreeMap<String, UncertaintySplit>> {
    Ok(evaluate(net, data)?.uncertainty)
}

/// Runtime controls that are not part of the reproducible configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop (after checkpointing) once this many steps are complete,
    /// as if the run had been interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: TrainState,
    /// Steps executed by this invocation.
    pub records: Vec<StepRecord>,
    /// `(t, evaluation)` pairs produced by this invocation.
    pub evaluations: Vec<(u64, Evaluation)>,
    pub resumed_from: Option<u64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| EtcError::io(path, e))
}

/// Keeps the header plus the first `rows` lines.
fn truncate_lines(path: &Path, keep: impl Fn(usize, &str) -> bool) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| EtcError::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if keep(i, line) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| EtcError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| EtcError::io(path, e))
}

/// Trains until `cfg.iterations`, resuming from `output_dir/checkpoint` when
/// present.
pub fn run_training(cfg: &TrainConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| EtcError::io(out, e))?;
    write_text(
        &out.join("config.resolved.json"),
        &serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    let mut train = Dataset::load(&cfg.dataset)?;
    let test = cfg.test_dataset.as_deref().map(Dataset::load).transpose()?;

    let ckpt = out.join("checkpoint");
    let loss_path = out.join("loss.csv");
    let metrics_path = out.join("metrics.jsonl");
    let (mut state, resumed_from) = if ckpt.join("state.json").exists() {
        let s = TrainState::load_checkpoint(&ckpt)?;
        let t = s.t;
        truncate_lines(&loss_path, |i, _| i as u64 <= t)?;
        if metrics_path.exists() {
            truncate_lines(&metrics_path, |_, line| {
                serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v["t"].as_u64())
                    .is_some_and(|et| et <= t)
            })?;
        }
        log::info!("resuming from step {t}");
        (s, Some(t))
    } else {
        write_text(&loss_path, &format!("{LOSS_CSV_HEADER}\n"))?;
        write_text(&metrics_path, "")?;
        (TrainState::fresh(cfg, &train)?, None)
    };
    if state.net.classes() != cfg.classes || state.net.widths() != cfg.widths {
        return Err(EtcError::Config(
            "checkpoint architecture differs from config".into(),
        ));
    }
    let (labeled, _) = split(train.samples.len(), cfg.labeled_fraction, cfg.seed)?;
    train.mark_labeled(&labeled);

    let mut records = Vec::new();
    let mut evaluations = Vec::new();
    while state.t < cfg.iterations {
        let batch = state.sampler.next_batch(&train)?;
        let rec = train_step(&mut state, &batch, cfg)?;
        append(&loss_path, &rec.csv_row())?;
        records.push(rec);
        let t = state.t;
        if t % cfg.eval_every == 0 || t == cfg.iterations {
            if let Some(test) = &test {
                let ev = evaluate(&state.net, test)?;
                let mut line = ev.to_json();
                line["t"] = json!(t);
                append(&metrics_path, &line.to_string())?;
                log::info!(
                    "t={t} ensemble dsc={:.4}",
                    ev.report.mean_dsc(ENSEMBLE).unwrap_or(f64::NAN)
                );
                evaluations.push((t, ev));
            }
        }
        let stop = opts.stop_after.is_some_and(|s| t >= s);
        if t % cfg.checkpoint_every == 0 || t == cfg.iterations || stop {
            state.save_checkpoint(&ckpt)?;
        }
        if stop && t < cfg.iterations {
            return Ok(RunSummary {
                state,
                records,
                evaluations,
                resumed_from,
            });
        }
    }
    state.net.save(&out.join("weights.bin"))?;
    Ok(RunSummary {
        state,
        records,
        evaluations,
        resumed_from,
    })
}
