//! Mini-batch training with attribution alignment, best-checkpoint selection on
//! validation worst-group accuracy, the plain ERM baseline, and the JTT hybrid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use super_autograd::{Graph, Tensor, Var};

use crate::attribution::gradcam_batch;
use crate::data::{GroupedDataset, Image, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::guidance::GuidanceTable;
use crate::kv::KeyValues;
use crate::losses::{tape, LossBreakdown, LossWeights};
use crate::model::{Head, ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchReduction {
    Sum,
    Mean,
}

impl FromStr for BatchReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(BatchReduction::Sum),
            "mean" => Ok(BatchReduction::Mean),
            other => Err(Error::Config(format!("batch_reduction must be `sum` or `mean`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for BatchReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchReduction::Sum => "sum",
            BatchReduction::Mean => "mean",
        })
    }
}

/// `λ3`, either absolute or as a constant divided by the head-1 parameter count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda3 {
    Absolute(f64),
    PerHeadParameter(f64),
}

impl Lambda3 {
    pub fn resolve(self, n1: usize) -> f64 {
        match self {
            Lambda3::Absolute(v) => v,
            Lambda3::PerHeadParameter(c) => c / n1 as f64,
        }
    }
}

impl FromStr for Lambda3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("lambda3 must be a number or `<number>/n1`, got `{s}`"));
        match s.trim().split_once('/') {
            Some((c, n)) if n.trim() == "n1" => Ok(Lambda3::PerHeadParameter(c.trim().parse().map_err(|_| bad())?)),
            Some(_) => Err(bad()),
            None => Ok(Lambda3::Absolute(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

impl std::fmt::Display for Lambda3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Lambda3::Absolute(v) => write!(f, "{v}"),
            Lambda3::PerHeadParameter(c) => write!(f, "{c}/n1"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JttConfig {
    pub id_epochs: usize,
    pub id_lr: f64,
    pub upweight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: Lambda3,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Provider tag, `oracle` or `vlm`.
    pub guidance: String,
    pub superclass: String,
    pub n_prompts: usize,
    pub corruption: f64,
    pub latent_half: usize,
    pub batch_reduction: BatchReduction,
    pub detach_alpha: bool,
    pub jtt: Option<JttConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            lambda1: 1.0,
            lambda2: 40.0,
            lambda3: Lambda3::PerHeadParameter(1000.0),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            weight_decay: 1e-4,
            seed: 0,
            guidance: "oracle".into(),
            superclass: "shape".into(),
            n_prompts: 1,
            corruption: 0.0,
            latent_half: 16,
            batch_reduction: BatchReduction::Sum,
            detach_alpha: false,
            jtt: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 19] = [
    "beta",
    "lambda1",
    "lambda2",
    "lambda3",
    "learning_rate",
    "batch_size",
    "epochs",
    "weight_decay",
    "seed",
    "guidance",
    "superclass",
    "n_prompts",
    "corruption",
    "d",
    "batch_reduction",
    "detach_alpha",
    "jtt_id_epochs",
    "jtt_id_lr",
    "jtt_upweight",
];

impl TrainConfig {
    /// Unset keys keep their defaults. The three `jtt_*` keys go together.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&CONFIG_KEYS)?;
        let d = TrainConfig::default();
        let jtt_keys = ["jtt_id_epochs", "jtt_id_lr", "jtt_upweight"];
        let present = jtt_keys.iter().filter(|k| kv.contains(k)).count();
        let jtt = match present {
            0 => None,
            3 => Some(JttConfig {
                id_epochs: kv.require("jtt_id_epochs")?,
                id_lr: kv.require("jtt_id_lr")?,
                upweight: kv.require("jtt_upweight")?,
            }),
            _ => return Err(Error::Config("jtt_id_epochs, jtt_id_lr and jtt_upweight must be given together".into())),
        };
        let cfg = TrainConfig {
            beta: kv.parse_or("beta", d.beta)?,
            lambda1: kv.parse_or("lambda1", d.lambda1)?,
            lambda2: kv.parse_or("lambda2", d.lambda2)?,
            lambda3: kv.parse_or("lambda3", d.lambda3)?,
            learning_rate: kv.parse_or("learning_rate", d.learning_rate)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            seed: kv.parse_or("seed", d.seed)?,
            guidance: kv.parse_or("guidance", d.guidance)?,
            superclass: kv.parse_or("superclass", d.superclass)?,
            n_prompts: kv.parse_or("n_prompts", d.n_prompts)?,
            corruption: kv.parse_or("corruption", d.corruption)?,
            latent_half: kv.parse_or("d", d.latent_half)?,
            batch_reduction: kv.parse_or("batch_reduction", d.batch_reduction)?,
            detach_alpha: kv.parse_or("detach_alpha", d.detach_alpha)?,
            jtt,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("beta", self.beta);
        kv.set("lambda1", self.lambda1);
        kv.set("lambda2", self.lambda2);
        kv.set("lambda3", self.lambda3);
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("weight_decay", self.weight_decay);
        kv.set("seed", self.seed);
        kv.set("guidance", &self.guidance);
        kv.set("superclass", &self.superclass);
        kv.set("n_prompts", self.n_prompts);
        kv.set("corruption", self.corruption);
        kv.set("d", self.latent_half);
        kv.set("batch_reduction", self.batch_reduction);
        kv.set("detach_alpha", self.detach_alpha);
        if let Some(j) = self.jtt {
            kv.set("jtt_id_epochs", j.id_epochs);
            kv.set("jtt_id_lr", j.id_lr);
            kv.set("jtt_upweight", j.upweight);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.latent_half == 0 {
            return bad("batch_size, epochs and d must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.corruption) {
            return bad(format!("corruption must lie in [0, 1), got {}", self.corruption));
        }
        if !["oracle", "vlm"].contains(&self.guidance.as_str()) {
            return bad(format!("guidance must be `oracle` or `vlm`, got `{}`", self.guidance));
        }
        self.weights(1).validate()?;
        if let Some(j) = self.jtt {
            if j.id_epochs == 0 || !(j.id_lr > 0.0) || !(j.upweight >= 1.0) {
                return bad("jtt needs id_epochs ≥ 1, id_lr > 0 and upweight ≥ 1".into());
            }
        }
        Ok(())
    }

    pub fn weights(&self, n1: usize) -> LossWeights {
        LossWeights { beta: self.beta, lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3.resolve(n1) }
    }

    pub fn model_config(&self, ds: &GroupedDataset) -> Result<ModelConfig> {
        let (h, w) = ds.image_size().ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
        let cfg = ModelConfig::desk(h, w, self.latent_half, ds.n_classes());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, tensors: &[Tensor]) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Updates the tensors at `indices` with the matching gradients.
    pub fn step(&mut self, tensors: &mut [Tensor], indices: &[usize], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&i, grad) in indices.iter().zip(grads) {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in tensors[i].data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the loss log. Columns that do not apply are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub ce1: f64,
    pub ce2: Option<f64>,
    pub beta: Option<f64>,
    pub att: Option<f64>,
    pub reg: Option<f64>,
    pub total: f64,
}

pub const LOG_HEADER: &str = "epoch,batch,ce1,ce2,beta,att,reg,total";

pub fn format_loss_log(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            r.ce1,
            opt(r.ce2),
            opt(r.beta),
            opt(r.att),
            opt(r.reg),
            r.total
        );
    }
    out
}

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    fs::write(path, format_loss_log(rows)).map_err(Error::io(path))
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Parameters of the best epoch.
    pub params: ModelParams,
    /// Number of epochs run.
    pub epoch: usize,
    pub best_val_wga: f64,
    /// 1-based epoch of the best checkpoint.
    pub best_epoch: usize,
    /// Validation report per epoch.
    pub history: Vec<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Number of optimizer steps taken.
    pub steps: usize,
}

/// 1-based index of the largest value; the earliest wins ties.
pub fn early_stop_select(val_wga_by_epoch: &[f64]) -> Result<usize> {
    if val_wga_by_epoch.is_empty() {
        return Err(Error::Invalid("no validation results to select from".into()));
    }
    let mut best = 0;
    for (i, &v) in val_wga_by_epoch.iter().enumerate() {
        if v > val_wga_by_epoch[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Full,
    Erm,
}

struct Batch<'a> {
    records: Vec<&'a SampleRecord>,
    weights: Vec<f64>,
}

fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * n_classes + y] = 1.0;
    }
    t
}

fn stack_maps(rows: impl Iterator<Item = Vec<f64>>, n: usize, p: usize) -> Tensor {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::new(vec![n, p], data)
}

/// Sum-reduced batch loss variables, ready to be divided for mean reduction.
struct BatchLoss<'g> {
    total: Var<'g>,
    breakdown: LossBreakdown,
    populated: Objective,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<'g>(
    g: &'g Graph,
    params: &crate::model::Bound<'g>,
    batch: &Batch<'_>,
    objective: Objective,
    weights: &LossWeights,
    cfg: &TrainConfig,
    guidance: Option<&GuidanceTable>,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss<'g>> {
    let n = batch.records.len();
    let config = params.config().clone();
    let labels: Vec<usize> = batch.records.iter().map(|r| r.label).collect();
    let x = g.constant(Image::batch(batch.records.iter().map(|r| &r.image)));
    let enc = params.encode(x);
    let mu1 = params.mu_half(enc.mu, Head::Relevant);
    let logits1 = params.classify(Head::Relevant, mu1);
    let ce1 = tape::weighted_sum(tape::cross_entropy_rows(logits1, &labels), &batch.weights);
    let scale = match cfg.batch_reduction {
        BatchReduction::Sum => 1.0,
        BatchReduction::Mean => 1.0 / n as f64,
    };

    if objective == Objective::Erm {
        let total = ce1 * scale;
        let v = total.item();
        let breakdown = LossBreakdown { ce1: v, total: v, ..Default::default() };
        return Ok(BatchLoss { total, breakdown, populated: Objective::Erm });
    }

    let mu2 = params.mu_half(enc.mu, Head::Irrelevant);
    let logits2 = params.classify(Head::Irrelevant, mu2);
    let ce2 = tape::cross_entropy_rows(logits2, &labels).sum();

    // β-VAE term on a reparameterised sample.
    let d2 = 2 * config.latent_half;
    let eps: Vec<f64> = (0..n * d2).map(|_| rng.sample(StandardNormal)).collect();
    let z = enc.mu + (enc.log_var * 0.5).exp() * g.constant(Tensor::new(vec![n, d2], eps));
    let x_hat = params.decode(z);
    let beta_loss = tape::reconstruction(x, x_hat) + tape::kl_rows(enc.mu, enc.log_var).sum() * weights.beta;

    // Attribution alignment against the guidance pair.
    let guidance = guidance.ok_or_else(|| Error::MissingGuidance("training requires guidance maps".into()))?;
    let (h, w) = config.feature_size();
    let p = h * w;
    let pairs = batch.records.iter().map(|r| guidance.get(&r.id)).collect::<Result<Vec<_>>>()?;
    for pair in &pairs {
        if (pair.relevant.height(), pair.relevant.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "guidance for {} is {}x{}, model maps are {h}x{w}",
                pair.sample_id,
                pair.relevant.height(),
                pair.relevant.width()
            )));
        }
    }
    let target1 = g.constant(stack_maps(pairs.iter().map(|p| p.relevant.values().to_vec()), n, p));
    let target2 = g.constant(stack_maps(pairs.iter().map(|p| p.irrelevant.values().to_vec()), n, p));
    let pick = one_hot(&labels, config.n_classes);
    let differentiable = weights.lambda2 > 0.0;
    let cam1 = gradcam_batch(enc.maps, logits1.mul_const(pick.clone()).sum(), differentiable, cfg.detach_alpha)?;
    let cam2 = gradcam_batch(enc.maps, logits2.mul_const(pick).sum(), differentiable, cfg.detach_alpha)?;
    let att = (tape::squared_distance_rows(cam1.map, target1) + tape::squared_distance_rows(cam2.map, target2)).sum();

    let (w1, b1) = params.head_vars(Head::Relevant);
    // The per-sample penalty appears once per sample under summation.
    let reg_count = match cfg.batch_reduction {
        BatchReduction::Sum => n as f64,
        BatchReduction::Mean => 1.0,
    };
    let reg = tape::l2(&[w1, b1]) * reg_count;

    let mut total = ce1 * scale + ce2 * scale;
    if weights.lambda1 > 0.0 {
        total = total + beta_loss * (weights.lambda1 * scale);
    }
    if weights.lambda2 > 0.0 {
        total = total + att * (weights.lambda2 * scale);
    }
    if weights.lambda3 > 0.0 {
        total = total + reg * weights.lambda3;
    }
    let breakdown = LossBreakdown {
        ce1: ce1.item() * scale,
        ce2: ce2.item() * scale,
        beta_loss: beta_loss.item() * scale,
        att_loss: att.item() * scale,
        reg: reg.item(),
        total: total.item(),
    };
    Ok(BatchLoss { total, breakdown, populated: Objective::Full })
}

/// Indices of the tensors trained under `objective`.
fn trainable(params: &ModelParams, objective: Objective) -> Vec<usize> {
    let names = params.names();
    (0..names.len())
        .filter(|&i| match objective {
            Objective::Full => true,
            Objective::Erm => {
                let n = &names[i];
                n.starts_with("conv") || n.starts_with("mu.") || n.starts_with("head1.")
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn fit(
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    objective: Objective,
    guidance: Option<&GuidanceTable>,
    upweighted: &BTreeSet<String>,
    upweight: f64,
    epochs: usize,
    learning_rate: f64,
    select: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<&SampleRecord> = ds.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if select && ds.split_len(Split::Val) == 0 {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let model_config = cfg.model_config(ds)?;
    let weights = cfg.weights(model_config.head_param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_config, &mut rng)?;
    let indices = trainable(&params, objective);
    let mut opt = AdamW::new(learning_rate, cfg.weight_decay, params.tensors());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut steps = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&SampleRecord> = chunk.iter().map(|&i| train[i]).collect();
            let sample_weights = records.iter().map(|r| if upweighted.contains(&r.id) { upweight } else { 1.0 }).collect();
            let batch = Batch { records, weights: sample_weights };
            let g = Graph::new();
            let bound = params.bind(&g, true);
            let loss = batch_loss(&g, &bound, &batch, objective, &weights, cfg, guidance, &mut rng)?;
            if !loss.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, breakdown: loss.breakdown });
            }
            let vars: Vec<Var> = indices.iter().map(|&i| bound.vars()[i]).collect();
            let grads: Vec<Tensor> = g.grad(loss.total, &vars, false).iter().map(|v| (*v.value()).clone()).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, breakdown: loss.breakdown });
            }
            drop(bound);
            opt.step(params.tensors_mut(), &indices, &grads);
            steps += 1;
            let bd = loss.breakdown;
            let full = loss.populated == Objective::Full;
            log.push(LogRow {
                epoch,
                batch: b + 1,
                ce1: bd.ce1,
                ce2: full.then_some(bd.ce2),
                beta: full.then_some(bd.beta_loss),
                att: full.then_some(bd.att_loss),
                reg: full.then_some(bd.reg),
                total: bd.total,
            });
        }
        if select {
            let report = evaluate(&params, ds, Split::Val)?;
            let wga = report.worst;
            history.push(report);
            if best.as_ref().is_none_or(|(b, _, _)| wga > *b) {
                best = Some((wga, epoch, params.clone()));
            }
        }
    }
    let (best_val_wga, best_epoch, best_params) = match best {
        Some(b) => b,
        None => (f64::NAN, epochs, params),
    };
    let state = TrainState { params: best_params, epoch: epochs, best_val_wga, best_epoch, history };
    Ok(TrainOutcome { state, log, steps })
}

/// Full objective with guidance, selecting the epoch of best validation worst-group accuracy.
///
/// With a JTT configuration, `upweighted` samples have their head-1 loss scaled.
pub fn train(
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    guidance: &GuidanceTable,
    upweighted: &BTreeSet<String>,
) -> Result<TrainOutcome> {
    let upweight = cfg.jtt.map_or(1.0, |j| j.upweight);
    fit(ds, cfg, Objective::Full, Some(guidance), upweighted, upweight, cfg.epochs, cfg.learning_rate, true)
}

/// Head-1 cross-entropy only, same optimizer and selection protocol.
pub fn train_erm_baseline(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = fit(ds, cfg, Objective::Erm, None, &BTreeSet::new(), 1.0, cfg.epochs, cfg.learning_rate, true)?;
    let report = outcome.state.history[outcome.state.best_epoch - 1].clone();
    Ok((outcome, report))
}

/// Training samples misclassified by `params`.
pub fn misclassified_ids(params: &ModelParams, ds: &GroupedDataset) -> Result<BTreeSet<String>> {
    let records: Vec<&SampleRecord> = ds.split(Split::Train).collect();
    let mut out = BTreeSet::new();
    for chunk in records.chunks(256) {
        let preds = params.predict(&chunk.iter().map(|r| &r.image).collect::<Vec<_>>())?;
        out.extend(chunk.iter().zip(preds).filter(|(r, p)| r.label != *p).map(|(r, _)| r.id.clone()));
    }
    Ok(out)
}

/// JTT identification: a short ERM run, then the ids it gets wrong.
pub fn jtt_identify(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<BTreeSet<String>> {
    let jtt = cfg.jtt.ok_or_else(|| Error::Config("jtt is not configured".into()))?;
    let outcome = fit(ds, cfg, Objective::Erm, None, &BTreeSet::new(), 1.0, jtt.id_epochs, jtt.id_lr, false)?;
    misclassified_ids(&outcome.state.params, ds)
}
