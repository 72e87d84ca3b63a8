//! Pretraining: natural and PGD-adversarial training of a classifier, and
//! sparse-activation training of the head on a frozen extractor.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::leakage::probe_leakage_rate;
use crate::models::{argmax_rows, Classifier, FeatureExtractor, SpabHead};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// L-infinity PGD budget in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdBudget {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
}

impl PgdBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("PGD needs at least one step".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step size {} must lie in (0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `model` on `x`, plus the gradient with respect to
/// the input batch.
pub fn loss_and_input_grad(model: &Classifier, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let fe = model.extractor.bind(&mut g, false);
    let hv = model.head.bind(&mut g, false);
    let xv = g.param(x.clone());
    let y = model.extractor.forward(&mut g, &fe, xv)?;
    let logits = model.head.logits(&mut g, &hv, y)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let grad = g.grad(xv).expect("input requires grad");
    Ok((g.value(loss).item(), grad))
}

pub fn batch_loss(model: &Classifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let logits = g.constant(model.logits(x)?);
    let loss = g.cross_entropy(logits, labels)?;
    Ok(g.value(loss).item())
}

/// Projected signed-gradient ascent on the cross-entropy inside the
/// L-infinity ball around `x`, intersected with `[0,1]`.
pub fn pgd_attack(model: &Classifier, x: &Tensor, labels: &[usize], budget: &PgdBudget) -> Result<Tensor> {
    budget.validate()?;
    if budget.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    for _ in 0..budget.steps {
        let (_, grad) = loss_and_input_grad(model, &adv, labels)?;
        for ((a, &x0), &gr) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            let stepped = *a + budget.step_size * sign(gr);
            *a = stepped
                .clamp(x0 - budget.epsilon, x0 + budget.epsilon)
                .clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Samples used for the per-epoch accuracy evaluation.
    pub eval_samples: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
    /// Epochs over which the attack radius ramps linearly up to the budget.
    #[serde(default)]
    pub warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
}

fn classifier_params_mut(model: &mut Classifier) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = model.extractor.params_mut().iter_mut().collect();
    out.extend(model.head.params_mut());
    out
}

/// One SGD step on the mean cross-entropy of `(x, labels)`. Returns the loss.
fn sgd_step(
    model: &mut Classifier,
    velocity: &mut [Tensor],
    x: &Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let fe = model.extractor.bind(&mut g, true);
    let hv = model.head.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let y = model.extractor.forward(&mut g, &fe, xv)?;
    let logits = model.head.logits(&mut g, &hv, y)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let vars: Vec<Var> = fe.into_iter().chain(hv).collect();
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("param grad")).collect();
    for ((p, gr), vel) in classifier_params_mut(model).into_iter().zip(&grads).zip(velocity) {
        for ((a, b), v) in p.data_mut().iter_mut().zip(gr.data()).zip(vel.data_mut()) {
            *v = momentum * *v + b;
            *a -= lr * *v;
        }
    }
    Ok(g.value(loss).item())
}

/// Fraction of samples classified correctly.
pub fn accuracy(model: &Classifier, ds: &Dataset, limit: usize) -> Result<f64> {
    let n = ds.len().min(limit);
    if n == 0 {
        return Err(Error::Data("accuracy on empty dataset".into()));
    }
    let mut correct = 0;
    for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
        let (x, labels) = ds.batch(chunk)?;
        correct += model
            .predict(&x)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy on PGD-perturbed inputs.
pub fn robust_accuracy(model: &Classifier, ds: &Dataset, budget: &PgdBudget, limit: usize) -> Result<f64> {
    let n = ds.len().min(limit);
    if n == 0 {
        return Err(Error::Data("accuracy on empty dataset".into()));
    }
    let mut correct = 0;
    for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
        let (x, labels) = ds.batch(chunk)?;
        let adv = pgd_attack(model, &x, &labels, budget)?;
        correct += model
            .predict(&adv)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Minimizes the expected worst-case loss within `budget`. With
/// `epsilon = 0` this is exactly [`natural_train`].
pub fn adversarial_train(
    model: &mut Classifier,
    ds: &Dataset,
    eval: &Dataset,
    budget: &PgdBudget,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    budget.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!("momentum {} outside [0,1)", cfg.momentum)));
    }
    let mut velocity: Vec<Tensor> = classifier_params_mut(model)
        .into_iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let ramp = if epoch <= cfg.warmup_epochs {
            epoch as f64 / (cfg.warmup_epochs + 1) as f64
        } else {
            1.0
        };
        let step_budget = PgdBudget {
            epsilon: budget.epsilon * ramp,
            step_size: budget.step_size * ramp,
            steps: budget.steps,
        };
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = ds.batch(chunk)?;
            let x = pgd_attack(model, &x, &labels, &step_budget)?;
            let loss = sgd_step(model, &mut velocity, &x, &labels, cfg.lr, cfg.momentum)
                .map_err(|e| diverged("adversarial_train", epoch, step, e))?;
            if !loss.is_finite() {
                return Err(diverged("adversarial_train", epoch, step, Error::NonFinite { op: "loss" }));
            }
            total += loss;
            batches += 1;
        }
        let natural_acc = accuracy(model, eval, cfg.eval_samples)?;
        let robust_acc = if budget.epsilon == 0.0 {
            natural_acc
        } else {
            robust_accuracy(model, eval, budget, cfg.eval_samples)?
        };
        let stats = EpochStats {
            epoch,
            loss: total / batches as f64,
            natural_acc,
            robust_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} nacc {:.3} racc {:.3}",
            stats.loss,
            natural_acc,
            robust_acc
        );
        history.push(stats);
    }
    Ok(history)
}

pub fn natural_train(
    model: &mut Classifier,
    ds: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    let zero = PgdBudget {
        epsilon: 0.0,
        step_size: 0.0,
        steps: 1,
    };
    adversarial_train(model, ds, eval, &zero, cfg, rng)
}

fn diverged(stage: &'static str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            stage,
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// `(beta1/N) * sum|Z'| + (beta2/(B*N)) * sum softplus(-Z)`.
pub fn sparsity_loss(g: &mut Graph, z: Var, z_act: Var, beta1: f64, beta2: f64) -> Result<Var> {
    let (zs, zas) = (g.shape(z).to_vec(), g.shape(z_act).to_vec());
    if zs != zas || zs.len() != 2 {
        return Err(Error::shape("sparsity_loss", format!("Z {zs:?} vs Z' {zas:?}")));
    }
    let (b, n) = (zs[0] as f64, zs[1] as f64);
    let a = g.abs(z_act)?;
    let l1 = g.sum(a)?;
    let t1 = g.scale(l1, beta1 / n)?;
    let neg = g.neg(z)?;
    let sp = g.softplus(neg)?;
    let s2 = g.sum(sp)?;
    let t2 = g.scale(s2, beta2 / (b * n))?;
    g.add(t1, t2)
}

/// `1 - cos^2(k*pi / 2K)`.
pub fn alpha_schedule(k: usize, big_k: usize) -> Result<f64> {
    if big_k == 0 || k == 0 || k > big_k {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= K, got k={k}, K={big_k}")));
    }
    let c = (k as f64 * std::f64::consts::PI / (2.0 * big_k as f64)).cos();
    Ok(1.0 - c * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpabTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

impl SpabTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("epochs, batch size and batches per epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if !(finite_nonneg(self.beta1) && finite_nonneg(self.beta2) && finite_nonneg(self.sigma)) {
            return Err(Error::Config("beta1, beta2 and sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpabEpoch {
    pub epoch: usize,
    pub alpha: f64,
    pub l_cls: f64,
    pub l_sp: f64,
    pub leakage_rate: f64,
}

/// Held-out IRs and labels used to measure leakage after every epoch.
pub struct Probe<'a> {
    pub irs: &'a Tensor,
    pub labels: &'a [usize],
}

/// Trains the head on IRs of a frozen extractor. The extractor is only
/// read; all optimization happens on precomputed IRs.
pub fn spab_train(
    extractor: &FeatureExtractor,
    head: SpabHead,
    ds: &Dataset,
    probe: &Probe,
    cfg: &SpabTrainConfig,
    rng: &mut Rng,
) -> Result<(SpabHead, Vec<SpabEpoch>)> {
    let irs = dataset_irs(extractor, ds)?;
    spab_train_on_irs(head, &irs, &ds.labels, probe, cfg, None, rng)
}

/// IRs of every sample, `[len, M]`.
pub fn dataset_irs(extractor: &FeatureExtractor, ds: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len() * extractor.ir_dim());
    for chunk in idx.chunks(64) {
        let (x, _) = ds.batch(chunk)?;
        rows.extend_from_slice(extractor.irs(&x)?.data());
    }
    Tensor::new(vec![ds.len(), extractor.ir_dim()], rows)
}

/// The training loop behind [`spab_train`]. `fixed_alpha` replaces the
/// schedule (used to train a plain cross-entropy reference head).
pub fn spab_train_on_irs(
    mut head: SpabHead,
    irs: &Tensor,
    labels: &[usize],
    probe: &Probe,
    cfg: &SpabTrainConfig,
    fixed_alpha: Option<f64>,
    rng: &mut Rng,
) -> Result<(SpabHead, Vec<SpabEpoch>)> {
    cfg.validate()?;
    let n = irs.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Data("IR rows and labels disagree or are empty".into()));
    }
    if cfg.batch_size > n {
        return Err(Error::Config(format!("batch size {} exceeds {n} samples", cfg.batch_size)));
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for k in 1..=cfg.epochs {
        let alpha = match fixed_alpha {
            Some(a) => a,
            None => alpha_schedule(k, cfg.epochs)?,
        };
        if cfg.sigma > 0.0 {
            for t in [&mut head.w, &mut head.b] {
                for v in t.data_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        let (mut sum_cls, mut sum_sp) = (0.0, 0.0);
        for step in 0..cfg.batches_per_epoch {
            if cursor + cfg.batch_size > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let y = gather_rows(irs, idx);
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (l_cls, l_sp) = spab_step(&mut head, &y, &lab, alpha, cfg)
                .map_err(|e| diverged("spab_train", k, step, e))?;
            sum_cls += l_cls;
            sum_sp += l_sp;
        }
        let leakage_rate = probe_leakage_rate(&head, probe.irs, probe.labels)?;
        let rec = SpabEpoch {
            epoch: k,
            alpha,
            l_cls: sum_cls / cfg.batches_per_epoch as f64,
            l_sp: sum_sp / cfg.batches_per_epoch as f64,
            leakage_rate,
        };
        log::debug!("spab epoch {k}: {rec:?}");
        trace.push(rec);
    }
    Ok((head, trace))
}

fn spab_step(head: &mut SpabHead, y: &Tensor, labels: &[usize], alpha: f64, cfg: &SpabTrainConfig) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let hv = head.bind(&mut g, true);
    let yv = g.constant(y.clone());
    let f = head.forward(&mut g, hv, yv)?;
    let l_cls = g.cross_entropy(f.logits, labels)?;
    let l_sp = sparsity_loss(&mut g, f.z, f.z_act, cfg.beta1, cfg.beta2)?;
    let a = g.scale(l_cls, alpha)?;
    let b = g.scale(l_sp, 1.0 - alpha)?;
    let total = g.add(a, b)?;
    g.backward(total)?;
    let grads = [hv.w, hv.b, hv.w2, hv.b2].map(|v| g.grad(v).expect("head grad"));
    for (p, gr) in head.params_mut().into_iter().zip(&grads) {
        for (a, d) in p.data_mut().iter_mut().zip(gr.data()) {
            *a -= cfg.lr * d;
        }
    }
    Ok((g.value(l_cls).item(), g.value(l_sp).item()))
}

pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let m = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * m);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), m], data).expect("row gather")
}

/// Accuracy of a SpAB head on precomputed IRs.
pub fn head_accuracy(head: &SpabHead, irs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (logits, _, _) = head.evaluate(irs)?;
    let pred = argmax_rows(&logits);
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Writes the per-epoch trace as `epoch,L_cls,L_sp,leakage_rate`.
pub fn write_trace_csv<W: Write>(out: W, trace: &[SpabEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "L_cls", "L_sp", "leakage_rate"])
        .map_err(csv_err)?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.10e}", r.l_cls),
            format!("{:.10e}", r.l_sp),
            format!("{:.6}", r.leakage_rate),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
