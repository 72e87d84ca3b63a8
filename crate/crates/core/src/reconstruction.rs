//! Image recovery from IRs: generator-prior IR-matching and the
//! preimage-collision experiment.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FeatureExtractor, Generator, GeneratorSpec};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::PgdBudget;

/// Anisotropic total variation of an image.
pub fn tv_norm(image: &Tensor) -> Result<f64> {
    if image.rank() != 3 && image.rank() != 4 {
        return Err(Error::shape("tv_norm", format!("{:?}", image.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let t = g.tv_norm(x)?;
    Ok(g.value(t).item())
}

/// `alpha * KL(softmax(target) || softmax(y)) + (1 - alpha) * MSE(y, target)`
/// recorded on the graph. `y` is `[1,M]` or `[M]`; `target` has length `M`.
pub fn ir_distance_var(g: &mut Graph, y: Var, target: &[f64], alpha: f64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let m: usize = shape.iter().product();
    if m != target.len() || shape.len() > 2 || (shape.len() == 2 && shape[0] != 1) {
        return Err(Error::shape(
            "ir_distance",
            format!("IR {shape:?} vs target length {}", target.len()),
        ));
    }
    let t = Tensor::new(shape.clone(), target.to_vec())?;
    let p = softmax(target);
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let logq = g.log_softmax(y)?;
    let pv = g.constant(Tensor::new(shape.clone(), p)?);
    let cross = g.mul(pv, logq)?;
    let cross = g.sum(cross)?;
    let kl = g.scale(cross, -1.0)?;
    let kl = g.add_scalar(kl, plogp)?;
    let tv = g.constant(t);
    let diff = g.sub(y, tv)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let a = g.scale(kl, alpha)?;
    let b = g.scale(mse, 1.0 - alpha)?;
    g.add(a, b)
}

pub fn ir_distance(y: &[f64], target: &[f64], alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.constant(Tensor::from_vec(y.to_vec()));
    let d = ir_distance_var(&mut g, yv, target, alpha)?;
    Ok(g.value(d).item())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrMatchConfig {
    pub iterations: usize,
    pub perturb_every: usize,
    pub lr_seed: f64,
    pub lr_gen: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for IrMatchConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            perturb_every: 200,
            lr_seed: 0.05,
            lr_gen: 0.05,
            alpha: 0.5,
            beta: 1e-4,
            seed: 0,
        }
    }
}

impl IrMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.perturb_every == 0 {
            return Err(Error::Config("iterations and perturbation period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= alpha <= 1 and beta >= 0, got {} / {}",
                self.alpha, self.beta
            )));
        }
        if !(self.lr_seed >= 0.0 && self.lr_gen >= 0.0) {
            return Err(Error::Config("step sizes must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrMatchResult {
    pub image: Tensor,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// IR distance (without the TV term) at the returned iterate.
    pub ir_distance: f64,
    pub loss_trace: Vec<f64>,
}

/// Generator-prior inversion of one target IR. The generator and latent are
/// initialized from `cfg.seed`, so each job is self-contained.
pub fn ir_match(target: &[f64], fe: &FeatureExtractor, gen_spec: &GeneratorSpec, cfg: &IrMatchConfig) -> Result<IrMatchResult> {
    cfg.validate()?;
    if target.len() != fe.ir_dim() {
        return Err(Error::shape(
            "ir_match",
            format!("target length {} vs IR dimension {}", target.len(), fe.ir_dim()),
        ));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut gen = Generator::init(gen_spec.clone(), &mut rng)?;
    let [c, h, w] = gen_spec.shape;
    if [c, h, w] != fe.input_shape() {
        return Err(Error::shape("ir_match", "generator and extractor image shapes differ"));
    }
    let mut s = normal_tensor(&[c, h, w], &mut rng);
    let mut best: Option<(f64, usize, Tensor, f64)> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.perturb_every == 0 {
            for v in s.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += n;
            }
        }
        let mut g = Graph::new();
        let gp = gen.bind(&mut g, true);
        let fp = fe.bind(&mut g, false);
        let sv = g.param(s.clone());
        let x = gen.forward(&mut g, &gp, sv)?;
        let y = fe.forward(&mut g, &fp, x)?;
        let d = ir_distance_var(&mut g, y, target, cfg.alpha)?;
        let tv = g.tv_norm(x)?;
        let tvw = g.scale(tv, cfg.beta)?;
        let loss = g.add(d, tvw)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Divergence {
                stage: "ir_match",
                epoch: 0,
                step: it,
                detail: format!("loss {lv}; latent norm {:.4e}", s.l2_norm()),
            });
        }
        trace.push(lv);
        if best.as_ref().is_none_or(|b| lv < b.0) {
            let img = g.value(x).clone();
            best = Some((lv, it, img, g.value(d).item()));
        }
        g.backward(loss)?;
        let gs = g.grad(sv).expect("latent grad");
        for (a, d) in s.data_mut().iter_mut().zip(gs.data()) {
            *a -= cfg.lr_seed * d;
        }
        let grads: Vec<Tensor> = gp.iter().map(|&v| g.grad(v).expect("generator grad")).collect();
        for (p, gr) in gen.params_mut().iter_mut().zip(&grads) {
            for (a, d) in p.data_mut().iter_mut().zip(gr.data()) {
                *a -= cfg.lr_gen * d;
            }
        }
    }
    let (best_loss, best_iteration, image, ir_distance) = best.expect("at least one iteration");
    let [c, h, w] = gen_spec.shape;
    Ok(IrMatchResult {
        image: image.reshape(&[c, h, w])?,
        best_loss,
        best_iteration,
        ir_distance,
        loss_trace: trace,
    })
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Best of `n` uniform random images by IR distance to the target: the
/// prior-free reference point for reconstruction quality.
pub fn random_baseline(target: &[f64], fe: &FeatureExtractor, n: usize, alpha: f64, rng: &mut Rng) -> Result<Tensor> {
    use rand::Rng as _;
    let shape = fe.input_shape();
    let mut best: Option<(f64, Tensor)> = None;
    for _ in 0..n.max(1) {
        let img = Tensor::from_fn(&shape, |_| rng.random::<f64>());
        let y = fe.irs(&img.reshape(&[1, shape[0], shape[1], shape[2]])?)?;
        let d = ir_distance(y.data(), target, alpha)?;
        if best.as_ref().is_none_or(|b| d < b.0) {
            best = Some((d, img));
        }
    }
    Ok(best.expect("one draw").1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreimageResult {
    pub image: Tensor,
    /// Squared L2 IR distance `|fe(x1) - fe(x2 + delta)|^2` before each step
    /// and after the last one.
    pub trace: Vec<f64>,
}

impl PreimageResult {
    pub fn ratio(&self) -> f64 {
        let first = self.trace[0];
        let last = *self.trace.last().expect("non-empty trace");
        if first == 0.0 {
            0.0
        } else {
            last / first
        }
    }
}

/// Searches `delta` in the L-infinity ball so that `x2 + delta` collides
/// with `x1` in IR space. Signed-gradient descent with projection onto the
/// ball and onto `[0,1]`.
pub fn preimage_attack(x1: &Tensor, x2: &Tensor, fe: &FeatureExtractor, budget: &PgdBudget, tv_weight: f64) -> Result<PreimageResult> {
    budget.validate()?;
    let [c, h, w] = fe.input_shape();
    let as_batch = |t: &Tensor| t.reshape(&[1, c, h, w]);
    let x1 = as_batch(x1)?;
    let x2 = as_batch(x2)?;
    let target = fe.irs(&x1)?;
    let mut x = x2.clone();
    let mut trace = Vec::with_capacity(budget.steps + 1);
    for step in 0..=budget.steps {
        let mut g = Graph::new();
        let fp = fe.bind(&mut g, false);
        let xv = g.param(x.clone());
        let y = fe.forward(&mut g, &fp, xv)?;
        let t = g.constant(target.clone());
        let diff = g.sub(y, t)?;
        let sq = g.square(diff)?;
        let dist = g.sum(sq)?;
        trace.push(g.value(dist).item());
        if step == budget.steps || budget.epsilon == 0.0 || trace[step] == 0.0 {
            break;
        }
        let tv = g.tv_norm(xv)?;
        let tvw = g.scale(tv, tv_weight)?;
        let loss = g.add(dist, tvw)?;
        g.backward(loss)?;
        let grad = g.grad(xv).expect("input grad");
        let lr = budget.step_size * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / budget.steps as f64).cos());
        for ((a, &x0), &gr) in x.data_mut().iter_mut().zip(x2.data()).zip(grad.data()) {
            let stepped = *a - lr * gr.signum() * f64::from(gr != 0.0);
            *a = stepped.clamp(x0 - budget.epsilon, x0 + budget.epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(PreimageResult {
        image: x.reshape(&[c, h, w])?,
        trace,
    })
}
