//! One FedSGD interaction: the server broadcasts the head, a client computes
//! the head gradient on a private batch and optionally privatizes it.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::leakage::trace_head;
use crate::models::{Checkpoint, FeatureExtractor, SpabHead};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Gradients of the head parameters, the only payload a client uploads.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate {
    pub w: Tensor,
    pub b: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Client batch size; metadata for evaluation only.
    pub batch_size: usize,
}

const NAMES: [&str; 4] = ["grad.w", "grad.b", "grad.w2", "grad.b2"];

impl GradientUpdate {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w, &self.b, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w, &mut self.b, &mut self.w2, &mut self.b2]
    }

    /// Global L2 norm over all four tensors.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &GradientUpdate) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn check_against(&self, head: &SpabHead) -> Result<()> {
        let ok = self
            .tensors()
            .iter()
            .zip(head.params())
            .all(|(g, p)| g.shape() == p.shape());
        if !ok {
            return Err(Error::shape("gradient_update", "update does not match head shapes"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (m, n) = (self.w.shape()[0], self.w.shape()[1]);
        let c = self.w2.shape()[1];
        let mut ck = Checkpoint::new(format!("update|spab({m},{n},{c})|batch({})", self.batch_size));
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            ck.push(*name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parts: Vec<&str> = ck.descriptor.split('|').collect();
        let batch_size = match parts.as_slice() {
            ["update", _, batch] => batch
                .strip_prefix("batch(")
                .and_then(|s| s.strip_suffix(')'))
                .and_then(|s| s.parse().ok()),
            _ => None,
        }
        .ok_or_else(|| Error::Checkpoint(format!("not a gradient update: {:?}", ck.descriptor)))?;
        let u = GradientUpdate {
            w: ck.get(NAMES[0])?.clone(),
            b: ck.get(NAMES[1])?.clone(),
            w2: ck.get(NAMES[2])?.clone(),
            b2: ck.get(NAMES[3])?.clone(),
            batch_size,
        };
        let head_shape_ok = u.w.rank() == 2
            && u.w2.rank() == 2
            && u.b.shape() == [u.w.shape()[1]]
            && u.w2.shape()[0] == u.w.shape()[1]
            && u.b2.shape() == [u.w2.shape()[1]];
        if !head_shape_ok {
            return Err(Error::Checkpoint("inconsistent update tensor shapes".into()));
        }
        Ok(u)
    }
}

/// Mean cross-entropy gradient with respect to the head only. The extractor
/// runs without gradient tracking.
pub fn client_update(extractor: &FeatureExtractor, head: &SpabHead, x: &Tensor, labels: &[usize]) -> Result<GradientUpdate> {
    let y = extractor.irs(x)?;
    Ok(trace_head(head, &y, labels)?.update)
}

/// Rescales the whole update onto the L2 ball of radius `clip`.
pub fn clip_gradient(update: &GradientUpdate, clip: f64) -> Result<GradientUpdate> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clip threshold {clip} must be positive")));
    }
    let norm = update.l2_norm();
    let mut out = update.clone();
    if norm > clip {
        let s = clip / norm;
        for t in out.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) || !(self.clip > 0.0) {
            return Err(Error::Config(format!(
                "need epsilon > 0, 0 < delta < 1, clip > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Gaussian-mechanism noise scale `S_f * sqrt(2 ln(1.25/delta)) / epsilon`.
    pub fn sigma(&self) -> f64 {
        self.clip * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }
}

/// Clips then adds i.i.d. Gaussian noise to every entry.
pub fn apply_dp(update: &GradientUpdate, cfg: &DpConfig) -> Result<GradientUpdate> {
    cfg.validate()?;
    let mut out = clip_gradient(update, cfg.clip)?;
    let sigma = cfg.sigma();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng_from_seed(cfg.seed);
        for t in out.tensors_mut() {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// What the server holds at the start of a round.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub extractor: FeatureExtractor,
    pub head: SpabHead,
}

/// Samples a private batch, computes the head gradient and privatizes it
/// once when `dp` is given.
pub fn run_round(
    server: &ServerState,
    client: &Dataset,
    batch_size: usize,
    dp: Option<&DpConfig>,
    rng: &mut Rng,
) -> Result<(GradientUpdate, Tensor, Vec<usize>)> {
    let (x, labels) = sample_batch(client, batch_size, rng)?;
    let clean = client_update(&server.extractor, &server.head, &x, &labels)?;
    let update = match dp {
        Some(cfg) => apply_dp(&clean, cfg)?,
        None => clean,
    };
    Ok((update, x, labels))
}

/// Batch-size weighted mean of client updates, in the given client order.
pub fn aggregate(updates: &[GradientUpdate]) -> Result<GradientUpdate> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no updates to aggregate".into()))?;
    let total: usize = updates.iter().map(|u| u.batch_size).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("updates carry no samples".into()));
    }
    let mut out = first.clone();
    for t in out.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for u in updates {
        if u.tensors().iter().zip(first.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("aggregate", "client updates differ in shape"));
        }
        let wgt = u.batch_size as f64 / total as f64;
        for (dst, src) in out.tensors_mut().into_iter().zip(u.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += wgt * s;
            }
        }
    }
    out.batch_size = total;
    Ok(out)
}
