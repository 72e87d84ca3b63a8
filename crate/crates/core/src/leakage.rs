//! Analytic recovery of IR rows from the head's first-layer gradient, and
//! the ground-truth leakage-rate oracle.
//!
//! For `Z = Y w + b`, `grad_w(:,q) = sum_k Y(k,:) grad_Z(k,q)` and
//! `grad_b(q) = sum_k grad_Z(k,q)`. When only row `p` has a nonzero entry in
//! column `q` of `grad_Z`, the ratio `grad_w(:,q) / grad_b(q)` is exactly
//! `Y(p,:)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::GradientUpdate;
use crate::models::{Checkpoint, SpabHead};
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_COS_THRESHOLD: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrCandidate {
    pub vector: Vec<f64>,
    pub source_column: usize,
    /// `|grad_b(q)|` of the source column (the group maximum after dedup).
    pub bias_grad: f64,
    pub group: usize,
}

/// One candidate per column whose bias gradient exceeds `tol` in magnitude.
pub fn extract_candidate_irs(update: &GradientUpdate, tol: f64) -> Result<Vec<IrCandidate>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let gw = &update.w;
    let gb = &update.b;
    let (m, n) = (gw.shape()[0], gw.shape()[1]);
    if gb.shape() != [n] {
        return Err(Error::shape("extract", format!("grad_w {:?}, grad_b {:?}", gw.shape(), gb.shape())));
    }
    let mut out = Vec::new();
    for q in 0..n {
        let bq = gb.data()[q];
        if bq.abs() <= tol {
            continue;
        }
        let vector: Vec<f64> = (0..m).map(|i| gw.data()[i * n + q] / bq).collect();
        if vector.iter().all(|v| v.is_finite()) {
            out.push(IrCandidate {
                vector,
                source_column: q,
                bias_grad: bq.abs(),
                group: out.len(),
            });
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Greedy clustering: each candidate joins the first group whose seed has
/// cosine similarity at least `cos_threshold`, otherwise starts a group.
/// Returns group means sorted by descending bias-gradient magnitude.
pub fn dedupe_candidates(candidates: &[IrCandidate], cos_threshold: f64) -> Result<Vec<IrCandidate>> {
    if !(cos_threshold > 0.0 && cos_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cosine threshold {cos_threshold} must lie in (0,1)"
        )));
    }
    let mut order: Vec<&IrCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.bias_grad.total_cmp(&a.bias_grad).then(a.source_column.cmp(&b.source_column)));
    struct Group<'a> {
        seed: &'a [f64],
        members: Vec<&'a IrCandidate>,
    }
    let mut groups: Vec<Group> = Vec::new();
    for c in order {
        match groups
            .iter_mut()
            .find(|g| cosine(g.seed, &c.vector) >= cos_threshold)
        {
            Some(g) => g.members.push(c),
            None => groups.push(Group {
                seed: &c.vector,
                members: vec![c],
            }),
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(gi, g)| {
            let m = g.seed.len();
            let k = g.members.len() as f64;
            let vector = (0..m)
                .map(|i| g.members.iter().map(|c| c.vector[i]).sum::<f64>() / k)
                .collect();
            IrCandidate {
                vector,
                source_column: g.members[0].source_column,
                bias_grad: g.members[0].bias_grad,
                group: gi,
            }
        })
        .collect())
}

/// `(row, column)` pairs where the column of `grad_Z = grad_Z' * [Z > 0]`
/// has exactly one nonzero entry.
pub fn exclusive_columns(z: &Tensor, grad_z_act: &Tensor) -> Result<Vec<(usize, usize)>> {
    if z.shape() != grad_z_act.shape() || z.rank() != 2 {
        return Err(Error::shape(
            "leakage_rate",
            format!("Z {:?} vs grad {:?}", z.shape(), grad_z_act.shape()),
        ));
    }
    let (b, n) = (z.shape()[0], z.shape()[1]);
    let mut out = Vec::new();
    for q in 0..n {
        let mut owner = None;
        let mut count = 0;
        for p in 0..b {
            let k = p * n + q;
            if z.data()[k] > 0.0 && grad_z_act.data()[k] != 0.0 {
                count += 1;
                owner = Some(p);
            }
        }
        if count == 1 {
            out.push((owner.expect("one owner"), q));
        }
    }
    Ok(out)
}

/// Fraction of batch rows that exclusively own at least one column of the
/// masked output gradient.
pub fn leakage_rate_oracle(z: &Tensor, z_act: &Tensor, grad_z_act: &Tensor) -> Result<f64> {
    if z_act.shape() != z.shape() {
        return Err(Error::shape("leakage_rate", "Z and Z' differ in shape"));
    }
    let b = z.shape()[0];
    let mut rows: Vec<usize> = exclusive_columns(z, grad_z_act)?.into_iter().map(|(p, _)| p).collect();
    rows.sort_unstable();
    rows.dedup();
    Ok(rows.len() as f64 / b as f64)
}

/// Ground-truth activations of the head on a labelled IR batch.
pub struct HeadTrace {
    pub z: Tensor,
    pub z_act: Tensor,
    pub grad_z_act: Tensor,
    pub update: GradientUpdate,
}

/// Forward/backward of the mean cross-entropy through the head, keeping
/// everything the oracle needs.
pub fn trace_head(head: &SpabHead, y: &Tensor, labels: &[usize]) -> Result<HeadTrace> {
    let mut g = Graph::new();
    let hv = head.bind(&mut g, true);
    let yv = g.constant(y.clone());
    let f = head.forward(&mut g, hv, yv)?;
    let loss = g.cross_entropy(f.logits, labels)?;
    g.backward(loss)?;
    let grad = |v| g.grad(v).expect("head gradient");
    Ok(HeadTrace {
        z: g.value(f.z).clone(),
        z_act: g.value(f.z_act).clone(),
        grad_z_act: grad(f.z_act),
        update: GradientUpdate {
            w: grad(hv.w),
            b: grad(hv.b),
            w2: grad(hv.w2),
            b2: grad(hv.b2),
            batch_size: labels.len(),
        },
    })
}

pub fn probe_leakage_rate(head: &SpabHead, y: &Tensor, labels: &[usize]) -> Result<f64> {
    let t = trace_head(head, y, labels)?;
    leakage_rate_oracle(&t.z, &t.z_act, &t.grad_z_act)
}

/// Fraction of true IR rows matched by some candidate within `max_cos_dist`
/// cosine distance. Evaluation only: requires the ground truth.
pub fn attacker_rate(candidates: &[IrCandidate], true_irs: &Tensor, max_cos_dist: f64) -> f64 {
    let b = true_irs.shape()[0];
    let hit = (0..b)
        .filter(|&p| {
            candidates
                .iter()
                .any(|c| 1.0 - cosine(&c.vector, true_irs.row(p)) <= max_cos_dist)
        })
        .count();
    hit as f64 / b as f64
}

/// Relative L2 error `|a - b| / |b|`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Packs candidates as tensors `irs [K,M]`, `columns [K]`, `bias_grad [K]`
/// and `group [K]` under the descriptor `candidates(M)`.
pub fn candidates_to_checkpoint(candidates: &[IrCandidate], ir_dim: usize) -> Result<Checkpoint> {
    let k = candidates.len();
    let mut rows = Vec::with_capacity(k * ir_dim);
    for c in candidates {
        if c.vector.len() != ir_dim {
            return Err(Error::shape("candidates", format!("vector length {} vs {ir_dim}", c.vector.len())));
        }
        rows.extend_from_slice(&c.vector);
    }
    let col = |f: fn(&IrCandidate) -> f64| Tensor::from_vec(candidates.iter().map(f).collect());
    let mut ck = Checkpoint::new(format!("candidates({ir_dim})"));
    ck.push("irs", Tensor::new(vec![k, ir_dim], rows)?);
    ck.push("columns", col(|c| c.source_column as f64));
    ck.push("bias_grad", col(|c| c.bias_grad));
    ck.push("group", col(|c| c.group as f64));
    Ok(ck)
}

pub fn candidates_from_checkpoint(ck: &Checkpoint) -> Result<Vec<IrCandidate>> {
    let bad = || Error::Checkpoint(format!("not a candidate list: {:?}", ck.descriptor));
    let m: usize = ck
        .descriptor
        .strip_prefix("candidates(")
        .and_then(|r| r.strip_suffix(')'))
        .and_then(|r| r.parse().ok())
        .ok_or_else(bad)?;
    let irs = ck.get("irs")?;
    let k = irs.shape().first().copied().unwrap_or(0);
    if irs.shape() != [k, m] {
        return Err(bad());
    }
    let (cols, bias, group) = (ck.get("columns")?, ck.get("bias_grad")?, ck.get("group")?);
    if [cols, bias, group].iter().any(|t| t.shape() != [k]) {
        return Err(bad());
    }
    Ok((0..k)
        .map(|i| IrCandidate {
            vector: irs.data()[i * m..(i + 1) * m].to_vec(),
            source_column: cols.data()[i] as usize,
            bias_grad: bias.data()[i],
            group: group.data()[i] as usize,
        })
        .collect())
}
