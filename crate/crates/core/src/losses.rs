//! Joint objective: identity classification on each branch plus batch-hard
//! triplet losses on every feature and on the full embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor, Var};
use crate::error::{invalid, Result};
use crate::model::ForwardOutput;

/// Triplet margin used when none is configured.
pub const DEFAULT_MARGIN: f64 = 0.3;

/// Mean softmax cross-entropy of `logits` against identity labels.
pub fn id_loss<'t, T: Real>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    logits.softmax_cross_entropy(labels)
}

/// `max(d_ap - d_an + margin, 0)` for one triplet.
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Hardest positive and hardest negative for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HardPair {
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining over an `[N,N]` distance matrix: per anchor, the
/// farthest same-label sample (self excluded) and the nearest other-label
/// sample. Ties resolve to the lowest index.
pub fn mine_batch_hard<T: Real>(dist: &Tensor<T>, labels: &[usize]) -> Result<Vec<HardPair>> {
    let [n, n2] = dist.dims2("mine_batch_hard")?;
    if n != n2 || labels.len() != n {
        return Err(invalid!(
            "mine_batch_hard: distance matrix {:?} does not match {} labels",
            dist.shape(),
            labels.len()
        ));
    }
    let d = dist.data();
    (0..n)
        .map(|a| {
            let row = &d[a * n..(a + 1) * n];
            let mut positive: Option<usize> = None;
            let mut negative: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if positive.map_or(true, |p| v > row[p]) {
                        positive = Some(j);
                    }
                } else if negative.map_or(true, |q| v < row[q]) {
                    negative = Some(j);
                }
            }
            let positive = positive.ok_or_else(|| {
                invalid!("mine_batch_hard: identity {} has a single sample in the batch", labels[a])
            })?;
            let negative = negative
                .ok_or_else(|| invalid!("mine_batch_hard: batch contains a single identity"))?;
            Ok(HardPair { positive, negative })
        })
        .collect()
}

/// Batch-hard triplet loss on `[N,D]` embeddings, averaged over anchors.
pub fn triplet_loss<'t, T: Real>(embeddings: &Var<'t, T>, labels: &[usize], margin: f64) -> Result<Var<'t, T>> {
    if margin < 0.0 || !margin.is_finite() {
        return Err(invalid!("triplet_loss: margin must be non-negative, got {margin}"));
    }
    let dist = embeddings.pairwise_distance()?;
    let n = labels.len();
    let pairs = mine_batch_hard(&dist.value(), labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(a, p)| a * n + p.positive).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(a, p)| a * n + p.negative).collect();
    let d_ap = dist.gather(&pos)?;
    let d_an = dist.gather(&neg)?;
    Ok(d_ap.sub(&d_an)?.add_scalar(T::lit(margin)).relu().mean())
}

/// Scalar values of every objective term. With two strips per branch the
/// height terms are (top, down) and the width terms (left, right).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id_global: f64,
    pub id_height: f64,
    pub id_width: f64,
    pub tri_global: f64,
    pub tri_height: Vec<f64>,
    pub tri_width: Vec<f64>,
    /// Triplet loss on the concatenated global + spatial embedding.
    pub tri_joint: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Named terms in a fixed order, excluding the total.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let strip_names = |strips: &[f64], pair: [&str; 2], prefix: &str| -> Vec<(String, f64)> {
            strips
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let name = if strips.len() == 2 {
                        format!("L_tri_{}", pair[k])
                    } else {
                        format!("L_tri_{prefix}{k}")
                    };
                    (name, v)
                })
                .collect()
        };
        let mut out = vec![
            ("L_ID_g".to_string(), self.id_global),
            ("L_ID_td".to_string(), self.id_height),
            ("L_ID_lr".to_string(), self.id_width),
            ("L_tri_g".to_string(), self.tri_global),
        ];
        out.extend(strip_names(&self.tri_height, ["t", "d"], "h"));
        out.extend(strip_names(&self.tri_width, ["l", "r"], "w"));
        out.push(("L_tri_gs".to_string(), self.tri_joint));
        out
    }

    pub fn sum_of_terms(&self) -> f64 {
        self.terms().iter().map(|(_, v)| v).sum()
    }
}

/// Differentiable total plus its per-term breakdown.
pub struct Objective<'t, T: Real> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
}

/// Unweighted sum of the three identity losses and all triplet losses.
pub fn total_loss<'t, T: Real>(out: &ForwardOutput<'t, T>, labels: &[usize], margin: f64) -> Result<Objective<'t, T>> {
    let b = &out.branches;
    let scalar = |v: &Var<'t, T>| v.value().item().as_f64();

    let id_g = id_loss(&out.logits_global, labels)?;
    let id_h = id_loss(&out.logits_height, labels)?;
    let id_w = id_loss(&out.logits_width, labels)?;
    let tri_g = triplet_loss(&b.global, labels, margin)?;
    let tri_h = b
        .height_parts
        .iter()
        .map(|f| triplet_loss(f, labels, margin))
        .collect::<Result<Vec<_>>>()?;
    let tri_w = b
        .width_parts
        .iter()
        .map(|f| triplet_loss(f, labels, margin))
        .collect::<Result<Vec<_>>>()?;
    let tri_joint = triplet_loss(&out.embedding, labels, margin)?;

    let mut terms = vec![id_g, id_h, id_w, tri_g];
    terms.extend(tri_h.iter().copied());
    terms.extend(tri_w.iter().copied());
    terms.push(tri_joint);
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }

    let breakdown = LossBreakdown {
        id_global: scalar(&id_g),
        id_height: scalar(&id_h),
        id_width: scalar(&id_w),
        tri_global: scalar(&tri_g),
        tri_height: tri_h.iter().map(scalar).collect(),
        tri_width: tri_w.iter().map(scalar).collect(),
        tri_joint: scalar(&tri_joint),
        total: scalar(&acc),
    };
    Ok(Objective { total: acc, breakdown })
}
