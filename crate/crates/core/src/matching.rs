//! Correlation-based query/support matching.
//!
//! Per stage: the support map is masked and flattened, query and support
//! rows are projected and compared by cosine similarity scaled by `1/t`,
//! the scores are softmax-normalised over the query axis, and the support
//! values are aggregated onto query positions and fused with a prior mask.

use crate::encoder::FeatureMap;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{resize_bilinear, Layout, Tensor};

/// Default cosine temperature `t`.
pub const CORR_TEMPERATURE: f64 = 0.1;

/// Cosine scores and the stage they belong to.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationMap {
    /// `[h_q·w_q, h_s·w_s]` raw scores, each in `[-1/t, 1/t]`.
    pub raw: Var,
    pub stage: usize,
    pub temperature: f64,
}

/// Query-foreground prior in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    pub h: usize,
    pub w: usize,
    /// `[h, w]`
    pub values: Tensor,
}

impl PriorMask {
    /// Bilinear resize to a stage's resolution, flattened to `[h·w]`.
    pub fn at_stage(&self, h: usize, w: usize) -> Result<Tensor> {
        let src = self.values.reshape(&[self.h, self.w, 1])?;
        resize_bilinear(&src, Layout::Hwc, h, w)?.reshape(&[h * w])
    }
}

fn check_binary(op: &'static str, mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(contract(op, "mask values must be 0 or 1"));
    }
    Ok(())
}

/// Nearest-neighbour resize of a binary `[H, W]` mask to `[h, w]`, sampling
/// at half-pixel centres.
pub fn nearest_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = mask.dims2("nearest_mask")?;
    check_binary("nearest_mask", mask)?;
    if h == 0 || w == 0 {
        return Err(contract("nearest_mask", "target size must be positive"));
    }
    let pick = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        mask.at2(pick(y, mh, h), pick(x, mw, w))
    }))
}

/// Masked support rows and the query rows for one stage.
#[derive(Debug, Clone)]
pub struct FlatPair {
    /// `[h·w, c]` query rows.
    pub query: Var,
    /// `[h·w, c]` support rows, zero wherever the support mask is background.
    pub support: Var,
    /// Stage-resolution support mask flattened to `[h·w]`.
    pub support_mask: Tensor,
}

/// Resizes the support mask to the stage by nearest neighbour, zeroes
/// background support features, and flattens both maps to token rows.
pub fn mask_and_flatten(g: &mut Graph, query: &FeatureMap, support: &FeatureMap, mask: &Tensor) -> Result<FlatPair> {
    if query.c != support.c {
        return Err(Error::ShapeMismatch {
            op: "mask_and_flatten",
            lhs: vec![query.c],
            rhs: vec![support.c],
        });
    }
    let stage_mask = nearest_mask(mask, support.h, support.w)?;
    let m = stage_mask.data();
    let c = support.c;
    let expanded = Tensor::from_fn(&[support.h * support.w, c], |i| m[i / c]);
    let mv = g.constant(expanded)?;
    let masked = g.hadamard(support.tokens, mv)?;
    Ok(FlatPair {
        query: query.tokens,
        support: masked,
        support_mask: stage_mask.reshape(&[support.h * support.w])?,
    })
}

/// Concatenates the support rows (and their masks) of all shots along the
/// support axis.
pub fn k_shot_merge(g: &mut Graph, shots: &[(Var, Tensor)]) -> Result<(Var, Tensor)> {
    let (first, _) = shots.first().ok_or_else(|| contract("k_shot_merge", "need at least one shot"))?;
    let shape = g.shape(*first).to_vec();
    for (v, m) in shots {
        if g.shape(*v) != shape.as_slice() || m.numel() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "k_shot_merge",
                lhs: shape,
                rhs: g.shape(*v).to_vec(),
            });
        }
    }
    if shots.len() == 1 {
        return Ok(shots[0].clone());
    }
    let vars: Vec<Var> = shots.iter().map(|(v, _)| *v).collect();
    let merged = g.concat(&vars, 0)?;
    let mask: Vec<f64> = shots.iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
    let n = mask.len();
    Ok((merged, Tensor::new(vec![n], mask)?))
}

/// `C(i, j) = cos(W_q q_i, W_k s_j) / t`, with the cosine against a zero
/// vector defined as 0.
pub fn correlation_map(
    g: &mut Graph,
    query: Var,
    support: Var,
    wq: Var,
    wk: Var,
    temperature: f64,
    stage: usize,
) -> Result<CorrelationMap> {
    if !(temperature > 0.0) {
        return Err(contract("correlation_map", format!("temperature must be positive, got {temperature}")));
    }
    let pq = g.linear(query, wq, None)?;
    let pk = g.linear(support, wk, None)?;
    let nq = g.normalize_rows(pq)?;
    let nk = g.normalize_rows(pk)?;
    let cos = g.linear(nq, nk, None)?;
    let raw = g.scale(cos, 1.0 / temperature)?;
    Ok(CorrelationMap {
        raw,
        stage,
        temperature,
    })
}

/// Softmax over the query axis: every column of the result sums to one.
pub fn inverse_softmax(g: &mut Graph, corr: &CorrelationMap) -> Result<Var> {
    g.softmax(corr.raw, 0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Per query position, the best cosine similarity to any support foreground
/// feature, min-max normalised over the query map. An empty foreground or a
/// constant similarity map gives all zeros.
///
/// `query`: `[h·w, c]`; `support`: `[n, c]`; `support_mask`: `[n]`.
pub fn prior_mask(query: &Tensor, h: usize, w: usize, support: &Tensor, support_mask: &Tensor) -> Result<PriorMask> {
    let (nq, c) = query.dims2("prior_mask")?;
    let (ns, cs) = support.dims2("prior_mask")?;
    if nq != h * w || c != cs || support_mask.numel() != ns {
        return Err(contract("prior_mask", "inconsistent query/support/mask extents"));
    }
    let zeros = || PriorMask {
        h,
        w,
        values: Tensor::zeros(&[h, w]),
    };
    let fg: Vec<&[f64]> = support
        .data()
        .chunks(c)
        .zip(support_mask.data())
        .filter(|(_, &m)| m > 0.0)
        .map(|(row, _)| row)
        .collect();
    if fg.is_empty() {
        return Ok(zeros());
    }
    let sims: Vec<f64> = query
        .data()
        .chunks(c)
        .map(|q| fg.iter().map(|s| cosine(q, s)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Ok(zeros());
    }
    Ok(PriorMask {
        h,
        w,
        values: Tensor::new(vec![h, w], sims.iter().map(|s| (s - lo) / (hi - lo)).collect())?,
    })
}

/// `X = W_o [ψ(Ĉ_row-normalised · W_v Ŝ), prior]`, returned as `[h_q·w_q, c]`
/// token rows.
///
/// `prior` is the stage-resolution prior flattened to `[h_q·w_q]`.
pub fn match_features(g: &mut Graph, corr_hat: Var, support: Var, prior: &Tensor, wv: Var, wo: Var) -> Result<Var> {
    let (nq, ns) = g.value(corr_hat).dims2("match_features")?;
    let (ns2, c) = g.value(support).dims2("match_features")?;
    if ns != ns2 {
        return Err(Error::ShapeMismatch {
            op: "match_features",
            lhs: vec![nq, ns],
            rhs: vec![ns2, c],
        });
    }
    if prior.numel() != nq {
        return Err(contract("match_features", format!("prior has {} entries for {nq} query rows", prior.numel())));
    }
    if g.shape(wo) != [c, c + 1] {
        return Err(Error::ShapeMismatch {
            op: "match_features W_o",
            lhs: g.shape(wo).to_vec(),
            rhs: vec![c, c + 1],
        });
    }
    let values = g.linear(support, wv, None)?;
    let weights = g.row_sum_normalize(corr_hat)?;
    let aggregated = g.matmul(weights, values)?;
    let pv = g.constant(prior.reshape(&[nq, 1])?)?;
    let fused = g.concat(&[aggregated, pv], 1)?;
    g.linear(fused, wo, None)
}
