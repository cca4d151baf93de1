//! Correlation-map distillation across pyramid stages.
//!
//! Each stage's raw correlation is averaged over support-foreground columns,
//! turned into a spatial distribution over query positions, and pulled
//! towards the next coarser stage's distribution (resized, detached). The
//! coarsest stage learns from the query ground truth.

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{resize_bilinear, Layout, Tensor};

/// Default distillation temperature `T`.
pub const DISTILL_TEMPERATURE: f64 = 1.0;

/// Floor applied to student probabilities inside the logarithm.
pub const STUDENT_FLOOR: f64 = 1e-12;

/// Mean of `C(i, j)` over support columns with `mask[j] > 0`, as a
/// `[h_q·w_q]` vector. `None` when the stage has no foreground support
/// column; such a stage takes no part in the distillation loss.
pub fn reorganize_correlation(g: &mut Graph, corr: Var, support_mask: &Tensor) -> Result<Option<Var>> {
    let (nq, ns) = g.value(corr).dims2("reorganize_correlation")?;
    if support_mask.numel() != ns {
        return Err(Error::ShapeMismatch {
            op: "reorganize_correlation",
            lhs: vec![nq, ns],
            rhs: support_mask.shape().to_vec(),
        });
    }
    let count = support_mask.data().iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    let weights = Tensor::from_fn(&[ns, 1], |j| {
        if support_mask.data()[j] > 0.0 {
            1.0 / count as f64
        } else {
            0.0
        }
    });
    let wv = g.constant(weights)?;
    let mean = g.matmul(corr, wv)?;
    Ok(Some(g.reshape(mean, &[nq])?))
}

/// `softmax(c / T)` over all query positions.
pub fn spatial_softmax(g: &mut Graph, reorganized: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(contract("spatial_softmax", format!("temperature must be positive, got {temperature}")));
    }
    let n = g.value(reorganized).numel();
    let flat = g.reshape(reorganized, &[n])?;
    let scaled = g.scale(flat, 1.0 / temperature)?;
    g.softmax(scaled, 0)
}

/// Bilinear resize of a `[h·w]` distribution to `[oh·ow]`, renormalised to sum 1.
pub fn resize_distribution(p: &Tensor, h: usize, w: usize, oh: usize, ow: usize) -> Result<Tensor> {
    if p.numel() != h * w {
        return Err(contract("resize_distribution", format!("{} values for a {h}×{w} map", p.numel())));
    }
    let r = resize_bilinear(&p.reshape(&[h, w, 1])?, Layout::Hwc, oh, ow)?;
    let total = r.sum();
    if !(total > 0.0) {
        return Err(contract("resize_distribution", "resized map has no mass"));
    }
    r.reshape(&[oh * ow]).map(|t| t.map(|v| v / total))
}

/// `KL(teacher ‖ student)` with the teacher held constant.
pub fn kl_stage_loss(g: &mut Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    g.kl_div(teacher, student, STUDENT_FLOOR)
}

/// Ground-truth distribution at a stage: the query mask area-averaged onto
/// `[h, w]` cells and normalised to sum 1. An all-background mask yields the
/// uniform distribution.
pub fn gt_teacher(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = mask.dims2("gt_teacher")?;
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(contract("gt_teacher", format!("{mh}×{mw} mask cannot be area-averaged onto {h}×{w}")));
    }
    let (fy, fx) = (mh / h, mw / w);
    let cells: Vec<f64> = (0..h * w)
        .map(|i| {
            let (cy, cx) = (i / w, i % w);
            let mut s = 0.0;
            for y in cy * fy..(cy + 1) * fy {
                for x in cx * fx..(cx + 1) * fx {
                    s += mask.at2(y, x);
                }
            }
            s / (fy * fx) as f64
        })
        .collect();
    let total: f64 = cells.iter().sum();
    let n = cells.len();
    if total <= 0.0 {
        return Ok(Tensor::full(&[n], 1.0 / n as f64));
    }
    Tensor::new(vec![n], cells.into_iter().map(|v| v / total).collect())
}

/// One stage's contribution to the distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct StageDistribution {
    /// Spatial distribution `[h·w]`, or `None` for an excluded stage.
    pub dist: Option<Var>,
    pub h: usize,
    pub w: usize,
}

/// Breakdown of the distillation loss.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    /// Sum of all active terms; `None` when every stage was excluded.
    pub total: Option<Var>,
    /// `(student stage, teacher stage)` pairs that contributed, 1-based;
    /// the teacher index `L + 1` denotes the ground truth.
    pub pairs: Vec<(usize, usize)>,
}

/// The constant target each stage is pulled towards: the next coarser
/// stage's current distribution resized to this stage, or `gt` for the last
/// stage. `None` where the stage or its teacher is excluded.
pub fn stage_teachers(g: &Graph, stages: &[StageDistribution], gt: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let l = stages.len();
    let mut out = Vec::with_capacity(l);
    for s in 0..l {
        if stages[s].dist.is_none() {
            out.push(None);
            continue;
        }
        let teacher = if s + 1 < l {
            let next = &stages[s + 1];
            match next.dist {
                Some(t) => Some(resize_distribution(g.value(t), next.h, next.w, stages[s].h, stages[s].w)?),
                None => None,
            }
        } else {
            if gt.numel() != stages[s].h * stages[s].w {
                return Err(contract("distill_loss", "ground-truth teacher does not match the last stage"));
            }
            Some(gt.clone())
        };
        out.push(teacher);
    }
    Ok(out)
}

/// Sum of `KL(teacher_l ‖ student_l)` over stages with both present.
pub fn distill_loss_with(g: &mut Graph, stages: &[StageDistribution], teachers: &[Option<Tensor>]) -> Result<DistillTerms> {
    if teachers.len() != stages.len() {
        return Err(contract("distill_loss", "one teacher slot per stage is required"));
    }
    let mut total: Option<Var> = None;
    let mut pairs = Vec::new();
    for (s, (stage, teacher)) in stages.iter().zip(teachers).enumerate() {
        let (Some(student), Some(teacher)) = (stage.dist, teacher) else { continue };
        let term = kl_stage_loss(g, teacher, student)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        pairs.push((s + 1, s + 2));
    }
    Ok(DistillTerms { total, pairs })
}

/// Adjacent-stage KL terms (teacher = stage l+1, detached and resized) plus
/// the ground-truth term on the last stage.
pub fn distill_loss(g: &mut Graph, stages: &[StageDistribution], gt: &Tensor) -> Result<DistillTerms> {
    let teachers = stage_teachers(g, stages, gt)?;
    distill_loss_with(g, stages, &teachers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reorganize_cases() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap()).unwrap();
        let single = reorganize_correlation(&mut g, c, &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap())
            .unwrap()
            .unwrap();
        assert_eq!(g.value(single).data(), &[3.0, 4.0]);
        let both = reorganize_correlation(&mut g, c, &Tensor::ones(&[2])).unwrap().unwrap();
        assert_eq!(g.value(both).data(), &[2.0, 1.0]);
        assert!(reorganize_correlation(&mut g, c, &Tensor::zeros(&[2])).unwrap().is_none());

        let k = g.constant(Tensor::full(&[3, 4], 2.5)).unwrap();
        let m = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let r = reorganize_correlation(&mut g, k, &m).unwrap().unwrap();
        assert!(g.value(r).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn spatial_softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![3f64.ln(), 0.0]).unwrap()).unwrap();
        let p = spatial_softmax(&mut g, x, 1.0).unwrap();
        assert!((g.value(p).data()[0] - 0.75).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 0.25).abs() < 1e-15);
        assert!(spatial_softmax(&mut g, x, 0.0).is_err());

        let c = g.constant(Tensor::full(&[4], 7.0)).unwrap();
        let u = spatial_softmax(&mut g, c, 1.0).unwrap();
        assert!(g.value(u).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let y = g.constant(Tensor::new(vec![3], vec![5.0, -2.0, 1.0]).unwrap()).unwrap();
        let spread = |g: &mut Graph, t: f64| {
            let p = spatial_softmax(g, y, t).unwrap();
            let d = g.value(p).data().to_vec();
            d.iter().copied().fold(f64::MIN, f64::max) - d.iter().copied().fold(f64::MAX, f64::min)
        };
        let (a, b, c) = (spread(&mut g, 1.0), spread(&mut g, 10.0), spread(&mut g, 1e6));
        assert!(a > b && b > c && c < 1e-5);
    }

    #[test]
    fn gt_teacher_cases() {
        let mut m = vec![0.0; 64];
        m[9] = 1.0; // row 1, col 1 -> cell (0, 0) of a 4x4 grid of 2x2 cells
        let one = gt_teacher(&Tensor::new(vec![8, 8], m).unwrap(), 4, 4).unwrap();
        assert_eq!(one.data()[0], 1.0);
        assert_eq!(one.sum(), 1.0);

        let full = gt_teacher(&Tensor::ones(&[8, 8]), 4, 4).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0 / 16.0));
        let empty = gt_teacher(&Tensor::zeros(&[8, 8]), 4, 4).unwrap();
        assert!(empty.data().iter().all(|&v| v == 1.0 / 16.0));

        // Left half foreground on 4x4, evaluated on a 2x2 grid.
        let half = Tensor::from_fn(&[4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        assert_eq!(gt_teacher(&half, 2, 2).unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
        assert!(gt_teacher(&half, 3, 3).is_err());
    }

    #[test]
    fn resized_teacher_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::from_fn(&[4], |_| rng.gen_range(0.1..1.0));
        let p = p.map(|v| v / p.sum());
        let r = resize_distribution(&p, 2, 2, 4, 4).unwrap();
        assert_eq!(r.numel(), 16);
        assert!((r.sum() - 1.0).abs() < 1e-12);
        assert!(r.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kl_hand_values() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        let kl = kl_stage_loss(&mut g, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), s).unwrap();
        assert!((g.value(kl).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let same = kl_stage_loss(&mut g, &Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), s).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn single_stage_uses_only_ground_truth() {
        let mut g = Graph::new();
        let d = g.param(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let gt = Tensor::new(vec![4], vec![0.25; 4]).unwrap();
        let terms = distill_loss(&mut g, &[StageDistribution { dist: Some(d), h: 2, w: 2 }], &gt).unwrap();
        assert_eq!(terms.pairs, vec![(1, 2)]);
        let expect: f64 = [0.1f64, 0.2, 0.3, 0.4].iter().map(|q| 0.25 * (0.25f64 / q).ln()).sum();
        assert!((g.value(terms.total.unwrap()).item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn excluded_stages_drop_their_terms() {
        let mut g = Graph::new();
        let d = g.param(Tensor::full(&[4], 0.25)).unwrap();
        let gt = Tensor::full(&[1], 1.0);
        let stages = [
            StageDistribution { dist: Some(d), h: 2, w: 2 },
            StageDistribution { dist: None, h: 1, w: 1 },
        ];
        let terms = distill_loss(&mut g, &stages, &gt).unwrap();
        assert!(terms.total.is_none() && terms.pairs.is_empty());
    }
}
