//! Foreground IoU and per-class mean IoU over episodes.

use std::collections::BTreeMap;
use std::fmt;

use crate::episodes::{indexed_episode, Episode, SplitSpec, SyntheticClass};
use crate::error::{contract, Error, Result};
use crate::model::HdmNet;
use crate::tensor::Tensor;

/// `|pred ∩ gt| / |pred ∪ gt|` over foreground pixels; 1 when both are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (binary(p)?, binary(g)?);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn binary(v: f64) -> Result<bool> {
    if v == 0.0 || v == 1.0 {
        Ok(v == 1.0)
    } else {
        Err(contract("iou", "masks must be binary"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class_id: usize,
    pub mean_iou: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<ClassScore>,
    pub episodes: usize,
    pub k: usize,
    pub seed: u64,
}

impl fmt::Display for MiouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "episodes={} k={} seed={}", self.episodes, self.k, self.seed)?;
        for c in &self.per_class {
            writeln!(f, "class {}: iou={} episodes={}", c.class_id, c.mean_iou, c.episodes)?;
        }
        write!(f, "miou={}", self.miou)
    }
}

/// Mean over classes of each class's mean episode IoU. Sums run in class-id
/// order, so the result does not depend on episode order.
pub fn miou(scores: &[(usize, f64)]) -> (f64, Vec<ClassScore>) {
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(id, s) in scores {
        by_class.entry(id).or_default().push(s);
    }
    let per_class: Vec<ClassScore> = by_class
        .into_iter()
        .map(|(class_id, mut v)| {
            v.sort_by(f64::total_cmp);
            ClassScore {
                class_id,
                mean_iou: v.iter().sum::<f64>() / v.len() as f64,
                episodes: v.len(),
            }
        })
        .collect();
    let m = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.mean_iou).sum::<f64>() / per_class.len() as f64
    };
    (m, per_class)
}

/// Anything that turns an episode into a binary query mask.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Tensor>;
}

impl Predictor for HdmNet {
    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        HdmNet::predict(self, &episode.query.image, &episode.support_pairs())
    }
}

/// Returns the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        Ok(episode.query.mask.clone())
    }
}

/// Predicts background everywhere.
pub struct BackgroundPredictor;

impl Predictor for BackgroundPredictor {
    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        Ok(Tensor::zeros(episode.query.mask.shape()))
    }
}

pub fn evaluate_episodes<P: Predictor + ?Sized>(predictor: &P, episodes: &[Episode], k: usize, seed: u64) -> Result<MiouReport> {
    let scores = episodes
        .iter()
        .map(|e| Ok((e.class_id, iou(&predictor.predict(e)?, &e.query.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    let (m, per_class) = miou(&scores);
    Ok(MiouReport {
        miou: m,
        per_class,
        episodes: episodes.len(),
        k,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSpec {
    pub episodes: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Samples `spec.episodes` test-class episodes, each from its own rng stream,
/// and scores them in index order.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, bank: &[SyntheticClass], split: &SplitSpec, spec: EvalSpec) -> Result<MiouReport> {
    if split.test().is_empty() {
        return Err(contract("evaluate", "split has no test classes"));
    }
    split.check_bank(bank)?;
    let mut scores = Vec::with_capacity(spec.episodes);
    for i in 0..spec.episodes as u64 {
        let e = indexed_episode(bank, split.test(), i, spec.k, spec.height, spec.width, spec.seed)?;
        scores.push((e.class_id, iou(&predictor.predict(&e)?, &e.query.mask)?));
    }
    let (m, per_class) = miou(&scores);
    Ok(MiouReport {
        miou: m,
        per_class,
        episodes: spec.episodes,
        k: spec.k,
        seed: spec.seed,
    })
}
