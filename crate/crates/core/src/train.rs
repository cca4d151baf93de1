//! Objective, optimiser and the episodic training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Dtype};
use crate::config::RunConfig;
use crate::decoder::MaskLogits;
use crate::distillation::{distill_loss_with, gt_teacher, stage_teachers, StageDistribution};
use crate::episodes::{episode_pool, generate_class_bank, Episode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{evaluate_episodes, MiouReport};
use crate::model::{ForwardPass, HdmNet};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Offset separating the training-pool stream from the init seed.
const POOL_SEED_OFFSET: u64 = 0x5EED_0001;

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// Unweighted distillation loss; `None` when every stage is excluded.
    pub kl: Option<Var>,
}

/// Pixel-wise two-class cross-entropy plus `lambda_kl` times the distillation loss.
pub fn total_loss(
    g: &mut Graph,
    logits: &MaskLogits,
    query_mask: &Tensor,
    stages: &[StageDistribution],
    lambda_kl: f64,
) -> Result<LossTerms> {
    let teachers = loss_teachers(g, query_mask, stages)?;
    total_loss_with(g, logits, query_mask, stages, &teachers, lambda_kl)
}

/// Distillation targets for `total_loss`: detached coarser stages and the
/// area-averaged query mask for the last stage.
pub fn loss_teachers(g: &Graph, query_mask: &Tensor, stages: &[StageDistribution]) -> Result<Vec<Option<Tensor>>> {
    let last = stages.last().ok_or_else(|| Error::Contract {
        op: "total_loss",
        msg: "no stages".into(),
    })?;
    let gt = gt_teacher(query_mask, last.h, last.w)?;
    stage_teachers(g, stages, &gt)
}

/// `total_loss` against explicitly supplied distillation targets.
pub fn total_loss_with(
    g: &mut Graph,
    logits: &MaskLogits,
    query_mask: &Tensor,
    stages: &[StageDistribution],
    teachers: &[Option<Tensor>],
    lambda_kl: f64,
) -> Result<LossTerms> {
    if query_mask.numel() != logits.height * logits.width {
        return Err(Error::ShapeMismatch {
            op: "total_loss",
            lhs: vec![logits.height, logits.width],
            rhs: query_mask.shape().to_vec(),
        });
    }
    let labels: Vec<usize> = query_mask.data().iter().map(|&m| usize::from(m > 0.0)).collect();
    let ce = g.cross_entropy(logits.logits, &labels)?;
    let kl = distill_loss_with(g, stages, teachers)?.total;
    let total = match kl {
        Some(kl) if lambda_kl != 0.0 => {
            let weighted = g.scale(kl, lambda_kl)?;
            g.add(ce, weighted)?
        }
        _ => ce,
    };
    Ok(LossTerms { total, ce, kl })
}

/// Runs the model on one episode and builds its loss.
pub fn episode_loss(
    net: &HdmNet,
    g: &mut Graph,
    bound: &BoundParams,
    episode: &Episode,
    lambda_kl: f64,
) -> Result<(LossTerms, ForwardPass)> {
    let pass = net.forward(g, bound, &episode.query.image, &episode.support_pairs())?;
    let terms = total_loss(g, &pass.logits, &episode.query.mask, &pass.stage_distributions(), lambda_kl)?;
    Ok((terms, pass))
}

/// `lr · (1 + cos(π·step/steps)) / 2`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let current = params.get(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for (vi, gi) in v.iter_mut().zip(grad.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let next: Vec<f64> = current.data().iter().zip(v.iter()).map(|(p, vi)| p - lr * vi).collect();
            params.set(name, Tensor::new(current.shape().to_vec(), next)?)?;
        }
        Ok(())
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`; a non-positive `max_norm` leaves them unchanged.
pub fn clip_global_norm(grads: BTreeMap<String, Tensor>, max_norm: f64) -> BTreeMap<String, Tensor> {
    if max_norm <= 0.0 {
        return grads;
    }
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm {
        return grads;
    }
    let s = max_norm / norm;
    grads.into_iter().map(|(k, t)| (k, t.map(|v| v * s))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: HdmNet,
    pub log: Vec<LogRow>,
    /// `(step, report)` for each periodic train-split evaluation.
    pub evals: Vec<(usize, MiouReport)>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::from("step,loss,ce,kl\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.ce, r.kl);
        }
        s
    }
}

/// The fixed training episodes a run draws from.
pub fn training_pool(cfg: &RunConfig) -> Result<Vec<Episode>> {
    let bank = generate_class_bank(cfg.n_classes, cfg.bank_seed)?;
    episode_pool(
        &bank,
        cfg.split.train(),
        cfg.train_episodes,
        cfg.k,
        cfg.image_size,
        cfg.image_size,
        cfg.seed.wrapping_add(POOL_SEED_OFFSET),
    )
}

/// Gradients of the mean loss over `batch`, plus the mean loss terms.
pub fn batch_gradients(
    net: &HdmNet,
    batch: &[&Episode],
    lambda_kl: f64,
) -> Result<(BTreeMap<String, Tensor>, LogRow)> {
    let names = net.params().trainable_names();
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut row = LogRow {
        step: 0,
        loss: 0.0,
        ce: 0.0,
        kl: 0.0,
    };
    let scale = 1.0 / batch.len() as f64;
    for episode in batch {
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g)?;
        let (terms, _) = episode_loss(net, &mut g, &bound, episode, lambda_kl)?;
        row.loss += g.value(terms.total).item()? * scale;
        row.ce += g.value(terms.ce).item()? * scale;
        if let Some(k) = terms.kl {
            row.kl += g.value(k).item()? * scale;
        }
        g.backward(terms.total)?;
        for name in &names {
            let grad = g.grad(bound.get(name)?).unwrap_or_else(|| Tensor::zeros(net.params().get(name).unwrap().shape()));
            let acc = sums.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
            for (a, v) in acc.iter_mut().zip(grad.data()) {
                *a += v * scale;
            }
        }
    }
    let grads = sums
        .into_iter()
        .map(|(name, v)| {
            let shape = net.params().get(&name)?.shape().to_vec();
            Ok((name, Tensor::new(shape, v)?))
        })
        .collect::<Result<_>>()?;
    Ok((grads, row))
}

/// Trains on the fixed pool; `on_step` sees every log row as it is produced.
pub fn train_with(cfg: &RunConfig, pool: &[Episode], mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = HdmNet::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&Episode> = (0..cfg.batch).map(|_| &pool[rng.gen_range(0..pool.len())]).collect();
        let (grads, mut row) = batch_gradients(&net, &batch, cfg.lambda_kl).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in `{op}`"),
            },
            other => other,
        })?;
        row.step = step;
        if !row.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}", row.loss),
            });
        }
        let grads = clip_global_norm(grads, cfg.clip_norm);
        opt.step(net.params_mut(), &grads, cosine_lr(cfg.lr, step, cfg.steps))?;
        if let Some((name, _)) = net.params().iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("parameter `{name}` became non-finite"),
            });
        }
        on_step(&row);
        log.push(row);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            evals.push((step + 1, evaluate_episodes(&net, pool, cfg.k, cfg.seed)?));
        }
    }
    Ok(TrainOutcome { net, log, evals })
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let pool = training_pool(cfg)?;
    train_with(cfg, &pool, |_| {})
}

/// Writes the checkpoint and log paths named in the config, if any.
pub fn write_outputs(cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        save_model(path, &outcome.net)?;
    }
    if let Some(path) = &cfg.log {
        std::fs::write(path, outcome.log_text())?;
    }
    Ok(())
}

pub fn save_model(path: &Path, net: &HdmNet) -> Result<()> {
    checkpoint::save(path, &net.to_records(Dtype::F64))
}

pub fn load_model(path: &Path) -> Result<HdmNet> {
    HdmNet::from_records(&checkpoint::load(path)?)
}
