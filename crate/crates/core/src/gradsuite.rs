//! Finite-difference checks over every differentiable operation, the
//! pipeline modules, and whole training episodes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder;
use crate::distillation::{self, StageDistribution};
use crate::encoder::{self, FeatureMap, StageConfig};
use crate::episodes::{Episode, Sample};
use crate::error::Result;
use crate::gradcheck::{directional_check, finite_diff_check, GradCheck, DEFAULT_STEP, TOLERANCE};
use crate::graph::{Graph, Var};
use crate::matching;
use crate::model::{HdmNet, ModelConfig};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Layout, Tensor};
use crate::train::{loss_teachers, total_loss_with};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<(String, GradCheck)>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|(_, c)| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.checks.iter().all(|(_, c)| c.passes(TOLERANCE))
    }

    pub fn entries_checked(&self) -> usize {
        self.checks.iter().map(|(_, c)| c.checked).sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in [0.1, 1) and random sign, clear of ReLU's kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ probe ⊙ y`, a generic scalar read-out of `y`.
fn probe_sum(g: &mut Graph, y: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.reshape(g.shape(y))?)?;
    let h = g.hadamard(y, p)?;
    g.sum(h)
}

fn probe_for(rng: &mut ChaCha8Rng, numel: usize) -> Tensor {
    uniform(rng, &[numel], -1.0, 1.0)
}

fn check<F>(f: F, params: &[Tensor]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check(f, params, DEFAULT_STEP)
}

/// One check per graph operation.
pub fn op_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (a, b) = (uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0));
    let p = probe_for(&mut rng, 6);
    out.push(("matmul".into(), check(|g, v| { let y = g.matmul(v[0], v[1])?; probe_sum(g, y, &p) }, &[a, b])?));

    let x = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let bias = uniform(&mut rng, &[4], -1.0, 1.0);
    let p = probe_for(&mut rng, 20);
    out.push((
        "linear".into(),
        check(|g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; probe_sum(g, y, &p) }, &[x.clone(), w, bias])?,
    ));

    let p = probe_for(&mut rng, 15);
    out.push(("transpose".into(), check(|g, v| { let y = g.transpose(v[0])?; probe_sum(g, y, &p) }, &[x.clone()])?));

    for axis in 0..2 {
        let s = uniform(&mut rng, &[4, 6], -3.0, 3.0);
        let p = probe_for(&mut rng, 24);
        out.push((
            format!("softmax(axis {axis})"),
            check(|g, v| { let y = g.softmax(v[0], axis)?; probe_sum(g, y, &p) }, &[s])?,
        ));
    }
    let s = uniform(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let p = probe_for(&mut rng, 24);
    out.push(("softmax(rank 3)".into(), check(|g, v| { let y = g.softmax(v[0], 1)?; probe_sum(g, y, &p) }, &[s])?));

    for (layout, shape, oh, ow) in [
        (Layout::Chw, [2, 8, 8], 4, 4),
        (Layout::Chw, [1, 3, 5], 7, 4),
        (Layout::Hwc, [4, 4, 3], 8, 8),
        (Layout::Hwc, [6, 2, 2], 3, 5),
    ] {
        let t = uniform(&mut rng, &shape, -1.0, 1.0);
        let c = if layout == Layout::Chw { shape[0] } else { shape[2] };
        let p = probe_for(&mut rng, c * oh * ow);
        out.push((
            format!("bilinear_resize({layout:?} {shape:?} -> {oh}x{ow})"),
            check(|g, v| { let y = g.resize_bilinear(v[0], layout, oh, ow)?; probe_sum(g, y, &p) }, &[t])?,
        ));
    }

    let r = off_kink(&mut rng, &[4, 5]);
    let p = probe_for(&mut rng, 20);
    out.push(("relu".into(), check(|g, v| { let y = g.relu(v[0])?; probe_sum(g, y, &p) }, &[r])?));

    let (u, w) = (uniform(&mut rng, &[3, 3], -1.0, 1.0), uniform(&mut rng, &[3, 3], -1.0, 1.0));
    let p = probe_for(&mut rng, 9);
    out.push(("add".into(), check(|g, v| { let y = g.add(v[0], v[1])?; probe_sum(g, y, &p) }, &[u.clone(), w.clone()])?));
    out.push(("hadamard".into(), check(|g, v| { let y = g.hadamard(v[0], v[1])?; probe_sum(g, y, &p) }, &[u.clone(), w])?));
    out.push(("scale".into(), check(|g, v| { let y = g.scale(v[0], -2.5)?; probe_sum(g, y, &p) }, &[u])?));

    let (c1, c2) = (uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), uniform(&mut rng, &[1, 3, 4], -1.0, 1.0));
    let p = probe_for(&mut rng, 36);
    out.push((
        "concat(channel)".into(),
        check(|g, v| { let y = g.concat(&[v[0], v[1]], 0)?; probe_sum(g, y, &p) }, &[c1, c2])?,
    ));
    let (c1, c2) = (uniform(&mut rng, &[4, 3], -1.0, 1.0), uniform(&mut rng, &[4, 1], -1.0, 1.0));
    let p = probe_for(&mut rng, 16);
    out.push((
        "concat(last axis)".into(),
        check(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; probe_sum(g, y, &p) }, &[c1, c2])?,
    ));

    let t = uniform(&mut rng, &[2, 6], -1.0, 1.0);
    let p = probe_for(&mut rng, 12);
    out.push(("reshape".into(), check(|g, v| { let y = g.reshape(v[0], &[3, 4])?; probe_sum(g, y, &p) }, &[t])?));

    let t = uniform(&mut rng, &[4, 6, 3], -1.0, 1.0);
    let p = probe_for(&mut rng, 18);
    out.push(("avg_pool2".into(), check(|g, v| { let y = g.avg_pool2(v[0])?; probe_sum(g, y, &p) }, &[t])?));

    let t = uniform(&mut rng, &[5, 4], -2.0, 2.0);
    let p = probe_for(&mut rng, 20);
    out.push((
        "standardize_rows".into(),
        check(|g, v| { let y = g.standardize_rows(v[0], encoder::NORM_EPS)?; probe_sum(g, y, &p) }, &[t.clone()])?,
    ));
    out.push(("normalize_rows".into(), check(|g, v| { let y = g.normalize_rows(v[0])?; probe_sum(g, y, &p) }, &[t])?));
    let t = uniform(&mut rng, &[5, 4], 0.1, 2.0);
    out.push((
        "row_sum_normalize".into(),
        check(|g, v| { let y = g.row_sum_normalize(v[0])?; probe_sum(g, y, &p) }, &[t])?,
    ));

    let t = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(("sum".into(), check(|g, v| g.sum(v[0]), &[t.clone()])?));
    out.push(("mean".into(), check(|g, v| g.mean(v[0]), &[t])?));

    let target = Tensor::new(vec![5], vec![0.1, 0.0, 0.4, 0.3, 0.2])?;
    let logits = uniform(&mut rng, &[5], -1.0, 1.0);
    out.push((
        "kl_div".into(),
        check(
            |g, v| {
                let s = g.softmax(v[0], 0)?;
                g.kl_div(&target, s, distillation::STUDENT_FLOOR)
            },
            &[logits],
        )?,
    ));

    let z = uniform(&mut rng, &[6, 2], -2.0, 2.0);
    let labels = [0, 1, 1, 0, 1, 0];
    out.push(("cross_entropy".into(), check(|g, v| g.cross_entropy(v[0], &labels), &[z])?));

    Ok(out)
}

/// Binds a store with the trainable tensors replaced by the given leaves.
fn bind_with(g: &mut Graph, store: &ParamStore, names: &[String], vars: &[Var]) -> Result<BoundParams> {
    let mut map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
    for (name, p) in store.iter() {
        if !map.contains_key(name) {
            let v = g.constant(p.value.clone())?;
            map.insert(name.to_string(), v);
        }
    }
    Ok(BoundParams::from_map(map))
}

fn trainable(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let names = store.trainable_names();
    let values = names.iter().map(|n| store.get(n).expect("listed name").clone()).collect();
    (names, values)
}

/// Module-level checks: attention block, downsampling, matching, distillation
/// and the decoder, each against all of its parameters.
pub fn module_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut out = Vec::new();

    let cfg = StageConfig {
        channels: vec![4, 6],
        heads: 2,
        ..StageConfig::default()
    };
    let mut store = ParamStore::new();
    encoder::init_params(&cfg, &mut rng, &mut store);
    let (names, values) = trainable(&store);
    let x = uniform(&mut rng, &[16, 4], -1.0, 1.0);
    let p = probe_for(&mut rng, 16 * 4);
    out.push((
        "self_attention_block".into(),
        check(
            |g, v| {
                let b = bind_with(g, &store, &names, v)?;
                let t = g.constant(x.clone())?;
                let y = encoder::self_attention_block(g, t, &b, &cfg, &crate::encoder::block_prefix(1, 0))?;
                probe_sum(g, y, &p)
            },
            &values,
        )?,
    ));
    let p = probe_for(&mut rng, 4 * 6);
    out.push((
        "downsample".into(),
        check(
            |g, v| {
                let b = bind_with(g, &store, &names, v)?;
                let t = g.constant(x.clone())?;
                let f = FeatureMap { tokens: t, h: 4, w: 4, c: 4 };
                let prefix = crate::encoder::down_prefix(1);
                let d = encoder::downsample(g, &f, b.get(&format!("{prefix}.weight"))?, b.get(&format!("{prefix}.bias"))?)?;
                probe_sum(g, d.tokens, &p)
            },
            &values,
        )?,
    ));

    // Matching: correlation, inverse softmax and fusion for one stage, K = 2.
    let c = 4;
    let q = uniform(&mut rng, &[9, c], -1.0, 1.0);
    let s1 = uniform(&mut rng, &[9, c], -1.0, 1.0);
    let s2 = uniform(&mut rng, &[9, c], -1.0, 1.0);
    let m1 = Tensor::from_fn(&[9], |i| f64::from(u8::from(i % 3 != 0)));
    let m2 = Tensor::from_fn(&[9], |i| f64::from(u8::from(i < 5)));
    let prior = uniform(&mut rng, &[9], 0.0, 1.0);
    let weights = vec![
        uniform(&mut rng, &[c, c], -0.5, 0.5),
        uniform(&mut rng, &[c, c], -0.5, 0.5),
        uniform(&mut rng, &[c, c], -0.5, 0.5),
        uniform(&mut rng, &[c, c + 1], -0.5, 0.5),
    ];
    let p = probe_for(&mut rng, 9 * c);
    out.push((
        "matching".into(),
        check(
            |g, v| {
                let qv = g.constant(q.clone())?;
                let mut shots = Vec::new();
                for (s, m) in [(&s1, &m1), (&s2, &m2)] {
                    let sv = g.constant(s.clone())?;
                    let mcol = g.constant(m.reshape(&[9, 1])?.clone())?;
                    let ones = g.constant(Tensor::ones(&[1, c]))?;
                    let mm = g.matmul(mcol, ones)?;
                    let masked = g.hadamard(sv, mm)?;
                    shots.push((masked, m.clone()));
                }
                let (support, mask) = matching::k_shot_merge(g, &shots)?;
                let corr = matching::correlation_map(g, qv, support, v[0], v[1], matching::CORR_TEMPERATURE, 1)?;
                let hat = matching::inverse_softmax(g, &corr)?;
                let x = matching::match_features(g, hat, support, &prior, v[2], v[3])?;
                let _ = mask;
                probe_sum(g, x, &p)
            },
            &weights,
        )?,
    ));

    // Distillation: three stages of raw correlations with projections.
    let dims = [(4, 4), (2, 2), (1, 2)];
    let feats: Vec<(Tensor, Tensor, Tensor)> = dims
        .iter()
        .map(|&(h, w)| {
            let n = h * w;
            let mask = Tensor::from_fn(&[n], |i| f64::from(u8::from(i % 2 == 0)));
            (uniform(&mut rng, &[n, 3], -1.0, 1.0), uniform(&mut rng, &[n, 3], -1.0, 1.0), mask)
        })
        .collect();
    let gt = Tensor::new(vec![2], vec![0.25, 0.75])?;
    let projections: Vec<Tensor> = (0..6).map(|_| uniform(&mut rng, &[3, 3], -1.0, 1.0)).collect();
    let stages_of = |g: &mut Graph, v: &[Var]| -> Result<Vec<StageDistribution>> {
        let mut stages = Vec::new();
        for (li, ((qf, sf, mask), &(h, w))) in feats.iter().zip(&dims).enumerate() {
            let qv = g.constant(qf.clone())?;
            let sv = g.constant(sf.clone())?;
            let corr = matching::correlation_map(g, qv, sv, v[2 * li], v[2 * li + 1], 0.5, li + 1)?;
            let r = distillation::reorganize_correlation(g, corr.raw, mask)?.expect("mask has foreground");
            let d = distillation::spatial_softmax(g, r, 1.0)?;
            stages.push(StageDistribution { dist: Some(d), h, w });
        }
        Ok(stages)
    };
    // Teachers are detached, so the oracle holds them at their base values.
    let teachers = {
        let mut g = Graph::new();
        let vars = projections.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let stages = stages_of(&mut g, &vars)?;
        distillation::stage_teachers(&g, &stages, &gt)?
    };
    out.push((
        "distillation".into(),
        check(
            |g, v| {
                let stages = stages_of(g, v)?;
                let terms = distillation::distill_loss_with(g, &stages, &teachers)?;
                Ok(terms.total.expect("all stages active"))
            },
            &projections,
        )?,
    ));
    let channels = [3, 5];
    let mut store = ParamStore::new();
    decoder::init_params(&channels, &mut rng, &mut store);
    let (names, values) = trainable(&store);
    let x1 = uniform(&mut rng, &[16, 3], -1.0, 1.0);
    let x2 = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let p = probe_for(&mut rng, 16 * 16 * 2);
    out.push((
        "decoder".into(),
        check(
            |g, v| {
                let b = bind_with(g, &store, &names, v)?;
                let a = g.constant(x1.clone())?;
                let c = g.constant(x2.clone())?;
                let fused = decoder::decode(g, &b, &[(a, 4, 4), (c, 2, 2)])?;
                let m = decoder::predict_mask(g, &b, fused[0], 4, 4, 16, 16)?;
                probe_sum(g, m.logits, &p)
            },
            &values,
        )?,
    ));
    Ok(out)
}

/// Uniform-noise images with random rectangular masks, so every token is
/// distinct and no gradient entry vanishes by symmetry.
pub fn toy_episode(size: usize, k: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57);
    let sample = |rng: &mut ChaCha8Rng| {
        let image = uniform(rng, &[3, size, size], 0.0, 1.0);
        let (y0, x0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
        let (y1, x1) = (rng.gen_range(y0 + 2..=size), rng.gen_range(x0 + 2..=size));
        let mask = Tensor::from_fn(&[size, size], |i| {
            let (y, x) = (i / size, i % size);
            f64::from(u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x)))
        });
        Sample { image, mask }
    };
    let query = sample(&mut rng);
    let support = (0..k).map(|_| sample(&mut rng)).collect();
    Episode {
        class_id: 0,
        query,
        support,
    }
}

/// Builds the toy-episode loss over every trainable parameter of a fresh
/// model and hands it to `run` together with the parameter values.
fn with_episode_loss<R>(
    config: ModelConfig,
    size: usize,
    k: usize,
    seed: u64,
    run: impl FnOnce(&dyn Fn(&mut Graph, &[Var]) -> Result<Var>, &[Tensor]) -> Result<R>,
) -> Result<R> {
    let net = HdmNet::new(config, seed)?;
    let episode = toy_episode(size, k, seed);
    let (names, values) = trainable(net.params());
    // Teachers are detached, so the oracle holds them at their base values.
    let teachers = {
        let (g, pass) = net.infer(&episode.query.image, &episode.support_pairs())?;
        loss_teachers(&g, &episode.query.mask, &pass.stage_distributions())?
    };
    let loss = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let b = bind_with(g, net.params(), &names, v)?;
        let pass = net.forward(g, &b, &episode.query.image, &episode.support_pairs())?;
        let terms = total_loss_with(g, &pass.logits, &episode.query.mask, &pass.stage_distributions(), &teachers, 1.0)?;
        Ok(terms.total)
    };
    run(&loss, &values)
}

/// Total loss of one toy episode against every trainable parameter, entry by
/// entry.
pub fn episode_check(config: ModelConfig, size: usize, k: usize, seed: u64) -> Result<GradCheck> {
    with_episode_loss(config, size, k, seed, |f, values| check(f, values))
}

/// Total loss of one toy episode along `directions` random directions in the
/// space of all trainable parameters.
pub fn episode_directional_check(config: ModelConfig, size: usize, k: usize, seed: u64, directions: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1EC);
    with_episode_loss(config, size, k, seed, |f, values| {
        let dirs: Vec<Vec<Tensor>> = (0..directions)
            .map(|_| values.iter().map(|v| uniform(&mut rng, v.shape(), -1.0, 1.0)).collect())
            .collect();
        directional_check(f, values, &dirs, DEFAULT_STEP)
    })
}

/// Small model used by the end-to-end checks.
pub fn tiny_config(channels: Vec<usize>) -> ModelConfig {
    ModelConfig {
        stages: StageConfig {
            channels,
            ..StageConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn end_to_end_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    Ok(vec![
        ("episode 16x16, L=1".into(), episode_check(tiny_config(vec![4]), 16, 1, seed)?),
        (
            "episode 32x32, L=2, K=2, 16 directions".into(),
            episode_directional_check(tiny_config(vec![3, 4]), 32, 2, seed, 16)?,
        ),
    ])
}

pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = op_checks(seed)?;
    checks.extend(module_checks(seed)?);
    checks.extend(end_to_end_checks(seed)?);
    Ok(SuiteReport { checks })
}
