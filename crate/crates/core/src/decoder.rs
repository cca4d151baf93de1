//! Coarse-to-fine fusion of enriched stage features and the mask head.

use rand::Rng;

use crate::encoder::mlp;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Layout, Tensor};

pub(crate) fn mlp_prefix(stage: usize) -> String {
    format!("decoder.s{stage}.mlp")
}

pub(crate) fn align_prefix(stage: usize) -> String {
    format!("decoder.s{stage}.align")
}

pub fn init_params<R: Rng>(channels: &[usize], rng: &mut R, store: &mut ParamStore) {
    for (li, &c) in channels.iter().enumerate() {
        let stage = li + 1;
        let p = mlp_prefix(stage);
        store.init_uniform(rng, format!("{p}.w1"), &[c, c], c, true);
        store.init_uniform(rng, format!("{p}.b1"), &[c], c, true);
        store.init_uniform(rng, format!("{p}.w2"), &[c, c], c, true);
        store.init_uniform(rng, format!("{p}.b2"), &[c], c, true);
        if let Some(&coarse) = channels.get(li + 1) {
            let p = align_prefix(stage);
            store.init_uniform(rng, format!("{p}.weight"), &[c, coarse], coarse, true);
            store.init_uniform(rng, format!("{p}.bias"), &[c], coarse, true);
        }
    }
    let c1 = channels[0];
    store.init_uniform(rng, "head.weight", &[2, c1], c1, true);
    store.init_uniform(rng, "head.bias", &[2], c1, true);
}

/// The already-fused coarser stage `X'_{l+1}` as `[h·w, c]` tokens.
#[derive(Debug, Clone, Copy)]
pub struct Coarser {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

/// `X'_l = ReLU(MLP(X_l + ζ(X'_{l+1}))) + ζ(X'_{l+1})`, where `ζ` projects
/// channels `c_{l+1} → c_l` and resizes bilinearly to `(h, w)`.
///
/// The coarsest stage has no predecessor; there the skip path carries `X_L`
/// itself: `X'_L = ReLU(MLP(X_L)) + X_L`.
pub fn fuse_stage(
    g: &mut Graph,
    bound: &BoundParams,
    stage: usize,
    x: Var,
    h: usize,
    w: usize,
    coarser: Option<Coarser>,
) -> Result<Var> {
    let (n, c) = g.value(x).dims2("fuse_stage")?;
    if n != h * w {
        return Err(Error::ShapeMismatch {
            op: "fuse_stage",
            lhs: vec![n, c],
            rhs: vec![h, w],
        });
    }
    let (inner, skip) = match coarser {
        Some(prev) => {
            let p = align_prefix(stage);
            let projected = g.linear(prev.tokens, bound.get(&format!("{p}.weight"))?, Some(bound.get(&format!("{p}.bias"))?))?;
            let spatial = g.reshape(projected, &[prev.h, prev.w, c])?;
            let resized = g.resize_bilinear(spatial, Layout::Hwc, h, w)?;
            let z = g.reshape(resized, &[n, c])?;
            (g.add(x, z)?, z)
        }
        None => (x, x),
    };
    let m = mlp(g, inner, bound, &mlp_prefix(stage))?;
    let r = g.relu(m)?;
    g.add(r, skip)
}

/// Runs the decoder from the coarsest stage down to stage 1.
///
/// `enriched[l]` holds `X_{l+1}` as `[h·w, c]` tokens with its `(h, w)`.
pub fn decode(g: &mut Graph, bound: &BoundParams, enriched: &[(Var, usize, usize)]) -> Result<Vec<Var>> {
    let mut fused = vec![None; enriched.len()];
    let mut prev: Option<Coarser> = None;
    for (li, &(x, h, w)) in enriched.iter().enumerate().rev() {
        let out = fuse_stage(g, bound, li + 1, x, h, w, prev)?;
        fused[li] = Some(out);
        prev = Some(Coarser { tokens: out, h, w });
    }
    Ok(fused.into_iter().map(|v| v.expect("every stage fused")).collect())
}

/// Head output: 1×1 conv to two logits, bilinear upsampling to full size.
#[derive(Debug, Clone, Copy)]
pub struct MaskLogits {
    /// `[H·W, 2]` (background, foreground) per pixel, row-major over pixels.
    pub logits: Var,
    pub height: usize,
    pub width: usize,
}

pub fn predict_mask(
    g: &mut Graph,
    bound: &BoundParams,
    x1: Var,
    h1: usize,
    w1: usize,
    height: usize,
    width: usize,
) -> Result<MaskLogits> {
    let small = g.linear(x1, bound.get("head.weight")?, Some(bound.get("head.bias")?))?;
    let spatial = g.reshape(small, &[h1, w1, 2])?;
    let up = g.resize_bilinear(spatial, Layout::Hwc, height, width)?;
    let logits = g.reshape(up, &[height * width, 2])?;
    Ok(MaskLogits { logits, height, width })
}

/// Per-pixel argmax of `[H·W, 2]` logits; ties resolve to background.
pub fn argmax_mask(logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, k) = logits.dims2("argmax_mask")?;
    if n != height * width || k != 2 {
        return Err(Error::ShapeMismatch {
            op: "argmax_mask",
            lhs: vec![n, k],
            rhs: vec![height * width, 2],
        });
    }
    let d = logits.data();
    Ok(Tensor::from_fn(&[height, width], |i| {
        if d[2 * i + 1] > d[2 * i] {
            1.0
        } else {
            0.0
        }
    }))
}

/// `[H·W, 2]` pixel logits reordered to `[2, H, W]`.
pub fn logits_chw(logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let t = logits.reshape(&[height, width, 2])?;
    Ok(crate::encoder::hwc_to_chw(&t, height, width, 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_STEP, TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_mlps(store: &mut ParamStore, channels: &[usize]) {
        for (li, &c) in channels.iter().enumerate() {
            let p = mlp_prefix(li + 1);
            for (n, s) in [("w1", vec![c, c]), ("b1", vec![c]), ("w2", vec![c, c]), ("b2", vec![c])] {
                store.set(&format!("{p}.{n}"), Tensor::zeros(&s)).unwrap();
            }
        }
    }

    #[test]
    fn zero_mlp_passes_resized_coarse_features() {
        let channels = [2, 3];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&channels, &mut rng, &mut store);
        zero_mlps(&mut store, &channels);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let x1 = g.constant(rand_tensor(&[16, 2], &mut rng)).unwrap();
        let x2 = g.constant(rand_tensor(&[4, 3], &mut rng)).unwrap();
        let fused = decode(&mut g, &bound, &[(x1, 4, 4), (x2, 2, 2)]).unwrap();
        // Base case with a zero MLP is X_L itself.
        assert_eq!(g.value(fused[1]), g.value(x2));
        // Stage 1 equals ζ(X'_2): project, then resize.
        let mut h = Graph::new();
        let b2 = store.bind(&mut h).unwrap();
        let c = h.constant(g.value(x2).clone()).unwrap();
        let p = h
            .linear(c, b2.get("decoder.s1.align.weight").unwrap(), Some(b2.get("decoder.s1.align.bias").unwrap()))
            .unwrap();
        let sp = h.reshape(p, &[2, 2, 2]).unwrap();
        let r = h.resize_bilinear(sp, Layout::Hwc, 4, 4).unwrap();
        assert_eq!(h.value(r).data(), g.value(fused[0]).data());
    }

    #[test]
    fn equal_sizes_skip_resize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 1, 3], |i| i as f64)).unwrap();
        let y = g.resize_bilinear(x, Layout::Hwc, 4, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn argmax_and_ties() {
        let fg = Tensor::from_fn(&[4, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
        assert!(argmax_mask(&fg, 2, 2).unwrap().data().iter().all(|&v| v == 1.0));
        let tied = Tensor::full(&[4, 2], 0.3);
        assert!(argmax_mask(&tied, 2, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(argmax_mask(&tied, 2, 3).is_err());
    }

    #[test]
    fn head_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_params(&[4], &mut rng, &mut store);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let x = g.constant(rand_tensor(&[4, 4], &mut rng)).unwrap();
        let out = predict_mask(&mut g, &bound, x, 2, 2, 16, 16).unwrap();
        assert_eq!(g.shape(out.logits), &[256, 2]);
        let chw = logits_chw(g.value(out.logits), 16, 16).unwrap();
        assert_eq!(chw.shape(), &[2, 16, 16]);
        assert_eq!(chw.data()[256 + 17], g.value(out.logits).at2(17, 1));
    }

    #[test]
    fn fuse_gradients() {
        let channels = [2, 3];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_params(&channels, &mut rng, &mut store);
        let names = store.trainable_names();
        let tensors: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let x1 = rand_tensor(&[16, 2], &mut rng);
        let x2 = rand_tensor(&[4, 3], &mut rng);
        let probe = rand_tensor(&[64, 2], &mut rng);
        let report = finite_diff_check(
            |g, vars| {
                let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
                let bound = BoundParams::from_map(map);
                let a = g.constant(x1.clone())?;
                let b = g.constant(x2.clone())?;
                let fused = decode(g, &bound, &[(a, 4, 4), (b, 2, 2)])?;
                let out = predict_mask(g, &bound, fused[0], 4, 4, 8, 8)?;
                let p = g.constant(probe.clone())?;
                let h = g.hadamard(out.logits, p)?;
                g.sum(h)
            },
            &tensors,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(TOLERANCE), "{report:?}");
    }
}
