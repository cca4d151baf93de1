//! Hierarchical feature pyramids built from self-attention-only blocks.
//!
//! Query and support images go through the same weights independently; no
//! function here ever sees both at once. Feature maps live on the graph as
//! channels-last token matrices `[h·w, c]`, so flattening a `[h, w, c]` map
//! into tokens is a pure reshape.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{matmul_nt_raw, Tensor};

/// Side of the square patches embedded by the fixed backbone.
pub const PATCH: usize = 8;

/// Epsilon inside the per-token standardisation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    /// `c_l` for each stage; its length is the stage count L.
    pub channels: Vec<usize>,
    pub heads: usize,
    pub blocks: usize,
    /// Per-token standardisation before attention and MLP.
    pub standardize: bool,
    /// Sinusoidal positional encoding added to the backbone tokens.
    pub positional_encoding: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            heads: 1,
            blocks: 1,
            standardize: true,
            positional_encoding: false,
        }
    }
}

impl StageConfig {
    pub fn with_channels(channels: Vec<usize>) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(contract("StageConfig", "at least one stage is required"));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract(
                "StageConfig",
                format!("channels must be strictly increasing, got {:?}", self.channels),
            ));
        }
        if self.heads == 0 || self.blocks == 0 {
            return Err(contract("StageConfig", "heads and blocks must be positive"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return Err(contract(
                "StageConfig",
                format!("{c} channels not divisible by {} heads", self.heads),
            ));
        }
        Ok(())
    }

    /// `(h_l, w_l) = (H / 2^(l+2), W / 2^(l+2))` for l = 1..L.
    ///
    /// H and W must be divisible by 2^(L+2), and the coarsest stage must keep
    /// at least 2×2 positions: a single position makes the spatial softmax
    /// and the prior's min-max scaling constant.
    pub fn stage_dims(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let l = self.stages();
        let divisor = 1usize << (l + 2);
        if height == 0 || width == 0 || height % divisor != 0 || width % divisor != 0 {
            return Err(contract(
                "StageConfig",
                format!("image {height}×{width} is not divisible by 2^(L+2) = {divisor} for L = {l}"),
            ));
        }
        let (hl, wl) = (height / divisor, width / divisor);
        if hl < 2 || wl < 2 {
            return Err(contract(
                "StageConfig",
                format!(
                    "image {height}×{width} with L = {l} leaves a {hl}×{wl} coarsest stage; \
                     stage L needs at least 2×2 positions"
                ),
            ));
        }
        Ok((1..=l)
            .map(|s| (height >> (s + 2), width >> (s + 2)))
            .collect())
    }
}

/// A stage feature map held as a `[h·w, c]` token matrix on a graph.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureMap {
    pub fn tokens_len(&self) -> usize {
        self.h * self.w
    }

    /// Copy of the map in `[c, h, w]` order.
    pub fn to_chw(&self, g: &Graph) -> Tensor {
        hwc_to_chw(g.value(self.tokens), self.h, self.w, self.c)
    }
}

pub fn hwc_to_chw(t: &Tensor, h: usize, w: usize, c: usize) -> Tensor {
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(y * w + x) * c + ch]
    })
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Fixed backbone tokens `[h_1·w_1, c_1]` (no gradient).
    pub backbone: Tensor,
    pub stages: Vec<FeatureMap>,
}

pub(crate) fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.s{stage}.b{block}")
}

pub(crate) fn down_prefix(stage: usize) -> String {
    format!("encoder.down{stage}")
}

/// Allocates backbone and encoder parameters.
pub fn init_params<R: Rng>(cfg: &StageConfig, rng: &mut R, store: &mut ParamStore) {
    let c1 = cfg.channels[0];
    let patch_dim = 3 * PATCH * PATCH;
    store.init_uniform(rng, "backbone.weight", &[c1, patch_dim], patch_dim, false);
    store.init_uniform(rng, "backbone.bias", &[c1], patch_dim, false);
    for (li, &c) in cfg.channels.iter().enumerate() {
        let stage = li + 1;
        let dh = c / cfg.heads;
        for b in 0..cfg.blocks {
            let p = block_prefix(stage, b);
            for h in 0..cfg.heads {
                for proj in ["wq", "wk", "wv"] {
                    store.init_uniform(rng, format!("{p}.h{h}.{proj}"), &[dh, c], c, true);
                }
            }
            store.init_uniform(rng, format!("{p}.mlp.w1"), &[c, c], c, true);
            store.init_uniform(rng, format!("{p}.mlp.b1"), &[c], c, true);
            store.init_uniform(rng, format!("{p}.mlp.w2"), &[c, c], c, true);
            store.init_uniform(rng, format!("{p}.mlp.b2"), &[c], c, true);
        }
        if let Some(&next) = cfg.channels.get(li + 1) {
            let p = down_prefix(stage);
            store.init_uniform(rng, format!("{p}.weight"), &[next, c], c, true);
            store.init_uniform(rng, format!("{p}.bias"), &[next], c, true);
        }
    }
}

/// Non-overlapping `PATCH×PATCH` patches of a `[3, H, W]` image as rows of
/// `[(H/PATCH)·(W/PATCH), 3·PATCH²]`, each row ordered (channel, y, x).
pub fn extract_patches(image: &Tensor) -> Result<Tensor> {
    let (ch, h, w) = image.dims3("toy_backbone")?;
    if ch != 3 {
        return Err(contract("toy_backbone", format!("expected 3 channels, got {ch}")));
    }
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(contract("toy_backbone", format!("image {h}×{w} not divisible by {PATCH}")));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let d = image.data();
    let dim = 3 * PATCH * PATCH;
    let mut out = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for c in 0..3 {
                for y in 0..PATCH {
                    let row = (c * h + py * PATCH + y) * w + px * PATCH;
                    out.extend_from_slice(&d[row..row + PATCH]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ph * pw, dim], out))
}

/// Fixed patch embedding; returns backbone tokens `[(H/8)·(W/8), c_1]`.
pub fn toy_backbone(image: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let patches = extract_patches(image)?;
    let (n, dim) = patches.dims2("toy_backbone")?;
    let (c1, wdim) = weight.dims2("toy_backbone")?;
    if wdim != dim || bias.shape() != [c1] {
        return Err(contract("toy_backbone", "embedding shape does not match patch size"));
    }
    let mut out = matmul_nt_raw(patches.data(), weight.data(), n, dim, c1);
    for row in out.chunks_mut(c1) {
        row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
    }
    Ok(Tensor::from_parts(vec![n, c1], out))
}

/// Sinusoidal encoding of the flattened token index.
pub fn positional_encoding(n: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[n, c], |i| {
        let (pos, k) = ((i / c) as f64, i % c);
        let freq = 10000f64.powf(-((k / 2 * 2) as f64) / c as f64);
        if k % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Scaled dot-product attention `softmax(QKᵀ/√d)V` with Q, K, V all
/// projected from the same tokens.
pub fn attention(g: &mut Graph, tokens: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let d = g.shape(wq)[0] as f64;
    let q = g.linear(tokens, wq, None)?;
    let k = g.linear(tokens, wk, None)?;
    let v = g.linear(tokens, wv, None)?;
    let logits = g.linear(q, k, None)?;
    let logits = g.scale(logits, 1.0 / d.sqrt())?;
    let weights = g.softmax(logits, 1)?;
    g.matmul(weights, v)
}

/// Two-layer per-token MLP: linear → ReLU → linear.
pub(crate) fn mlp(g: &mut Graph, x: Var, bound: &BoundParams, prefix: &str) -> Result<Var> {
    let h = g.linear(x, bound.get(&format!("{prefix}.w1"))?, Some(bound.get(&format!("{prefix}.b1"))?))?;
    let h = g.relu(h)?;
    g.linear(h, bound.get(&format!("{prefix}.w2"))?, Some(bound.get(&format!("{prefix}.b2"))?))
}

/// Pre-norm transformer block without cross-attention:
/// `x + Attn(norm x)` followed by `y + MLP(norm y)`.
pub fn self_attention_block(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    cfg: &StageConfig,
    prefix: &str,
) -> Result<Var> {
    let a = if cfg.standardize {
        g.standardize_rows(x, NORM_EPS)?
    } else {
        x
    };
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = bound.get(&format!("{prefix}.h{h}.wq"))?;
        let wk = bound.get(&format!("{prefix}.h{h}.wk"))?;
        let wv = bound.get(&format!("{prefix}.h{h}.wv"))?;
        heads.push(attention(g, a, wq, wk, wv)?);
    }
    let attended = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let y = g.add(x, attended)?;
    let b = if cfg.standardize {
        g.standardize_rows(y, NORM_EPS)?
    } else {
        y
    };
    let m = mlp(g, b, bound, &format!("{prefix}.mlp"))?;
    g.add(y, m)
}

/// 2×2 average pooling followed by a linear channel projection.
pub fn downsample(g: &mut Graph, f: &FeatureMap, weight: Var, bias: Var) -> Result<FeatureMap> {
    if f.h % 2 != 0 || f.w % 2 != 0 {
        return Err(contract("downsample", format!("odd spatial extent {}×{}", f.h, f.w)));
    }
    let spatial = g.reshape(f.tokens, &[f.h, f.w, f.c])?;
    let pooled = g.avg_pool2(spatial)?;
    let (h, w) = (f.h / 2, f.w / 2);
    let flat = g.reshape(pooled, &[h * w, f.c])?;
    let tokens = g.linear(flat, weight, Some(bias))?;
    let c = g.shape(tokens)[1];
    Ok(FeatureMap { tokens, h, w, c })
}

/// Runs one image through the backbone and every stage.
pub fn encode_image(
    g: &mut Graph,
    bound: &BoundParams,
    params: &ParamStore,
    cfg: &StageConfig,
    image: &Tensor,
) -> Result<FeaturePyramid> {
    let (_, height, width) = image.dims3("encode_image")?;
    let dims = cfg.stage_dims(height, width)?;
    let backbone = toy_backbone(image, params.get("backbone.weight")?, params.get("backbone.bias")?)?;
    let (h1, w1) = dims[0];
    let c1 = cfg.channels[0];
    let input = if cfg.positional_encoding {
        backbone.zip_map(&positional_encoding(h1 * w1, c1), |a, b| a + b)?
    } else {
        backbone.clone()
    };
    let mut current = FeatureMap {
        tokens: g.constant(input)?,
        h: h1,
        w: w1,
        c: c1,
    };
    let mut stages = Vec::with_capacity(cfg.stages());
    for stage in 1..=cfg.stages() {
        if stage > 1 {
            let p = down_prefix(stage - 1);
            current = downsample(g, &current, bound.get(&format!("{p}.weight"))?, bound.get(&format!("{p}.bias"))?)?;
        }
        for b in 0..cfg.blocks {
            current.tokens = self_attention_block(g, current.tokens, bound, cfg, &block_prefix(stage, b))?;
        }
        stages.push(current);
    }
    Ok(FeaturePyramid { backbone, stages })
}

/// Query and support pyramids through identical weights, each independently.
pub fn build_pyramids(
    g: &mut Graph,
    bound: &BoundParams,
    params: &ParamStore,
    cfg: &StageConfig,
    query: &Tensor,
    supports: &[&Tensor],
) -> Result<(FeaturePyramid, Vec<FeaturePyramid>)> {
    if supports.iter().any(|s| s.shape() != query.shape()) {
        return Err(contract("build_pyramids", "support images must match the query size"));
    }
    let q = encode_image(g, bound, params, cfg, query)?;
    let s = supports
        .iter()
        .map(|img| encode_image(g, bound, params, cfg, img))
        .collect::<Result<Vec<_>>>()?;
    Ok((q, s))
}
