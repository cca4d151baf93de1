//! The full network: backbone and self-attention pyramid, per-stage
//! matching, correlation distributions for distillation, and the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Dtype, NamedTensor};
use crate::decoder::{self, MaskLogits};
use crate::distillation::{self, StageDistribution, DISTILL_TEMPERATURE};
use crate::encoder::{self, FeaturePyramid, StageConfig};
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::matching::{self, CorrelationMap, PriorMask, CORR_TEMPERATURE};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: StageConfig,
    /// Cosine temperature `t`.
    pub corr_temperature: f64,
    /// Distillation temperature `T`.
    pub distill_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: StageConfig::default(),
            corr_temperature: CORR_TEMPERATURE,
            distill_temperature: DISTILL_TEMPERATURE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        if !(self.corr_temperature > 0.0) || !(self.distill_temperature > 0.0) {
            return Err(contract("ModelConfig", "temperatures must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn matching_prefix(stage: usize) -> String {
    format!("matching.s{stage}")
}

/// Everything one stage produces during a forward pass.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub h: usize,
    pub w: usize,
    pub corr: CorrelationMap,
    /// Query-axis softmax of the raw scores.
    pub corr_hat: Var,
    /// Matching output `X_l` as `[h·w, c]`.
    pub enriched: Var,
    /// Decoder output `X'_l` as `[h·w, c]`.
    pub fused: Var,
    /// Support mask at this stage over all shots, `[K·h·w]`.
    pub support_mask: Tensor,
    /// Mask-filtered mean correlation `[h·w]`; `None` without support foreground.
    pub reorganized: Option<Var>,
    /// Spatial softmax of `reorganized`.
    pub distribution: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub query: FeaturePyramid,
    pub supports: Vec<FeaturePyramid>,
    pub prior: PriorMask,
    pub stages: Vec<StageOutput>,
    pub logits: MaskLogits,
}

impl ForwardPass {
    pub fn stage_distributions(&self) -> Vec<StageDistribution> {
        self.stages
            .iter()
            .map(|s| StageDistribution {
                dist: s.distribution,
                h: s.h,
                w: s.w,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdmNet {
    config: ModelConfig,
    params: ParamStore,
}

impl HdmNet {
    /// Seeded uniform `±1/√fan_in` initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&config.stages, &mut rng, &mut params);
        for (li, &c) in config.stages.channels.iter().enumerate() {
            let p = matching_prefix(li + 1);
            for proj in ["wq", "wk", "wv"] {
                params.init_uniform(&mut rng, format!("{p}.{proj}"), &[c, c], c, true);
            }
            params.init_uniform(&mut rng, format!("{p}.wo"), &[c, c + 1], c + 1, true);
        }
        decoder::init_params(&config.stages.channels, &mut rng, &mut params);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the layout
    /// `config` implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        let mut checked = ParamStore::new();
        for (name, p) in template.params.iter() {
            let value = params.get(name)?;
            if value.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "HdmNet::from_parts",
                    lhs: p.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            checked.insert(name, value.clone(), p.trainable);
        }
        Ok(Self {
            config: template.config,
            params: checked,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the whole forward computation on `g`.
    ///
    /// `supports` pairs each support image `[3, H, W]` with its binary mask `[H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        query: &Tensor,
        supports: &[(&Tensor, &Tensor)],
    ) -> Result<ForwardPass> {
        if supports.is_empty() {
            return Err(contract("forward", "at least one support shot is required"));
        }
        let cfg = &self.config.stages;
        let (_, height, width) = query.dims3("forward")?;
        let dims = cfg.stage_dims(height, width)?;
        let images: Vec<&Tensor> = supports.iter().map(|(img, _)| *img).collect();
        let (qp, sps) = encoder::build_pyramids(g, bound, &self.params, cfg, query, &images)?;

        // Prior from the fixed backbone features, foreground rows of all shots.
        let (h1, w1) = dims[0];
        let mut fg_rows = Vec::new();
        let mut fg_mask = Vec::new();
        for (sp, (_, mask)) in sps.iter().zip(supports) {
            fg_rows.extend_from_slice(sp.backbone.data());
            fg_mask.extend_from_slice(matching::nearest_mask(mask, h1, w1)?.data());
        }
        let c1 = cfg.channels[0];
        let prior = matching::prior_mask(
            &qp.backbone,
            h1,
            w1,
            &Tensor::new(vec![fg_mask.len(), c1], fg_rows)?,
            &Tensor::new(vec![fg_mask.len()], fg_mask)?,
        )?;

        let mut stages = Vec::with_capacity(dims.len());
        for (li, &(h, w)) in dims.iter().enumerate() {
            let stage = li + 1;
            let qf = &qp.stages[li];
            let mut shots = Vec::with_capacity(sps.len());
            let mut query_rows = qf.tokens;
            for (sp, (_, mask)) in sps.iter().zip(supports) {
                let flat = matching::mask_and_flatten(g, qf, &sp.stages[li], mask)?;
                query_rows = flat.query;
                shots.push((flat.support, flat.support_mask));
            }
            let (support_rows, support_mask) = matching::k_shot_merge(g, &shots)?;
            let p = matching_prefix(stage);
            let corr = matching::correlation_map(
                g,
                query_rows,
                support_rows,
                bound.get(&format!("{p}.wq"))?,
                bound.get(&format!("{p}.wk"))?,
                self.config.corr_temperature,
                stage,
            )?;
            let corr_hat = matching::inverse_softmax(g, &corr)?;
            let enriched = matching::match_features(
                g,
                corr_hat,
                support_rows,
                &prior.at_stage(h, w)?,
                bound.get(&format!("{p}.wv"))?,
                bound.get(&format!("{p}.wo"))?,
            )?;
            let reorganized = distillation::reorganize_correlation(g, corr.raw, &support_mask)?;
            let distribution = match reorganized {
                Some(r) => Some(distillation::spatial_softmax(g, r, self.config.distill_temperature)?),
                None => None,
            };
            stages.push(StageOutput {
                h,
                w,
                corr,
                corr_hat,
                enriched,
                fused: enriched,
                support_mask,
                reorganized,
                distribution,
            });
        }

        let enriched: Vec<(Var, usize, usize)> = stages.iter().map(|s| (s.enriched, s.h, s.w)).collect();
        let fused = decoder::decode(g, bound, &enriched)?;
        for (s, f) in stages.iter_mut().zip(fused) {
            s.fused = f;
        }
        let logits = decoder::predict_mask(g, bound, stages[0].fused, h1, w1, height, width)?;
        Ok(ForwardPass {
            query: qp,
            supports: sps,
            prior,
            stages,
            logits,
        })
    }

    /// Forward pass with every parameter frozen.
    pub fn infer(&self, query: &Tensor, supports: &[(&Tensor, &Tensor)]) -> Result<(Graph, ForwardPass)> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        for name in self.params.trainable_names() {
            let v = self.params.get(&name)?.clone();
            frozen.insert(name, v, false);
        }
        let bound = frozen.bind(&mut g)?;
        let pass = self.forward(&mut g, &bound, query, supports)?;
        Ok((g, pass))
    }

    /// Binary query mask `[H, W]`.
    pub fn predict(&self, query: &Tensor, supports: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
        let (g, pass) = self.infer(query, supports)?;
        decoder::argmax_mask(g.value(pass.logits.logits), pass.logits.height, pass.logits.width)
    }

    pub fn to_records(&self, dtype: Dtype) -> Vec<NamedTensor> {
        let cfg = &self.config.stages;
        let channels = Tensor::from_fn(&[cfg.channels.len()], |i| cfg.channels[i] as f64);
        let options = Tensor::new(
            vec![6],
            vec![
                cfg.heads as f64,
                cfg.blocks as f64,
                f64::from(u8::from(cfg.standardize)),
                f64::from(u8::from(cfg.positional_encoding)),
                self.config.corr_temperature,
                self.config.distill_temperature,
            ],
        )
        .expect("six option values");
        // Meta records always use f64 so the configuration survives exactly.
        let mut out = vec![
            NamedTensor {
                name: "meta.channels".into(),
                dtype: Dtype::F64,
                tensor: channels,
            },
            NamedTensor {
                name: "meta.options".into(),
                dtype: Dtype::F64,
                tensor: options,
            },
        ];
        out.extend(self.params.iter().map(|(name, p)| NamedTensor {
            name: name.to_string(),
            dtype,
            tensor: p.value.clone(),
        }));
        out
    }

    pub fn from_records(records: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .map(|r| &r.tensor)
                .ok_or_else(|| Error::Format(format!("missing `{name}`")))
        };
        let channels = find("meta.channels")?.data().iter().map(|&c| c as usize).collect();
        let o = find("meta.options")?.data();
        if o.len() != 6 {
            return Err(Error::Format("meta.options must hold 6 values".into()));
        }
        let config = ModelConfig {
            stages: StageConfig {
                channels,
                heads: o[0] as usize,
                blocks: o[1] as usize,
                standardize: o[2] != 0.0,
                positional_encoding: o[3] != 0.0,
            },
            corr_temperature: o[4],
            distill_temperature: o[5],
        };
        let mut params = ParamStore::new();
        for r in records.iter().filter(|r| !r.name.starts_with("meta.")) {
            params.insert(r.name.clone(), r.tensor.clone(), true);
        }
        Self::from_parts(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
        Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn square_mask(size: usize, lo: usize, hi: usize) -> Tensor {
        Tensor::from_fn(&[size, size], |i| {
            let (y, x) = (i / size, i % size);
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn forward_shapes_for_default_model() {
        let net = HdmNet::new(ModelConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, s) = (image(&mut rng, 64), image(&mut rng, 64));
        let m = square_mask(64, 8, 56);
        let (g, pass) = net.infer(&q, &[(&s, &m)]).unwrap();
        assert_eq!(g.shape(pass.logits.logits), &[64 * 64, 2]);
        let dims: Vec<_> = pass.stages.iter().map(|s| (s.h, s.w)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        for (s, c) in pass.stages.iter().zip([8, 16, 32]) {
            assert_eq!(g.shape(s.enriched), &[s.h * s.w, c]);
            assert_eq!(g.shape(s.corr.raw), &[s.h * s.w, s.h * s.w]);
            let d = g.value(s.distribution.unwrap());
            assert!((d.sum() - 1.0).abs() < 1e-12);
        }
        let pred = net.predict(&q, &[(&s, &m)]).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn record_roundtrip_restores_model() {
        let cfg = ModelConfig {
            stages: StageConfig {
                channels: vec![4, 6],
                heads: 2,
                blocks: 2,
                standardize: false,
                positional_encoding: true,
            },
            corr_temperature: 0.2,
            distill_temperature: 2.0,
        };
        let net = HdmNet::new(cfg, 3).unwrap();
        let back = HdmNet::from_records(&net.to_records(Dtype::F64)).unwrap();
        assert_eq!(back, net);
        let mut recs = net.to_records(Dtype::F64);
        recs.pop();
        assert!(HdmNet::from_records(&recs).is_err());
    }

    #[test]
    fn rejects_indivisible_images_and_missing_supports() {
        let net = HdmNet::new(ModelConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = image(&mut rng, 48);
        let m = square_mask(48, 0, 24);
        assert!(net.infer(&q, &[(&q, &m)]).is_err());
        let q = image(&mut rng, 64);
        assert!(net.infer(&q, &[]).is_err());
    }
}
