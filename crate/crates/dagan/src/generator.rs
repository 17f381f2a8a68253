//! The full change detector: siamese trunk, aggregate connections, the two
//! attention blocks, and a transposed-convolution decoder with one deeply
//! supervised sigmoid head per pyramid level.
//!
//! Ablation variants stack cumulatively:
//! - `R`: trunk + additive fusion, one 1x1 projection per level, decoder.
//! - `A`: `R` with neighbor-aggregating skip connections.
//! - `M`: `A` plus a multi-scale atrous fusion block per level.
//! - `MC`: `M` plus a context-refinement block per level.
//! - `Full`: the `MC` network (identical parameters); the difference is
//!   adversarial training, which lives in the trainer.

use crate::attention::{Crm, Mafm, MafmPool};
use crate::autodiff::{bilinear_resize, Conv2dSpec, Tensor};
use crate::backbone::{fuse_bitemporal, AggregateConnections, Backbone, StagePlan, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Parameterized};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Cumulative ablation stages of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    R,
    A,
    M,
    MC,
    Full,
}

impl Variant {
    pub fn uses_aggregate(&self) -> bool {
        !matches!(self, Variant::R)
    }

    pub fn uses_mafm(&self) -> bool {
        matches!(self, Variant::M | Variant::MC | Variant::Full)
    }

    pub fn uses_crm(&self) -> bool {
        matches!(self, Variant::MC | Variant::Full)
    }

    /// Only the full variant trains against the discriminator.
    pub fn adversarial(&self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn all() -> [Variant; 5] {
        [Variant::R, Variant::A, Variant::M, Variant::MC, Variant::Full]
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(Variant::R),
            "A" | "a" => Ok(Variant::A),
            "M" | "m" => Ok(Variant::M),
            "MC" | "mc" => Ok(Variant::MC),
            "full" | "Full" | "FULL" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected R, A, M, MC, or full)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::R => write!(f, "R"),
            Variant::A => write!(f, "A"),
            Variant::M => write!(f, "M"),
            Variant::MC => write!(f, "MC"),
            Variant::Full => write!(f, "full"),
        }
    }
}

/// How the decoder consumes the level above: feeding the recursively decoded
/// map (standard U-shape) or the attended map directly (the literal reading
/// of the published recurrence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Recursive,
    Literal,
}

/// Per-channel input standardization applied inside the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Statistics of the trunk's original classification training corpus.
    pub fn imagenet() -> Self {
        Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }

    /// No-op standardization for synthetic data.
    pub fn identity() -> Self {
        Normalization { mean: [0.0; 3], std: [1.0; 3] }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        x.channel_affine(scale, self.mean.to_vec())
    }
}

/// Everything the detector outputs for one batch. Aux maps are ordered by
/// pyramid level 2..=5, i.e. largest (input/4) to smallest (input/32).
pub struct ChangePrediction {
    /// `[N,1,H,W]` probabilities at input resolution.
    pub final_prob: Tensor,
    /// `[N,1,H,W]` pre-sigmoid scores resampled to input resolution.
    pub final_logit: Tensor,
    /// Four probability maps at native decoder scales.
    pub aux_probs: Vec<Tensor>,
    /// The same four maps before the sigmoid.
    pub aux_logits: Vec<Tensor>,
}

/// Intermediate maps kept alongside the prediction for inspection.
pub struct ForwardTrace {
    /// Pyramid levels 2..=5 after (optional) aggregation.
    pub pyramid: Vec<Tensor>,
    /// After the attention blocks (equal to `pyramid` for variants without
    /// them).
    pub attended: Vec<Tensor>,
    /// Decoder outputs d_i per level.
    pub decoded: Vec<Tensor>,
    pub prediction: ChangePrediction,
}

/// The assembled detector.
pub struct DaNet {
    pub variant: Variant,
    pub plan: StagePlan,
    pub decoder_mode: DecoderMode,
    pub normalization: Normalization,
    backbone: Backbone,
    aggregate: Option<AggregateConnections>,
    level_projs: Option<Vec<Conv2d>>,
    mafm: Option<Vec<Mafm>>,
    crm: Option<Vec<Crm>>,
    dconvs: Vec<ConvTranspose2d>,
    heads: Vec<Conv2d>,
}

impl DaNet {
    pub fn new(
        rng: &mut ChaCha8Rng,
        plan: &StagePlan,
        variant: Variant,
        mafm_pool: MafmPool,
        decoder_mode: DecoderMode,
        normalization: Normalization,
    ) -> Self {
        let backbone = Backbone::new(rng, plan);
        let (aggregate, level_projs) = if variant.uses_aggregate() {
            (Some(AggregateConnections::new(rng, plan)), None)
        } else {
            // Plain per-level 1x1 projections for the trunk-only variant.
            let projs = PYRAMID_LEVELS
                .iter()
                .map(|&l| {
                    Conv2d::new(rng, plan.channels[l - 1], plan.c_proj, 1, Conv2dSpec::new(1, 0, 1), false)
                })
                .collect();
            (None, Some(projs))
        };
        let mafm = variant.uses_mafm().then(|| {
            PYRAMID_LEVELS.iter().map(|_| Mafm::new(rng, plan.c_proj, 4, mafm_pool)).collect()
        });
        let crm = variant
            .uses_crm()
            .then(|| PYRAMID_LEVELS.iter().map(|_| Crm::new(rng, plan.c_proj)).collect());
        // dconvs[i] upsamples level i+3 to level i+2.
        let dconvs = (0..3)
            .map(|_| ConvTranspose2d::new(rng, plan.c_proj, plan.c_proj, 4, 2, 1, true))
            .collect();
        let heads = PYRAMID_LEVELS
            .iter()
            .map(|_| Conv2d::new(rng, plan.c_proj, 1, 1, Conv2dSpec::new(1, 0, 1), true))
            .collect();
        DaNet {
            variant,
            plan: plan.clone(),
            decoder_mode,
            normalization,
            backbone,
            aggregate,
            level_projs,
            mafm,
            crm,
            dconvs,
            heads,
        }
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.param_count()
    }

    /// Full forward pass keeping intermediate maps. Inputs `[N,3,H,W]`.
    pub fn forward_trace(&self, image_t1: &Tensor, image_t2: &Tensor) -> Result<ForwardTrace> {
        if image_t1.shape() != image_t2.shape() {
            return Err(Error::ShapeMismatch(format!(
                "temporal inputs differ: {:?} vs {:?}",
                image_t1.shape(),
                image_t2.shape()
            )));
        }
        let t1 = self.normalization.apply(image_t1);
        let t2 = self.normalization.apply(image_t2);
        let stages_t1 = self.backbone.extract_stages(&t1)?;
        let stages_t2 = self.backbone.extract_stages(&t2)?;
        let fused = fuse_bitemporal(&stages_t1, &stages_t2)?;

        let pyramid: Vec<Tensor> = match (&self.aggregate, &self.level_projs) {
            (Some(agg), _) => agg.forward(&fused)?.levels().to_vec(),
            (None, Some(projs)) => PYRAMID_LEVELS
                .iter()
                .zip(projs)
                .map(|(&l, p)| p.forward(&fused[l - 1]))
                .collect(),
            _ => unreachable!("constructor always sets one of aggregate/level_projs"),
        };

        let after_mafm: Vec<Tensor> = match &self.mafm {
            Some(blocks) => pyramid.iter().zip(blocks).map(|(m, b)| b.forward(m)).collect(),
            None => pyramid.clone(),
        };
        let attended: Vec<Tensor> = match &self.crm {
            Some(blocks) => after_mafm.iter().zip(blocks).map(|(a, b)| b.forward(a)).collect(),
            None => after_mafm,
        };

        // Top-down decoding: d_5 = s_5; d_{i-1} = s_{i-1} + up(d_i)
        // (or up(s_i) in literal mode). The resize is a no-op whenever the
        // transposed convolution's doubling lands exactly on the next size,
        // and aligns the degenerate tails of very small inputs.
        let mut decoded: Vec<Option<Tensor>> = vec![None, None, None, Some(attended[3].clone())];
        for idx in (0..3).rev() {
            let src = match self.decoder_mode {
                DecoderMode::Recursive => decoded[idx + 1].as_ref().unwrap().clone(),
                DecoderMode::Literal => attended[idx + 1].clone(),
            };
            let up = self.dconvs[idx].forward(&src);
            let (th, tw) = (attended[idx].shape()[2], attended[idx].shape()[3]);
            let up = bilinear_resize(&up, th, tw);
            decoded[idx] = Some(attended[idx].add(&up));
        }
        let decoded: Vec<Tensor> = decoded.into_iter().map(Option::unwrap).collect();

        let aux_logits: Vec<Tensor> =
            decoded.iter().zip(&self.heads).map(|(d, h)| h.forward(d)).collect();
        let aux_probs: Vec<Tensor> = aux_logits.iter().map(|l| l.sigmoid()).collect();

        let (h, w) = (image_t1.shape()[2], image_t1.shape()[3]);
        let final_prob = bilinear_resize(&aux_probs[0], h, w);
        let final_logit = bilinear_resize(&aux_logits[0], h, w);

        Ok(ForwardTrace {
            pyramid,
            attended,
            decoded,
            prediction: ChangePrediction { final_prob, final_logit, aux_probs, aux_logits },
        })
    }

    /// Forward pass returning only the prediction.
    pub fn forward(&self, image_t1: &Tensor, image_t2: &Tensor) -> Result<ChangePrediction> {
        Ok(self.forward_trace(image_t1, image_t2)?.prediction)
    }

    /// Inference on one sample pair without building an autodiff graph:
    /// probability map plus its 0.5-thresholded binary mask.
    pub fn predict(
        &self,
        image_t1: &ndarray::Array3<f64>,
        image_t2: &ndarray::Array3<f64>,
    ) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
        let (c, h, w) = image_t1.dim();
        if c != 3 || image_t2.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "predict expects matching [3,H,W] inputs, got {:?} and {:?}",
                image_t1.dim(),
                image_t2.dim()
            )));
        }
        crate::autodiff::no_grad(|| {
            let to_batch = |a: &ndarray::Array3<f64>| {
                Tensor::new(
                    a.clone()
                        .into_shape_with_order((1, 3, h, w))
                        .unwrap()
                        .into_dyn(),
                )
            };
            let pred = self.forward(&to_batch(image_t1), &to_batch(image_t2))?;
            let prob4 = pred.final_prob.to_array();
            let prob = ndarray::Array2::from_shape_fn((h, w), |(y, x)| prob4[[0, 0, y, x]]);
            let mask = prob.mapv(|p| if p >= 0.5 { 1.0 } else { 0.0 });
            Ok((prob, mask))
        })
    }

    /// Dies with a numeric error if any parameter is non-finite; used by the
    /// trainer to abort cleanly instead of training on garbage.
    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.params() {
            if p.value().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }
}

impl Parameterized for DaNet {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.collect_params(&p("backbone"), out);
        if let Some(agg) = &self.aggregate {
            agg.collect_params(&p("aggregate"), out);
        }
        if let Some(projs) = &self.level_projs {
            for (proj, level) in projs.iter().zip(PYRAMID_LEVELS) {
                proj.collect_params(&p(&format!("level_proj{level}")), out);
            }
        }
        if let Some(blocks) = &self.mafm {
            for (b, level) in blocks.iter().zip(PYRAMID_LEVELS) {
                b.collect_params(&p(&format!("mafm{level}")), out);
            }
        }
        if let Some(blocks) = &self.crm {
            for (b, level) in blocks.iter().zip(PYRAMID_LEVELS) {
                b.collect_params(&p(&format!("crm{level}")), out);
            }
        }
        for (i, d) in self.dconvs.iter().enumerate() {
            d.collect_params(&p(&format!("decoder.up{}", i + 1)), out);
        }
        for (h, level) in self.heads.iter().zip(PYRAMID_LEVELS) {
            h.collect_params(&p(&format!("head{level}")), out);
        }
    }
}

/// Restores a parameter list from a name -> array map (checkpoint loading).
pub fn load_param_values(
    params: &[(String, Tensor)],
    values: &std::collections::HashMap<String, ArrayD<f64>>,
) -> Result<()> {
    for (name, p) in params {
        let v = values
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
        if v.shape() != p.shape().as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                v.shape(),
                p.shape()
            )));
        }
        p.assign(v.clone());
    }
    if values.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            values.len(),
            params.len()
        )));
    }
    Ok(())
}
