//! Compact convolutional critic that scores a change map (optionally
//! concatenated with both input images) as real-annotation-like or
//! generator-like.
//!
//! Deliberately shallow: four stride-2 convolutions with leaky activations
//! and no normalization, global average pooling, and one linear unit squashed
//! to a probability. Shallow critics keep the adversarial signal smooth, and
//! skipping normalization avoids coupling scores across the batch.

use crate::autodiff::{concat_channels, global_avg_pool, Conv2dSpec, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Parameterized};
use rand_chacha::ChaCha8Rng;

const LEAKY_SLOPE: f64 = 0.2;
const WIDTHS: [usize; 4] = [32, 64, 128, 256];

/// The critic network.
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
    /// When true, inputs are `[mask, image_t1, image_t2]` concatenated to 7
    /// channels; otherwise the bare 1-channel map.
    pub conditional: bool,
}

impl Discriminator {
    pub fn new(rng: &mut ChaCha8Rng, conditional: bool) -> Self {
        let in_channels = if conditional { 7 } else { 1 };
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut c_in = in_channels;
        for &c_out in &WIDTHS {
            convs.push(Conv2d::new(rng, c_in, c_out, 3, Conv2dSpec::new(2, 1, 1), true));
            c_in = c_out;
        }
        let head = Linear::new(rng, c_in, 1, true);
        Discriminator { convs, head, conditional }
    }

    /// Number of convolutional layers in the trunk (structural invariant).
    pub fn conv_layer_count(&self) -> usize {
        self.convs.len()
    }

    fn validate(&self, x: &Tensor) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "critic expects [N,C,H,W], got {shape:?}"
            )));
        }
        let want = if self.conditional { 7 } else { 1 };
        if shape[1] != want {
            return Err(Error::ShapeMismatch(format!(
                "critic expects {want} channels, got {}",
                shape[1]
            )));
        }
        if shape[2] < 16 || shape[3] < 16 {
            return Err(Error::InvalidSize(format!(
                "critic needs at least 16x16 input (four halvings), got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Scores `[N,C,H,W]` maps; returns `[N,1]` probabilities in (0,1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.validate(x)?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        let pooled = global_avg_pool(&h); // [N, 256]
        Ok(self.head.forward(&pooled).sigmoid())
    }

    /// Builds the conditional input `[mask | t1 | t2]`; plain mode returns
    /// the mask untouched.
    pub fn assemble_input(
        &self,
        mask: &Tensor,
        image_t1: &Tensor,
        image_t2: &Tensor,
    ) -> Tensor {
        if self.conditional {
            concat_channels(&[mask, image_t1, image_t2])
        } else {
            mask.clone()
        }
    }
}

impl Parameterized for Discriminator {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect_params(&p(&format!("conv{}", i + 1)), out);
        }
        self.head.collect_params(&p("head"), out);
    }
}
