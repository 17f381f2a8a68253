//! Learnable layers and the Adam optimizer.
//!
//! Layers own their parameter [`Tensor`]s; forward passes build autodiff
//! graphs through the ops in [`crate::autodiff`]. Every layer exposes its
//! parameters through [`Parameterized::collect_params`] with stable
//! dot-separated names, which checkpointing and the optimizer rely on.

use crate::autodiff::{conv2d, conv_transpose2d, linear, Conv2dSpec, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Anything that owns learnable parameters.
pub trait Parameterized {
    /// Appends `(name, tensor)` pairs, prefixing names with `prefix.`.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-normal tensor with `std = sqrt(2 / fan_in)`.
fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 2-D convolution layer with square kernel.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let weight = Tensor::param(kaiming(
            rng,
            &[out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
        ));
        let bias = bias.then(|| Tensor::param(ArrayD::zeros(IxDyn(&[out_ch]))));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameterized for Conv2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Transposed 2-D convolution layer (learned upsampling).
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let weight = Tensor::param(kaiming(
            rng,
            &[in_ch, out_ch, kernel, kernel],
            in_ch * kernel * kernel,
        ));
        let bias = bias.then(|| Tensor::param(ArrayD::zeros(IxDyn(&[out_ch]))));
        ConvTranspose2d { weight, bias, stride, padding }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv_transpose2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl Parameterized for ConvTranspose2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Fully connected layer.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_f: usize, out_f: usize, bias: bool) -> Self {
        let weight = Tensor::param(kaiming(rng, &[out_f, in_f], in_f));
        let bias = bias.then(|| Tensor::param(ArrayD::zeros(IxDyn(&[out_f]))));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Group normalization: 8 groups when the channel count allows it, otherwise
/// a single group (layer-norm style). Batch-independent, so forward passes
/// are deterministic functions of their inputs at any batch size.
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        let groups = if channels % 8 == 0 { 8 } else { 1 };
        GroupNorm {
            gamma: Tensor::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(&self.gamma, &self.beta, self.groups, self.eps)
    }
}

impl Parameterized for GroupNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Layer normalization across channels at each spatial position.
pub struct LayerNormC {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormC {
    pub fn new(channels: usize) -> Self {
        LayerNormC {
            gamma: Tensor::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm_channels(&self.gamma, &self.beta, self.eps)
    }
}

impl Parameterized for LayerNormC {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled-from-schedule L2 weight decay added to the gradient.
///
/// Moment buffers are indexed by position in the parameter list, so the
/// caller must pass the same ordered list to every [`Adam::step`].
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)], lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape()))).collect();
        let v = params.iter().map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape()))).collect();
        Adam { lr, beta1, beta2, eps: 1e-8, weight_decay, t: 0, m, v }
    }

    /// Applies one update from the gradients currently stored on `params`,
    /// then clears them. Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        assert_eq!(params.len(), self.m.len(), "Adam: parameter list changed size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(mut g) = p.grad() else { continue };
            if self.weight_decay != 0.0 {
                g = &g + &(&p.to_array() * self.weight_decay);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let (lr, eps) = (self.lr, self.eps);
            let m_ref = &*m;
            let v_ref = &*v;
            p.update_value(|w| {
                ndarray::Zip::from(w).and(m_ref).and(v_ref).for_each(|wi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *wi -= lr * mhat / (vhat.sqrt() + eps);
                });
            });
            p.zero_grad();
        }
    }

    pub fn zero_grad(&self, params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }

    /// Step counter (number of completed updates).
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state saved by [`Adam::moments`]/[`Adam::steps`].
    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "Adam restore: first-moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "Adam restore: second-moment count mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Draws a uniform value in `[lo, hi)`; tiny convenience used by data
/// augmentation and tests.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
