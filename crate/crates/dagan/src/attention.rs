//! The two attention blocks applied to every pyramid level: multi-scale
//! atrous fusion with a channel gate (MAFM), and spatial-relation context
//! refinement via single-head full attention (CRM).

use crate::autodiff::{
    concat_batch, index_batch, matmul, softmax_rows, transpose2d, Conv2dSpec, Tensor,
};
use crate::nn::{Conv2d, LayerNormC, Linear, Parameterized};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the MAFM channel gate squeezes spatial information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MafmPool {
    /// Global average pooling (the default reading of the gate formula).
    Avg,
    /// Global max pooling (the prose reading; kept switchable).
    Max,
}

/// Multi-scale adaptive fusion: three parallel atrous 3x3 branches at rates
/// 3, 5, 7 summed into `mid`, then re-weighted per channel by a squeeze-
/// excite style gate and added back onto the input:
/// `out = m + mid * sigmoid(FC2(relu(FC1(pool(m)))))`.
pub struct Mafm {
    atrous: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    pub pool: MafmPool,
    channels: usize,
}

/// Atrous branch rates; padding equals the rate so spatial size is kept.
pub const ATROUS_RATES: [usize; 3] = [3, 5, 7];

impl Mafm {
    /// `reduction` divides `channels` for the gate bottleneck (default 4).
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize, pool: MafmPool) -> Self {
        assert!(
            reduction >= 1 && channels % reduction == 0,
            "gate reduction {reduction} must divide {channels} channels"
        );
        let atrous = ATROUS_RATES
            .iter()
            .map(|&r| Conv2d::new(rng, channels, channels, 3, Conv2dSpec::new(1, r, r), true))
            .collect();
        Mafm {
            atrous,
            fc1: Linear::new(rng, channels, channels / reduction, true),
            fc2: Linear::new(rng, channels / reduction, channels, true),
            pool,
            channels,
        }
    }

    /// Per-channel gate in (0,1), shape `[N,C]`.
    pub fn gate(&self, m: &Tensor) -> Tensor {
        let pooled = match self.pool {
            MafmPool::Avg => crate::autodiff::global_avg_pool(m),
            MafmPool::Max => crate::autodiff::global_max_pool(m),
        };
        self.fc2.forward(&self.fc1.forward(&pooled).relu()).sigmoid()
    }

    pub fn forward(&self, m: &Tensor) -> Tensor {
        assert_eq!(
            m.shape()[1],
            self.channels,
            "input channels do not match this block's parameters"
        );
        let mut mid = self.atrous[0].forward(m);
        for branch in &self.atrous[1..] {
            mid = mid.add(&branch.forward(m));
        }
        m.add(&mid.scale_channels(&self.gate(m)))
    }
}

impl Parameterized for Mafm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (conv, rate) in self.atrous.iter().zip(ATROUS_RATES) {
            conv.collect_params(&format!("{prefix}.atrous{rate}"), out);
        }
        self.fc1.collect_params(&format!("{prefix}.gate_fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.gate_fc2"), out);
    }
}

/// Context refinement: layer-normalize, project to key/query/value with 1x1
/// convolutions, attend over all spatial positions (`A = softmax_rows(Q^T K)`
/// over the flattened grid, context `= V A`), then add the input back and
/// refine with a layer-normalized two-layer MLP (1x1 convs, expansion 4).
pub struct Crm {
    ln_in: LayerNormC,
    wk: Conv2d,
    wq: Conv2d,
    wv: Conv2d,
    ln_out: LayerNormC,
    mlp1: Conv2d,
    mlp2: Conv2d,
    channels: usize,
}

impl Crm {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let one = Conv2dSpec::new(1, 0, 1);
        Crm {
            ln_in: LayerNormC::new(channels),
            wk: Conv2d::new(rng, channels, channels, 1, one, true),
            wq: Conv2d::new(rng, channels, channels, 1, one, true),
            wv: Conv2d::new(rng, channels, channels, 1, one, true),
            ln_out: LayerNormC::new(channels),
            mlp1: Conv2d::new(rng, channels, channels * 4, 1, one, true),
            mlp2: Conv2d::new(rng, channels * 4, channels, 1, one, true),
            channels,
        }
    }

    /// The `[HW, HW]` row-stochastic attention matrices, one per sample.
    /// Exposed for inspection and tests; `forward` recomputes them inline.
    pub fn attention(&self, x: &Tensor) -> Vec<Tensor> {
        let normed = self.ln_in.forward(x);
        let k = self.wk.forward(&normed);
        let q = self.wq.forward(&normed);
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        (0..n)
            .map(|i| {
                let k_i = index_batch(&k, i).reshape(&[c, h * w]);
                let q_i = index_batch(&q, i).reshape(&[c, h * w]);
                softmax_rows(&matmul(&transpose2d(&q_i), &k_i))
            })
            .collect()
    }

    /// The attended context map (value x attention, reshaped) before the
    /// residual sum and MLP. Carries no positional encoding, so it is
    /// equivariant to spatial permutations of the input.
    pub fn context(&self, x: &Tensor) -> Tensor {
        let normed = self.ln_in.forward(x);
        let k = self.wk.forward(&normed);
        let q = self.wq.forward(&normed);
        let v = self.wv.forward(&normed);
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let per_sample: Vec<Tensor> = (0..n)
            .map(|i| {
                let k_i = index_batch(&k, i).reshape(&[c, h * w]);
                let q_i = index_batch(&q, i).reshape(&[c, h * w]);
                let v_i = index_batch(&v, i).reshape(&[c, h * w]);
                let attn = softmax_rows(&matmul(&transpose2d(&q_i), &k_i));
                matmul(&v_i, &attn).reshape(&[1, c, h, w])
            })
            .collect();
        concat_batch(&per_sample)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.shape()[1],
            self.channels,
            "input channels do not match this block's parameters"
        );
        let fused = self.ln_out.forward(&self.context(x).add(x));
        self.mlp2.forward(&self.mlp1.forward(&fused).relu())
    }
}

impl Parameterized for Crm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln_in.collect_params(&format!("{prefix}.ln_in"), out);
        self.wk.collect_params(&format!("{prefix}.key"), out);
        self.wq.collect_params(&format!("{prefix}.query"), out);
        self.wv.collect_params(&format!("{prefix}.value"), out);
        self.ln_out.collect_params(&format!("{prefix}.ln_out"), out);
        self.mlp1.collect_params(&format!("{prefix}.mlp1"), out);
        self.mlp2.collect_params(&format!("{prefix}.mlp2"), out);
    }
}
