//! Six-stage siamese feature extractor with aggregate skip connections.
//!
//! A residual-bottleneck classifier trunk is adapted into a fully
//! convolutional extractor: the classification head is dropped, the stem's
//! max-pool is replaced by a stride-2 convolution, and a sixth stride-2 stage
//! extends the pyramid one level deeper. Features from the two acquisitions
//! are fused by elementwise addition, and each pyramid level sums 1x1
//! projections of its neighboring stages, bilinearly resampled to the
//! level's resolution.
//!
//! Every stage halves the spatial size (stride-2 convolutions only, no
//! pooling), so a 256 input yields stage sizes 128, 64, 32, 16, 8, 4 and
//! pyramid sizes 64, 32, 16, 8.

use crate::autodiff::{bilinear_resize, conv2d, Conv2dSpec, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Parameterized};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pyramid levels run 2..=5; level i holds features at input_size / 2^i.
pub const PYRAMID_LEVELS: [usize; 4] = [2, 3, 4, 5];

/// Which stages feed each pyramid level.
pub const LEVEL_CONTRIBUTORS: [(usize, &[usize]); 4] =
    [(2, &[2, 3]), (3, &[2, 3, 4]), (4, &[3, 4, 5]), (5, &[5, 6])];

/// Architecture recipe: stage widths plus (for the full trunk) how many
/// bottleneck blocks each residual group stacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Output channels of stages 1..=6.
    pub channels: [usize; 6],
    /// Bottleneck counts for the four residual groups (stages 2-5) of the
    /// full trunk; `None` selects plain two-convolution stages.
    pub bottlenecks: Option<[usize; 4]>,
    /// Channel width every pyramid level is projected to.
    pub c_proj: usize,
}

impl StagePlan {
    /// Full-scale trunk: 50-layer residual bottleneck network widths, a
    /// 512-channel sixth stage, 128-channel pyramid.
    pub fn resnet50() -> Self {
        StagePlan {
            channels: [64, 256, 512, 1024, 2048, 512],
            bottlenecks: Some([3, 4, 6, 3]),
            c_proj: 128,
        }
    }

    /// Narrow randomly initialized trunk for CPU-scale training tests.
    pub fn tiny() -> Self {
        StagePlan { channels: [8, 16, 24, 32, 48, 64], bottlenecks: None, c_proj: 16 }
    }

    /// Minimal trunk for finite-difference gradient checks. Widths of 4 keep
    /// group norm at one 4-channel group, which stays well-conditioned even
    /// when deep stages collapse to 1x1 spatial size on 16 px inputs.
    pub fn micro() -> Self {
        StagePlan { channels: [4, 4, 4, 4, 4, 4], bottlenecks: None, c_proj: 8 }
    }

    /// Input contract: square, at least 16 px, divisible by 16. Multiples of
    /// 64 keep every stage at an exactly halved size; smaller inputs are
    /// allowed for gradient checks, with tail stages saturating at 1x1
    /// (stride-2 3x3 convolutions ceil-divide).
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        if h != w {
            return Err(Error::InvalidSize(format!("input must be square, got {h}x{w}")));
        }
        if h < 16 || h % 16 != 0 {
            return Err(Error::InvalidSize(format!(
                "input side must be a multiple of 16 and at least 16, got {h}"
            )));
        }
        Ok(())
    }
}

/// Conv + group norm + ReLU.
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        ConvBlock {
            conv: Conv2d::new(rng, cin, cout, k, Conv2dSpec::new(stride, pad, 1), false),
            norm: GroupNorm::new(cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.norm.forward(&self.conv.forward(x)).relu()
    }
}

impl Parameterized for ConvBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

/// 1x1 -> 3x3 -> 1x1 bottleneck with identity or projected shortcut.
struct Bottleneck {
    reduce: Conv2d,
    norm1: GroupNorm,
    mid: Conv2d,
    norm2: GroupNorm,
    expand: Conv2d,
    norm3: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let mid_ch = cout / 4;
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv2d::new(rng, cin, cout, 1, Conv2dSpec::new(stride, 0, 1), false),
                GroupNorm::new(cout),
            )
        });
        Bottleneck {
            reduce: Conv2d::new(rng, cin, mid_ch, 1, Conv2dSpec::new(1, 0, 1), false),
            norm1: GroupNorm::new(mid_ch),
            mid: Conv2d::new(rng, mid_ch, mid_ch, 3, Conv2dSpec::new(stride, 1, 1), false),
            norm2: GroupNorm::new(mid_ch),
            expand: Conv2d::new(rng, mid_ch, cout, 1, Conv2dSpec::new(1, 0, 1), false),
            norm3: GroupNorm::new(cout),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let y = self.norm1.forward(&self.reduce.forward(x)).relu();
        let y = self.norm2.forward(&self.mid.forward(&y)).relu();
        let y = self.norm3.forward(&self.expand.forward(&y));
        let sc = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)),
            None => x.clone(),
        };
        y.add(&sc).relu()
    }
}

impl Parameterized for Bottleneck {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.mid.collect_params(&format!("{prefix}.mid"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.expand.collect_params(&format!("{prefix}.expand"), out);
        self.norm3.collect_params(&format!("{prefix}.norm3"), out);
        if let Some((conv, norm)) = &self.shortcut {
            conv.collect_params(&format!("{prefix}.shortcut.conv"), out);
            norm.collect_params(&format!("{prefix}.shortcut.norm"), out);
        }
    }
}

/// One of the six stages.
enum Stage {
    /// A single conv block: the 7x7 stride-2 stem, or the extra stride-2
    /// 3x3 sixth stage.
    Single(ConvBlock),
    /// Stride-2 3x3 downsample followed by a residual bottleneck group.
    Residual { down: Option<ConvBlock>, blocks: Vec<Bottleneck> },
    /// Stride-2 3x3 conv followed by a stride-1 refining conv.
    Plain { down: ConvBlock, refine: ConvBlock },
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Stage::Single(b) => b.forward(x),
            Stage::Residual { down, blocks } => {
                let mut y = match down {
                    Some(d) => d.forward(x),
                    None => x.clone(),
                };
                for b in blocks {
                    y = b.forward(&y);
                }
                y
            }
            Stage::Plain { down, refine } => refine.forward(&down.forward(x)),
        }
    }
}

impl Parameterized for Stage {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Stage::Single(b) => b.collect_params(prefix, out),
            Stage::Residual { down, blocks } => {
                if let Some(d) = down {
                    d.collect_params(&format!("{prefix}.down"), out);
                }
                for (i, b) in blocks.iter().enumerate() {
                    b.collect_params(&format!("{prefix}.block{i}"), out);
                }
            }
            Stage::Plain { down, refine } => {
                down.collect_params(&format!("{prefix}.down"), out);
                refine.collect_params(&format!("{prefix}.refine"), out);
            }
        }
    }
}

/// The six-stage trunk. Both acquisitions pass through the same weights
/// (siamese sharing), so the extractor is listed once in the parameter set.
pub struct Backbone {
    pub plan: StagePlan,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, plan: &StagePlan) -> Self {
        let ch = plan.channels;
        let mut stages = Vec::with_capacity(6);
        // Stage 1: 7x7 stride-2 stem.
        stages.push(Stage::Single(ConvBlock::new(rng, 3, ch[0], 7, 2)));
        match plan.bottlenecks {
            Some(counts) => {
                // Stage 2: stride-2 conv (max-pool replacement) + group 1.
                for (i, &n_blocks) in counts.iter().enumerate() {
                    let cin = ch[i];
                    let cout = ch[i + 1];
                    let (down, stride) = if i == 0 {
                        (Some(ConvBlock::new(rng, cin, cin, 3, 2)), 1)
                    } else {
                        (None, 2)
                    };
                    let mut blocks = Vec::with_capacity(n_blocks);
                    let mut bin = cin;
                    for b in 0..n_blocks {
                        blocks.push(Bottleneck::new(rng, bin, cout, if b == 0 { stride } else { 1 }));
                        bin = cout;
                    }
                    stages.push(Stage::Residual { down, blocks });
                }
            }
            None => {
                for i in 0..4 {
                    stages.push(Stage::Plain {
                        down: ConvBlock::new(rng, ch[i], ch[i + 1], 3, 2),
                        refine: ConvBlock::new(rng, ch[i + 1], ch[i + 1], 3, 1),
                    });
                }
            }
        }
        // Stage 6: the extra stride-2 block extending the pyramid.
        stages.push(Stage::Single(ConvBlock::new(rng, ch[4], ch[5], 3, 2)));
        Backbone { plan: plan.clone(), stages }
    }

    /// Runs all six stages on `[N,3,H,W]`, returning one feature map per
    /// stage, stage i at roughly H / 2^i (exactly, when 2^i divides H).
    pub fn extract_stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!("expected [N,3,H,W], got {shape:?}")));
        }
        self.plan.validate_input(shape[2], shape[3])?;
        let mut maps = Vec::with_capacity(6);
        let mut y = x.clone();
        for stage in &self.stages {
            y = stage.forward(&y);
            maps.push(y.clone());
        }
        Ok(maps)
    }
}

impl Parameterized for Backbone {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.collect_params(&format!("{prefix}.stage{}", i + 1), out);
        }
    }
}

/// Elementwise sum of per-stage features from the two acquisitions.
pub fn fuse_bitemporal(stages_t1: &[Tensor], stages_t2: &[Tensor]) -> Result<Vec<Tensor>> {
    if stages_t1.len() != stages_t2.len() {
        return Err(Error::ShapeMismatch(format!(
            "stage count mismatch: {} vs {}",
            stages_t1.len(),
            stages_t2.len()
        )));
    }
    stages_t1
        .iter()
        .zip(stages_t2)
        .map(|(a, b)| {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "fused stage shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(a.add(b))
        })
        .collect()
}

/// Features at pyramid levels 2..=5, all `c_proj` channels wide.
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Feature map at pyramid level `i` (2..=5).
    pub fn level(&self, i: usize) -> &Tensor {
        assert!((2..=5).contains(&i), "pyramid levels are 2..=5, got {i}");
        &self.levels[i - 2]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }
}

/// Bias-free 1x1 projections (one per stage 2..=6) plus the neighbor-sum
/// wiring that builds the pyramid.
pub struct AggregateConnections {
    /// Projections for stages 2..=6 in order.
    projs: Vec<Conv2d>,
}

impl AggregateConnections {
    pub fn new(rng: &mut ChaCha8Rng, plan: &StagePlan) -> Self {
        let projs = (1..6)
            .map(|s| Conv2d::new(rng, plan.channels[s], plan.c_proj, 1, Conv2dSpec::new(1, 0, 1), false))
            .collect();
        AggregateConnections { projs }
    }

    fn project(&self, stage_idx: usize, x: &Tensor) -> Tensor {
        // stage_idx is 2..=6; projections are stored for stages 2..=6.
        self.projs[stage_idx - 2].forward(x)
    }

    /// Builds the pyramid: level i sums the projections of its contributing
    /// stages, each bilinearly resampled to level i's spatial size.
    pub fn forward(&self, fused_stages: &[Tensor]) -> Result<FeaturePyramid> {
        if fused_stages.len() != 6 {
            return Err(Error::ShapeMismatch(format!(
                "expected 6 fused stages, got {}",
                fused_stages.len()
            )));
        }
        let mut levels = Vec::with_capacity(4);
        for &(level, contributors) in LEVEL_CONTRIBUTORS.iter() {
            let target = &fused_stages[level - 1];
            let (th, tw) = (target.shape()[2], target.shape()[3]);
            let mut acc: Option<Tensor> = None;
            for &stage in contributors {
                let projected = self.project(stage, &fused_stages[stage - 1]);
                let resized = bilinear_resize(&projected, th, tw);
                acc = Some(match acc {
                    Some(a) => a.add(&resized),
                    None => resized,
                });
            }
            levels.push(acc.unwrap());
        }
        Ok(FeaturePyramid { levels })
    }
}

impl Parameterized for AggregateConnections {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, p) in self.projs.iter().enumerate() {
            p.collect_params(&format!("{prefix}.proj_stage{}", i + 2), out);
        }
    }
}

/// Convenience: run one conv through `conv2d` with explicit weights; used by
/// tests that need identity-like projections.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Tensor {
    conv2d(x, w, None, Conv2dSpec::new(1, 0, 1))
}
