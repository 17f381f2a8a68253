//! Walks one image pair through the siamese trunk and the aggregate skip
//! connections, printing the shape at every stage.
//!
//! The trunk halves the resolution six times; the two temporal feature sets
//! are fused by addition, and each pyramid level then aggregates its
//! neighboring stages (projected to a common width and resampled) so coarse
//! context and fine detail meet before the attention blocks.
//!
//! Run with: `cargo run --example feature_pyramid`

use dagan::autodiff::Tensor;
use dagan::backbone::{
    fuse_bitemporal, AggregateConnections, Backbone, StagePlan, LEVEL_CONTRIBUTORS,
};
use dagan::data::make_synthetic_dataset;
use ndarray::IxDyn;

fn main() -> dagan::Result<()> {
    let plan = StagePlan::tiny();
    let mut rng = dagan::rng_from_seed(3);
    let backbone = Backbone::new(&mut rng, &plan);
    let aggregate = AggregateConnections::new(&mut rng, &plan);

    let sample = make_synthetic_dataset(1, 64, 1).remove(0);
    let as_batch = |img: &ndarray::Array3<f64>| {
        let (c, h, w) = img.dim();
        Tensor::new(
            img.clone()
                .into_shape_with_order(IxDyn(&[1, c, h, w]))
                .unwrap(),
        )
    };

    let stages_t1 = backbone.extract_stages(&as_batch(&sample.image_t1))?;
    let stages_t2 = backbone.extract_stages(&as_batch(&sample.image_t2))?;
    println!("trunk stages for a 64x64 input (N,C,H,W):");
    for (i, s) in stages_t1.iter().enumerate() {
        println!("  stage {}: {:?}", i + 1, s.shape());
    }

    // Temporal fusion is a plain sum, so each stage keeps its shape.
    let fused = fuse_bitemporal(&stages_t1, &stages_t2)?;
    assert_eq!(fused[0].shape(), stages_t1[0].shape());

    let pyramid = aggregate.forward(&fused)?;
    println!("\naggregated pyramid (all projected to {} channels):", plan.c_proj);
    for (level, contributors) in LEVEL_CONTRIBUTORS {
        println!(
            "  level {}: {:?}  <- sum of stages {:?}",
            level,
            pyramid.level(level).shape(),
            contributors
        );
    }
    Ok(())
}
