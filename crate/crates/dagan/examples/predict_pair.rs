//! End-to-end inference: train briefly, then turn one image pair into a
//! probability map, a binary mask, and a color-coded error image.
//!
//! Output conventions match the command-line tool: masks are {0,255} PNGs,
//! probabilities are 16-bit grayscale, and error maps paint hits white,
//! false alarms red, misses blue, correct rejections black.
//!
//! Run with: `cargo run --example predict_pair`

use dagan::cli::{write_error_map, write_prob_map};
use dagan::config::{ExperimentConfig, PlanChoice};
use dagan::data::{make_synthetic_dataset, mask_to_png};
use dagan::generator::Variant;
use dagan::trainer::TrainState;

fn main() -> dagan::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.variant = Variant::MC;
    cfg.model.plan = PlanChoice::Tiny;
    cfg.optim.max_iter = 300;
    cfg.optim.batch_size = 4;

    // Overfit a handful of pairs so the prediction is meaningful.
    let samples = make_synthetic_dataset(4, 32, 21);
    let refs: Vec<_> = samples.iter().collect();
    let mut state = TrainState::new(&cfg)?;
    for _ in 0..300 {
        state.train_step(&refs)?;
    }

    let sample = &samples[0];
    let (prob, mask) = state.generator.predict(&sample.image_t1, &sample.image_t2)?;

    let changed = mask.iter().filter(|&&v| v == 1.0).count();
    let actual = sample.mask.iter().filter(|&&v| v == 1.0).count();
    println!("predicted change: {changed} pixels (ground truth {actual})");
    let (lo, hi) = prob.iter().fold((1.0f64, 0.0f64), |(l, h), &p| (l.min(p), h.max(p)));
    println!("probability range: [{lo:.4}, {hi:.4}]");

    let out = std::env::temp_dir().join("dagan-example-predict");
    std::fs::create_dir_all(&out)?;
    mask_to_png(&mask, &out.join("mask.png"))?;
    write_prob_map(&prob, &out.join("prob.png"))?;
    write_error_map(&mask, &sample.mask, &out.join("errors.png"))?;
    println!("wrote mask.png, prob.png, errors.png to {}", out.display());
    Ok(())
}
