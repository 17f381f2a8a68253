//! Demonstrates the two attention blocks in isolation.
//!
//! The multi-scale fusion block runs three parallel dilated convolutions
//! (rates 3, 5, 7 — same output size, growing receptive field) and re-weights
//! their summed response with a squeeze-style channel gate before the
//! residual add. The context refinement block computes full spatial
//! self-attention — every position attends to every other — and feeds the
//! contextualized map through a small MLP.
//!
//! Run with: `cargo run --example attention_blocks`

use dagan::attention::{Crm, Mafm, MafmPool, ATROUS_RATES};
use dagan::autodiff::Tensor;
use ndarray::IxDyn;
use rand::Rng;

fn main() {
    let mut rng = dagan::rng_from_seed(11);
    let channels = 16;
    let mafm = Mafm::new(&mut rng, channels, 4, MafmPool::Avg);
    let crm = Crm::new(&mut rng, channels);

    let x = Tensor::new(ndarray::ArrayD::from_shape_fn(
        IxDyn(&[1, channels, 12, 12]),
        |_| rng.gen_range(-1.0..1.0),
    ));

    println!("dilation rates of the parallel branches: {ATROUS_RATES:?}");
    let fused = mafm.forward(&x);
    assert_eq!(fused.shape(), x.shape(), "fusion block preserves shape");

    let gate = mafm.gate(&x);
    let g = gate.to_array();
    let (lo, hi) = g.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    println!("channel gate range: [{lo:.4}, {hi:.4}] (sigmoid keeps it inside (0,1))");

    let refined = crm.forward(&fused);
    assert_eq!(refined.shape(), x.shape(), "refinement block preserves shape");

    // The attention matrix is row-stochastic: each position distributes
    // exactly one unit of attention over all positions.
    let attn = crm.attention(&fused);
    let a = attn[0].to_array();
    let hw = a.shape()[0];
    let worst_row_error = (0..hw)
        .map(|r| ((0..hw).map(|c| a[[r, c]]).sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    println!("attention matrix: {hw}x{hw}, worst row-sum deviation {worst_row_error:.2e}");
    assert!(worst_row_error < 1e-9);

    println!("output sample: {:.5}", refined.to_array()[[0, 0, 0, 0]]);
}
