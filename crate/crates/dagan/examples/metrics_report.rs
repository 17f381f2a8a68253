//! Confusion-matrix bookkeeping and every derived score, on hand-checkable
//! numbers.
//!
//! The kappa coefficient corrects overall accuracy for the agreement a
//! random classifier would reach given the same marginals; the worked
//! example below (tp=3, fp=1, fn=1, tn=5) lands on exactly 7/12.
//!
//! Run with: `cargo run --example metrics_report`

use dagan::metrics::ConfusionMatrix;
use ndarray::array;

fn main() -> dagan::Result<()> {
    // Accumulate two small prediction/target pairs.
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(
        array![[1.0, 1.0], [0.0, 0.0]].into_dyn().view(),
        array![[1.0, 1.0], [0.0, 0.0]].into_dyn().view(),
    )?;
    cm.accumulate(
        array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]].into_dyn().view(),
        array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]].into_dyn().view(),
    )?;
    println!("tallied counts: tp={} fp={} fn={} tn={}", cm.tp, cm.fp, cm.fn_, cm.tn);

    let report = cm.compute_all()?;
    println!("{}", report.to_text());

    // The classic hand case: kappa comes out to exactly 7/12.
    let hand = ConfusionMatrix { tp: 3, fp: 1, fn_: 1, tn: 5 };
    let r = hand.compute_all()?;
    println!("hand case (3,1,1,5): kappa = {:.12} (7/12 = {:.12})", r.kappa, 7.0 / 12.0);
    assert!((r.kappa - 7.0 / 12.0).abs() < 1e-12);

    // Thresholded accumulation for probability maps.
    let mut soft = ConfusionMatrix::new();
    soft.accumulate_prob(
        array![[0.9, 0.2], [0.51, 0.49]].into_dyn().view(),
        array![[1.0, 0.0], [1.0, 0.0]].into_dyn().view(),
        0.5,
    )?;
    println!(
        "probabilities at threshold 0.5: tp={} fp={} fn={} tn={} (perfect)",
        soft.tp, soft.fp, soft.fn_, soft.tn
    );

    // Merging partial matrices is exact, so evaluation can shard freely.
    let mut merged = ConfusionMatrix::new();
    merged.merge(&hand);
    merged.merge(&soft);
    assert_eq!(merged.total(), hand.total() + soft.total());
    println!("merged shards: {} pixels total", merged.total());
    Ok(())
}
