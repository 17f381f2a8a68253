//! Saves a training run to a checkpoint, resumes it bit-exactly, and scores
//! it — including the fingerprint guard that refuses checkpoints written
//! under a different configuration.
//!
//! Checkpoints capture parameters, both optimizers' moments, and the exact
//! RNG position, so a resumed run replays the original stream of updates.
//!
//! Run with: `cargo run --example evaluate_checkpoint`

use dagan::config::{ExperimentConfig, PlanChoice};
use dagan::data::make_synthetic_dataset;
use dagan::generator::Variant;
use dagan::trainer::{evaluate, TrainState};

fn main() -> dagan::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.variant = Variant::MC;
    cfg.model.plan = PlanChoice::Micro;
    cfg.optim.max_iter = 50;
    cfg.optim.batch_size = 2;

    let samples = make_synthetic_dataset(4, 16, 13);
    let refs: Vec<_> = samples.iter().collect();

    let mut state = TrainState::new(&cfg)?;
    for _ in 0..20 {
        state.train_step(&refs)?;
    }

    let path = std::env::temp_dir().join("dagan-example-eval.ckpt");
    state.save(&path)?;
    println!("saved checkpoint after {} iterations to {}", state.iteration, path.display());
    println!("config fingerprint: {}...", &cfg.fingerprint()[..16]);

    // Resume and verify the continuation matches the original bit for bit.
    let mut resumed = TrainState::resume(&cfg, &path)?;
    let original_next = state.train_step(&refs)?;
    let resumed_next = resumed.train_step(&refs)?;
    assert_eq!(original_next, resumed_next, "resume must replay the exact run");
    println!("resumed run replays the original exactly (loss reports identical)");

    let report = evaluate(&resumed.generator, &samples)?;
    println!("\ntraining-set scores at iteration {}:", resumed.iteration);
    println!("{}", report.to_text());

    // A checkpoint only loads under the configuration that produced it.
    let mut other = cfg.clone();
    other.seed += 1;
    match TrainState::resume(&other, &path) {
        Err(dagan::Error::Fingerprint { .. }) => {
            println!("different config refused as expected (fingerprint mismatch)");
        }
        Err(e) => panic!("expected a fingerprint refusal, got: {e}"),
        Ok(_) => panic!("expected a fingerprint refusal, got a loaded state"),
    }
    Ok(())
}
