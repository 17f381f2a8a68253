//! Shows the adversarial alternation up close: one generator step against a
//! frozen critic, then one critic step against frozen fake maps.
//!
//! The critic scores change maps as annotation-like or generator-like; its
//! gradient pushes the generator toward masks with the crisp statistics of
//! real annotations. The example checks the freeze contract explicitly —
//! the network not being updated is bit-identical before and after each
//! half-step.
//!
//! Run with: `cargo run --example adversarial_training`

use dagan::autodiff::Tensor;
use dagan::config::{ExperimentConfig, PlanChoice};
use dagan::data::{batch_tensors, make_synthetic_dataset};
use dagan::generator::Variant;
use dagan::trainer::TrainState;

fn main() -> dagan::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.variant = Variant::Full; // only this variant owns a critic
    cfg.model.plan = PlanChoice::Micro;
    cfg.optim.max_iter = 60;
    cfg.optim.batch_size = 2;

    let mut state = TrainState::new(&cfg)?;
    let samples = make_synthetic_dataset(2, 16, 9);
    let refs: Vec<_> = samples.iter().collect();
    let (t1, t2, target) = batch_tensors(&refs)?;

    let fingerprint = |params: &[(String, Tensor)]| -> Vec<ndarray::ArrayD<f64>> {
        params.iter().map(|(_, p)| p.to_array()).collect()
    };

    // Generator half-step: supervised loss + -ln D(fake); critic untouched.
    let critic_before = fingerprint(state.discriminator_params());
    let (report, fake) = state.generator_update(&t1, &t2, &target)?;
    assert_eq!(
        critic_before,
        fingerprint(state.discriminator_params()),
        "critic must not move during the generator step"
    );
    println!(
        "generator step: bce {:.4}  dice {:.4}  adversarial {:.4}",
        report.l_bce, report.l_dice, report.l_g
    );

    // Critic half-step on detached fakes; generator untouched.
    let generator_before = fingerprint(state.generator_params());
    let real = Tensor::new(target.clone());
    let l_d = state.discriminator_update(&fake, &real, &t1, &t2)?;
    assert_eq!(
        generator_before,
        fingerprint(state.generator_params()),
        "generator must not move during the critic step"
    );
    println!("critic step:    adversarial {l_d:.4}");

    // The packaged loop does both halves per iteration.
    println!("\nalternating for 40 iterations:");
    for i in 0..40 {
        let r = state.train_step(&refs)?;
        if i % 10 == 9 {
            println!(
                "  iteration {:>2}: G adversarial {:.4}  D adversarial {:.4}  total_d {:.4}",
                i + 1,
                r.l_g,
                r.l_d_adv,
                r.total_d
            );
            assert!(r.is_finite(), "losses must stay finite");
        }
    }
    println!("all losses finite through the alternation");
    Ok(())
}
