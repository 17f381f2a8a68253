//! Verifies analytic gradients against central finite differences.
//!
//! Everything here runs in f64, so a step of 1e-5 leaves ~10 significant
//! digits of agreement when the backward pass is right — and disagrees
//! loudly when it is not. The same harness backs the test suite; this
//! example runs it on the attention blocks, the critic, the losses, and the
//! entire detector.
//!
//! Run with: `cargo run --example gradient_check`

use dagan::attention::{Crm, Mafm, MafmPool};
use dagan::autodiff::Tensor;
use dagan::discriminator::Discriminator;
use dagan::generator::{DaNet, DecoderMode, Normalization, Variant};
use dagan::gradcheck::check_scalar_loss;
use dagan::backbone::StagePlan;
use dagan::objectives::{bce_loss, dice_loss};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn random(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.1..0.9))
}

fn main() {
    let mut rng = dagan::rng_from_seed(17);

    let mafm = Mafm::new(&mut rng, 4, 4, MafmPool::Avg);
    let x = random(&[1, 4, 8, 8], &mut rng);
    let err = check_scalar_loss(&|t| mafm.forward(t).mean(), &x, 1e-5);
    println!("multi-scale fusion block   rel err {err:.3e}");
    assert!(err < 1e-4);

    let crm = Crm::new(&mut rng, 4);
    let err = check_scalar_loss(&|t| crm.forward(t).mean(), &x, 1e-5);
    println!("context refinement block   rel err {err:.3e}");
    assert!(err < 1e-4);

    let disc = Discriminator::new(&mut rng, false);
    let map = random(&[1, 1, 16, 16], &mut rng);
    let err = check_scalar_loss(&|t| disc.forward(t).unwrap().mean(), &map, 1e-5);
    println!("critic                     rel err {err:.3e}");
    assert!(err < 1e-4);

    let target = Tensor::new(random(&[1, 1, 4, 4], &mut rng).mapv(|v| f64::from(v > 0.5)));
    let pred = random(&[1, 1, 4, 4], &mut rng);
    let err = check_scalar_loss(&|p| bce_loss(p, &target).unwrap(), &pred, 1e-6);
    println!("cross-entropy loss         rel err {err:.3e}");
    assert!(err < 1e-5);
    let err = check_scalar_loss(&|p| dice_loss(p, &target).unwrap(), &pred, 1e-6);
    println!("dice loss                  rel err {err:.3e}");
    assert!(err < 1e-5);

    // The whole detector, end to end: gradient of the mean output
    // probability with respect to the earlier image.
    let net = DaNet::new(
        &mut rng,
        &StagePlan::micro(),
        Variant::MC,
        MafmPool::Avg,
        DecoderMode::Recursive,
        Normalization::identity(),
    );
    let t2 = Tensor::new(random(&[1, 3, 16, 16], &mut rng));
    let t1 = random(&[1, 3, 16, 16], &mut rng);
    let err = check_scalar_loss(
        &|a| net.forward(a, &t2).unwrap().final_prob.mean(),
        &t1,
        1e-5,
    );
    println!("full detector (16x16)      rel err {err:.3e}");
    assert!(err < 1e-3);
    println!("\nall analytic gradients agree with finite differences");
}
