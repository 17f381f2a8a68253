//! Loss functions: pixelwise binary cross-entropy, Dice overlap, the
//! adversarial generator/critic pair, and the deeply supervised combination
//! over the four decoder levels.
//!
//! The supervised terms (BCE + Dice at every level) contain no critic
//! parameters, so even though the published objective groups them under the
//! critic's loss, their gradients are routed to the generator — the only
//! routing with any effect. [`LossReport::total_d`] still reports the grouped
//! sum for bookkeeping parity.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Clamp bound keeping logarithms finite.
pub const BCE_EPS: f64 = 1e-7;
/// Smoothing constant in the Dice ratio (also defines the empty-empty case).
pub const DICE_EPS: f64 = 1.0;
/// Number of deeply supervised decoder levels.
pub const SUPERVISED_LEVELS: usize = 4;

/// Scalar summary of one optimization step, one line per iteration in the
/// training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Adversarial generator term, mean of −ln D(fake).
    pub l_g: f64,
    /// Adversarial critic term, mean of −(ln D(real) + ln(1 − D(fake))).
    pub l_d_adv: f64,
    /// Supervised cross-entropy summed over the four levels.
    pub l_bce: f64,
    /// Supervised Dice summed over the four levels.
    pub l_dice: f64,
    /// The published grouping: adversarial critic term plus both supervised
    /// sums (reported together even though the supervised gradients update
    /// the generator).
    pub total_d: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_d_adv, self.l_bce, self.l_dice, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> f64 {
    let v = t.value();
    debug_assert_eq!(v.len(), 1, "expected scalar tensor");
    *v.iter().next().unwrap()
}

fn check_same_shape(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over all elements; predictions are clamped into
/// `[eps, 1-eps]` so the result is always finite.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "bce_loss")?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let one_minus_p = p.neg().add_scalar(1.0);
    let one_minus_t = target.neg().add_scalar(1.0);
    let term = target.mul(&p.ln()).add(&one_minus_t.mul(&one_minus_p.ln()));
    Ok(term.neg().mean())
}

/// Soft Dice loss `1 − (2·Σ(p·t) + ε) / (Σp + Σt + ε)` with ε = 1. The
/// smoothing term makes the empty-prediction/empty-target case a perfect 0.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "dice_loss")?;
    let numerator = pred.mul(target).sum().mul_scalar(2.0).add_scalar(DICE_EPS);
    let denominator = pred.sum().add(&target.sum()).add_scalar(DICE_EPS);
    Ok(numerator.div(&denominator).neg().add_scalar(1.0))
}

/// Adversarial generator objective: mean over the batch of −ln D(fake).
/// Scores are clamped like BCE inputs, so the loss stays finite even for a
/// saturated critic.
pub fn generator_loss(d_on_fake: &Tensor) -> Tensor {
    d_on_fake.clamp(BCE_EPS, 1.0 - BCE_EPS).ln().neg().mean()
}

/// Adversarial critic objective: mean over the batch of
/// −(ln D(real) + ln(1 − D(fake))).
pub fn adversarial_discriminator_loss(d_on_real: &Tensor, d_on_fake: &Tensor) -> Tensor {
    let real = d_on_real.clamp(BCE_EPS, 1.0 - BCE_EPS).ln();
    let fake = d_on_fake
        .clamp(BCE_EPS, 1.0 - BCE_EPS)
        .neg()
        .add_scalar(1.0)
        .ln();
    real.add(&fake).neg().mean()
}

/// Nearest-neighbor resample of a `[N,1,H,W]` target to `(oh, ow)`,
/// preserving binarity. Uses the same half-pixel rule as the mask resizer in
/// the data module.
pub fn resample_target(target: &ArrayD<f64>, oh: usize, ow: usize) -> ArrayD<f64> {
    let shape = target.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if (h, w) == (oh, ow) {
        return target.clone();
    }
    let ty = crate::data::nearest_coords(h, oh);
    let tx = crate::data::nearest_coords(w, ow);
    ArrayD::from_shape_fn(IxDyn(&[n, 1, oh, ow]), |ix| {
        target[[ix[0], 0, ty[ix[2]], tx[ix[3]]]]
    })
}

/// Deep supervision: BCE and Dice at every decoder level against the
/// nearest-resampled target. Returns the two sums (not means) over levels.
pub fn supervised_deep_loss(
    aux_probs: &[Tensor],
    target: &ArrayD<f64>,
) -> Result<(Tensor, Tensor)> {
    if aux_probs.len() != SUPERVISED_LEVELS {
        return Err(Error::ShapeMismatch(format!(
            "deep supervision expects {SUPERVISED_LEVELS} level maps, got {}",
            aux_probs.len()
        )));
    }
    if target.ndim() != 4 || target.shape()[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "target must be [N,1,H,W], got {:?}",
            target.shape()
        )));
    }
    let mut bce_sum: Option<Tensor> = None;
    let mut dice_sum: Option<Tensor> = None;
    for prob in aux_probs {
        let s = prob.shape();
        let level_target = Tensor::new(resample_target(target, s[2], s[3]));
        let b = bce_loss(prob, &level_target)?;
        let d = dice_loss(prob, &level_target)?;
        bce_sum = Some(match bce_sum {
            Some(acc) => acc.add(&b),
            None => b,
        });
        dice_sum = Some(match dice_sum {
            Some(acc) => acc.add(&d),
            None => d,
        });
    }
    Ok((bce_sum.unwrap(), dice_sum.unwrap()))
}

/// All loss tensors of one iteration, still attached to the graph. The
/// trainer backpropagates [`ObjectiveTerms::generator_total`] through the
/// generator and [`ObjectiveTerms::l_d_adv`] through the critic.
pub struct ObjectiveTerms {
    pub l_g: Option<Tensor>,
    pub l_d_adv: Option<Tensor>,
    pub l_bce: Tensor,
    pub l_dice: Tensor,
}

impl ObjectiveTerms {
    /// Everything that updates the generator: supervised sums plus (when
    /// adversarial training is on) the generator's adversarial term.
    pub fn generator_total(&self) -> Tensor {
        let supervised = self.l_bce.add(&self.l_dice);
        match &self.l_g {
            Some(l_g) => supervised.add(l_g),
            None => supervised,
        }
    }

    /// Detached scalar snapshot for the training log.
    pub fn report(&self) -> LossReport {
        let l_g = self.l_g.as_ref().map_or(0.0, scalar);
        let l_d_adv = self.l_d_adv.as_ref().map_or(0.0, scalar);
        let l_bce = scalar(&self.l_bce);
        let l_dice = scalar(&self.l_dice);
        LossReport { l_g, l_d_adv, l_bce, l_dice, total_d: l_d_adv + l_bce + l_dice }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_scalar_loss;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(ArrayD::from_shape_vec(IxDyn(shape), values.to_vec()).unwrap())
    }

    fn val(x: &Tensor) -> f64 {
        scalar(x)
    }

    #[test]
    fn bce_hand_case_two_pixels() {
        let loss = bce_loss(&t(&[0.9, 0.1], &[2]), &t(&[1.0, 0.0], &[2])).unwrap();
        assert!((val(&loss) - 0.105_360_515_657_826_28).abs() < 1e-12);
    }

    #[test]
    fn bce_at_constant_half_is_ln_two_for_any_target() {
        let ln2 = std::f64::consts::LN_2;
        for target in [vec![1.0, 0.0, 1.0, 1.0], vec![0.0; 4], vec![1.0; 4]] {
            let loss = bce_loss(&t(&[0.5; 4], &[4]), &t(&target, &[4])).unwrap();
            assert!((val(&loss) - ln2).abs() < 1e-12, "target {target:?}");
        }
    }

    #[test]
    fn bce_perfect_prediction_is_clamp_limited() {
        let loss = bce_loss(&t(&[1.0, 0.0], &[2]), &t(&[1.0, 0.0], &[2])).unwrap();
        let v = val(&loss);
        assert!(v > 0.0 && v < 1e-6, "perfect-prediction BCE {v}");
    }

    #[test]
    fn dice_hand_case_half_overlap() {
        // Two predicted pixels, two target pixels, one shared.
        let pred = t(&[1.0, 1.0, 0.0, 0.0], &[4]);
        let target = t(&[1.0, 0.0, 1.0, 0.0], &[4]);
        let loss = dice_loss(&pred, &target).unwrap();
        assert!((val(&loss) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn dice_perfect_and_empty_cases() {
        let hundred = vec![1.0; 100];
        let perfect = dice_loss(&t(&hundred, &[100]), &t(&hundred, &[100])).unwrap();
        assert_eq!(val(&perfect), 0.0, "1 - 201/201 must be exactly zero");

        let empty = dice_loss(&t(&[0.0; 8], &[8]), &t(&[0.0; 8], &[8])).unwrap();
        assert_eq!(val(&empty), 0.0, "empty-empty convention via the smoothing eps");
    }

    #[test]
    fn generator_loss_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((val(&generator_loss(&t(&[0.5], &[1]))) - ln2).abs() < 1e-12);
        // Batch {0.5, 0.25} averages the two negative logs.
        let batch = generator_loss(&t(&[0.5, 0.25], &[2]));
        assert!((val(&batch) - 1.039_720_770_839_917_9).abs() < 1e-12);
        // A fooled critic costs (almost) nothing.
        assert!(val(&generator_loss(&t(&[1.0], &[1]))) < 1e-6);
    }

    #[test]
    fn discriminator_adversarial_hand_values() {
        let both_half =
            adversarial_discriminator_loss(&t(&[0.5], &[1]), &t(&[0.5], &[1]));
        assert!((val(&both_half) - 1.386_294_361_119_890_6).abs() < 1e-12);

        let perfect = adversarial_discriminator_loss(&t(&[1.0], &[1]), &t(&[0.0], &[1]));
        assert!(val(&perfect) < 1e-6, "perfect discrimination costs ~0");
    }

    #[test]
    fn losses_reject_mismatched_shapes() {
        assert!(bce_loss(&t(&[0.5; 4], &[4]), &t(&[1.0; 2], &[2])).is_err());
        assert!(dice_loss(&t(&[0.5; 4], &[2, 2]), &t(&[1.0; 4], &[4])).is_err());
    }

    #[test]
    fn bce_minimized_at_target_mean_over_constant_predictions() {
        // mean(y) = 0.3; scan constant p over a fine grid.
        let y = t(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], &[10]);
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let loss = val(&bce_loss(&t(&[p; 10], &[10]), &y).unwrap());
            if loss < best.0 {
                best = (loss, p);
            }
        }
        assert!((best.1 - 0.3).abs() < 0.006, "argmin {} should sit at mean(y)=0.3", best.1);
    }

    #[test]
    fn generator_loss_strictly_decreasing_in_score() {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let d = i as f64 / 100.0;
            let loss = val(&generator_loss(&t(&[d], &[1])));
            assert!(loss < prev, "L_G must strictly decrease (d={d})");
            prev = loss;
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_small_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |_| rng.gen_range(0.05..0.95));
        let target = Tensor::new(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        }));

        let bce_err =
            check_scalar_loss(&|p| bce_loss(p, &target).unwrap(), &x0, 1e-6);
        assert!(bce_err < 1e-5, "BCE gradient rel err {bce_err}");

        let dice_err =
            check_scalar_loss(&|p| dice_loss(p, &target).unwrap(), &x0, 1e-6);
        assert!(dice_err < 1e-5, "Dice gradient rel err {dice_err}");

        let scores = ArrayD::from_shape_fn(IxDyn(&[3, 1]), |_| rng.gen_range(0.1..0.9));
        let lg_err = check_scalar_loss(&|d| generator_loss(d), &scores, 1e-6);
        assert!(lg_err < 1e-5, "L_G gradient rel err {lg_err}");

        let fake = ArrayD::from_shape_fn(IxDyn(&[3, 1]), |_| rng.gen_range(0.1..0.9));
        let ld_err = check_scalar_loss(
            &|r| adversarial_discriminator_loss(r, &Tensor::new(fake.clone())),
            &scores,
            1e-6,
        );
        assert!(ld_err < 1e-5, "L_D gradient rel err {ld_err}");
    }

    #[test]
    fn deep_supervision_sums_four_levels_and_resamples() {
        // Half-changed target at 8x8; aux maps at the generator's scales.
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            if ix[3] >= 4 {
                1.0
            } else {
                0.0
            }
        });
        let probs: Vec<Tensor> = [8usize, 4, 2, 1]
            .iter()
            .map(|&s| {
                Tensor::new(ArrayD::from_shape_fn(IxDyn(&[1, 1, s, s]), |ix| {
                    if ix[3] >= s / 2 && s > 1 {
                        1.0
                    } else if s == 1 {
                        0.5
                    } else {
                        0.0
                    }
                }))
            })
            .collect();
        let (bce, dice) = supervised_deep_loss(&probs, &target).unwrap();
        assert!(val(&bce).is_finite() && val(&bce) > 0.0);
        assert!(val(&dice).is_finite() && val(&dice) >= 0.0);

        // Perfect predictions at every level cost ~nothing.
        let perfect: Vec<Tensor> = [8usize, 4, 2, 1]
            .iter()
            .map(|&s| Tensor::new(resample_target(&target, s, s)))
            .collect();
        let (b0, d0) = supervised_deep_loss(&perfect, &target).unwrap();
        assert!(val(&b0) < 1e-5, "perfect BCE sum {}", val(&b0));
        assert_eq!(val(&d0), 0.0, "perfect Dice sum must be exactly zero");

        assert!(supervised_deep_loss(&probs[..3], &target).is_err(), "wrong level count");
    }

    #[test]
    fn resampled_targets_stay_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        for s in [8usize, 4, 2, 1] {
            let down = resample_target(&target, s, s);
            assert_eq!(down.shape(), &[2, 1, s, s]);
            assert!(down.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // Identity resample is exact.
        assert_eq!(resample_target(&target, 16, 16), target);
    }

    #[test]
    fn objective_terms_report_groups_like_the_paper() {
        let terms = ObjectiveTerms {
            l_g: Some(t(&[0.7], &[1])),
            l_d_adv: Some(t(&[1.1], &[1])),
            l_bce: t(&[0.3], &[1]),
            l_dice: t(&[0.2], &[1]),
        };
        let report = terms.report();
        assert_eq!(report.total_d, 1.1 + 0.3 + 0.2);
        assert!(report.is_finite());
        let json = serde_json::to_string(&report).unwrap();
        let back: LossReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        // Supervised-only variants: adversarial slots empty, totals follow.
        let plain = ObjectiveTerms {
            l_g: None,
            l_d_adv: None,
            l_bce: t(&[0.3], &[1]),
            l_dice: t(&[0.2], &[1]),
        };
        assert_eq!(plain.report().l_g, 0.0);
        assert!((val(&plain.generator_total()) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dice_symmetric_for_binary_prediction(bits in proptest::collection::vec(0u8..2, 16),
                                                tbits in proptest::collection::vec(0u8..2, 16)) {
            let p: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let y: Vec<f64> = tbits.iter().map(|&b| b as f64).collect();
            let a = val(&dice_loss(&t(&p, &[16]), &t(&y, &[16])).unwrap());
            let b = val(&dice_loss(&t(&y, &[16]), &t(&p, &[16])).unwrap());
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn losses_nonnegative_and_finite(vals in proptest::collection::vec(0.0f64..=1.0, 16),
                                         tbits in proptest::collection::vec(0u8..2, 16)) {
            let y: Vec<f64> = tbits.iter().map(|&b| b as f64).collect();
            let pred = t(&vals, &[16]);
            let target = t(&y, &[16]);
            for loss in [bce_loss(&pred, &target).unwrap(),
                         dice_loss(&pred, &target).unwrap(),
                         generator_loss(&pred)] {
                let v = val(&loss);
                prop_assert!(v.is_finite() && v >= 0.0, "loss {v}");
            }
        }
    }
}
