//! Confusion-matrix accumulation and pixel-classification scores: precision,
//! recall, F1, overall accuracy, Cohen's kappa, and intersection-over-union.
//!
//! Counts live in `u64` and accumulate exactly; every ratio is computed once
//! from the final counts, so batch order can never change a report.

use crate::error::{Error, Result};
use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

/// Pixel tallies of a binary change map against its reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Scores derived from one [`ConfusionMatrix`]. `iou` is the change-class
/// intersection-over-union; `miou` averages change and no-change classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub pe: f64,
    pub kappa: f64,
    pub iou: f64,
    pub miou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies a binary prediction against a binary target. Values must be
    /// exactly 0.0 or 1.0; threshold probabilities first.
    pub fn accumulate(&mut self, pred: ArrayViewD<f64>, target: ArrayViewD<f64>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        for (&p, &t) in pred.iter().zip(target.iter()) {
            if (p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0) {
                return Err(Error::Data(format!(
                    "confusion-matrix inputs must be binary, got pred={p} target={t}"
                )));
            }
            match (p == 1.0, t == 1.0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    /// Thresholds a probability map at `threshold` (p ≥ threshold → change)
    /// and tallies it.
    pub fn accumulate_prob(
        &mut self,
        prob: ArrayViewD<f64>,
        target: ArrayViewD<f64>,
        threshold: f64,
    ) -> Result<()> {
        let binary = prob.mapv(|p| if p >= threshold { 1.0 } else { 0.0 });
        self.accumulate(binary.view(), target)
    }

    /// Sums counts from another matrix (parallel-worker merge).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Computes every score. Errors when the matrix is empty.
    pub fn compute_all(&self) -> Result<MetricReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("cannot score an empty confusion matrix".into()));
        }
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let n = total as f64;

        // A ratio with a zero denominator counts as perfect (1.0) only when
        // the class is empty on both sides; any missed or spurious pixel
        // makes it 0.0.
        let empty_positive = self.tp == 0 && self.fp == 0 && self.fn_ == 0;
        let empty_negative = self.tn == 0 && self.fp == 0 && self.fn_ == 0;
        let ratio = |num: f64, den: f64, perfect_when_empty: bool| {
            if den > 0.0 {
                num / den
            } else if perfect_when_empty {
                1.0
            } else {
                0.0
            }
        };

        let precision = ratio(tp, tp + fp, empty_positive);
        let recall = ratio(tp, tp + fn_, empty_positive);
        let f1 = ratio(2.0 * precision * recall, precision + recall, empty_positive);
        let oa = (tp + tn) / n;
        let pe = ((tn + fn_) * (tn + fp) + (fp + tp) * (fn_ + tp)) / (n * n);
        let kappa = if (1.0 - pe).abs() > 0.0 {
            (oa - pe) / (1.0 - pe)
        } else {
            // P_e = 1 forces both marginals onto one class, so OA must be 1:
            // agreement is perfect by construction.
            1.0
        };
        let iou = ratio(tp, tp + fp + fn_, empty_positive);
        let iou_neg = ratio(tn, tn + fp + fn_, empty_negative);
        let miou = 0.5 * (iou + iou_neg);

        Ok(MetricReport {
            precision,
            recall,
            f1,
            oa,
            pe,
            kappa,
            iou,
            miou,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        })
    }
}

impl MetricReport {
    /// Fixed-layout text block: six scores plus raw counts.
    pub fn to_text(&self) -> String {
        format!(
            "precision {:.6}\nrecall    {:.6}\nf1        {:.6}\noa        {:.6}\nkappa     {:.6}\niou       {:.6}\nmiou      {:.6}\ncounts    tp={} fp={} fn={} tn={}\n",
            self.precision,
            self.recall,
            self.f1,
            self.oa,
            self.kappa,
            self.iou,
            self.miou,
            self.tp,
            self.fp,
            self.fn_,
            self.tn
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_tallied_case_reproduces_every_formula() {
        let r = cm(3, 1, 1, 5).compute_all().unwrap();
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.75);
        assert_eq!(r.f1, 0.75);
        assert_eq!(r.oa, 0.8);
        assert_eq!(r.pe, 0.52);
        assert!((r.kappa - 7.0 / 12.0).abs() < 1e-15, "kappa = {}", r.kappa);
        assert_eq!(r.iou, 0.6);
        assert!((r.miou - 23.0 / 35.0).abs() < 1e-15, "miou = {}", r.miou);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let r = cm(7, 0, 0, 13).compute_all().unwrap();
        for v in [r.precision, r.recall, r.f1, r.oa, r.kappa, r.iou, r.miou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn all_negative_perfect_agreement_uses_sentinel_one() {
        let r = cm(0, 0, 0, 10).compute_all().unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.kappa, 1.0);
    }

    #[test]
    fn missed_positives_zero_the_sentinels() {
        let r = cm(0, 0, 4, 6).compute_all().unwrap();
        assert_eq!(r.precision, 0.0); // no predicted positives but some exist
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.iou, 0.0);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(cm(0, 0, 0, 0).compute_all().is_err());
    }

    #[test]
    fn accumulate_tallies_and_is_associative() {
        let pred = ArrayD::from_shape_vec(IxDyn(&[5]), vec![1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let tgt = ArrayD::from_shape_vec(IxDyn(&[5]), vec![1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut whole = ConfusionMatrix::new();
        whole.accumulate(pred.view(), tgt.view()).unwrap();
        assert_eq!(whole, cm(2, 1, 1, 1));

        let mut halves = ConfusionMatrix::new();
        halves
            .accumulate(pred.slice(ndarray::s![..2]).into_dyn(), tgt.slice(ndarray::s![..2]).into_dyn())
            .unwrap();
        halves
            .accumulate(pred.slice(ndarray::s![2..]).into_dyn(), tgt.slice(ndarray::s![2..]).into_dyn())
            .unwrap();
        assert_eq!(halves, whole);
    }

    #[test]
    fn accumulate_rejects_shape_mismatch_and_nonbinary() {
        let a = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let b = ArrayD::from_elem(IxDyn(&[5]), 1.0);
        let mut m = ConfusionMatrix::new();
        assert!(m.accumulate(a.view(), b.view()).is_err());
        let c = ArrayD::from_elem(IxDyn(&[4]), 0.5);
        assert!(m.accumulate(c.view(), a.view()).is_err());
    }

    #[test]
    fn thresholding_maps_probabilities_to_change_at_half() {
        let prob = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.49, 0.5, 0.51, 0.1]).unwrap();
        let tgt = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut m = ConfusionMatrix::new();
        m.accumulate_prob(prob.view(), tgt.view(), 0.5).unwrap();
        assert_eq!(m, cm(2, 0, 0, 2));
    }

    /// Independent oracle: tally raw pixel arrays with plain loops and
    /// evaluate each published formula directly, then compare.
    #[test]
    fn agrees_with_brute_force_oracle_on_1000_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        for _ in 0..1000 {
            let len = rng.gen_range(1..64);
            let pred: Vec<f64> = (0..len).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let tgt: Vec<f64> = (0..len).map(|_| f64::from(rng.gen_bool(0.5))).collect();

            // Oracle path: straight loops, no ConfusionMatrix involved.
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..len {
                match (pred[i] == 1.0, tgt[i] == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            let n = len as f64;
            let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
            let oracle_oa = (tpf + tnf) / n;
            let oracle_pe = ((tnf + fnf) * (tnf + fpf) + (fpf + tpf) * (fnf + tpf)) / (n * n);

            let mut m = ConfusionMatrix::new();
            m.accumulate(
                ArrayD::from_shape_vec(IxDyn(&[len]), pred.clone()).unwrap().view(),
                ArrayD::from_shape_vec(IxDyn(&[len]), tgt.clone()).unwrap().view(),
            )
            .unwrap();
            assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
            let r = m.compute_all().unwrap();

            let rel = |a: f64, b: f64| (a - b).abs() / f64::max(1e-300, a.abs().max(b.abs()));
            assert!(rel(r.oa, oracle_oa) <= 1e-12);
            assert!(rel(r.pe, oracle_pe) <= 1e-12);
            if tp + fp > 0 {
                assert!(rel(r.precision, tpf / (tpf + fpf)) <= 1e-12);
            }
            if tp + fn_ > 0 {
                assert!(rel(r.recall, tpf / (tpf + fnf)) <= 1e-12);
            }
            if r.precision + r.recall > 0.0 {
                assert!(
                    rel(r.f1, 2.0 * r.precision * r.recall / (r.precision + r.recall)) <= 1e-12
                );
            }
            if tp + fp + fn_ > 0 {
                assert!(rel(r.iou, tpf / (tpf + fpf + fnf)) <= 1e-12);
            }
            if (1.0 - oracle_pe).abs() > 1e-12 {
                assert!(rel(r.kappa, (oracle_oa - oracle_pe) / (1.0 - oracle_pe)) <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn scores_stay_in_bounds(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let r = cm(tp, fp, fn_, tn).compute_all().unwrap();
            for v in [r.precision, r.recall, r.f1, r.oa, r.pe, r.iou, r.miou] {
                prop_assert!((0.0..=1.0).contains(&v), "metric out of bounds: {v}");
            }
            prop_assert!((-1.0..=1.0).contains(&r.kappa), "kappa out of bounds: {}", r.kappa);
            // Algebraic identity when the positive class is nonempty.
            if tp + fp + fn_ > 0 {
                prop_assert!((r.iou - r.f1 / (2.0 - r.f1)).abs() < 1e-12);
                prop_assert!(r.iou <= r.f1 + 1e-15);
            }
        }

        #[test]
        fn merge_is_order_invariant(parts in proptest::collection::vec((0u64..50, 0u64..50, 0u64..50, 0u64..50), 1..6)) {
            prop_assume!(parts.iter().map(|p| p.0 + p.1 + p.2 + p.3).sum::<u64>() > 0);
            let mut fwd = ConfusionMatrix::new();
            for &(a,b,c,d) in &parts { fwd.merge(&cm(a,b,c,d)); }
            let mut rev = ConfusionMatrix::new();
            for &(a,b,c,d) in parts.iter().rev() { rev.merge(&cm(a,b,c,d)); }
            prop_assert_eq!(fwd, rev);
            prop_assert_eq!(fwd.compute_all().unwrap(), rev.compute_all().unwrap());
        }
    }
}
