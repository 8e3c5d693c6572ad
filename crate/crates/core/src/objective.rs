//! Class-balanced cross-entropy and burned-class segmentation metrics.

use std::ops::{Add, AddAssign};

use diffcore::{Reduction, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

/// Per-class loss weights. Class index 1 is burned, 0 unburned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub burn: f64,
    pub unburn: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            burn: 3.0,
            unburn: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.burn > 0.0
            && self.unburn > 0.0
            && self.burn.is_finite()
            && self.unburn.is_finite())
        {
            return Err(Error::Config(format!(
                "class weights must be positive, got burn={} unburn={}",
                self.burn, self.unburn
            )));
        }
        Ok(())
    }

    /// Weights indexed by class label.
    pub fn by_class(&self) -> [f64; 2] {
        [self.unburn, self.burn]
    }
}

/// `sum_ij w[y_ij] * -log p(y_ij)` over a `[2 x H x W]` logit map, reduced
/// by `reduction`.
pub fn weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Mask,
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 3 || shape[0] != 2 || shape[1] != target.height || shape[2] != target.width {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "weighted_ce",
            detail: format!(
                "logits {shape:?} vs mask {}x{}",
                target.height, target.width
            ),
        }));
    }
    target.validate_binary()?;
    Ok(tape.weighted_ce(logits, &target.data, &weights.by_class(), reduction)?)
}

/// Pixel confusion counts with burned (1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`, or 1 when neither prediction nor target has a
    /// positive pixel.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// `2tp / (2tp + fp + fn)`, with the same empty-on-empty convention.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &Mask, target: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::Tensor(diffcore::Error::Dimension {
            op: "confusion",
            detail: format!(
                "prediction {}x{} vs target {}x{}",
                pred.height, pred.width, target.height, target.width
            ),
        }));
    }
    pred.validate_binary()?;
    target.validate_binary()?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    c.f1()
}

/// F1 implied by an IoU value: `2 iou / (1 + iou)`.
pub fn f1_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

/// One serialised metric report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: String,
    pub strategy: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
}

impl MetricRecord {
    pub fn new(split: impl Into<String>, strategy: impl Into<String>, c: ConfusionCounts) -> Self {
        Self {
            split: split.into(),
            strategy: strategy.into(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            iou: c.iou(),
            f1: c.f1(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::Tensor;

    fn mask(h: usize, w: usize, data: &[u8]) -> Mask {
        Mask::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_confusion() {
        let c = confusion(&mask(1, 5, &[1, 1, 0, 1, 0]), &mask(1, 5, &[1, 0, 0, 1, 1])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 1));

        let t = mask(2, 5, &[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let c = confusion(&t, &t).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 0, 0, 5));

        let c = confusion(&mask(2, 2, &[1; 4]), &mask(2, 2, &[0; 4])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 4, 0, 0));
    }

    #[test]
    fn confusion_shape_mismatch() {
        assert!(confusion(&mask(1, 2, &[0, 1]), &mask(2, 1, &[0, 1])).is_err());
    }

    #[test]
    fn iou_and_f1_formulas() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        assert!((c.iou() - 0.6).abs() < 1e-15);
        assert!((c.f1() - 0.75).abs() < 1e-15);
        let perfect = ConfusionCounts {
            tp: 10,
            fp: 0,
            fn_: 0,
            tn: 5,
        };
        assert_eq!((perfect.iou(), perfect.f1()), (1.0, 1.0));
        let empty = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 9,
        };
        assert_eq!((empty.iou(), empty.f1()), (1.0, 1.0));
        assert!((f1_from_iou(0.7559) - 0.8610).abs() < 5e-5);
    }

    #[test]
    fn loss_hand_value_and_target_validation() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![2, 1, 1])).unwrap();
        let v = weighted_ce(
            &mut tape,
            l,
            &mask(1, 1, &[1]),
            &ClassWeights::default(),
            Reduction::Sum,
        )
        .unwrap();
        assert!((tape.value(v).item() - 3.0 * 2f64.ln()).abs() < 1e-12);

        let bad = Mask {
            height: 1,
            width: 1,
            data: vec![2],
        };
        assert!(matches!(
            weighted_ce(&mut tape, l, &bad, &ClassWeights::default(), Reduction::Sum),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let l = tape
            .constant(Tensor::from_f64(vec![2, 1, 2], &[-30.0, 30.0, 30.0, -30.0]).unwrap())
            .unwrap();
        let v = weighted_ce(
            &mut tape,
            l,
            &mask(1, 2, &[1, 0]),
            &ClassWeights::default(),
            Reduction::Mean,
        )
        .unwrap();
        assert!(tape.value(v).item() < 1e-20);
    }
}
