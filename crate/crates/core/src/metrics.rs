//! Segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::weighted_cross_entropy_parts;
use crate::layers::ClassWeights;
use crate::tensor::{Real, Shape, Tensor};
use crate::unet::UnetModel;

/// Which IoU to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouKind {
    /// Foreground intersection over union pooled over every pixel.
    #[default]
    Foreground,
    /// Mean of the pooled foreground and background IoUs.
    ClassAveraged,
}

impl std::str::FromStr for IouKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(IouKind::Foreground),
            "class-averaged" => Ok(IouKind::ClassAveraged),
            _ => Err(Error::invalid("IouKind", format!("unknown IoU kind {s:?}"))),
        }
    }
}

fn binary_counts<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(u64, u64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            expected: truth.shape().to_string(),
            got: pred.shape().to_string(),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        for v in [p, t] {
            if v != T::zero() && v != T::one() {
                return Err(Error::NonBinaryMask {
                    path: "<memory>".into(),
                    index: i,
                    value: v.as_f64(),
                });
            }
        }
        let (p, t) = (p == T::one(), t == T::one());
        inter += (p && t) as u64;
        union += (p || t) as u64;
    }
    Ok((inter, union))
}

/// Pooled foreground IoU of two binary masks; 1 when both are empty.
pub fn iou<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (inter, union) = binary_counts(pred, truth)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn class_averaged_iou<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let flip = |t: &Tensor<T>| t.map(|v| T::one() - v);
    Ok(0.5 * (iou(pred, truth)? + iou(&flip(pred), &flip(truth))?))
}

pub fn iou_with<T: Real>(kind: IouKind, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    match kind {
        IouKind::Foreground => iou(pred, truth),
        IouKind::ClassAveraged => class_averaged_iou(pred, truth),
    }
}

/// Per-pixel argmax of two-class logits; equal logits go to background.
pub fn mask_from_logits<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::invalid(
            "predict_mask",
            format!("expected 2 channels, got {s}"),
        ));
    }
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * 2 * plane;
        for i in 0..plane {
            let fg = d[base + plane + i] > d[base + i];
            out.push(if fg { T::one() } else { T::zero() });
        }
    }
    Tensor::new(Shape::new(s.n, 1, s.h, s.w), out)
}

pub fn predict_mask<T: Real>(model: &UnetModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    mask_from_logits(&model.predict_logits(images, EVAL_CHUNK)?)
}

pub(crate) const EVAL_CHUNK: usize = 8;

/// Hard test metrics at temperature 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Unweighted cross-entropy.
    pub loss: f64,
    pub iou: f64,
}

pub fn evaluate<T: Real>(
    model: &UnetModel<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    kind: IouKind,
) -> Result<Evaluation> {
    let logits = model.predict_logits(images, EVAL_CHUNK)?;
    let (loss, _) = weighted_cross_entropy_parts(&logits, masks, ClassWeights::UNIT)?;
    let pred = mask_from_logits(&logits)?;
    Ok(Evaluation {
        loss: loss.as_f64(),
        iou: iou_with(kind, &pred, masks)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 1, h, w], |i| bits[i] as f64)
    }

    #[test]
    fn iou_examples() {
        let a = mask(&[1, 1, 0, 0], 2, 2);
        let b = mask(&[0, 0, 1, 1], 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let half = mask(&[1, 0, 0, 0], 2, 2);
        assert_eq!(iou(&half, &a).unwrap(), 0.5);
        let empty = mask(&[0; 4], 2, 2);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(class_averaged_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(class_averaged_iou(&half, &a).unwrap(), 0.5 * (0.5 + 2.0 / 3.0));
    }

    #[test]
    fn iou_errors() {
        let a = mask(&[1, 1, 0, 0], 2, 2);
        let b = Tensor::<f64>::zeros([1, 1, 4, 1]);
        assert!(matches!(iou(&a, &b), Err(Error::ShapeMismatch { .. })));
        let c = mask(&[1, 1, 0, 2], 2, 2);
        assert!(iou(&a, &c).is_err());
    }

    #[test]
    fn argmax_and_ties() {
        let fg = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| if i < 4 { 0.0 } else { 1.0 });
        assert_eq!(mask_from_logits(&fg).unwrap().sum(), 4.0);
        let tie = Tensor::<f64>::full([2, 2, 3, 3], 0.7);
        assert_eq!(mask_from_logits(&tie).unwrap().sum(), 0.0);
    }
}
