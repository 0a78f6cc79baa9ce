//! Two-class temperature softmax and the hard/soft cross-entropies.
//!
//! Logits are `n x 2 x h x w`, channel 1 is foreground. Every loss is the
//! mean over the `n * h * w` pixels and is evaluated with log-sum-exp on
//! the logits, never as the log of a stored probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Per-class loss multipliers: `w_f` for foreground, `w_b` for background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_f: f64,
    pub w_b: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::UNIT
    }
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w_f: 1.0, w_b: 1.0 };

    pub fn new(w_f: f64, w_b: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(w_f) || !ok(w_b) {
            return Err(Error::invalid(
                "ClassWeights",
                format!("weights must be finite and >= 0, got w_f={w_f}, w_b={w_b}"),
            ));
        }
        if w_f == 0.0 && w_b == 0.0 {
            return Err(Error::invalid("ClassWeights", "w_f and w_b cannot both be zero"));
        }
        Ok(ClassWeights { w_f, w_b })
    }

    /// Foreground weight only, background kept at 1.
    pub fn foreground(w_f: f64) -> Result<Self> {
        ClassWeights::new(w_f, 1.0)
    }

    pub fn for_class(&self, class: usize) -> f64 {
        if class == 1 {
            self.w_f
        } else {
            self.w_b
        }
    }
}

fn check_two_class(op: &'static str, s: Shape) -> Result<()> {
    if s.c != 2 {
        return Err(Error::invalid(op, format!("expected 2 channels, got {s}")));
    }
    Ok(())
}

fn check_temperature(op: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(op, format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Per-pixel `(log p0, log p1)` of `softmax(z / t)`.
#[inline]
fn log_softmax2<T: Real>(z0: T, z1: T, inv_t: T) -> (T, T) {
    let (u0, u1) = (z0 * inv_t, z1 * inv_t);
    let m = u0.max(u1);
    let lse = m + ((u0 - m).exp() + (u1 - m).exp()).ln();
    (u0 - lse, u1 - lse)
}

/// `softmax(logits / t)` over the two channels, without recording.
pub fn softmax_temperature_tensor<T: Real>(logits: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_temperature("softmax_temperature", t)?;
    let s = logits.shape();
    check_two_class("softmax_temperature", s)?;
    let inv_t = T::lit(1.0 / t);
    let plane = s.plane();
    let z = logits.data();
    let mut out = vec![T::zero(); s.len()];
    for n in 0..s.n {
        let base = n * 2 * plane;
        for i in 0..plane {
            let (u0, u1) = (z[base + i] * inv_t, z[base + plane + i] * inv_t);
            let m = u0.max(u1);
            let (e0, e1) = ((u0 - m).exp(), (u1 - m).exp());
            out[base + i] = e0 / (e0 + e1);
            out[base + plane + i] = e1 / (e0 + e1);
        }
    }
    Ok(Tensor::from_raw(s, out))
}

/// Differentiable `softmax(logits / t)`.
pub fn softmax_temperature<T: Real>(tape: &mut Tape<T>, logits: Var, t: f64) -> Result<Var> {
    if !tape.owns(logits) {
        return Err(Error::ForeignVar);
    }
    let probs = softmax_temperature_tensor(tape.value(logits), t)?;
    let s = probs.shape();
    let inv_t = T::lit(1.0 / t);
    tape.record(
        "softmax_temperature",
        &[logits],
        probs,
        Box::new(move |ctx| {
            let (g, p) = (ctx.grad.data(), ctx.output.data());
            let plane = s.plane();
            let mut dz = vec![T::zero(); s.len()];
            for n in 0..s.n {
                let base = n * 2 * plane;
                for i in 0..plane {
                    let (a, b) = (base + i, base + plane + i);
                    let dot = g[a] * p[a] + g[b] * p[b];
                    dz[a] = inv_t * p[a] * (g[a] - dot);
                    dz[b] = inv_t * p[b] * (g[b] - dot);
                }
            }
            vec![Some(Tensor::from_raw(s, dz))]
        }),
    )
}

fn check_binary_targets<T: Real>(logits: Shape, targets: &Tensor<T>) -> Result<()> {
    let ts = targets.shape();
    if ts != Shape::new(logits.n, 1, logits.h, logits.w) {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            expected: format!("targets {}x1x{}x{}", logits.n, logits.h, logits.w),
            got: ts.to_string(),
        });
    }
    if let Some(i) = targets
        .data()
        .iter()
        .position(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            format!("non-binary target {} at index {i}", targets.data()[i]),
        ));
    }
    Ok(())
}

/// Loss value and logit gradient (for unit upstream gradient) of the
/// class-weighted hard cross-entropy at temperature 1.
pub fn weighted_cross_entropy_parts<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    weights: ClassWeights,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    check_two_class("weighted_cross_entropy", s)?;
    check_binary_targets(s, targets)?;
    let plane = s.plane();
    let count = T::lit((s.n * plane) as f64);
    let (wf, wb) = (T::lit(weights.w_f), T::lit(weights.w_b));
    let (z, y) = (logits.data(), targets.data());
    let mut total = T::zero();
    let mut grad = vec![T::zero(); s.len()];
    for n in 0..s.n {
        let base = n * 2 * plane;
        for i in 0..plane {
            let (l0, l1) = log_softmax2(z[base + i], z[base + plane + i], T::one());
            let fg = y[n * plane + i] == T::one();
            let w = if fg { wf } else { wb };
            total += w * if fg { l1 } else { l0 };
            let (p0, p1) = (l0.exp(), l1.exp());
            let (t0, t1) = if fg {
                (T::zero(), T::one())
            } else {
                (T::one(), T::zero())
            };
            grad[base + i] = w * (p0 - t0) / count;
            grad[base + plane + i] = w * (p1 - t1) / count;
        }
    }
    Ok((-total / count, Tensor::from_raw(s, grad)))
}

/// Class-weighted binary cross-entropy against a `n x 1 x h x w` mask.
pub fn weighted_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    weights: ClassWeights,
) -> Result<Var> {
    if !tape.owns(logits) {
        return Err(Error::ForeignVar);
    }
    let (loss, grad) = weighted_cross_entropy_parts(tape.value(logits), targets, weights)?;
    tape.record(
        "weighted_cross_entropy",
        &[logits],
        Tensor::scalar(loss),
        Box::new(move |ctx| {
            let g = ctx.grad.item();
            vec![Some(grad.map(|v| v * g))]
        }),
    )
}

fn check_soft_targets<T: Real>(logits: Shape, teacher: &Tensor<T>) -> Result<()> {
    if teacher.shape() != logits {
        return Err(Error::ShapeMismatch {
            op: "soft_cross_entropy",
            expected: logits.to_string(),
            got: teacher.shape().to_string(),
        });
    }
    let plane = logits.plane();
    let p = teacher.data();
    for n in 0..logits.n {
        let base = n * 2 * plane;
        for i in 0..plane {
            let (a, b) = (p[base + i], p[base + plane + i]);
            let sum = (a + b).as_f64();
            if a < T::zero() || b < T::zero() || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "soft_cross_entropy",
                    format!("teacher probabilities at sample {n}, pixel {i} sum to {sum}"),
                ));
            }
        }
    }
    Ok(())
}

/// Loss value and logit gradient of the soft cross-entropy at temperature `t`.
pub fn soft_cross_entropy_parts<T: Real>(
    logits: &Tensor<T>,
    teacher: &Tensor<T>,
    t: f64,
    weights: ClassWeights,
) -> Result<(T, Tensor<T>)> {
    check_temperature("soft_cross_entropy", t)?;
    let s = logits.shape();
    check_two_class("soft_cross_entropy", s)?;
    check_soft_targets(s, teacher)?;
    let plane = s.plane();
    let count = T::lit((s.n * plane) as f64);
    let inv_t = T::lit(1.0 / t);
    let (wf, wb) = (T::lit(weights.w_f), T::lit(weights.w_b));
    let (z, q) = (logits.data(), teacher.data());
    let mut total = T::zero();
    let mut grad = vec![T::zero(); s.len()];
    let scale = inv_t / count;
    for n in 0..s.n {
        let base = n * 2 * plane;
        for i in 0..plane {
            let (a, b) = (base + i, base + plane + i);
            let (l0, l1) = log_softmax2(z[a], z[b], inv_t);
            let (wq0, wq1) = (wb * q[a], wf * q[b]);
            total += wq0 * l0 + wq1 * l1;
            let mass = wq0 + wq1;
            grad[a] = scale * (l0.exp() * mass - wq0);
            grad[b] = scale * (l1.exp() * mass - wq1);
        }
    }
    Ok((-total / count, Tensor::from_raw(s, grad)))
}

/// Cross-entropy of the student's temperature-`t` softmax against teacher
/// probabilities, with per-class weights.
pub fn soft_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_probs: &Tensor<T>,
    t: f64,
    weights: ClassWeights,
) -> Result<Var> {
    if !tape.owns(student_logits) {
        return Err(Error::ForeignVar);
    }
    let (loss, grad) = soft_cross_entropy_parts(tape.value(student_logits), teacher_probs, t, weights)?;
    tape.record(
        "soft_cross_entropy",
        &[student_logits],
        Tensor::scalar(loss),
        Box::new(move |ctx| {
            let g = ctx.grad.item();
            vec![Some(grad.map(|v| v * g))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(z0: f64, z1: f64) -> Tensor {
        Tensor::from_f64([1, 2, 1, 1], &[z0, z1]).unwrap()
    }

    #[test]
    fn symmetric_logits_are_uniform() {
        for t in [0.5, 1.0, 7.0] {
            let p = softmax_temperature_tensor(&pixel(3.3, 3.3), t).unwrap();
            assert_eq!(p.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn known_value_and_scale_equivalence() {
        let p = softmax_temperature_tensor(&pixel(1.0, 0.0), 1.0).unwrap();
        assert!((p.data()[0] - 0.73106).abs() < 1e-5);
        assert!((p.data()[1] - 0.26894).abs() < 1e-5);
        let q = softmax_temperature_tensor(&pixel(2.0, 0.0), 2.0).unwrap();
        assert_eq!(p, q);
        let hot = softmax_temperature_tensor(&pixel(5.0, -5.0), 1000.0).unwrap();
        assert!(hot.data().iter().all(|v| (v - 0.5).abs() < 1e-2));
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_temperature_tensor(&pixel(0.0, 1.0), 0.0).is_err());
        assert!(softmax_temperature_tensor(&pixel(0.0, 1.0), -1.0).is_err());
        assert!(softmax_temperature_tensor(&Tensor::<f64>::zeros([1, 3, 1, 1]), 1.0).is_err());
    }

    #[test]
    fn weighted_ce_single_pixel() {
        let fg = Tensor::from_f64([1, 1, 1, 1], &[1.0]).unwrap();
        let bg = Tensor::from_f64([1, 1, 1, 1], &[0.0]).unwrap();
        let w = ClassWeights::foreground(17.8).unwrap();
        let (l, _) = weighted_cross_entropy_parts(&pixel(0.0, 0.0), &fg, w).unwrap();
        assert!((l - 17.8 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 12.338).abs() < 1e-3);
        let (l, _) = weighted_cross_entropy_parts(&pixel(0.0, 0.0), &bg, w).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_rejects_non_binary() {
        let y = Tensor::from_f64([1, 1, 1, 1], &[0.5]).unwrap();
        assert!(weighted_cross_entropy_parts(&pixel(0.0, 0.0), &y, ClassWeights::UNIT).is_err());
    }

    #[test]
    fn soft_ce_rejects_unnormalized_teacher() {
        let q = Tensor::from_f64([1, 2, 1, 1], &[0.5, 0.6]).unwrap();
        assert!(soft_cross_entropy_parts(&pixel(0.0, 0.0), &q, 1.0, ClassWeights::UNIT).is_err());
    }

    #[test]
    fn soft_ce_with_matching_teacher_is_entropy_and_stationary() {
        let z = Tensor::<f64>::from_f64([1, 2, 1, 3], &[0.3, -1.0, 2.0, -0.2, 0.5, 0.0]).unwrap();
        let t = 3.0;
        let q = softmax_temperature_tensor(&z, t).unwrap();
        let (l, g) = soft_cross_entropy_parts(&z, &q, t, ClassWeights::UNIT).unwrap();
        let entropy: f64 = (0..3)
            .map(|i| {
                let (a, b) = (q.data()[i], q.data()[3 + i]);
                -(a * a.ln() + b * b.ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - entropy).abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-10));
    }
}
