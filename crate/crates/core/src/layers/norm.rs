//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Trainable scale/shift plus running statistics for `c` channels.
///
/// `gamma` and `beta` are `c x 1 x 1 x 1`; the running statistics are plain
/// vectors and never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Real = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Biased per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Real = f64> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones([channels, 1, 1, 1]),
            beta: Tensor::zeros([channels, 1, 1, 1]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

fn check_params<T: Real>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Shape> {
    if !tape.owns(x) || !tape.owns(gamma) || !tape.owns(beta) {
        return Err(Error::ForeignVar);
    }
    let s = tape.shape(x);
    let want = Shape::new(s.c, 1, 1, 1);
    for p in [gamma, beta] {
        if tape.shape(p) != want {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                expected: format!("{want} (input has {} channels)", s.c),
                got: tape.shape(p).to_string(),
            });
        }
    }
    Ok(s)
}

/// Normalizes with the batch's own statistics and returns them.
pub fn batch_norm2d_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    epsilon: f64,
) -> Result<(Var, BatchStats<T>)> {
    let s = check_params(tape, x, gamma, beta)?;
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::invalid(
            "batch_norm2d",
            "train mode needs at least 2 values per channel",
        ));
    }
    let m = T::lit(count as f64);
    let eps = T::lit(epsilon);
    let xv = tape.value(x).data();
    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let plane = s.plane();

    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            for &v in &xv[(n * s.c + c) * plane..][..plane] {
                acc += v;
            }
        }
        mean[c] = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in &xv[(n * s.c + c) * plane..][..plane] {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); s.len()];
    let mut out = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
    }

    let saved_inv_std = inv_std.clone();
    let var_out = tape.record(
        "batch_norm2d",
        &[x, gamma, beta],
        Tensor::from_raw(s, out),
        Box::new(move |ctx| {
            let gy = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut sum_g = vec![T::zero(); s.c];
            let mut sum_gx = vec![T::zero(); s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    for i in off..off + plane {
                        sum_g[c] += gy[i];
                        sum_gx[c] += gy[i] * xhat[i];
                    }
                }
            }
            let dx = ctx.needs(0).then(|| {
                let mut dx = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let k = gamma[c] * saved_inv_std[c] / m;
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            dx[i] = k * (m * gy[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                }
                Tensor::from_raw(s, dx)
            });
            let pshape = Shape::new(s.c, 1, 1, 1);
            vec![
                dx,
                Some(Tensor::from_raw(pshape, sum_gx)),
                Some(Tensor::from_raw(pshape, sum_g)),
            ]
        }),
    )?;
    Ok((var_out, BatchStats { mean, var }))
}

/// Normalizes with fixed running statistics.
pub fn batch_norm2d_eval<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    epsilon: f64,
) -> Result<Var> {
    let s = check_params(tape, x, gamma, beta)?;
    if running_mean.len() != s.c || running_var.len() != s.c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm2d",
            expected: format!("{} running statistics", s.c),
            got: running_mean.len().to_string(),
        });
    }
    let eps = T::lit(epsilon);
    let plane = s.plane();
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let xv = tape.value(x).data();
    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                out[i] = g[c] * (xv[i] - mean[c]) * inv_std[c] + b[c];
            }
        }
    }
    tape.record(
        "batch_norm2d_eval",
        &[x, gamma, beta],
        Tensor::from_raw(s, out),
        Box::new(move |ctx| {
            let gy = ctx.grad.data();
            let xv = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![T::zero(); s.len()];
            let mut dg = vec![T::zero(); s.c];
            let mut db = vec![T::zero(); s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * plane;
                    for i in off..off + plane {
                        dx[i] = gy[i] * gamma[c] * inv_std[c];
                        dg[c] += gy[i] * (xv[i] - mean[c]) * inv_std[c];
                        db[c] += gy[i];
                    }
                }
            }
            let pshape = Shape::new(s.c, 1, 1, 1);
            vec![
                Some(Tensor::from_raw(s, dx)),
                Some(Tensor::from_raw(pshape, dg)),
                Some(Tensor::from_raw(pshape, db)),
            ]
        }),
    )
}

/// Batch normalization driven by `params`; train mode updates its running
/// statistics.
pub fn batch_norm2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Var> {
    if tape.shape(x).c != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm2d",
            expected: format!("{} channels", params.channels()),
            got: tape.shape(x).to_string(),
        });
    }
    match mode {
        Mode::Train => {
            let (y, stats) = batch_norm2d_train(tape, x, gamma, beta, params.epsilon)?;
            params.update_running(&stats);
            Ok(y)
        }
        Mode::Eval => batch_norm2d_eval(
            tape,
            x,
            gamma,
            beta,
            &params.running_mean,
            &params.running_var,
            params.epsilon,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(x: Tensor, params: &mut BatchNormParams, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.param(params.gamma.clone());
        let b = tape.param(params.beta.clone());
        let y = batch_norm2d(&mut tape, xv, g, b, params, mode)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let mut p = BatchNormParams::new(2);
        let x = Tensor::from_fn([3, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 5.0 } else { -1.0 });
        let y = run(x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut p = BatchNormParams::new(2);
        p.gamma = Tensor::zeros([2, 1, 1, 1]);
        p.beta = Tensor::from_f64([2, 1, 1, 1], &[0.25, -3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn([2, 2, 3, 3], |_| rng.random_range(-2.0..2.0));
        let y = run(x, &mut p, Mode::Train).unwrap();
        for n in 0..2 {
            for i in 0..9 {
                assert_eq!(y.data()[n * 18 + i], 0.25);
                assert_eq!(y.data()[n * 18 + 9 + i], -3.0);
            }
        }
    }

    #[test]
    fn normalized_statistics() {
        let mut p = BatchNormParams::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn([4, 3, 5, 5], |_| rng.random_range(-3.0..7.0));
        let y = run(x.clone(), &mut p, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.data()[(n * 3 + c) * 25 + i])
                .collect();
            let xs: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| x.data()[(n * 3 + c) * 25 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            let xm = xs.iter().sum::<f64>() / 100.0;
            let xvar = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - xvar / (xvar + DEFAULT_BN_EPSILON)).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_follow_momentum_and_eval_is_pure() {
        let mut p = BatchNormParams::new(1);
        let x = Tensor::from_f64([1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        run(x.clone(), &mut p, Mode::Train).unwrap();
        assert!((p.running_mean[0] - 0.25).abs() < 1e-15);
        assert!((p.running_var[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-15);
        let before = p.clone();
        let a = run(x.clone(), &mut p, Mode::Eval).unwrap();
        let b = run(x, &mut p, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, before);
    }

    #[test]
    fn errors() {
        let mut p = BatchNormParams::new(2);
        assert!(run(Tensor::zeros([1, 3, 2, 2]), &mut p, Mode::Train).is_err());
        assert!(run(Tensor::zeros([1, 2, 1, 1]), &mut p, Mode::Train).is_err());
        assert!(run(Tensor::zeros([1, 2, 1, 1]), &mut p, Mode::Eval).is_ok());
    }
}
