//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose +-epsilon step changed a ReLU or max-pool branch.
    /// Central differences straddle a kink there, so they are not compared.
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check a seeded random subset of coordinates instead of all of them.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coordinates: None,
            seed: 0,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `x` against central differences
/// on every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(
        f,
        x,
        &GradCheckConfig {
            epsilon,
            tolerance,
            ..GradCheckConfig::default()
        },
    )
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<(f64, Vec<u8>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let var = tape.constant(x);
    let out = f(&mut tape, var)?;
    let value = tape.value(out);
    if !value.shape().is_scalar() {
        return Err(Error::NotScalar(value.shape().to_string()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            index: 0,
            value: v,
        });
    }
    Ok((v, tape.branch_pattern()))
}

pub fn grad_check_with<F>(f: F, x: &Tensor, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(config.epsilon > 0.0) {
        return Err(Error::invalid("grad_check", "epsilon must be positive"));
    }
    x.check_finite("grad_check")?;

    let mut tape = Tape::<f64>::new();
    let var = tape.param(x.clone());
    let out = f(&mut tape, var)?;
    let value = tape.value(out);
    if !value.shape().is_scalar() {
        return Err(Error::NotScalar(value.shape().to_string()));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            index: 0,
            value: value.item(),
        });
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(var)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    analytic.check_finite("grad_check")?;
    let base = tape.branch_pattern();

    compare_branches(&analytic, x, &base, |p| eval_scalar(&f, p), config)
}

/// Compares `analytic` with central differences of `eval` around `x`.
pub fn compare_numeric<E>(
    analytic: &Tensor,
    x: &Tensor,
    eval: E,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    E: Fn(Tensor) -> Result<f64>,
{
    compare_branches(analytic, x, &[], |p| Ok((eval(p)?, Vec::new())), config)
}

/// Like [`compare_numeric`], but `eval` also returns the branch pattern of its
/// forward pass. Steps whose pattern differs from `base` are skipped.
fn compare_branches<E>(
    analytic: &Tensor,
    x: &Tensor,
    base: &[u8],
    eval: E,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    E: Fn(Tensor) -> Result<(f64, Vec<u8>)>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            expected: x.shape().to_string(),
            got: analytic.shape().to_string(),
        });
    }
    let coords: Vec<usize> = match config.max_coordinates {
        Some(k) if k < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut idx = sample(&mut rng, x.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
        skipped: 0,
        pass: true,
    };
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += config.epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= config.epsilon;
        let (up, up_branches) = eval(plus)?;
        let (down, down_branches) = eval(minus)?;
        if up_branches != base || down_branches != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * config.epsilon);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    // Most coordinates must actually be compared.
    report.pass = report.max_relative_error < config.tolerance && 2 * report.skipped <= report.coordinates;
    Ok(report)
}

/// One entry of the layer battery.
#[derive(Debug, Clone)]
pub struct BatteryResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Copy)]
pub struct BatteryConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub seeds: u64,
    /// Coordinates sampled per end-to-end check.
    pub network_coordinates: usize,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            seeds: 5,
            network_coordinates: 12,
        }
    }
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(out * proj)` for a fixed random projection, making any output scalar.
fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let m = tape.mul(out, p)?;
    tape.sum(m)
}

/// Checks an op with several inputs, one input at a time.
fn check_inputs<F>(
    name: &str,
    inputs: &[Tensor],
    out_shape: [usize; 4],
    op: F,
    config: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    results: &mut Vec<(String, GradCheckReport)>,
    labels: &[&str],
) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let proj = uniform(out_shape, -1.0, 1.0, rng);
    for (k, x) in inputs.iter().enumerate() {
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| if j == k { v } else { tape.constant(t.clone()) })
                .collect();
            let out = op(tape, &vars)?;
            project(tape, out, &proj)
        };
        let r = grad_check_with(f, x, config)?;
        results.push((format!("{name}/{}", labels[k]), r));
    }
    Ok(())
}

fn layer_checks(seed: u64, config: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::layers::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    for (name, padding, stride, k, oh) in [
        ("conv2d_same", Padding::Same, 1, 3, 5),
        ("conv2d_same_stride2", Padding::Same, 2, 3, 3),
        ("conv2d_valid", Padding::Valid, 1, 3, 3),
        ("conv2d_1x1", Padding::Same, 1, 1, 5),
    ] {
        let x = uniform([2, 2, 5, 5], -1.0, 1.0, r);
        let w = uniform([3, 2, k, k], -1.0, 1.0, r);
        let b = uniform([3, 1, 1, 1], -1.0, 1.0, r);
        check_inputs(
            name,
            &[x, w, b],
            [2, 3, oh, oh],
            |t, v| conv2d(t, v[0], v[1], v[2], padding, stride),
            config,
            r,
            &mut out,
            &["input", "weight", "bias"],
        )?;
    }

    let x = uniform([2, 3, 3, 2], -1.0, 1.0, r);
    let w = uniform([2, 3, 2, 2], -1.0, 1.0, r);
    let b = uniform([2, 1, 1, 1], -1.0, 1.0, r);
    check_inputs(
        "conv_transpose2d",
        &[x, w, b],
        [2, 2, 6, 4],
        |t, v| conv_transpose2d(t, v[0], v[1], v[2], 2),
        config,
        r,
        &mut out,
        &["input", "weight", "bias"],
    )?;

    let x = uniform([2, 2, 4, 6], -1.0, 1.0, r);
    check_inputs(
        "max_pool2d",
        &[x],
        [2, 2, 2, 3],
        |t, v| Ok(max_pool2d(t, v[0])?.0),
        config,
        r,
        &mut out,
        &["input"],
    )?;

    let x = uniform([3, 2, 3, 3], -2.0, 2.0, r);
    let g = uniform([2, 1, 1, 1], 0.5, 1.5, r);
    let b = uniform([2, 1, 1, 1], -0.5, 0.5, r);
    check_inputs(
        "batch_norm2d",
        &[x, g, b],
        [3, 2, 3, 3],
        |t, v| Ok(batch_norm2d_train(t, v[0], v[1], v[2], DEFAULT_BN_EPSILON)?.0),
        config,
        r,
        &mut out,
        &["input", "gamma", "beta"],
    )?;

    for temp in [1.0, 4.0] {
        let z = uniform([2, 2, 3, 3], -3.0, 3.0, r);
        check_inputs(
            &format!("softmax_temperature_t{temp}"),
            &[z],
            [2, 2, 3, 3],
            |t, v| softmax_temperature(t, v[0], temp),
            config,
            r,
            &mut out,
            &["logits"],
        )?;
    }

    let z = uniform([2, 2, 4, 4], -3.0, 3.0, r);
    let y = uniform([2, 1, 4, 4], 0.0, 1.0, r).map(|v| if v < 0.3 { 1.0 } else { 0.0 });
    let w = ClassWeights::foreground(5.5)?;
    let f = |t: &mut Tape, v: Var| weighted_cross_entropy(t, v, &y, w);
    out.push((
        "weighted_cross_entropy/logits".into(),
        grad_check_with(f, &z, config)?,
    ));

    let z = uniform([2, 2, 4, 4], -3.0, 3.0, r);
    let q = softmax_temperature_tensor(&uniform([2, 2, 4, 4], -4.0, 4.0, r), 1.0)?;
    for (temp, weights) in [(1.0, ClassWeights::UNIT), (3.0, w)] {
        let f = |t: &mut Tape, v: Var| soft_cross_entropy(t, v, &q, temp, weights);
        out.push((
            format!("soft_cross_entropy_t{temp}/logits"),
            grad_check_with(f, &z, config)?,
        ));
    }
    Ok(out)
}

/// Draws of the evaluation point tried before giving up on kink-free steps.
const NETWORK_DRAWS: u64 = 4;

/// Class-weighted loss of a whole 2-Unet, differentiated with respect to the
/// input image and to a sample of coordinates in several parameter tensors.
///
/// A unit sitting within epsilon of a ReLU or pooling kink can make most steps
/// of a tensor straddle it. Such a point says nothing about the gradient, so
/// the point is redrawn; the last draw is reported if none is usable.
fn network_checks(
    seed: u64,
    batch_norm: bool,
    coords: usize,
    config: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for draw in 0..NETWORK_DRAWS {
        out = network_checks_at(seed, draw, batch_norm, coords, config)?;
        if out.iter().all(|(_, r)| 2 * r.skipped <= r.coordinates) {
            break;
        }
    }
    Ok(out)
}

fn network_checks_at(
    seed: u64,
    draw: u64,
    batch_norm: bool,
    coords: usize,
    config: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::layers::{weighted_cross_entropy, ClassWeights, Mode};
    use crate::unet::{UnetConfig, UnetModel};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    let mut model = UnetModel::<f64>::build(&UnetConfig::new(2).with_batch_norm(batch_norm), seed)?;
    // Zero-initialised biases put ReLUs fed by all-zero inputs exactly on their kink.
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    // 32x32 keeps the bottom level at 2x2, so batch statistics span more than two values.
    let x = uniform([2, 1, 32, 32], 0.0, 1.0, &mut rng);
    let y = uniform([2, 1, 32, 32], 0.0, 1.0, &mut rng).map(|v| if v < 0.2 { 1.0 } else { 0.0 });
    let w = ClassWeights::foreground(4.0)?;
    let tag = if batch_norm { "unet2_bn" } else { "unet2" };
    let sub = GradCheckConfig {
        max_coordinates: Some(coords),
        seed,
        ..*config
    };

    let mut out = Vec::new();
    let f = |tape: &mut Tape, v: Var| {
        let (pass, _) = model.forward_with(tape, v, Mode::Train, false)?;
        weighted_cross_entropy(tape, pass.logits, &y, w)
    };
    out.push((format!("{tag}/input"), grad_check_with(f, &x, &sub)?));

    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let mut picks = vec![
        "enc0.conv1.weight",
        "enc4.conv2.weight",
        "dec1.up.weight",
        "head.weight",
        "dec0.conv2.bias",
    ];
    if batch_norm {
        picks.push("enc2.conv1.bn.gamma");
    }
    for pick in picks {
        let idx = names
            .iter()
            .position(|n| n == pick)
            .expect("known parameter name");
        let loss_at = |m: &UnetModel<f64>| -> Result<(Tape, Var, Var)> {
            let mut tape = Tape::new();
            let input = tape.constant(x.clone());
            let (pass, _) = m.forward_with(&mut tape, input, Mode::Train, true)?;
            let loss = weighted_cross_entropy(&mut tape, pass.logits, &y, w)?;
            Ok((tape, loss, pass.params[idx]))
        };
        let (tape, loss, leaf) = loss_at(&model)?;
        let analytic = tape.backward(loss)?.take(leaf).expect("parameter gradient");
        let base = tape.branch_pattern();
        let p0 = model.named_parameters()[idx].1.clone();
        let eval = |p: Tensor| -> Result<(f64, Vec<u8>)> {
            let mut m = model.clone();
            *m.parameters_mut()[idx] = p;
            let (tape, loss, _) = loss_at(&m)?;
            Ok((tape.value(loss).item(), tape.branch_pattern()))
        };
        out.push((
            format!("{tag}/{pick}"),
            compare_branches(&analytic, &p0, &base, eval, &sub)?,
        ));
    }
    Ok(out)
}

/// The full battery: every layer and loss, plus end-to-end 2-Unet losses with
/// and without batch normalization, for `seeds` seeds each. All in f64.
pub fn battery(config: &BatteryConfig) -> Result<Vec<BatteryResult>> {
    let gc = GradCheckConfig {
        epsilon: config.epsilon,
        tolerance: config.tolerance,
        ..GradCheckConfig::default()
    };
    let mut results = Vec::new();
    for seed in 0..config.seeds {
        let mut all = layer_checks(seed, &gc)?;
        for bn in [false, true] {
            all.extend(network_checks(seed, bn, config.network_coordinates, &gc)?);
        }
        results.extend(
            all.into_iter()
                .map(|(name, report)| BatteryResult { name, seed, report }),
        );
    }
    Ok(results)
}
