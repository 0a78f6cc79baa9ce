//! The U-net family: a 5-level contracting/expansive network whose width is
//! set by the starting channel depth `C` (level `l` has `C * 2^l` channels,
//! `16 C` at the bottom), with optional batch normalization on the
//! contracting path.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batch_norm2d_eval, batch_norm2d_train, concat_channels, conv2d, conv_transpose2d, max_pool2d, relu,
    BatchNormParams, BatchStats, ConvParams, Mode, Padding,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LEVELS: usize = 5;
pub const OUT_CLASSES: usize = 2;

/// How [`count_params`] tallies trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ParamCountMode {
    /// Conv weights and biases, plus gamma/beta where batch norm is enabled.
    #[default]
    Plain,
    /// Conv weights and biases plus two per-channel parameters on every 3x3
    /// convolution of both paths.
    PaperCompat,
}

impl std::str::FromStr for ParamCountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ParamCountMode::Plain),
            "paper-compat" => Ok(ParamCountMode::PaperCompat),
            other => Err(Error::invalid(
                "ParamCountMode",
                format!("unknown mode `{other}` (expected plain or paper-compat)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub start_channels: usize,
    pub levels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub batch_norm_contracting: bool,
    pub param_count_mode: ParamCountMode,
}

impl UnetConfig {
    pub fn new(start_channels: usize) -> Self {
        UnetConfig {
            start_channels,
            levels: LEVELS,
            in_channels: 1,
            out_classes: OUT_CLASSES,
            batch_norm_contracting: false,
            param_count_mode: ParamCountMode::Plain,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm_contracting = on;
        self
    }

    pub fn with_count_mode(mut self, mode: ParamCountMode) -> Self {
        self.param_count_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("UnetConfig", msg));
        if self.start_channels == 0 {
            return bad("start_channels must be >= 1".into());
        }
        if self.levels != LEVELS {
            return bad(format!("levels must be {LEVELS}, got {}", self.levels));
        }
        if self.out_classes != OUT_CLASSES {
            return bad(format!(
                "out_classes must be {OUT_CLASSES}, got {}",
                self.out_classes
            ));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        Ok(())
    }

    /// Channel width of level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.start_channels << level
    }

    pub fn bottom_width(&self) -> usize {
        self.width(self.levels - 1)
    }

    /// Input sides must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Every convolution in execution order.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for l in 0..self.levels {
            let w = self.width(l);
            for (i, c_in) in [prev, w].into_iter().enumerate() {
                plan.push(LayerSpec {
                    name: format!("enc{l}.conv{}", i + 1),
                    kernel: 3,
                    c_in,
                    c_out: w,
                    path: PathKind::Contracting,
                    batch_norm: self.batch_norm_contracting,
                });
            }
            prev = w;
        }
        for l in (0..self.levels - 1).rev() {
            let w = self.width(l);
            plan.push(LayerSpec {
                name: format!("dec{l}.up"),
                kernel: 2,
                c_in: 2 * w,
                c_out: w,
                path: PathKind::Expansive,
                batch_norm: false,
            });
            for (i, c_in) in [2 * w, w].into_iter().enumerate() {
                plan.push(LayerSpec {
                    name: format!("dec{l}.conv{}", i + 1),
                    kernel: 3,
                    c_in,
                    c_out: w,
                    path: PathKind::Expansive,
                    batch_norm: false,
                });
            }
        }
        plan.push(LayerSpec {
            name: "head".into(),
            kernel: 1,
            c_in: self.start_channels,
            c_out: self.out_classes,
            path: PathKind::Head,
            batch_norm: false,
        });
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Contracting,
    Expansive,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub path: PathKind,
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn conv_params(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
    }
}

/// Closed-form trainable parameter count under `config.param_count_mode`.
pub fn count_params(config: &UnetConfig) -> usize {
    count_params_with(config, config.param_count_mode)
}

pub fn count_params_with(config: &UnetConfig, mode: ParamCountMode) -> usize {
    config
        .layer_plan()
        .iter()
        .map(|l| {
            let per_channel = match mode {
                ParamCountMode::Plain if l.batch_norm => 2 * l.c_out,
                ParamCountMode::PaperCompat if l.kernel == 3 => 2 * l.c_out,
                _ => 0,
            };
            l.conv_params() + per_channel
        })
        .sum()
}

/// A 3x3 same-padded convolution, optionally batch-normalized, then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Real = f64> {
    pub conv: ConvParams<T>,
    pub norm: Option<BatchNormParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLevel<T: Real = f64> {
    pub blocks: [ConvBlock<T>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel<T: Real = f64> {
    pub level: usize,
    pub up: ConvParams<T>,
    pub blocks: [ConvBlock<T>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetModel<T: Real = f64> {
    config: UnetConfig,
    seed: u64,
    pub encoder: Vec<EncoderLevel<T>>,
    /// Deepest level first, in execution order.
    pub decoder: Vec<DecoderLevel<T>>,
    pub head: ConvParams<T>,
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Registered parameter leaves, in [`UnetModel::named_parameters`] order.
    pub params: Vec<Var>,
}

/// He-initialized model; identical seeds give bit-identical parameters.
pub fn build<T: Real>(config: &UnetConfig, seed: u64) -> Result<UnetModel<T>> {
    UnetModel::build(config, seed)
}

impl<T: Real> UnetModel<T> {
    pub fn build(config: &UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn block<T: Real>(c_out: usize, c_in: usize, bn: bool, rng: &mut ChaCha8Rng) -> Result<ConvBlock<T>> {
            Ok(ConvBlock {
                conv: ConvParams::he_normal(c_out, c_in, 3, rng)?,
                norm: bn.then(|| BatchNormParams::new(c_out)),
            })
        }
        let mut encoder = Vec::with_capacity(config.levels);
        let mut prev = config.in_channels;
        for l in 0..config.levels {
            let w = config.width(l);
            let bn = config.batch_norm_contracting;
            encoder.push(EncoderLevel {
                blocks: [block(w, prev, bn, &mut rng)?, block(w, w, bn, &mut rng)?],
            });
            prev = w;
        }
        let mut decoder = Vec::with_capacity(config.levels - 1);
        for l in (0..config.levels - 1).rev() {
            let w = config.width(l);
            let up = ConvParams::he_normal(w, 2 * w, 2, &mut rng)?;
            let blocks = [block(w, 2 * w, false, &mut rng)?, block(w, w, false, &mut rng)?];
            decoder.push(DecoderLevel { level: l, up, blocks });
        }
        let head = ConvParams::he_normal(config.out_classes, config.start_channels, 1, &mut rng)?;
        Ok(UnetModel {
            config: *config,
            seed,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Every trainable tensor exactly once, in registration order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        fn push_block<'a, T: Real>(
            out: &mut Vec<(String, &'a Tensor<T>)>,
            prefix: String,
            b: &'a ConvBlock<T>,
        ) {
            out.push((format!("{prefix}.weight"), &b.conv.weight));
            out.push((format!("{prefix}.bias"), &b.conv.bias));
            if let Some(n) = &b.norm {
                out.push((format!("{prefix}.bn.gamma"), &n.gamma));
                out.push((format!("{prefix}.bn.beta"), &n.beta));
            }
        }
        let mut out = Vec::new();
        for (l, level) in self.encoder.iter().enumerate() {
            for (i, b) in level.blocks.iter().enumerate() {
                push_block(&mut out, format!("enc{l}.conv{}", i + 1), b);
            }
        }
        for level in &self.decoder {
            out.push((format!("dec{}.up.weight", level.level), &level.up.weight));
            out.push((format!("dec{}.up.bias", level.level), &level.up.bias));
            for (i, b) in level.blocks.iter().enumerate() {
                push_block(&mut out, format!("dec{}.conv{}", level.level, i + 1), b);
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable view of the trainable tensors, same order as
    /// [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        fn push_block<'a, T: Real>(out: &mut Vec<&'a mut Tensor<T>>, b: &'a mut ConvBlock<T>) {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        for level in &mut self.encoder {
            for b in &mut level.blocks {
                push_block(&mut out, b);
            }
        }
        for level in &mut self.decoder {
            out.push(&mut level.up.weight);
            out.push(&mut level.up.bias);
            for b in &mut level.blocks {
                push_block(&mut out, b);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Batch-norm layers in execution order.
    pub fn norms(&self) -> Vec<&BatchNormParams<T>> {
        self.encoder
            .iter()
            .flat_map(|l| l.blocks.iter())
            .chain(self.decoder.iter().flat_map(|l| l.blocks.iter()))
            .filter_map(|b| b.norm.as_ref())
            .collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormParams<T>> {
        self.encoder
            .iter_mut()
            .flat_map(|l| l.blocks.iter_mut())
            .chain(self.decoder.iter_mut().flat_map(|l| l.blocks.iter_mut()))
            .filter_map(|b| b.norm.as_mut())
            .collect()
    }

    /// Trainable parameter count from the instantiated tensors.
    pub fn enumerate_params(&self, mode: ParamCountMode) -> usize {
        let tensors: usize = self.named_parameters().iter().map(|(_, t)| t.len()).sum();
        match mode {
            ParamCountMode::Plain => tensors,
            ParamCountMode::PaperCompat => {
                // Count 2 per channel on each 3x3 conv that has no BN of its own.
                let extra: usize = self
                    .encoder
                    .iter()
                    .flat_map(|l| l.blocks.iter())
                    .chain(self.decoder.iter().flat_map(|l| l.blocks.iter()))
                    .filter(|b| b.norm.is_none())
                    .map(|b| 2 * b.conv.out_channels())
                    .sum();
                tensors + extra
            }
        }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet forward",
                expected: format!("{} input channels", self.config.in_channels),
                got: shape.to_string(),
            });
        }
        let m = self.config.required_multiple();
        if shape.h == 0 || shape.w == 0 || shape.h % m != 0 || shape.w % m != 0 {
            return Err(Error::IndivisibleDims {
                h: shape.h,
                w: shape.w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Records the network on `tape`. Parameters are registered as trainable
    /// leaves when `trainable` is set. In train mode the batch statistics of
    /// every BN layer are returned in execution order; nothing is mutated.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(ForwardPass, Vec<BatchStats<T>>)> {
        self.check_input(tape.shape(input))?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let reg = |tape: &mut Tape<T>, t: &Tensor<T>, params: &mut Vec<Var>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            params.push(v);
            v
        };
        let run_block = |tape: &mut Tape<T>,
                         x: Var,
                         b: &ConvBlock<T>,
                         params: &mut Vec<Var>,
                         stats: &mut Vec<BatchStats<T>>|
         -> Result<Var> {
            let w = reg(tape, &b.conv.weight, params);
            let bias = reg(tape, &b.conv.bias, params);
            let mut y = conv2d(tape, x, w, bias, Padding::Same, 1)?;
            if let Some(n) = &b.norm {
                let g = reg(tape, &n.gamma, params);
                let be = reg(tape, &n.beta, params);
                y = match mode {
                    Mode::Train => {
                        let (y, s) = batch_norm2d_train(tape, y, g, be, n.epsilon)?;
                        stats.push(s);
                        y
                    }
                    Mode::Eval => {
                        batch_norm2d_eval(tape, y, g, be, &n.running_mean, &n.running_var, n.epsilon)?
                    }
                };
            }
            relu(tape, y)
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, level) in self.encoder.iter().enumerate() {
            for b in &level.blocks {
                x = run_block(tape, x, b, &mut params, &mut stats)?;
            }
            if l + 1 < self.encoder.len() {
                skips.push(x);
                x = max_pool2d(tape, x)?.0;
            }
        }
        for level in &self.decoder {
            let w = reg(tape, &level.up.weight, &mut params);
            let b = reg(tape, &level.up.bias, &mut params);
            let up = conv_transpose2d(tape, x, w, b, 2)?;
            let skip = skips.pop().expect("one skip per decoder level");
            x = concat_channels(tape, skip, up)?;
            for blk in &level.blocks {
                x = run_block(tape, x, blk, &mut params, &mut stats)?;
            }
        }
        let w = reg(tape, &self.head.weight, &mut params);
        let b = reg(tape, &self.head.bias, &mut params);
        let logits = conv2d(tape, x, w, b, Padding::Same, 1)?;
        Ok((ForwardPass { logits, params }, stats))
    }

    /// Applies the running-statistics update for each BN layer.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        for (norm, s) in self.norms_mut().into_iter().zip(stats) {
            norm.update_running(s);
        }
    }

    /// Forward pass with trainable parameter leaves. Train mode updates the
    /// BN running statistics; eval mode leaves the model untouched.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        let (pass, stats) = self.forward_with(tape, input, mode, true)?;
        self.apply_batch_stats(&stats);
        Ok(pass)
    }

    /// Eval-mode logits for a batch of images, processed in chunks.
    pub fn predict_logits(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = images.shape().n;
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images.gather(&idx));
            let (pass, _) = self.forward_with(&mut tape, x, Mode::Eval, false)?;
            parts.push(tape.value(pass.logits).clone());
        }
        Tensor::stack(&parts)
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> UnetModel<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let block = |b: &ConvBlock<T>| ConvBlock {
            conv: conv(&b.conv),
            norm: b.norm.as_ref().map(|n| BatchNormParams {
                gamma: n.gamma.cast(),
                beta: n.beta.cast(),
                running_mean: n.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                running_var: n.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                momentum: n.momentum,
                epsilon: n.epsilon,
            }),
        };
        UnetModel {
            config: self.config,
            seed: self.seed,
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLevel {
                    blocks: [block(&l.blocks[0]), block(&l.blocks[1])],
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLevel {
                    level: l.level,
                    up: conv(&l.up),
                    blocks: [block(&l.blocks[0]), block(&l.blocks[1])],
                })
                .collect(),
            head: conv(&self.head),
        }
    }
}
