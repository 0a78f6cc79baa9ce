//! Training and distillation: class weights, teacher soft targets, the
//! hard/soft/mixed/sequential objectives and the training loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{raster, BatchIterator, Dataset, DatasetManifest, PixelStats, Split};
use crate::error::{Error, Result};
use crate::layers::{
    soft_cross_entropy, soft_cross_entropy_parts, softmax_temperature_tensor, weighted_cross_entropy,
    weighted_cross_entropy_parts, ClassWeights, Mode,
};
use crate::metrics::{evaluate, IouKind, EVAL_CHUNK};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::unet::{save_checkpoint, UnetModel};

/// `w_f = background / foreground` over the given pixel counts, `w_b = 1`.
pub fn class_weight_from_counts(foreground: u64, background: u64) -> Result<ClassWeights> {
    if foreground == 0 {
        return Err(Error::NoForeground);
    }
    ClassWeights::foreground(background as f64 / foreground as f64)
}

pub fn compute_class_weight(manifest: &DatasetManifest) -> Result<ClassWeights> {
    let PixelStats {
        foreground,
        background,
    } = manifest.stats;
    class_weight_from_counts(foreground, background)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    HardOnly,
    VanillaSoft,
    Mixed,
    SequentialSoftThenHard,
    SequentialHardThenSoft,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::HardOnly => "hard-only",
            DistillMode::VanillaSoft => "vanilla-soft",
            DistillMode::Mixed => "mixed",
            DistillMode::SequentialSoftThenHard => "sequential-soft-then-hard",
            DistillMode::SequentialHardThenSoft => "sequential-hard-then-soft",
        }
    }

    pub fn needs_soft_targets(self) -> bool {
        self != DistillMode::HardOnly
    }

    fn is_sequential(self) -> bool {
        matches!(
            self,
            DistillMode::SequentialSoftThenHard | DistillMode::SequentialHardThenSoft
        )
    }
}

impl std::str::FromStr for DistillMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            DistillMode::HardOnly,
            DistillMode::VanillaSoft,
            DistillMode::Mixed,
            DistillMode::SequentialSoftThenHard,
            DistillMode::SequentialHardThenSoft,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid("DistillMode", format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub mode: DistillMode,
    /// Transfer temperature of the soft term.
    pub temperature: f64,
    /// Weight on the hard term in mixed mode.
    pub mix_alpha: f64,
    /// Weights of the hard cross-entropy.
    pub class_weights: ClassWeights,
    /// Weights of the soft cross-entropy.
    pub soft_class_weights: ClassWeights,
    pub optimizer: OptimizerSpec,
    pub max_iterations: usize,
    pub eval_every: usize,
    /// First iteration of the second phase in sequential modes.
    pub switch_iteration: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// When set, soft targets must come from the teacher with this hash.
    pub teacher_hash: Option<String>,
    pub iou_kind: IouKind,
}

impl Default for DistillPlan {
    fn default() -> Self {
        Self {
            mode: DistillMode::HardOnly,
            temperature: 1.0,
            mix_alpha: 0.5,
            class_weights: ClassWeights::UNIT,
            soft_class_weights: ClassWeights::UNIT,
            optimizer: OptimizerSpec::default(),
            max_iterations: 1000,
            eval_every: 100,
            switch_iteration: None,
            batch_size: 4,
            seed: 0,
            teacher_hash: None,
            iou_kind: IouKind::Foreground,
        }
    }
}

impl DistillPlan {
    pub fn hard_only(class_weights: ClassWeights) -> Self {
        Self {
            class_weights,
            ..Default::default()
        }
    }

    pub fn mixed(temperature: f64, mix_alpha: f64, class_weights: ClassWeights) -> Self {
        Self {
            mode: DistillMode::Mixed,
            temperature,
            mix_alpha,
            class_weights,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("DistillPlan", msg));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return bad(format!("mix_alpha must be in [0, 1], got {}", self.mix_alpha));
        }
        if self.mode == DistillMode::Mixed && !(self.mix_alpha > 0.0 && self.mix_alpha < 1.0) {
            return bad(format!(
                "mixed mode needs 0 < mix_alpha < 1, got {}",
                self.mix_alpha
            ));
        }
        if self.mode.is_sequential() {
            match self.switch_iteration {
                Some(s) if s > 0 && s < self.max_iterations => {}
                other => {
                    return bad(format!(
                        "sequential modes need 0 < switch_iteration < max_iterations ({}), got {other:?}",
                        self.max_iterations
                    ))
                }
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        ClassWeights::new(self.class_weights.w_f, self.class_weights.w_b)?;
        ClassWeights::new(self.soft_class_weights.w_f, self.soft_class_weights.w_b)?;
        self.optimizer.validate()
    }

    /// Which terms are active at `iteration` (1-based).
    fn terms(&self, iteration: usize) -> (bool, bool) {
        let after_switch = self.switch_iteration.is_some_and(|s| iteration >= s);
        match self.mode {
            DistillMode::HardOnly => (true, false),
            DistillMode::VanillaSoft => (false, true),
            DistillMode::Mixed => (true, true),
            DistillMode::SequentialSoftThenHard => (after_switch, !after_switch),
            DistillMode::SequentialHardThenSoft => (!after_switch, after_switch),
        }
    }
}

/// Teacher probabilities at a transfer temperature, one `2 x h x w` map per
/// sample of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetSet<T: Real = f64> {
    pub maps: Tensor<T>,
    pub temperature: f64,
    pub teacher_hash: String,
    pub split: Split,
    pub dataset_hash: String,
}

pub const SOFT_FORMAT: &str = "unsq-soft-targets";
pub const SOFT_MANIFEST_FILE: &str = "soft_targets.json";

/// On-disk index of a soft-target set. The content hash is the SHA-256 of
/// the concatenated raster files in entry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SoftManifest {
    format: String,
    version: u32,
    temperature: f64,
    teacher_hash: String,
    split: Split,
    dataset_hash: String,
    entries: Vec<String>,
    content_hash: String,
}

impl<T: Real> SoftTargetSet<T> {
    pub fn len(&self) -> usize {
        self.maps.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rasters(&self) -> Result<Vec<Vec<u8>>> {
        (0..self.len())
            .map(|i| raster::encode(&self.maps.sample(i)))
            .collect()
    }

    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in self.rasters()? {
            h.update(&r);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Same metadata, only the given samples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            maps: self.maps.gather(indices),
            temperature: self.temperature,
            teacher_hash: self.teacher_hash.clone(),
            split: self.split,
            dataset_hash: self.dataset_hash.clone(),
        }
    }

    /// Writes `soft_XXXX.bin` rasters and `soft_targets.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut h = Sha256::new();
        let mut entries = Vec::with_capacity(self.len());
        for (i, bytes) in self.rasters()?.into_iter().enumerate() {
            let name = format!("soft_{i:04}.bin");
            std::fs::write(dir.join(&name), &bytes)?;
            h.update(&bytes);
            entries.push(name);
        }
        let manifest = SoftManifest {
            format: SOFT_FORMAT.into(),
            version: 1,
            temperature: self.temperature,
            teacher_hash: self.teacher_hash.clone(),
            split: self.split,
            dataset_hash: self.dataset_hash.clone(),
            entries,
            content_hash: hex::encode(h.finalize()),
        };
        let path = dir.join(SOFT_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }

    /// Loads from a directory or its `soft_targets.json`, checking the hash.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(SOFT_MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(file.clone()),
            _ => Error::Io(e),
        })?;
        let m: SoftManifest = serde_json::from_str(&text)?;
        if m.format != SOFT_FORMAT || m.version != 1 {
            return Err(Error::Format {
                kind: "soft targets",
                path: file,
                msg: format!("unsupported format {} v{}", m.format, m.version),
            });
        }
        let dir = file.parent().unwrap_or(Path::new("."));
        let mut h = Sha256::new();
        let mut maps = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let (t, bytes) = raster::read::<T>(&dir.join(e))?;
            h.update(&bytes);
            maps.push(t);
        }
        let found = hex::encode(h.finalize());
        if found != m.content_hash {
            return Err(Error::HashMismatch {
                expected: m.content_hash,
                found,
            });
        }
        if maps.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{} lists no soft targets",
                file.display()
            )));
        }
        Ok(Self {
            maps: Tensor::stack(&maps)?,
            temperature: m.temperature,
            teacher_hash: m.teacher_hash,
            split: m.split,
            dataset_hash: m.dataset_hash,
        })
    }
}

/// Teacher probabilities `softmax(logits / t)` for every image of `data`.
pub fn generate_soft_targets<T: Real>(
    teacher: &UnetModel<T>,
    data: &Dataset<T>,
    t: f64,
) -> Result<SoftTargetSet<T>> {
    let logits = teacher.predict_logits(&data.images, EVAL_CHUNK)?;
    Ok(SoftTargetSet {
        maps: softmax_temperature_tensor(&logits, t)?,
        temperature: t,
        teacher_hash: teacher.content_hash(),
        split: data.manifest.split,
        dataset_hash: data.manifest.content_hash.clone(),
    })
}

/// Values of the loss terms for one batch. Terms that could not be
/// evaluated (no soft targets) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Class-weighted hard cross-entropy.
    pub hard: f64,
    pub hard_unweighted: f64,
    /// Soft cross-entropy at the transfer temperature.
    pub soft: Option<f64>,
    /// `T^2` times the soft cross-entropy.
    pub soft_scaled: Option<f64>,
}

fn check_soft<T: Real>(plan: &DistillPlan, soft: Option<&SoftTargetSet<T>>) -> Result<()> {
    let Some(s) = soft else {
        return Ok(());
    };
    if let Some(expected) = &plan.teacher_hash {
        if *expected != s.teacher_hash {
            return Err(Error::StaleSoftTargets {
                expected: expected.clone(),
                found: s.teacher_hash.clone(),
            });
        }
    }
    if s.temperature != plan.temperature {
        return Err(Error::invalid(
            "training_loss",
            format!(
                "soft targets were generated at T={}, plan uses T={}",
                s.temperature, plan.temperature
            ),
        ));
    }
    Ok(())
}

/// Records the training objective for `iteration` (1-based) on the tape.
///
/// hard-only: `L_hard`; vanilla-soft: `T^2 L_soft`; mixed:
/// `alpha L_hard + (1 - alpha) T^2 L_soft`; sequential modes pick one of the
/// two by comparing `iteration` with the switch iteration. `L_hard` is at
/// temperature 1, `L_soft` at the plan's temperature.
pub fn training_loss<T: Real>(
    tape: &mut Tape<T>,
    plan: &DistillPlan,
    logits: Var,
    hard_targets: &Tensor<T>,
    soft: Option<&SoftTargetSet<T>>,
    iteration: usize,
) -> Result<(Var, LossBreakdown)> {
    let (use_hard, use_soft) = plan.terms(iteration);
    if plan.mode.needs_soft_targets() && soft.is_none() {
        return Err(Error::MissingSoftTargets(plan.mode.name().into()));
    }
    check_soft(plan, soft)?;
    let t = plan.temperature;
    let t2 = T::lit(t * t);
    let z = tape.value(logits).clone();
    let (hard, _) = weighted_cross_entropy_parts(&z, hard_targets, plan.class_weights)?;
    let (hard_unweighted, _) = weighted_cross_entropy_parts(&z, hard_targets, ClassWeights::UNIT)?;
    let mut breakdown = LossBreakdown {
        hard: hard.as_f64(),
        hard_unweighted: hard_unweighted.as_f64(),
        soft: None,
        soft_scaled: None,
    };
    if let Some(s) = soft {
        let (v, _) = soft_cross_entropy_parts(&z, &s.maps, t, plan.soft_class_weights)?;
        breakdown.soft = Some(v.as_f64());
        breakdown.soft_scaled = Some((t2 * v).as_f64());
    }

    let hard_term =
        |tape: &mut Tape<T>| weighted_cross_entropy(tape, logits, hard_targets, plan.class_weights);
    let soft_term = |tape: &mut Tape<T>| -> Result<Var> {
        let s = soft.ok_or_else(|| Error::MissingSoftTargets(plan.mode.name().into()))?;
        let l = soft_cross_entropy(tape, logits, &s.maps, t, plan.soft_class_weights)?;
        tape.scalar_mul(l, t2)
    };
    let loss = match (use_hard, use_soft) {
        (true, false) => hard_term(tape)?,
        (false, true) => soft_term(tape)?,
        _ => {
            let a = T::lit(plan.mix_alpha);
            let h = hard_term(tape)?;
            let s = soft_term(tape)?;
            let h = tape.scalar_mul(h, a)?;
            let s = tape.scalar_mul(s, T::one() - a)?;
            tape.add(h, s)?
        }
    };
    Ok((loss, breakdown))
}

/// One evaluation point. Train columns are means over the iterations since
/// the previous row and are empty for the initial row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: usize,
    pub train_hard: Option<f64>,
    pub train_hard_unweighted: Option<f64>,
    pub train_soft: Option<f64>,
    pub train_soft_scaled: Option<f64>,
    pub test_loss: f64,
    pub test_iou: f64,
}

pub const TRAIN_CSV_HEADER: &str =
    "iteration,train_hard,train_hard_unweighted,train_soft,train_soft_scaled,test_loss,test_iou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub best_iteration: usize,
    pub best_test_loss: f64,
    pub best_test_iou: f64,
    pub checkpoint: Option<PathBuf>,
    pub model_seed: u64,
    pub data_seed: u64,
}

impl TrainReport {
    pub fn best_row(&self) -> &TrainRow {
        self.rows
            .iter()
            .find(|r| r.iteration == self.best_iteration)
            .expect("best iteration has a row")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// `UNSQ_DETERMINISTIC`, if set.
pub fn deterministic_env() -> Option<String> {
    std::env::var("UNSQ_DETERMINISTIC").ok()
}

/// Run manifest written next to a training CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan: DistillPlan,
    pub model: crate::unet::UnetConfig,
    pub model_seed: u64,
    pub train_hash: String,
    pub test_hash: String,
    pub soft_targets_hash: Option<String>,
    pub teacher_hash: Option<String>,
    pub best_iteration: usize,
    pub best_test_loss: f64,
    pub best_test_iou: f64,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Value of `UNSQ_DETERMINISTIC` at run time. Training is single-threaded
    /// and fully seeded either way.
    pub deterministic_env: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the best-test-loss checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Print one line per evaluation to stderr.
    pub verbose: bool,
}

#[derive(Default)]
struct Window {
    n: usize,
    hard: f64,
    hard_unweighted: f64,
    soft: f64,
    soft_scaled: f64,
    has_soft: bool,
}

impl Window {
    fn add(&mut self, b: &LossBreakdown) {
        self.n += 1;
        self.hard += b.hard;
        self.hard_unweighted += b.hard_unweighted;
        if let (Some(s), Some(ss)) = (b.soft, b.soft_scaled) {
            self.has_soft = true;
            self.soft += s;
            self.soft_scaled += ss;
        }
    }

    fn take(&mut self) -> [Option<f64>; 4] {
        let n = self.n as f64;
        let mean = |v: f64, ok: bool| (self.n > 0 && ok).then(|| v / n);
        let out = [
            mean(self.hard, true),
            mean(self.hard_unweighted, true),
            mean(self.soft, self.has_soft),
            mean(self.soft_scaled, self.has_soft),
        ];
        *self = Window::default();
        out
    }
}

/// Trains `student` under `plan`. Evaluates on `test` at iteration 0, every
/// `eval_every` iterations and at the end, always with the unweighted hard
/// loss at temperature 1. On return `student` holds the parameters of the
/// best-test-loss evaluation, which is also what gets checkpointed.
pub fn train<T: Real>(
    student: &mut UnetModel<T>,
    plan: &DistillPlan,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    soft: Option<&SoftTargetSet<T>>,
    options: &TrainOptions,
) -> Result<TrainReport> {
    plan.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if test_set.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    if plan.mode.needs_soft_targets() && soft.is_none() {
        return Err(Error::MissingSoftTargets(plan.mode.name().into()));
    }
    check_soft(plan, soft)?;
    if let Some(s) = soft {
        let mut expect = train_set.images.shape();
        expect.c = 2;
        if s.maps.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "train",
                expected: format!("soft targets {expect}"),
                got: s.maps.shape().to_string(),
            });
        }
    }
    student.check_input(train_set.images.shape())?;
    student.check_input(test_set.images.shape())?;

    let mut optimizer = Optimizer::new(plan.optimizer)?;
    let mut batches = BatchIterator::new(train_set.len(), plan.batch_size, plan.seed, true)?;
    let eval = |m: &UnetModel<T>| evaluate(m, &test_set.images, &test_set.masks, plan.iou_kind);

    let first = eval(student)?;
    let mut rows = vec![TrainRow {
        iteration: 0,
        train_hard: None,
        train_hard_unweighted: None,
        train_soft: None,
        train_soft_scaled: None,
        test_loss: first.loss,
        test_iou: first.iou,
    }];
    let mut best = (0usize, first.loss, first.iou);
    let mut best_model = student.clone();
    let mut window = Window::default();

    for it in 1..=plan.max_iterations {
        let idx = batches.next().expect("batch iterator never ends");
        let (x, y) = train_set.batch(&idx);
        let soft_batch = soft.map(|s| s.subset(&idx));
        let nan = |loss: f64| Error::NanLoss {
            iteration: it,
            learning_rate: plan.optimizer.learning_rate,
            loss,
        };

        let mut tape = Tape::new();
        let input = tape.constant(x);
        let (pass, stats) = student
            .forward_with(&mut tape, input, Mode::Train, true)
            .map_err(|e| match e {
                Error::NonFinite { value, .. } => nan(value),
                e => e,
            })?;
        let (loss, breakdown) = training_loss(&mut tape, plan, pass.logits, &y, soft_batch.as_ref(), it)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(nan(value));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = pass
            .params
            .iter()
            .map(|&p| grads.take(p).expect("every parameter receives a gradient"))
            .collect();
        if let Some(bad) = grads.iter().flat_map(|g| g.data()).find(|v| !v.is_finite()) {
            return Err(nan(bad.as_f64()));
        }
        student.apply_batch_stats(&stats);
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        optimizer.step(&mut student.parameters_mut(), &grad_refs)?;
        window.add(&breakdown);

        if it % plan.eval_every == 0 || it == plan.max_iterations {
            let e = eval(student)?;
            let [h, hu, s, ss] = window.take();
            rows.push(TrainRow {
                iteration: it,
                train_hard: h,
                train_hard_unweighted: hu,
                train_soft: s,
                train_soft_scaled: ss,
                test_loss: e.loss,
                test_iou: e.iou,
            });
            if options.verbose {
                eprintln!(
                    "iter {it:>6}  hard {:.5}  soft {}  test loss {:.5}  IoU {:.4}",
                    h.unwrap_or(f64::NAN),
                    ss.map_or("-".to_string(), |v| format!("{v:.5}")),
                    e.loss,
                    e.iou
                );
            }
            if e.loss < best.1 {
                best = (it, e.loss, e.iou);
                best_model = student.clone();
            }
        }
    }

    *student = best_model;
    if let Some(path) = &options.checkpoint {
        save_checkpoint(student, path)?;
    }
    Ok(TrainReport {
        rows,
        best_iteration: best.0,
        best_test_loss: best.1,
        best_test_iou: best.2,
        checkpoint: options.checkpoint.clone(),
        model_seed: student.seed(),
        data_seed: plan.seed,
    })
}
