//! Experiment runner: depth sweeps, temperature sweeps and the final
//! teacher/student comparison, with CSV tables and replayable manifests.
//!
//! Layout of an output directory:
//!
//! ```text
//! experiment.json          the spec, sufficient to replay the run
//! metrics.csv              one MetricsRow per trained or evaluated model
//! depth_sweep.csv | temperature_sweep.csv | final_comparison.csv | single.csv
//! data/{train,test}/       generated data (synthetic sources only)
//! runs/<label>/train.csv   per-evaluation rows
//! runs/<label>/run.json    plan, seeds and hashes of the run
//! runs/<label>/best.ckpt   best-test-loss checkpoint
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, Dataset, Split, SynthConfig};
use crate::distill::{
    compute_class_weight, generate_soft_targets, train, DistillMode, DistillPlan, RunManifest, SoftTargetSet,
    TrainOptions, TrainReport,
};
use crate::error::{Error, Result};
use crate::layers::ClassWeights;
use crate::metrics::evaluate;
use crate::tensor::{Precision, Real};
use crate::unet::{count_params_with, load_checkpoint, ParamCountMode, UnetConfig, UnetModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DepthSweep,
    TemperatureSweep,
    FinalComparison,
    SingleRun,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth-sweep" => Ok(ExperimentKind::DepthSweep),
            "temperature-sweep" => Ok(ExperimentKind::TemperatureSweep),
            "final-comparison" => Ok(ExperimentKind::FinalComparison),
            "single-run" => Ok(ExperimentKind::SingleRun),
            _ => Err(Error::invalid("ExperimentKind", format!("unknown kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Generated into `<output>/data`.
    Synthetic(SynthConfig),
    Manifests {
        train: PathBuf,
        test: PathBuf,
    },
}

/// Model settings for a single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleRun {
    pub depth: usize,
    pub batch_norm: bool,
    /// Use the computed foreground weight for the hard loss.
    pub class_weighting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub data: DataSource,
    pub output_dir: PathBuf,
    /// Starting channel depths of the depth sweep.
    pub depths: Vec<usize>,
    /// Transfer temperatures of the temperature sweep.
    pub temperatures: Vec<f64>,
    /// Distillation modes compared in the final comparison.
    pub student_modes: Vec<DistillMode>,
    pub teacher_depth: usize,
    /// Existing teacher. When absent, distillation kinds train one from
    /// scratch with the unweighted hard loss.
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_depth: usize,
    /// Shared training settings; mode, temperature and class weights are
    /// overridden per grid cell.
    pub plan: DistillPlan,
    /// Weight the soft term with the computed class weights too.
    pub soft_class_weighting: bool,
    pub model_seed: u64,
    pub precision: Precision,
    /// Split the teacher's soft targets are computed on (must be the
    /// student's training split, which is what gets batched).
    pub soft_split: Split,
    pub single: Option<SingleRun>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, data: DataSource, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            data,
            output_dir: output_dir.into(),
            depths: vec![4, 2],
            temperatures: vec![2.0, 5.0, 10.0, 15.0, 20.0],
            student_modes: vec![DistillMode::VanillaSoft, DistillMode::Mixed],
            teacher_depth: 4,
            teacher_checkpoint: None,
            student_depth: 2,
            plan: DistillPlan {
                temperature: 2.0,
                ..Default::default()
            },
            soft_class_weighting: false,
            model_seed: 1,
            precision: Precision::F32,
            soft_split: Split::Train,
            single: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidExperiment(msg.to_string()));
        match self.kind {
            ExperimentKind::DepthSweep if self.depths.is_empty() => return bad("depth grid is empty"),
            ExperimentKind::TemperatureSweep if self.temperatures.is_empty() => {
                return bad("temperature grid is empty")
            }
            ExperimentKind::FinalComparison if self.student_modes.is_empty() => {
                return bad("student mode list is empty")
            }
            ExperimentKind::SingleRun if self.single.is_none() => {
                return bad("single-run needs model settings")
            }
            _ => {}
        }
        if self.depths.contains(&0) || self.teacher_depth == 0 || self.student_depth == 0 {
            return bad("channel depths must be positive");
        }
        if self.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("temperatures must be positive");
        }
        if self.student_modes.contains(&DistillMode::HardOnly) {
            return bad("the undistilled baseline is always run; list only distillation modes");
        }
        if self.soft_split != Split::Train {
            return bad("soft targets must be computed on the training split the student is trained on");
        }
        if self.distills() {
            if let Some(p) = &self.teacher_checkpoint {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        if let DataSource::Manifests { train, test } = &self.data {
            for p in [train, test] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        if let DataSource::Synthetic(cfg) = &self.data {
            cfg.validate()?;
        }
        let mut plan = self.plan.clone();
        plan.mode = DistillMode::HardOnly;
        plan.switch_iteration = None;
        plan.validate()?;
        let cells: Vec<(DistillMode, f64)> = match self.kind {
            ExperimentKind::TemperatureSweep => self
                .temperatures
                .iter()
                .map(|&t| (DistillMode::Mixed, t))
                .collect(),
            ExperimentKind::FinalComparison => self
                .student_modes
                .iter()
                .map(|&m| (m, self.plan.temperature))
                .collect(),
            _ => Vec::new(),
        };
        for (mode, temperature) in cells {
            DistillPlan {
                mode,
                temperature,
                ..self.plan.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    fn distills(&self) -> bool {
        matches!(
            self.kind,
            ExperimentKind::TemperatureSweep | ExperimentKind::FinalComparison
        )
    }
}

/// One trained or evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub depth: usize,
    pub batch_norm: bool,
    pub mode: String,
    pub temperature: Option<f64>,
    /// Trainable parameters of the instantiated model.
    pub params: usize,
    /// The same network counted in paper-compatible mode.
    pub params_paper_compat: usize,
    pub iou: f64,
    pub test_loss: f64,
    /// Iteration of the minimum test loss; empty for evaluated-only models.
    pub best_iteration: Option<usize>,
    /// Train losses averaged over the window ending at the best iteration.
    pub train_hard: Option<f64>,
    pub train_hard_unweighted: Option<f64>,
    pub train_soft_scaled: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub output_dir: PathBuf,
}

impl ExperimentResult {
    pub fn row(&self, label: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    run_experiment_with(spec, false)
}

pub fn run_experiment_with(spec: &ExperimentSpec, verbose: bool) -> Result<ExperimentResult> {
    spec.validate()?;
    match spec.precision {
        Precision::F32 => Runner::<f32>::new(spec, verbose)?.run(),
        Precision::F64 => Runner::<f64>::new(spec, verbose)?.run(),
    }
}

struct Runner<'a, T: Real> {
    spec: &'a ExperimentSpec,
    out: PathBuf,
    train: Dataset<T>,
    test: Dataset<T>,
    weights: ClassWeights,
    verbose: bool,
}

impl<'a, T: Real> Runner<'a, T> {
    fn new(spec: &'a ExperimentSpec, verbose: bool) -> Result<Self> {
        let out = spec.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        spec.write(out.join("experiment.json"))?;
        let (train, test) = match &spec.data {
            DataSource::Synthetic(cfg) => {
                let ds = generate_synthetic(cfg, out.join("data"))?;
                (load_dataset(ds.train.path())?, load_dataset(ds.test.path())?)
            }
            DataSource::Manifests { train, test } => (load_dataset(train)?, load_dataset(test)?),
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset(
                "experiment needs non-empty train and test splits".into(),
            ));
        }
        let weights = compute_class_weight(&train.manifest)?;
        Ok(Self {
            spec,
            out,
            train,
            test,
            weights,
            verbose,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn run(self) -> Result<ExperimentResult> {
        let rows = match self.spec.kind {
            ExperimentKind::DepthSweep => self.depth_sweep()?,
            ExperimentKind::TemperatureSweep => self.temperature_sweep()?,
            ExperimentKind::FinalComparison => self.final_comparison()?,
            ExperimentKind::SingleRun => self.single_run()?,
        };
        write_csv(&self.out.join("metrics.csv"), &rows)?;
        Ok(ExperimentResult {
            rows,
            output_dir: self.out,
        })
    }

    fn model(&self, depth: usize, batch_norm: bool) -> Result<UnetModel<T>> {
        UnetModel::build(
            &UnetConfig::new(depth).with_batch_norm(batch_norm),
            self.spec.model_seed,
        )
    }

    fn train_run(
        &self,
        label: &str,
        model: &mut UnetModel<T>,
        plan: &DistillPlan,
        soft: Option<&SoftTargetSet<T>>,
    ) -> Result<TrainReport> {
        self.log(format!("training {label}"));
        let dir = self.out.join("runs").join(label);
        let options = TrainOptions {
            checkpoint: Some(dir.join("best.ckpt")),
            verbose: self.verbose,
        };
        let started = std::time::Instant::now();
        let report = train(model, plan, &self.train, &self.test, soft, &options)?;
        report.write_csv(dir.join("train.csv"))?;
        let manifest = RunManifest {
            plan: plan.clone(),
            model: *model.config(),
            model_seed: model.seed(),
            train_hash: self.train.manifest.content_hash.clone(),
            test_hash: self.test.manifest.content_hash.clone(),
            soft_targets_hash: soft.map(|s| s.content_hash()).transpose()?,
            teacher_hash: soft.map(|s| s.teacher_hash.clone()),
            best_iteration: report.best_iteration,
            best_test_loss: report.best_test_loss,
            best_test_iou: report.best_test_iou,
            checkpoint: report.checkpoint.clone(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            deterministic_env: crate::distill::deterministic_env(),
        };
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(report)
    }

    fn row(
        &self,
        label: &str,
        model: &UnetModel<T>,
        mode: DistillMode,
        temperature: Option<f64>,
        report: &TrainReport,
    ) -> MetricsRow {
        let best = report.best_row();
        MetricsRow {
            label: label.into(),
            depth: model.config().start_channels,
            batch_norm: model.config().batch_norm_contracting,
            mode: mode.name().into(),
            temperature,
            params: count_params_with(model.config(), ParamCountMode::Plain),
            params_paper_compat: count_params_with(model.config(), ParamCountMode::PaperCompat),
            iou: report.best_test_iou,
            test_loss: report.best_test_loss,
            best_iteration: Some(report.best_iteration),
            train_hard: best.train_hard,
            train_hard_unweighted: best.train_hard_unweighted,
            train_soft_scaled: best.train_soft_scaled,
        }
    }

    fn hard_plan(&self, weights: ClassWeights) -> DistillPlan {
        DistillPlan {
            mode: DistillMode::HardOnly,
            class_weights: weights,
            switch_iteration: None,
            ..self.spec.plan.clone()
        }
    }

    fn distill_plan(&self, mode: DistillMode, temperature: f64, teacher: &str) -> DistillPlan {
        DistillPlan {
            mode,
            temperature,
            class_weights: self.weights,
            soft_class_weights: if self.spec.soft_class_weighting {
                self.weights
            } else {
                ClassWeights::UNIT
            },
            teacher_hash: Some(teacher.to_string()),
            ..self.spec.plan.clone()
        }
    }

    fn depth_sweep(&self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for &c in &self.spec.depths {
            let label = format!("unet{c}");
            let mut model = self.model(c, false)?;
            let report = self.train_run(&label, &mut model, &self.hard_plan(ClassWeights::UNIT), None)?;
            rows.push(self.row(&label, &model, DistillMode::HardOnly, None, &report));
        }
        let table: Vec<DepthSweepRow> = rows
            .iter()
            .map(|r| DepthSweepRow {
                depth: r.depth,
                test_loss: r.test_loss,
                train_loss: r.train_hard,
                best_iteration: r.best_iteration,
                params: r.params,
                iou: r.iou,
            })
            .collect();
        write_csv(&self.out.join("depth_sweep.csv"), &table)?;
        Ok(rows)
    }

    /// The teacher: loaded, or trained from scratch (no BN, unit weights).
    fn teacher(&self) -> Result<(UnetModel<T>, MetricsRow)> {
        let label = format!("unet{}_teacher", self.spec.teacher_depth);
        match &self.spec.teacher_checkpoint {
            Some(path) => {
                let model: UnetModel<T> = load_checkpoint(path)?;
                model.check_input(self.train.images.shape())?;
                let e = evaluate(
                    &model,
                    &self.test.images,
                    &self.test.masks,
                    self.spec.plan.iou_kind,
                )?;
                let cfg = model.config();
                let row = MetricsRow {
                    label,
                    depth: cfg.start_channels,
                    batch_norm: cfg.batch_norm_contracting,
                    mode: "loaded".into(),
                    temperature: None,
                    params: count_params_with(cfg, ParamCountMode::Plain),
                    params_paper_compat: count_params_with(cfg, ParamCountMode::PaperCompat),
                    iou: e.iou,
                    test_loss: e.loss,
                    best_iteration: None,
                    train_hard: None,
                    train_hard_unweighted: None,
                    train_soft_scaled: None,
                };
                Ok((model, row))
            }
            None => {
                let mut model = self.model(self.spec.teacher_depth, false)?;
                let report = self.train_run(&label, &mut model, &self.hard_plan(ClassWeights::UNIT), None)?;
                let row = self.row(&label, &model, DistillMode::HardOnly, None, &report);
                Ok((model, row))
            }
        }
    }

    fn temperature_sweep(&self) -> Result<Vec<MetricsRow>> {
        let (teacher, teacher_row) = self.teacher()?;
        let hash = teacher.content_hash();
        let mut rows = vec![teacher_row];
        for &t in &self.spec.temperatures {
            let soft = generate_soft_targets(&teacher, &self.train, t)?;
            let label = format!("unet{}_mixed_t{t}", self.spec.student_depth);
            let plan = self.distill_plan(DistillMode::Mixed, t, &hash);
            let mut model = self.model(self.spec.student_depth, false)?;
            let report = self.train_run(&label, &mut model, &plan, Some(&soft))?;
            rows.push(self.row(&label, &model, DistillMode::Mixed, Some(t), &report));
        }
        let table: Vec<TemperatureSweepRow> = rows[1..]
            .iter()
            .map(|r| TemperatureSweepRow {
                temperature: r.temperature.unwrap_or_default(),
                test_loss: r.test_loss,
                train_hard: r.train_hard,
                train_soft_scaled: r.train_soft_scaled,
                train_hard_unweighted: r.train_hard_unweighted,
                best_iteration: r.best_iteration,
                iou: r.iou,
            })
            .collect();
        write_csv(&self.out.join("temperature_sweep.csv"), &table)?;
        Ok(rows)
    }

    fn final_comparison(&self) -> Result<Vec<MetricsRow>> {
        let (teacher, teacher_row) = self.teacher()?;
        let hash = teacher.content_hash();
        let t = self.spec.plan.temperature;
        let soft = generate_soft_targets(&teacher, &self.train, t)?;
        let c = self.spec.student_depth;
        let mut rows = vec![teacher_row];
        for &mode in &self.spec.student_modes {
            let label = format!("unet{c}_{}", mode.name());
            let plan = self.distill_plan(mode, t, &hash);
            let mut model = self.model(c, true)?;
            let report = self.train_run(&label, &mut model, &plan, Some(&soft))?;
            rows.push(self.row(&label, &model, mode, Some(t), &report));
        }
        let label = format!("unet{c}_no_distillation");
        let mut model = self.model(c, true)?;
        let report = self.train_run(&label, &mut model, &self.hard_plan(self.weights), None)?;
        rows.push(self.row(&label, &model, DistillMode::HardOnly, None, &report));

        let table: Vec<ComparisonRow> = rows
            .iter()
            .map(|r| ComparisonRow {
                network: r.label.clone(),
                trainable_params: r.params_paper_compat,
                iou: r.iou,
                cross_entropy_loss: r.test_loss,
                best_iteration: r.best_iteration,
                trainable_params_plain: r.params,
            })
            .collect();
        write_csv(&self.out.join("final_comparison.csv"), &table)?;
        Ok(rows)
    }

    fn single_run(&self) -> Result<Vec<MetricsRow>> {
        let s = self.spec.single.expect("validated");
        let weights = if s.class_weighting {
            self.weights
        } else {
            ClassWeights::UNIT
        };
        let label = format!("unet{}", s.depth);
        let mut model = self.model(s.depth, s.batch_norm)?;
        let report = self.train_run(&label, &mut model, &self.hard_plan(weights), None)?;
        let rows = vec![self.row(&label, &model, DistillMode::HardOnly, None, &report)];
        write_csv(&self.out.join("single.csv"), &rows)?;
        Ok(rows)
    }
}

#[derive(Serialize)]
struct DepthSweepRow {
    depth: usize,
    test_loss: f64,
    train_loss: Option<f64>,
    best_iteration: Option<usize>,
    params: usize,
    iou: f64,
}

#[derive(Serialize)]
struct TemperatureSweepRow {
    temperature: f64,
    test_loss: f64,
    train_hard: Option<f64>,
    train_soft_scaled: Option<f64>,
    train_hard_unweighted: Option<f64>,
    best_iteration: Option<usize>,
    iou: f64,
}

#[derive(Serialize)]
struct ComparisonRow {
    network: String,
    trainable_params: usize,
    iou: f64,
    cross_entropy_loss: f64,
    best_iteration: Option<usize>,
    trainable_params_plain: usize,
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
