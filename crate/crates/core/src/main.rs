//! `unsq`: data generation, training, distillation and experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unsq::data::{generate_synthetic, load_dataset, Dataset, SynthConfig};
use unsq::distill::{
    compute_class_weight, generate_soft_targets, train, DistillMode, DistillPlan, RunManifest, SoftTargetSet,
    TrainOptions,
};
use unsq::experiment::{run_experiment_with, DataSource, ExperimentKind, ExperimentSpec, SingleRun};
use unsq::gradcheck::{battery, BatteryConfig};
use unsq::layers::ClassWeights;
use unsq::metrics::{evaluate, IouKind};
use unsq::optim::{OptimizerKind, OptimizerSpec};
use unsq::unet::{count_params_with, load_checkpoint, ParamCountMode, UnetConfig, UnetModel};
use unsq::{Error, Precision, Real};

#[derive(Parser)]
#[command(
    name = "unsq",
    version,
    about = "U-net compression by knowledge distillation",
    after_help = "Environment:\n  UNSQ_DETERMINISTIC=1  recorded in run.json; runs are always single-threaded and seeded\n  UNSQ_CHECK_FINITE=1   scan every op output for NaN/Inf in release builds\n\nExit codes: 0 success, 1 runtime failure, 2 usage error"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    GenData(GenData),
    /// Train a U-net from scratch with the hard loss.
    Train(Train),
    /// Compute teacher soft targets for a dataset split.
    MakeSoftTargets(MakeSoftTargets),
    /// Train a student against teacher soft targets.
    Distill(Distill),
    /// Evaluate a checkpoint (or a freshly initialized model) on a split.
    Eval(Eval),
    /// Print the trainable parameter count of a U-net.
    CountParams(CountParams),
    /// Run the finite-difference gradient battery.
    GradCheck(GradCheck),
    /// Run a depth sweep, temperature sweep, final comparison or single run.
    Experiment(Experiment),
}

#[derive(Args)]
struct GenData {
    /// Output directory; splits go to <out>/train and <out>/test.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    num_train: usize,
    #[arg(long, default_value_t = 64)]
    num_test: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Target foreground fraction, in (0, 0.5).
    #[arg(long, default_value_t = 1.0 / 18.8)]
    foreground_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training split manifest.
    #[arg(long)]
    train: PathBuf,
    /// Test split manifest.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// SGD momentum or Adam beta1.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Batch-order seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = IouArg::Foreground)]
    iou: IouArg,
    /// Output directory for best.ckpt, train.csv and run.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Batch normalization on the contracting path.
    #[arg(long)]
    bn: bool,
    /// Weight foreground pixels by background/foreground of the train split.
    #[arg(long)]
    class_weights: bool,
    #[command(flatten)]
    common: TrainArgs,
}

#[derive(Args)]
struct MakeSoftTargets {
    #[arg(long)]
    teacher: PathBuf,
    /// Manifest of the split to label.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Distill {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long)]
    bn: bool,
    #[arg(long)]
    class_weights: bool,
    /// Also weight the soft term by class.
    #[arg(long)]
    soft_class_weights: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Mixed)]
    mode: ModeArg,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    /// Weight of the hard term in mixed mode.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// First iteration of the second phase in sequential modes.
    #[arg(long)]
    switch_iteration: Option<usize>,
    /// Teacher checkpoint; soft targets are generated from it unless given.
    #[arg(long, required_unless_present = "soft_targets")]
    teacher: Option<PathBuf>,
    /// Precomputed soft targets (directory or soft_targets.json).
    #[arg(long)]
    soft_targets: Option<PathBuf>,
    #[command(flatten)]
    common: TrainArgs,
}

#[derive(Args)]
struct Eval {
    /// Split manifest to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with_all = ["depth", "bn"], required_unless_present = "depth")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized model of this depth.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    bn: bool,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long, value_enum, default_value_t = IouArg::Foreground)]
    iou: IouArg,
}

#[derive(Args)]
struct CountParams {
    #[arg(long)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = CountMode::Plain)]
    mode: CountMode,
    #[arg(long)]
    bn: bool,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Print every check, not just failures and the summary.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct Experiment {
    /// Experiment spec (JSON); other flags are ignored except --out.
    #[arg(long, conflicts_with = "kind", required_unless_present = "kind")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Output directory (overrides the spec's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated starting depths for the depth sweep.
    #[arg(long, value_delimiter = ',', default_value = "4,2")]
    depths: Vec<usize>,
    /// Comma-separated transfer temperatures for the temperature sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,15,20")]
    temperatures: Vec<f64>,
    /// Transfer temperature of the final comparison.
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    num_train: usize,
    #[arg(long, default_value_t = 64)]
    num_test: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Use existing split manifests instead of synthetic data.
    #[arg(long, requires = "test_manifest")]
    train_manifest: Option<PathBuf>,
    #[arg(long, requires = "train_manifest")]
    test_manifest: Option<PathBuf>,
    /// Single-run depth.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long)]
    bn: bool,
    #[arg(long)]
    class_weights: bool,
    /// Write the spec to --out/experiment.json without running it.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum IouArg {
    Foreground,
    ClassAveraged,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountMode {
    Plain,
    PaperCompat,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    HardOnly,
    VanillaSoft,
    Mixed,
    SequentialSoftThenHard,
    SequentialHardThenSoft,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    DepthSweep,
    TemperatureSweep,
    FinalComparison,
    SingleRun,
}

impl From<IouArg> for IouKind {
    fn from(a: IouArg) -> Self {
        match a {
            IouArg::Foreground => IouKind::Foreground,
            IouArg::ClassAveraged => IouKind::ClassAveraged,
        }
    }
}

impl From<ModeArg> for DistillMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::HardOnly => DistillMode::HardOnly,
            ModeArg::VanillaSoft => DistillMode::VanillaSoft,
            ModeArg::Mixed => DistillMode::Mixed,
            ModeArg::SequentialSoftThenHard => DistillMode::SequentialSoftThenHard,
            ModeArg::SequentialHardThenSoft => DistillMode::SequentialHardThenSoft,
        }
    }
}

impl From<KindArg> for ExperimentKind {
    fn from(a: KindArg) -> Self {
        match a {
            KindArg::DepthSweep => ExperimentKind::DepthSweep,
            KindArg::TemperatureSweep => ExperimentKind::TemperatureSweep,
            KindArg::FinalComparison => ExperimentKind::FinalComparison,
            KindArg::SingleRun => ExperimentKind::SingleRun,
        }
    }
}

impl From<PrecisionArg> for Precision {
    fn from(a: PrecisionArg) -> Self {
        match a {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

impl TrainArgs {
    fn optimizer(&self) -> OptimizerSpec {
        let mut spec = match self.optimizer {
            OptimizerArg::Adam => OptimizerSpec::adam(self.lr),
            OptimizerArg::SgdMomentum => OptimizerSpec::sgd(self.lr, self.momentum),
        };
        spec.momentum = self.momentum;
        spec.weight_decay = self.weight_decay;
        spec
    }

    fn plan(&self) -> DistillPlan {
        DistillPlan {
            optimizer: self.optimizer(),
            max_iterations: self.iterations,
            eval_every: self.eval_every,
            batch_size: self.batch_size,
            seed: self.seed,
            iou_kind: self.iou.into(),
            ..Default::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => match a.common.precision {
            PrecisionArg::F32 => train_cmd::<f32>(a),
            PrecisionArg::F64 => train_cmd::<f64>(a),
        },
        Command::MakeSoftTargets(a) => make_soft_targets(a),
        Command::Distill(a) => match a.common.precision {
            PrecisionArg::F32 => distill_cmd::<f32>(a),
            PrecisionArg::F64 => distill_cmd::<f64>(a),
        },
        Command::Eval(a) => eval_cmd(a),
        Command::CountParams(a) => {
            let mode = match a.mode {
                CountMode::Plain => ParamCountMode::Plain,
                CountMode::PaperCompat => ParamCountMode::PaperCompat,
            };
            let cfg = UnetConfig::new(a.depth).with_batch_norm(a.bn);
            cfg.validate()?;
            println!("{}", count_params_with(&cfg, mode));
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck(a) => grad_check(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn gen_data(a: GenData) -> Result<ExitCode, Error> {
    let cfg = SynthConfig {
        num_train: a.num_train,
        num_test: a.num_test,
        height: a.height,
        width: a.width,
        foreground_fraction: a.foreground_fraction,
        noise_std: a.noise_std,
        seed: a.seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, &a.out)?;
    for m in [&ds.train, &ds.test] {
        println!(
            "{}\t{} images\tforeground fraction {:.4}\t{}",
            m.path().display(),
            m.len(),
            m.stats.fraction(),
            m.content_hash
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_pair<T: Real>(a: &TrainArgs) -> Result<(Dataset<T>, Dataset<T>), Error> {
    Ok((load_dataset(&a.train)?, load_dataset(&a.test)?))
}

fn finish<T: Real>(
    model: &mut UnetModel<T>,
    plan: &DistillPlan,
    a: &TrainArgs,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    soft: Option<&SoftTargetSet<T>>,
) -> Result<ExitCode, Error> {
    let options = TrainOptions {
        checkpoint: Some(a.out.join("best.ckpt")),
        verbose: !a.quiet,
    };
    let started = std::time::Instant::now();
    let report = train(model, plan, train_set, test_set, soft, &options)?;
    report.write_csv(a.out.join("train.csv"))?;
    let manifest = RunManifest {
        plan: plan.clone(),
        model: *model.config(),
        model_seed: model.seed(),
        train_hash: train_set.manifest.content_hash.clone(),
        test_hash: test_set.manifest.content_hash.clone(),
        soft_targets_hash: soft.map(|s| s.content_hash()).transpose()?,
        teacher_hash: soft.map(|s| s.teacher_hash.clone()),
        best_iteration: report.best_iteration,
        best_test_loss: report.best_test_loss,
        best_test_iou: report.best_test_iou,
        checkpoint: report.checkpoint.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        deterministic_env: unsq::distill::deterministic_env(),
    };
    std::fs::write(
        a.out.join("run.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    println!(
        "best iteration {}\ttest loss {:.6}\ttest IoU {:.4}\t{}",
        report.best_iteration,
        report.best_test_loss,
        report.best_test_iou,
        a.out.join("best.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd<T: Real>(a: Train) -> Result<ExitCode, Error> {
    let (train_set, test_set) = load_pair::<T>(&a.common)?;
    let mut plan = a.common.plan();
    if a.class_weights {
        plan.class_weights = compute_class_weight(&train_set.manifest)?;
    }
    let cfg = UnetConfig::new(a.depth).with_batch_norm(a.bn);
    let mut model = UnetModel::<T>::build(&cfg, a.common.model_seed)?;
    finish(&mut model, &plan, &a.common, &train_set, &test_set, None)
}

fn make_soft_targets(a: MakeSoftTargets) -> Result<ExitCode, Error> {
    let teacher: UnetModel<f64> = load_checkpoint(&a.teacher)?;
    let data: Dataset<f64> = load_dataset(&a.data)?;
    let soft = generate_soft_targets(&teacher, &data, a.temperature)?;
    let path = soft.save(&a.out)?;
    println!("{}\t{}", path.display(), soft.content_hash()?);
    Ok(ExitCode::SUCCESS)
}

fn distill_cmd<T: Real>(a: Distill) -> Result<ExitCode, Error> {
    if a.soft_targets.is_some() && a.teacher.is_none() {
        eprintln!("note: no --teacher given, soft-target staleness is not checked");
    }
    let teacher: Option<UnetModel<T>> = a.teacher.as_ref().map(load_checkpoint).transpose()?;
    let (train_set, test_set) = load_pair::<T>(&a.common)?;
    let soft = match (&a.soft_targets, &teacher) {
        (Some(p), _) => SoftTargetSet::<T>::load(p)?,
        (None, Some(t)) => generate_soft_targets(t, &train_set, a.temperature)?,
        (None, None) => unreachable!("clap requires --teacher or --soft-targets"),
    };
    if soft.dataset_hash != train_set.manifest.content_hash {
        return Err(Error::InvalidArgument {
            op: "distill",
            msg: "soft targets were computed on a different training split".into(),
        });
    }
    let weights = compute_class_weight(&train_set.manifest)?;
    let plan = DistillPlan {
        mode: a.mode.into(),
        temperature: a.temperature,
        mix_alpha: a.alpha,
        switch_iteration: a.switch_iteration,
        class_weights: if a.class_weights {
            weights
        } else {
            ClassWeights::UNIT
        },
        soft_class_weights: if a.soft_class_weights {
            weights
        } else {
            ClassWeights::UNIT
        },
        teacher_hash: teacher.as_ref().map(|t| t.content_hash()),
        ..a.common.plan()
    };
    let cfg = UnetConfig::new(a.depth).with_batch_norm(a.bn);
    let mut model = UnetModel::<T>::build(&cfg, a.common.model_seed)?;
    let soft = (plan.mode != DistillMode::HardOnly).then_some(&soft);
    finish(&mut model, &plan, &a.common, &train_set, &test_set, soft)
}

fn eval_cmd(a: Eval) -> Result<ExitCode, Error> {
    let data: Dataset<f64> = load_dataset(&a.data)?;
    let model: UnetModel<f64> = match (&a.checkpoint, a.depth) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Some(c)) => UnetModel::build(&UnetConfig::new(c).with_batch_norm(a.bn), a.model_seed)?,
        (None, None) => unreachable!("clap requires --checkpoint or --depth"),
    };
    let e = evaluate(&model, &data.images, &data.masks, a.iou.into())?;
    println!("test loss {:.6}\tIoU {:.4}", e.loss, e.iou);
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: GradCheck) -> Result<ExitCode, Error> {
    let cfg = BatteryConfig {
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        seeds: a.seeds,
        ..Default::default()
    };
    let results = battery(&cfg)?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    let mut skipped = 0;
    for r in &results {
        worst = worst.max(r.report.max_relative_error);
        skipped += r.report.skipped;
        if !r.report.pass {
            failed += 1;
        }
        if a.verbose || !r.report.pass {
            println!(
                "{} {:<40} seed {}  max rel err {:.3e}  skipped {}/{}",
                if r.report.pass { "ok  " } else { "FAIL" },
                r.name,
                r.seed,
                r.report.max_relative_error,
                r.report.skipped,
                r.report.coordinates
            );
        }
    }
    println!(
        "{} checks, {failed} failed, max relative error {worst:.3e} (tolerance {:.0e}), \
         {skipped} coordinates skipped at kinks",
        results.len(),
        a.tolerance
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn experiment(a: Experiment) -> Result<ExitCode, Error> {
    let mut spec = match (&a.spec, a.kind) {
        (Some(p), _) => ExperimentSpec::read(p)?,
        (None, Some(kind)) => {
            let data = match (&a.train_manifest, &a.test_manifest) {
                (Some(train), Some(test)) => DataSource::Manifests {
                    train: train.clone(),
                    test: test.clone(),
                },
                _ => DataSource::Synthetic(SynthConfig {
                    num_train: a.num_train,
                    num_test: a.num_test,
                    seed: a.data_seed,
                    ..Default::default()
                }),
            };
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("experiment_out"));
            let mut spec = ExperimentSpec::new(kind.into(), data, out);
            spec.depths = a.depths.clone();
            spec.temperatures = a.temperatures.clone();
            spec.teacher_checkpoint = a.teacher.clone();
            spec.plan.temperature = a.temperature;
            spec.plan.mix_alpha = a.alpha;
            spec.plan.max_iterations = a.iterations;
            spec.plan.eval_every = a.eval_every;
            spec.plan.optimizer = OptimizerSpec {
                kind: OptimizerKind::Adam,
                ..OptimizerSpec::adam(a.lr)
            };
            if spec.kind == ExperimentKind::SingleRun {
                spec.single = Some(SingleRun {
                    depth: a.depth,
                    batch_norm: a.bn,
                    class_weighting: a.class_weights,
                });
            }
            spec
        }
        (None, None) => unreachable!("clap requires --spec or --kind"),
    };
    if let Some(out) = &a.out {
        spec.output_dir = out.clone();
    }
    if a.dry_run {
        spec.validate()?;
        std::fs::create_dir_all(&spec.output_dir)?;
        let path = spec.output_dir.join("experiment.json");
        spec.write(&path)?;
        println!("{}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let result = run_experiment_with(&spec, !a.quiet)?;
    println!("label\tparams\tIoU\ttest loss\tbest iteration");
    for r in &result.rows {
        println!(
            "{}\t{}\t{:.4}\t{:.6}\t{}",
            r.label,
            r.params,
            r.iou,
            r.test_loss,
            r.best_iteration.map_or("-".into(), |i| i.to_string())
        );
    }
    println!("{}", result.output_dir.join("metrics.csv").display());
    Ok(ExitCode::SUCCESS)
}
