use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use medvit::checkpoint::{Checkpoint, Stage};
use medvit::config::RunConfig;
use medvit::dataset::{load_dataset, Sample};
use medvit::heads::{init_model, TaskKind};
use medvit::metrics::{count_parameters, MetricReport};
use medvit::phantom::{write_phantom_dataset, PhantomSpec};
use medvit::pipeline::{
    evaluate_label_dirs, evaluate_samples, finetune, loss_curve_csv, model_config, predict, run_cv, run_encoder_stage,
    run_report, run_transformer_stage, Prediction,
};
use medvit::train::EpochRecord;
use medvit::volume::save_labels;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED_ENV: &str = "MEDVIT_SEED";

#[derive(Parser, Debug)]
#[command(name = "medvit", version, about = "Multi-view slice transformer: pre-training, fine-tuning and evaluation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset.
    GenPhantoms(GenArgs),
    /// Stage 1: triplet pre-training of the per-plane encoders.
    PretrainEncoder(StageArgs),
    /// Stage 2: masked encoding prediction with a frozen encoder.
    PretrainTransformer(StageArgs),
    /// Fine-tune on one fold rotation and report test metrics.
    Finetune(FinetuneArgs),
    /// Cross-validate fine-tuning over every fold rotation.
    RunCv(FinetuneArgs),
    /// Score predictions against ground truth, or a checkpoint on a dataset.
    Evaluate(EvalArgs),
    /// Print the parameter count of a model configuration.
    CountParams(CountArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML run configuration, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Overrides the configuration seed and MEDVIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Average-pooling factor applied on load.
    #[arg(long)]
    pool: Option<usize>,
    /// Maximum epochs for this stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate for this stage.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// TOML phantom specification; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stage-1 checkpoint (pretrain-transformer only).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output directory, or a `.medckpt` path whose directory takes the
    /// side outputs.
    #[arg(long)]
    out: PathBuf,
    /// Accept a checkpoint whose backbone fingerprint differs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = ["cls", "reg", "seg", "classification", "regression", "segmentation"])]
    task: Option<String>,
    /// Pre-trained checkpoint to start from.
    #[arg(long, conflicts_with = "from_scratch")]
    from: Option<PathBuf>,
    /// Random initialisation baseline.
    #[arg(long)]
    from_scratch: bool,
    /// Replace the transformer with the identity.
    #[arg(long)]
    no_transformer: bool,
    /// Fraction of training subjects kept.
    #[arg(long)]
    ratio: Option<f64>,
    /// Test fold of the rotation.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Strictly linear voxelwise head.
    #[arg(long)]
    head_linear: bool,
    /// Divide duplicated stem kernels by the channel count.
    #[arg(long)]
    scale_duplicated: bool,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_parser = ["cls", "reg", "seg", "classification", "regression", "segmentation"])]
    task: String,
    /// Directory of predicted label maps.
    #[arg(long, requires = "truth", conflicts_with = "from")]
    pred: Option<PathBuf>,
    /// Directory of ground-truth label maps with matching file names.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fine-tuned checkpoint to score on `--data`.
    #[arg(long, requires = "data")]
    from: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long, value_parser = ["cls", "reg", "seg", "classification", "regression", "segmentation"])]
    task: String,
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    no_transformer: bool,
    #[arg(long)]
    head_linear: bool,
    /// Input channel count.
    #[arg(long)]
    channels: Option<usize>,
    /// Also write params.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Configuration errors exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<medvit::Error>() {
        Some(medvit::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenPhantoms(a) => gen_phantoms(a),
        Command::PretrainEncoder(a) => pretrain(a, Stage::EncoderSsl),
        Command::PretrainTransformer(a) => pretrain(a, Stage::TransformerSsl),
        Command::Finetune(a) => finetune_cmd(a, false),
        Command::RunCv(a) => finetune_cmd(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::CountParams(a) => count_params(a),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| {
            medvit::Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        })?)),
        Err(_) => Ok(None),
    }
}

/// Defaults < file < MEDVIT_SEED < flags.
fn resolve_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(&common.config)?;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    if let Some(p) = common.pool {
        cfg.data.pool_factor = p;
    }
    Ok(cfg)
}

fn apply_stage_overrides(cfg: &mut medvit::train::TrainConfig, common: &CommonArgs) {
    if let Some(e) = common.epochs {
        cfg.max_epochs = e;
        cfg.patience = cfg.patience.min(e);
    }
    if let Some(lr) = common.lr {
        cfg.lr = lr;
    }
}

fn load_samples(cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let (_, samples) = load_dataset(&cfg.data.dir, cfg.data.pool_factor)
        .with_context(|| format!("loading dataset {}", cfg.data.dir.display()))?;
    Ok(samples)
}

/// Output directory and checkpoint path for `--out`.
fn out_paths(out: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let (dir, ck) = if out.extension().is_some_and(|e| e == "medckpt") {
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, out.to_path_buf())
    } else {
        (out.to_path_buf(), out.join("checkpoint.medckpt"))
    };
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok((dir, ck))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Resolved configuration with its fingerprint, plus run timing kept apart
/// from deterministic outputs.
fn write_provenance(dir: &Path, cfg: &RunConfig, command: &str, started: f64) -> anyhow::Result<()> {
    let toml = format!("# fingerprint = \"{}\"\n{}", cfg.fingerprint(), cfg.to_toml()?);
    write(&dir.join("resolved_config.toml"), &toml)?;
    let info = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "started_unix": started,
        "finished_unix": unix_now(),
    });
    write(&dir.join("run_info.json"), &serde_json::to_string_pretty(&info)?)
}

fn write_report(dir: &Path, report: &MetricReport) -> anyhow::Result<()> {
    write(&dir.join("report.json"), &report.to_json()?)?;
    write(&dir.join("report.csv"), &report.to_csv())
}

fn gen_phantoms(a: GenArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<PhantomSpec>(&text).map_err(|e| medvit::Error::Config(e.to_string()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = env_seed()? {
        spec.seed = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let manifest = write_phantom_dataset(&spec, a.count, &a.out)?;
    write(
        &a.out.join("phantom_spec.toml"),
        &toml::to_string(&spec).map_err(|e| medvit::Error::Serde(e.to_string()))?,
    )?;
    println!("wrote {} phantoms to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn pretrain(a: StageArgs, stage: Stage) -> anyhow::Result<()> {
    let started = unix_now();
    let mut cfg = resolve_config(&a.common)?;
    apply_stage_overrides(&mut cfg.pretrain, &a.common);
    cfg.validate()?;
    let (dir, ck_path) = out_paths(&a.out)?;
    let samples = load_samples(&cfg)?;
    let result = match stage {
        Stage::EncoderSsl => run_encoder_stage(&samples, &cfg)?,
        _ => {
            let Some(from) = &a.from else {
                bail!(medvit::Error::Config("pretrain-transformer needs --from <stage-1 checkpoint>".into()));
            };
            let encoder = Checkpoint::load(from)?;
            run_transformer_stage(&samples, &cfg, &encoder, a.force)?
        }
    };
    result.checkpoint.save(&ck_path)?;
    write(&dir.join("loss_curve.csv"), &loss_curve_csv(&result.history))?;
    write_provenance(&dir, &cfg, stage_name(stage), started)?;
    let last = result.history.last();
    println!(
        "{}: {} epochs, best epoch {} (probe loss {:.6}), final train loss {:.6}; checkpoint {}",
        stage_name(stage),
        result.history.len(),
        result.checkpoint.epoch,
        result.checkpoint.best_metric.unwrap_or(f64::NAN),
        last.map_or(f64::NAN, |r| r.train_loss),
        ck_path.display()
    );
    Ok(())
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::EncoderSsl => "pretrain-encoder",
        Stage::TransformerSsl => "pretrain-transformer",
        Stage::Finetuned => "finetune",
    }
}

fn finetune_config(a: &FinetuneArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = resolve_config(&a.common)?;
    apply_stage_overrides(&mut cfg.train, &a.common);
    if let Some(t) = &a.task {
        cfg.task.kind = TaskKind::parse(t)?;
    }
    if a.no_transformer {
        cfg.finetune.use_transformer = false;
    }
    if let Some(r) = a.ratio {
        cfg.finetune.ratio = r;
    }
    if let Some(f) = a.fold {
        cfg.finetune.fold = f;
    }
    if let Some(k) = a.folds {
        cfg.finetune.folds = k;
    }
    if a.head_linear {
        cfg.task.head_linear = true;
    }
    if a.scale_duplicated {
        cfg.finetune.adapt_scale = true;
    }
    cfg.validate()?;
    if a.from.is_none() && !a.from_scratch {
        bail!(medvit::Error::Config("give --from <checkpoint> or --from-scratch".into()));
    }
    Ok(cfg)
}

fn curve_rows(out: &mut String, fold: usize, history: &[EpochRecord]) {
    for r in history {
        out.push_str(&format!("{fold},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_metric));
    }
}

fn finetune_cmd(a: FinetuneArgs, cv: bool) -> anyhow::Result<()> {
    let started = unix_now();
    let cfg = finetune_config(&a)?;
    let (dir, ck_path) = out_paths(&a.out)?;
    let samples = load_samples(&cfg)?;
    let pretrained = a.from.as_deref().map(Checkpoint::load).transpose()?;
    let command = if cv { "run-cv" } else { "finetune" };
    if cv {
        let result = match run_cv(&samples, pretrained.as_ref(), &cfg, a.force) {
            Ok(r) => r,
            Err(medvit::Error::FoldFailed { fold, partial, source }) => {
                write_report(&dir, &partial)?;
                write_provenance(&dir, &cfg, command, started)?;
                bail!("fold {fold} failed ({source}); partial report written to {}", dir.display());
            }
            Err(e) => return Err(e.into()),
        };
        let mut curve = String::from("fold,epoch,lr,train_loss,val_metric\n");
        for (f, run) in result.runs.iter().enumerate() {
            curve_rows(&mut curve, f, &run.history);
        }
        write(&dir.join("loss_curve.csv"), &curve)?;
        write_report(&dir, &result.report)?;
        write_provenance(&dir, &cfg, command, started)?;
        print!("{}", result.report.to_csv());
        return Ok(());
    }
    let run = finetune(&samples, pretrained.as_ref(), &cfg, a.force)?;
    run.checkpoint.save(&ck_path)?;
    let mut curve = String::from("fold,epoch,lr,train_loss,val_metric\n");
    curve_rows(&mut curve, cfg.finetune.fold, &run.history);
    write(&dir.join("loss_curve.csv"), &curve)?;
    let report = run_report(&cfg, &run);
    write_report(&dir, &report)?;
    let split = json!({
        "fold": cfg.finetune.fold,
        "ratio": cfg.finetune.ratio,
        "train_pool": run.split.train,
        "train_subjects": run.train_subjects,
        "val_subjects": run.split.val,
        "test_subjects": run.split.test,
    });
    write(&dir.join("split.json"), &serde_json::to_string_pretty(&split)?)?;
    write_provenance(&dir, &cfg, command, started)?;
    println!(
        "trained on {} of {} pool subjects; best epoch {}",
        run.train_subjects.len(),
        run.split.train.len(),
        run.checkpoint.epoch
    );
    print!("{}", report.to_csv());
    Ok(())
}

fn evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let started = unix_now();
    let kind = TaskKind::parse(&a.task)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = match (&a.pred, &a.truth, &a.from) {
        (Some(pred), Some(truth), None) => {
            if kind != TaskKind::Segmentation {
                bail!(medvit::Error::Config("--pred/--truth evaluation is for segmentation".into()));
            }
            let cfg = RunConfig::default();
            let r = evaluate_label_dirs(pred, truth, &cfg.task.label_set, &cfg.fingerprint())?;
            write_provenance(&a.out, &cfg, "evaluate", started)?;
            r
        }
        (None, _, Some(from)) => {
            let ck = Checkpoint::load(from)?;
            ck.require_stage(&[Stage::Finetuned])?;
            let mut cfg: RunConfig = serde_json::from_value(ck.config.clone())
                .map_err(|e| medvit::Error::Checkpoint(format!("embedded configuration: {e}")))?;
            if cfg.task.kind != kind {
                bail!(medvit::Error::Config(format!(
                    "checkpoint was fine-tuned for {}, not {}",
                    cfg.task.kind.short(),
                    kind.short()
                )));
            }
            cfg.data.dir = a.data.clone().expect("required by clap");
            if let Some(p) = a.pool {
                cfg.data.pool_factor = p;
            }
            let samples = load_samples(&cfg)?;
            let model = model_config(&cfg, &samples)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let metrics = evaluate_samples(&ck.params, &model, &refs)?;
            if kind == TaskKind::Segmentation {
                let pred_dir = a.out.join("pred");
                fs::create_dir_all(&pred_dir)?;
                for s in &samples {
                    if let Prediction::Labels(l) = predict(&ck.params, &model, s)? {
                        save_labels(&pred_dir.join(format!("{}.raw", s.id)), &l)?;
                    }
                }
            }
            write_provenance(&a.out, &cfg, "evaluate", started)?;
            MetricReport {
                task: kind.short().into(),
                metrics,
                std: Default::default(),
                per_fold: Vec::new(),
                samples: samples.len(),
                fingerprint: cfg.fingerprint(),
            }
        }
        _ => bail!(medvit::Error::Config("give --pred and --truth, or --from and --data".into())),
    };
    write_report(&a.out, &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn count_params(a: CountArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(&a.config)?;
    cfg.task.kind = TaskKind::parse(&a.task)?;
    if a.no_transformer {
        cfg.finetune.use_transformer = false;
    }
    if a.head_linear {
        cfg.task.head_linear = true;
    }
    if let Some(c) = a.channels {
        cfg.encoder.in_channels = c;
    }
    cfg.validate()?;
    let model = cfg.model(cfg.task.kind);
    let params = init_model(&model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = count_parameters(&params);
    println!("{}", count.total);
    for (module, n) in &count.breakdown {
        println!("  {module:<24} {n}");
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write(&out.join("params.json"), &serde_json::to_string_pretty(&count)?)?;
    }
    Ok(())
}
