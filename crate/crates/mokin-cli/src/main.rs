//! `mokin` — the motion-retargetting pipeline as a command line: generate
//! synthetic datasets, train the kinematic model or the direct baselines,
//! retarget clips (JSON or BVH) onto new skeletons, evaluate predictions,
//! and export end-effector trajectories.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! bad config values, invalid flag combinations). Log verbosity comes
//! from `RUST_LOG` (default `info`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mokin::baselines::{copy_retarget, ARCH_MLP_DIRECT, ARCH_RNN_DIRECT};
use mokin::eval::{
    evaluation_cases, generate_dataset, movement_variance, mse, ClipScore, EvalReport,
    export_end_effector_csv,
};
use mokin::kinematics::{Composition, Skeleton};
use mokin::model::{Condition, ARCH_FK_RNN, DEFAULT_HIDDEN, DEFAULT_LAYERS};
use mokin::motion::json::{load_clip_file, load_skeleton_file, save_clip_file};
use mokin::motion::names::JointMap;
use mokin::motion::{bvh, preprocess, Dataset, MotionClip, Scenario};
use mokin::training::discriminator::{Discriminator, DEFAULT_WIDTH};
use mokin::training::losses::LossWeights;
use mokin::training::{
    train, Generator, TrainConfig, TrainMode, TrainState, CSV_HEADER, MODEL_FILE,
};

#[derive(Parser)]
#[command(name = "mokin", version, about = "Unsupervised neural motion retargetting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth retargettings.
    GenData(GenDataArgs),
    /// Train a retargetting model on a dataset directory.
    Train(Box<TrainArgs>),
    /// Retarget a clip onto a target skeleton.
    Retarget(RetargetArgs),
    /// Score predictions against ground truth and write a report.
    Eval(EvalArgs),
    /// Export end-effector height trajectories as CSV.
    ExportTraj(ExportTrajArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Characters to generate (at least 2; the last third is held out).
    #[arg(long, default_value_t = 6)]
    characters: usize,
    /// Scripted motions (at least 2; the last third is held out).
    #[arg(long, default_value_t = 40)]
    motions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; also receives metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file supplying any flag below; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objective: auto, cycle, or adv-cycle.
    #[arg(long)]
    mode: Option<String>,
    /// Generator architecture: fk-rnn, rnn, or mlp.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Clip windows per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Frames per sampled training window.
    #[arg(long)]
    window: Option<usize>,
    /// Recurrent state width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Recurrent layers per stack.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Adversarial weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Twist tolerance in degrees.
    #[arg(long)]
    alpha: Option<f64>,
    /// Twist-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Smoothing-loss weight.
    #[arg(long)]
    omega: Option<f64>,
    /// Freeze the discriminator when fake scores fall below this.
    #[arg(long)]
    balance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Snapshot into --out every N steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct RetargetArgs {
    /// Trained checkpoint: the `train` output directory or a model file.
    /// Not needed with `--baseline copy`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input clip, `.json` (native) or `.bvh`.
    #[arg(long)]
    input: PathBuf,
    /// Target skeleton JSON file.
    #[arg(long)]
    target_skeleton: PathBuf,
    /// Output clip JSON.
    #[arg(long)]
    out: PathBuf,
    /// copy (rotation copy, needs input rotations), or rnn / mlp to
    /// insist the checkpoint is that direct baseline.
    #[arg(long)]
    baseline: Option<String>,
    /// JSON joint map for BVH inputs whose joints need renaming onto the
    /// canonical set (result is position-only).
    #[arg(long)]
    joint_map: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted clip JSONs (with --truth).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground truth: a dataset directory or a flat clip directory.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Checkpoint to run over the dataset's evaluation cases
    /// (alternative to --pred/--truth; requires --data).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory (with --model).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the predictions produced by --model here.
    #[arg(long)]
    pred_out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Include the movement-variance histogram in the printed table.
    #[arg(long)]
    bins: bool,
}

#[derive(Args)]
struct ExportTrajArgs {
    /// Clip JSON file.
    #[arg(long)]
    clip: PathBuf,
    /// CSV path to write.
    #[arg(long)]
    out: PathBuf,
}

/// A usage error: surfaces with exit code 2.
fn usage(msg: impl Into<String>) -> anyhow::Error {
    mokin::Error::Config(msg.into()).into()
}

/// Flat `key = value` config file; keys mirror the long flag names.
struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    const KEYS: [&'static str; 16] = [
        "mode", "arch", "steps", "batch", "window", "hidden", "layers", "lr", "clip-norm",
        "beta", "alpha", "lambda", "omega", "balance", "seed", "checkpoint-every",
    ];

    fn load(path: Option<&Path>) -> anyhow::Result<ConfigFile> {
        let mut map = BTreeMap::new();
        let Some(path) = path else { return Ok(ConfigFile(map)) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            if !Self::KEYS.contains(&key.as_str()) {
                return Err(usage(format!("config line {}: unknown key {key:?}", lineno + 1)));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }
}

/// Flag beats config file beats default.
fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &ConfigFile,
    key: &str,
    default: T,
) -> anyhow::Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<mokin::Error>() {
                Some(mokin::Error::Config(_)) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(*args),
        Command::Retarget(args) => run_retarget(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportTraj(args) => run_export_traj(args),
    }
}

fn run_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let dataset = generate_dataset(args.characters, args.motions, args.seed)?;
    dataset.save(&args.out)?;
    println!(
        "wrote {} skeletons, {} clips ({} train / {} test) to {}",
        dataset.skeletons.len(),
        dataset.entries.len(),
        dataset.train_entries().count(),
        dataset.test_entries().count(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let defaults = TrainConfig::default();
    let w = LossWeights::default();
    let mode = TrainMode::parse(&resolve(args.mode, &file, "mode", defaults.mode.name().into())?)?;
    let arch = resolve(args.arch, &file, "arch", ARCH_FK_RNN.to_string())?;
    let hidden = resolve(args.hidden, &file, "hidden", DEFAULT_HIDDEN)?;
    let layers = resolve(args.layers, &file, "layers", DEFAULT_LAYERS)?;
    let checkpoint_every = resolve(args.checkpoint_every, &file, "checkpoint-every", 0)?;
    let config = TrainConfig {
        mode,
        steps: resolve(args.steps, &file, "steps", defaults.steps)?,
        batch_size: resolve(args.batch, &file, "batch", defaults.batch_size)?,
        window: resolve(args.window, &file, "window", defaults.window)?,
        lr: resolve(args.lr, &file, "lr", defaults.lr)?,
        clip_norm: resolve(args.clip_norm, &file, "clip-norm", defaults.clip_norm)?,
        weights: LossWeights {
            beta: resolve(args.beta, &file, "beta", w.beta)?,
            alpha_deg: resolve(args.alpha, &file, "alpha", w.alpha_deg)?,
            lambda: resolve(args.lambda, &file, "lambda", w.lambda)?,
            omega: resolve(args.omega, &file, "omega", w.omega)?,
        },
        literal_adversarial: false,
        balance_threshold: resolve(args.balance, &file, "balance", defaults.balance_threshold)?,
        seed: resolve(args.seed, &file, "seed", defaults.seed)?,
        checkpoint_every,
        checkpoint_dir: (checkpoint_every > 0).then(|| args.out.clone()),
    };

    let dataset = Dataset::load(&args.data)?;
    config.validate(&dataset)?;
    let skeleton = dataset
        .skeletons
        .values()
        .next()
        .ok_or_else(|| usage("dataset has no skeletons"))?;
    let n_joints = skeleton.n_joints();
    let joint_names = skeleton.joint_names().to_vec();

    let mut state = if args.resume {
        let (state, manifest) = TrainState::load(&args.out, config.lr)?;
        if manifest.n_joints != n_joints {
            return Err(usage(format!(
                "checkpoint has {} joints but the dataset has {n_joints}",
                manifest.n_joints
            )));
        }
        log::info!(
            "resuming {} from step {} in {}",
            manifest.architecture,
            state.step,
            args.out.display()
        );
        state
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Generator::create(&arch, n_joints, hidden, layers, Composition::default(), &mut rng)?;
        let disc = Discriminator::new(Discriminator::input_channels(n_joints), DEFAULT_WIDTH, &mut rng);
        TrainState::new(model, disc, config.lr)
    };

    log::info!(
        "training {} ({} mode) for {} steps on {} clips",
        state.model.architecture(),
        config.mode.name(),
        config.steps,
        dataset.train_entries().count()
    );
    let mut rows = Vec::with_capacity(config.steps as usize);
    train(&mut state, &dataset, &config, |m| {
        rows.push(m.csv_row());
        if m.step % 100 == 0 || m.step == 1 {
            log::info!(
                "step {}: generator {:.5}, cycle {:.5}",
                m.step,
                m.generator_total(&config.weights),
                m.cycle
            );
        }
    })?;

    fs::create_dir_all(&args.out)?;
    state.save(&args.out, &joint_names)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut out = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(out, "{CSV_HEADER}")?;
    for row in &rows {
        writeln!(out, "{row}")?;
    }
    println!(
        "trained to step {}; checkpoint in {}, metrics in {}",
        state.step,
        args.out.display(),
        metrics_path.display()
    );
    Ok(())
}

/// Loads a retarget input: the native clip document, or a BVH file run
/// through the preprocessing pipeline (optionally joint-mapped first).
fn load_input(input: &Path, joint_map: Option<&Path>) -> anyhow::Result<(Skeleton, MotionClip)> {
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext.to_ascii_lowercase().as_str() {
        "bvh" => {
            let text = fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let motion = bvh::parse_bvh(&text)?;
            let name = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "bvh-input".into());
            let (skeleton, positions, rotations) = match joint_map {
                Some(map_path) => {
                    let map = JointMap::parse_json(&fs::read_to_string(map_path)?)?;
                    let (skeleton, positions) = map.apply(&motion.skeleton, &motion.positions)?;
                    (skeleton, positions, None)
                }
                None => (motion.skeleton, motion.positions, motion.rotations),
            };
            let clip = preprocess(&skeleton, &name, motion.fps, &positions, rotations.as_deref())?;
            Ok((skeleton, clip))
        }
        "json" => {
            if joint_map.is_some() {
                return Err(usage("--joint-map applies only to BVH inputs"));
            }
            Ok(load_clip_file(input)?)
        }
        other => Err(usage(format!(
            "unsupported input extension {other:?} (expected .json or .bvh)"
        ))),
    }
}

/// Loads a generator from a `train` output directory or a model file.
fn load_generator(path: &Path) -> anyhow::Result<(Generator, mokin::model::ModelManifest)> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    Ok(Generator::load_checkpoint(&file)?)
}

fn run_retarget(args: RetargetArgs) -> anyhow::Result<()> {
    let (source, clip) = load_input(&args.input, args.joint_map.as_deref())?;
    let target = load_skeleton_file(&args.target_skeleton)?;
    let result = match args.baseline.as_deref() {
        Some("copy") => copy_retarget(&clip, &source, &target, Composition::default())?,
        baseline => {
            let want = match baseline {
                None => None,
                Some("rnn") => Some(ARCH_RNN_DIRECT),
                Some("mlp") => Some(ARCH_MLP_DIRECT),
                Some(other) => {
                    return Err(usage(format!(
                        "unknown baseline {other:?} (expected copy, rnn, or mlp)"
                    )))
                }
            };
            let model_path = args
                .model
                .as_ref()
                .ok_or_else(|| usage("--model is required unless --baseline copy"))?;
            let (gen, manifest) = load_generator(model_path)?;
            if let Some(want) = want {
                if manifest.architecture != want {
                    return Err(usage(format!(
                        "--baseline {} expects a {want} checkpoint, found {}",
                        baseline.unwrap_or_default(),
                        manifest.architecture
                    )));
                }
            }
            gen.retarget(&clip, &source, &Condition::new(&target))?
        }
    };
    save_clip_file(&args.out, &target, &result)?;
    println!(
        "retargetted {:?} ({} frames) onto {:?} -> {}",
        clip.name,
        result.n_frames(),
        target.name(),
        args.out.display()
    );
    Ok(())
}

/// All clip documents in a flat directory, sorted by file name.
fn clip_docs_in(dir: &Path) -> anyhow::Result<Vec<(PathBuf, Skeleton, MotionClip)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let (skeleton, clip) =
                load_clip_file(&p).with_context(|| format!("loading {}", p.display()))?;
            Ok((p, skeleton, clip))
        })
        .collect()
}

/// A ground-truth clip to score against, with the height that normalizes
/// its errors.
struct Truth {
    clip: MotionClip,
    scenario: Option<Scenario>,
    height: f64,
    file_stem: String,
}

fn score_prediction(pred: &MotionClip, truth: &Truth) -> anyhow::Result<ClipScore> {
    Ok(ClipScore {
        name: truth.clip.name.clone(),
        scenario: truth.scenario,
        mse: mse(pred, &truth.clip, truth.height)?,
        variance: movement_variance(&truth.clip, truth.height)?,
    })
}

/// File-mode evaluation: predictions and ground truth pair by file name
/// (dataset directories contribute their `clips/` files).
fn eval_directories(pred: &Path, truth: &Path) -> anyhow::Result<Vec<ClipScore>> {
    let truths: Vec<Truth> = if truth.join("manifest.json").is_file() {
        let dataset = Dataset::load(truth)?;
        dataset
            .test_entries()
            .filter(|e| e.clip.rotations.is_none())
            .map(|e| {
                let skeleton = dataset.skeleton_of(&e.clip)?;
                Ok(Truth {
                    file_stem: format!("{}__{}", e.clip.name, e.clip.skeleton_id),
                    clip: e.clip.clone(),
                    scenario: e.scenario,
                    height: skeleton.height(),
                })
            })
            .collect::<mokin::Result<_>>()?
    } else {
        clip_docs_in(truth)?
            .into_iter()
            .map(|(path, skeleton, clip)| Truth {
                file_stem: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                clip,
                scenario: None,
                height: skeleton.height(),
            })
            .collect()
    };
    if truths.is_empty() {
        return Err(usage(format!("no ground-truth clips under {}", truth.display())));
    }

    let preds: BTreeMap<String, MotionClip> = clip_docs_in(pred)?
        .into_iter()
        .map(|(path, _, clip)| {
            (path.file_stem().unwrap_or_default().to_string_lossy().into_owned(), clip)
        })
        .collect();

    truths
        .iter()
        .map(|truth| {
            let pred = preds.get(&truth.file_stem).ok_or_else(|| {
                anyhow::anyhow!(
                    "no prediction file named {:?} for ground truth {:?}",
                    format!("{}.json", truth.file_stem),
                    truth.clip.name
                )
            })?;
            score_prediction(pred, truth)
        })
        .collect()
}

/// Model-mode evaluation: run the checkpoint over the dataset's
/// evaluation cases, optionally dumping the predictions.
fn eval_model(
    model: &Path,
    data: &Path,
    pred_out: Option<&Path>,
) -> anyhow::Result<Vec<ClipScore>> {
    let dataset = Dataset::load(data)?;
    let (gen, manifest) = load_generator(model)?;
    log::info!("evaluating {} checkpoint from {}", manifest.architecture, model.display());
    if let Some(dir) = pred_out {
        fs::create_dir_all(dir)?;
    }
    let cases = evaluation_cases(&dataset)?;
    if cases.is_empty() {
        return Err(usage(format!("dataset {} has no evaluation cases", data.display())));
    }
    cases
        .iter()
        .map(|case| {
            let source = dataset.skeleton_of(case.input)?;
            let target = dataset.skeleton_of(case.truth)?;
            let mut pred = gen.retarget(case.input, source, &Condition::new(target))?;
            pred.name.clone_from(&case.truth.name);
            if let Some(dir) = pred_out {
                let file = format!("{}__{}.json", pred.name, pred.skeleton_id);
                save_clip_file(&dir.join(file), target, &pred)?;
            }
            score_prediction(
                &pred,
                &Truth {
                    clip: case.truth.clone(),
                    scenario: Some(case.scenario),
                    height: target.height(),
                    file_stem: String::new(),
                },
            )
        })
        .collect()
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let scores = match (&args.pred, &args.truth, &args.model, &args.data) {
        (Some(pred), Some(truth), None, None) => eval_directories(pred, truth)?,
        (None, None, Some(model), Some(data)) => {
            eval_model(model, data, args.pred_out.as_deref())?
        }
        _ => {
            return Err(usage(
                "pass either --pred and --truth, or --model and --data",
            ))
        }
    };
    let report = EvalReport::from_scores(scores);
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.render_table(args.bins));
    println!("report written to {}", args.report.display());
    Ok(())
}

fn run_export_traj(args: ExportTrajArgs) -> anyhow::Result<()> {
    let (skeleton, clip) = load_clip_file(&args.clip)?;
    let csv = export_end_effector_csv(&skeleton, &clip)?;
    fs::write(&args.out, csv)?;
    println!("wrote {} frames of end-effector heights to {}", clip.n_frames(), args.out.display());
    Ok(())
}
