//! `pafuse`: synthetic data, training, evaluation, pose export and checkpoint
//! inspection for part-based whole-body lifting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pafuse_core::checkpoint::Checkpoint;
use pafuse_core::config::RunConfig;
use pafuse_core::data::{gap_histogram, load_dataset, synth_generate, DatasetFile, SynthConfig};
use pafuse_core::denoiser::count_parameters;
use pafuse_core::diffusion::NoiseSchedule;
use pafuse_core::skeleton::SkeletonLayout;
use pafuse_core::training::{
    evaluate, infer, log_to_jsonl, mean_pose_baseline, poses_to_jsonl, run_ablation, train,
    EvalParams,
};
use pafuse_core::Error;

#[derive(Parser)]
#[command(
    name = "pafuse",
    version,
    about = "Lift 2D whole-body keypoint sequences to 3D"
)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact 3D ground truth.
    Synth(SynthArgs),
    /// Print gap histograms of annotated frame ids.
    Stats(StatsArgs),
    /// Print or validate a skeleton layout.
    Layout(LayoutArgs),
    /// Train a model and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset with 3D ground truth.
    Eval(EvalArgs),
    /// Export predicted 3D poses as JSON lines.
    Infer(InferArgs),
    /// Print a checkpoint's configuration and parameter counts.
    Inspect(InspectArgs),
    /// Train and evaluate all four model variants at a matched parameter budget.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Motion scale in millimeters.
    #[arg(long, default_value_t = 80.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Also write the histograms as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LayoutArgs {
    /// Print the layout as JSON.
    #[arg(long)]
    dump: bool,
    /// Layout file to validate; the built-in whole-body layout otherwise.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args)]
struct RunFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layout the dataset must match.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log path; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the four reports.
    #[arg(long)]
    out: PathBuf,
    /// Sequences held out for evaluation when no test set is configured.
    #[arg(long, default_value_t = 1)]
    holdout: usize,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
}

/// A failed command: exit code plus a message naming the failing input.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAFUSE_LOG", "warn")).init();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Layout(a) => cmd_layout(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if a.sequences == 0 || a.frames == 0 {
        return Err(Failure::usage(
            "--sequences and --frames must be at least 1",
        ));
    }
    let data = synth_generate(&SynthConfig {
        sequences: a.sequences,
        frames: a.frames,
        amplitude: a.amplitude,
        seed: a.seed,
        ..SynthConfig::default()
    })?;
    data.save(&a.out)?;
    println!(
        "wrote {}: {} sequences × {} frames, {} joints",
        a.out.display(),
        data.sequences.len(),
        a.frames,
        data.layout.total_joints()
    );
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let mut per_sequence = BTreeMap::new();
    let mut pooled: BTreeMap<i64, usize> = BTreeMap::new();
    for seq in &data.sequences {
        let hist = gap_histogram(&seq.frame_ids);
        for (&gap, &count) in &hist {
            *pooled.entry(gap).or_default() += count;
        }
        per_sequence.insert(seq.id.clone(), hist);
    }
    let json = serde_json::json!({ "sequences": per_sequence, "pooled": pooled });
    let text = serde_json::to_string_pretty(&json).expect("histograms serialize");
    println!("{text}");
    println!();
    println!("{:<16}{:>8}{:>8}", "sequence", "gap", "count");
    for (id, hist) in per_sequence
        .iter()
        .chain([(&"(pooled)".to_string(), &pooled)])
    {
        if hist.is_empty() {
            println!("{id:<16}  no gaps (fewer than two frames)");
        }
        for (gap, count) in hist {
            println!("{id:<16}{gap:>8}{count:>8}");
        }
    }
    if let Some(out) = a.out {
        write_file(&out, text + "\n")?;
    }
    Ok(())
}

fn cmd_layout(a: LayoutArgs) -> CmdResult {
    let layout = match &a.layout {
        Some(path) => SkeletonLayout::load(path)?,
        None => SkeletonLayout::whole_body(),
    };
    if a.dump {
        println!("{}", layout.to_json());
    } else {
        println!(
            "{} joints, {} parts, hash {}",
            layout.total_joints(),
            layout.parts().len(),
            layout.hash()
        );
    }
    if let Some(out) = a.out {
        write_file(&out, layout.to_json() + "\n")?;
    }
    Ok(())
}

fn load_config(
    flags: &RunFlags,
    fallback: Option<&serde_json::Value>,
) -> Result<RunConfig, Failure> {
    let mut config = match (&flags.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(value)) => serde_json::from_value(value.clone()).map_err(|e| Failure {
            code: 2,
            message: format!("checkpoint configuration: {e}"),
        })?,
        (None, None) => RunConfig::default(),
    };
    if let Some(layout) = &flags.layout {
        config.data.layout = Some(layout.clone());
    }
    Ok(config)
}

/// Loads a dataset and checks it against the configured layout, if any.
fn load_data(
    path: Option<&PathBuf>,
    config: &RunConfig,
    role: &str,
) -> Result<DatasetFile, Failure> {
    let path = path.ok_or_else(|| {
        Failure::usage(format!(
            "no {role} dataset: pass --data or set data.{role} in the config"
        ))
    })?;
    let data = load_dataset(path)?;
    if let Some(layout_path) = &config.data.layout {
        let layout = SkeletonLayout::load(layout_path)?;
        if layout != data.layout {
            return Err(Failure {
                code: 2,
                message: format!(
                    "{}: layout {} does not match {} ({})",
                    path.display(),
                    data.layout.hash(),
                    layout_path.display(),
                    layout.hash()
                ),
            });
        }
    }
    Ok(data)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut config = load_config(&a.run, None)?;
    if let Some(seed) = a.run.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = a.batch {
        config.train.batch_size = batch;
    }
    if let Some(frames) = a.frames {
        config.train.frames = frames;
    }
    if let Some(data) = &a.data {
        config.data.train = Some(data.clone());
    }
    config.validate()?;
    info!("effective configuration: {}", config.to_value());
    let data = load_data(config.data.train.as_ref(), &config, "train")?;

    let out = a.out;
    let run = train(&data, &config, |ck| {
        let path = PathBuf::from(format!("{}.epoch{}", out.display(), ck.epoch));
        info!("intermediate checkpoint {}", path.display());
        ck.save(path)
    })?;
    run.checkpoint.save(&out)?;
    let log_path = a
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    write_file(&log_path, log_to_jsonl(&run.log))?;
    match run.log.last() {
        Some(last) => println!("epoch {}: loss {:.6}", last.epoch, last.loss),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

/// Checkpoint, data and sampling parameters resolved from flags, the config
/// file and the configuration stored in the checkpoint, in that order.
struct Sampling {
    checkpoint: Checkpoint,
    config: RunConfig,
    data: DatasetFile,
    schedule: NoiseSchedule,
    params: EvalParams,
}

fn prepare_sampling(s: &SamplingFlags) -> Result<Sampling, Failure> {
    let checkpoint = Checkpoint::load(&s.checkpoint)?;
    let mut config = load_config(&s.run, Some(&checkpoint.config))?;
    if let Some(seed) = s.run.seed {
        config.eval.seed = seed;
    }
    if let Some(h) = s.hypotheses {
        config.eval.hypotheses = h;
    }
    if let Some(k) = s.iterations {
        config.eval.iterations = k;
    }
    if let Some(data) = &s.data {
        config.data.test = Some(data.clone());
    }
    // the window length is fixed by the trained networks
    config.train.frames = checkpoint.model.frames();
    config.validate()?;
    info!("effective configuration: {}", config.to_value());
    let data = load_data(config.data.test.as_ref(), &config, "test")?;
    if data.layout != *checkpoint.model.layout() {
        return Err(Failure {
            code: 2,
            message: format!(
                "dataset layout {} does not match the checkpoint layout {}",
                data.layout.hash(),
                checkpoint.model.layout().hash()
            ),
        });
    }
    let schedule = NoiseSchedule::try_from(checkpoint.schedule)?;
    let params = EvalParams::from_config(&config);
    Ok(Sampling {
        checkpoint,
        config,
        data,
        schedule,
        params,
    })
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let s = prepare_sampling(&a.sampling)?;
    let mut report = evaluate(
        &s.checkpoint,
        &s.data,
        &s.schedule,
        s.checkpoint.data_scale,
        &s.params,
    )?;
    report.config = Some(s.config.to_value());
    print!("{}", report.table());
    if let Some(out) = &a.sampling.out {
        write_file(out, report.to_json())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let out = a
        .sampling
        .out
        .clone()
        .ok_or_else(|| Failure::usage("infer needs --out"))?;
    let s = prepare_sampling(&a.sampling)?;
    let poses = infer(
        &s.checkpoint,
        &s.data,
        &s.schedule,
        s.checkpoint.data_scale,
        &s.params,
    )?;
    write_file(&out, poses_to_jsonl(&poses))?;
    println!("wrote {} windows to {}", poses.len(), out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    println!("configuration:");
    println!(
        "{}",
        serde_json::to_string_pretty(&ck.config).expect("config serializes")
    );
    println!("variant: {}", model.variant());
    println!("layout hash: {}", model.layout().hash());
    println!("epochs trained: {}", ck.epoch);
    println!(
        "{:<12}{:>8}{:>8}{:>10}{:>8}{:>12}",
        "network", "joints", "frames", "channels", "depth", "parameters"
    );
    let mut total = 0;
    for net in model.networks() {
        let cfg = net.denoiser.config();
        let count = count_parameters(&net.denoiser);
        total += count;
        println!(
            "{:<12}{:>8}{:>8}{:>10}{:>8}{:>12}",
            net.role.as_str(),
            cfg.joints,
            cfg.frames,
            cfg.channels,
            cfg.depth,
            count
        );
    }
    println!("{:<46}{:>12}", "total", total);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut config = load_config(&a.run, None)?;
    if let Some(seed) = a.run.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = a.batch {
        config.train.batch_size = batch;
    }
    if let Some(frames) = a.frames {
        config.train.frames = frames;
    }
    if let Some(h) = a.hypotheses {
        config.eval.hypotheses = h;
    }
    if let Some(k) = a.iterations {
        config.eval.iterations = k;
    }
    if let Some(data) = &a.data {
        config.data.train = Some(data.clone());
    }
    config.validate()?;
    info!("effective configuration: {}", config.to_value());
    let data = load_data(config.data.train.as_ref(), &config, "train")?;
    let (train_set, test_set) = match &config.data.test {
        Some(_) => (data, load_data(config.data.test.as_ref(), &config, "test")?),
        None => {
            if a.holdout == 0 || a.holdout >= data.sequences.len() {
                return Err(Failure::usage(format!(
                    "--holdout must leave at least one sequence on each side of {}",
                    data.sequences.len()
                )));
            }
            data.split_holdout(a.holdout)
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", a.out.display()),
    })?;
    let baseline = mean_pose_baseline(&train_set, &test_set, &EvalParams::from_config(&config))?;
    println!(
        "mean-pose baseline: WB {:.3} PB {:.3} Body {:.3} Face {:.3} Hands {:.3}",
        baseline.wb, baseline.pb, baseline.body, baseline.face, baseline.hands
    );
    for entry in run_ablation(&train_set, &test_set, &config)? {
        println!(
            "\n{} (widths {:?}, {} parameters)",
            entry.variant, entry.channels, entry.parameters
        );
        print!("{}", entry.report.table());
        let path = a.out.join(format!("{}.json", entry.variant));
        write_file(&path, entry.report.to_json())?;
    }
    println!("\nreports written to {}", a.out.display());
    Ok(())
}
