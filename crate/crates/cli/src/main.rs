mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use manifest::{list_files, RunManifest};
use stereo_style::evalkit::{self, format_table, Evaluator};
use stereo_style::stereo_data::{self, generate_toy_sample, load_dataset_with_threshold, Image, Split, StereoSample};
use stereo_style::stylizer::stylize_pair_with_tap;
use stereo_style::trainer::{self, disparity_mae, load_checkpoint, save_checkpoint, StylizerTrainer, TrainConfig, Variant};
use stereo_style::Error;

/// Seed offset separating generated test samples from training samples.
const TEST_SEED_OFFSET: u64 = 1_000_000;

#[derive(Parser, Debug)]
#[command(name = "stereo-style", version, about = "View-consistent style transfer for stereo pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stereo dataset with exact disparities.
    MakeToyDataset(ToyArgs),
    /// Supervised pretraining of the disparity sub-network.
    PretrainDisparity(PretrainArgs),
    /// Train the stylizer for one style.
    Train(TrainArgs),
    /// Stylize one stereo pair.
    Stylize(StylizeArgs),
    /// Print the MVL/MSL/MCL row of a model on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several variants under one config.
    Ablate(AblateArgs),
    /// Write inconsistency maps, gate maps and stylized views.
    Export(ExportArgs),
    /// Rerun the command recorded in a manifest and compare its artifacts.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Number of training samples.
    #[arg(long)]
    n: usize,
    /// Number of test samples; when positive, `train/` and `test/` subsets are written.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `HxW`.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 8.0)]
    max_disparity: f32,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    disparity_ckpt: Option<PathBuf>,
    /// Resume from this stylizer checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Stop after this many optimizer steps (a checkpoint is still written).
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct StylizeArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// `train`, `test` or `all`.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    disparity_ckpt: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, default_value = "SingleImage-IV,CON-IV,W-G-CON-IV")]
    variants: String,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory of the rerun.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse_from(std::iter::once("stereo-style".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Exit code and error kind: 2 config, 3 missing file, 4 non-finite loss, 1 otherwise.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            match err {
                Error::Config(_) => return (2, "config"),
                Error::NonFinite { .. } => return (4, "non-finite"),
                e if e.is_missing_file() => return (3, "missing-file"),
                _ => {}
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return (3, "missing-file");
            }
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return (2, "config");
        }
    }
    (1, "runtime")
}

/// Invalid command-line values.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::MakeToyDataset(a) => make_toy_dataset(a, args),
        Command::PretrainDisparity(a) => pretrain(a, args),
        Command::Train(a) => train(a, args),
        Command::Stylize(a) => stylize(a, args),
        Command::Evaluate(a) => evaluate(a, args),
        Command::Ablate(a) => ablate(a, args),
        Command::Export(a) => export(a, args),
        Command::Replay(a) => replay(a),
    }
}

fn prepare_out(out: &OutArgs) -> Result<()> {
    if out.out.exists() {
        let non_empty = fs::read_dir(&out.out).with_context(|| format!("reading {}", out.out.display()))?.next().is_some();
        if non_empty && !out.force {
            bail!("output directory {} is not empty (use --force)", out.out.display());
        }
    }
    fs::create_dir_all(&out.out).with_context(|| format!("creating {}", out.out.display()))?;
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once('x').ok_or_else(|| config_error(format!("size `{s}` must look like HxW")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| config_error(format!("size `{s}` must look like HxW")));
    Ok((p(h)?, p(w)?))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "all" => Ok(Split::All),
        other => Err(config_error(format!("unknown split `{other}`"))),
    }
}

fn load_config(c: &ConfigArgs, m: &mut RunManifest) -> Result<TrainConfig> {
    let mut config = match &c.config {
        Some(p) => {
            require_file(p)?;
            m.config_path = Some(p.clone());
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(v) = &c.variant {
        config.variant = v.parse::<Variant>()?;
    }
    config.validate()?;
    m.seed = Some(config.seed);
    m.config_text = Some(config.to_text());
    Ok(config)
}

fn load_split(root: &Path, split: Split, config: &TrainConfig, m: &mut RunManifest) -> Result<Vec<StereoSample>> {
    require_file(root)?;
    m.dataset_root = Some(root.to_path_buf());
    Ok(load_dataset_with_threshold(root, split, config.consistency_threshold)?)
}

fn load_ckpt(path: &Path, m: &mut RunManifest) -> Result<trainer::Checkpoint> {
    require_file(path)?;
    m.checkpoint_paths.push(path.to_path_buf());
    Ok(load_checkpoint(path)?)
}

fn finish(mut m: RunManifest, files: &[PathBuf]) -> Result<()> {
    m.record(files)?;
    let path = m.write()?;
    info!("manifest written to {}", path.display());
    Ok(())
}

fn make_toy_dataset(a: ToyArgs, args: Vec<String>) -> Result<()> {
    if a.n == 0 {
        return Err(config_error("--n must be at least 1"));
    }
    let (h, w) = parse_size(&a.size)?;
    prepare_out(&a.out)?;
    let mut m = RunManifest::new("make-toy-dataset", args, &a.out.out);
    m.seed = Some(a.seed);
    let write_set = |root: &Path, first_seed: u64, count: usize| -> Result<()> {
        for i in 0..count {
            let s = generate_toy_sample(first_seed + i as u64, h, w, a.max_disparity)?;
            stereo_data::write_sample(root, &format!("{i:05}"), &s)?;
        }
        Ok(())
    };
    if a.test_n > 0 {
        write_set(&a.out.out.join("train"), a.seed, a.n)?;
        write_set(&a.out.out.join("test"), a.seed + TEST_SEED_OFFSET, a.test_n)?;
    } else {
        write_set(&a.out.out, a.seed, a.n)?;
    }
    info!("wrote {} + {} toy samples to {}", a.n, a.test_n, a.out.out.display());
    finish(m, &list_files(&a.out.out)?)
}

fn pretrain(a: PretrainArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("pretrain-disparity", args, &a.out.out);
    let config = load_config(&a.cfg, &mut m)?;
    let train = load_split(&a.dataset, Split::Train, &config, &mut m)?;
    prepare_out(&a.out)?;
    let mut log = Vec::new();
    let ckpt = trainer::pretrain_disparity_logged(&train, &config, &mut log)?;
    let ckpt_path = a.out.out.join("disparity.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    let log_path = a.out.out.join("disparity_log.tsv");
    let mut f = BufWriter::new(fs::File::create(&log_path)?);
    for r in &log {
        writeln!(f, "{}\t{:.6e}", r.step, r.loss)?;
    }
    f.flush()?;
    let mut files = vec![ckpt_path, log_path];
    if let Ok(test) = load_dataset_with_threshold(&a.dataset, Split::Test, config.consistency_threshold) {
        let mae = disparity_mae(&ckpt.disparity_params(), &test)?;
        println!("held-out masked MAE\t{mae:.4}");
        let p = a.out.out.join("disparity_mae.txt");
        fs::write(&p, format!("{mae:.6}\n"))?;
        files.push(p);
    }
    finish(m, &files)
}

fn train(a: TrainArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("train", args, &a.out.out);
    require_file(&a.style)?;
    let style = Image::read_png(&a.style)?;
    let resume = a.ckpt.as_deref().map(|p| load_ckpt(p, &mut m)).transpose()?;
    let config = match &resume {
        Some(c) if a.cfg.config.is_none() && a.cfg.seed.is_none() && a.cfg.variant.is_none() => {
            m.seed = Some(c.config.seed);
            m.config_text = Some(c.config.to_text());
            c.config.clone()
        }
        Some(_) => return Err(config_error("--ckpt resumes with the checkpoint's config; drop --config/--seed/--variant")),
        None => load_config(&a.cfg, &mut m)?,
    };
    let data = load_split(&a.dataset, Split::Train, &config, &mut m)?;
    let disparity = a.disparity_ckpt.as_deref().map(|p| load_ckpt(p, &mut m)).transpose()?;
    prepare_out(&a.out)?;
    let vgg = Arc::new(config.extractor()?);
    let mut t = match &resume {
        Some(c) => StylizerTrainer::resume(&data, &style, c, vgg, None)?,
        None => StylizerTrainer::new(&data, &style, disparity.as_ref(), &config, vgg, None)?,
    };
    t.set_style_path(a.style.to_string_lossy());
    let log_path = a.out.out.join("train_log.tsv");
    t.set_log_sink(Box::new(BufWriter::new(fs::File::create(&log_path)?)));
    let outcome = t.run(a.max_steps);
    let ckpt_path = a.out.out.join("stylizer.ckpt");
    if let Err(e @ Error::NonFinite { .. }) = &outcome {
        let diag = a.out.out.join("abort.txt");
        fs::write(&diag, format!("{e}\n"))?;
    }
    outcome?;
    save_checkpoint(&t.checkpoint(), &ckpt_path)?;
    drop(t);
    finish(m, &[ckpt_path, log_path])
}

fn stylize(a: StylizeArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("stylize", args, &a.out.out);
    let ckpt = load_ckpt(&a.ckpt, &mut m)?;
    require_file(&a.left)?;
    require_file(&a.right)?;
    let left = Image::read_png(&a.left)?;
    let right = Image::read_png(&a.right)?;
    prepare_out(&a.out)?;
    let r = stylize_pair_with_tap(&ckpt.weights, &left, &right, ckpt.config.tap_layer)?;
    let (lp, rp) = (a.out.out.join("left.png"), a.out.out.join("right.png"));
    r.styl_left.write_png(&lp)?;
    r.styl_right.write_png(&rp)?;
    finish(m, &[lp, rp])
}

fn evaluate(a: EvaluateArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("evaluate", args, &a.out.out);
    let ckpt = load_ckpt(&a.ckpt, &mut m)?;
    let data = load_split(&a.dataset, parse_split(&a.split)?, &ckpt.config, &mut m)?;
    require_file(&a.style)?;
    let style = Image::read_png(&a.style)?;
    prepare_out(&a.out)?;
    let report = Evaluator::new(Arc::new(ckpt.config.extractor()?), &style)?.evaluate(&ckpt, &data)?;
    println!("{}", report.to_row());
    let p = a.out.out.join("metrics.tsv");
    fs::write(&p, format_table(std::slice::from_ref(&report)))?;
    finish(m, &[p])
}

fn ablate(a: AblateArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("ablate", args, &a.out.out);
    let config = load_config(&a.cfg, &mut m)?;
    let variants = a.variants.split(',').map(|v| v.trim().parse::<Variant>()).collect::<std::result::Result<Vec<_>, _>>()?;
    if variants.is_empty() {
        return Err(config_error("--variants is empty"));
    }
    let train = load_split(&a.dataset, Split::Train, &config, &mut m)?;
    let test = load_dataset_with_threshold(&a.dataset, Split::Test, config.consistency_threshold)?;
    require_file(&a.style)?;
    let style = Image::read_png(&a.style)?;
    let disparity = load_ckpt(&a.disparity_ckpt, &mut m)?;
    prepare_out(&a.out)?;
    let reports = evalkit::run_ablation(&variants, &train, &test, &style, &disparity, &config)?;
    let table = format_table(&reports);
    print!("{table}");
    let p = a.out.out.join("ablation.tsv");
    fs::write(&p, table)?;
    finish(m, &[p])
}

fn export(a: ExportArgs, args: Vec<String>) -> Result<()> {
    let mut m = RunManifest::new("export", args, &a.out.out);
    let ckpt = load_ckpt(&a.ckpt, &mut m)?;
    let data = load_split(&a.dataset, parse_split(&a.split)?, &ckpt.config, &mut m)?;
    prepare_out(&a.out)?;
    let mut files = evalkit::export_inconsistency_maps(&ckpt, &data, &a.out.out.join("inconsistency"))?;
    if ckpt.weights.aggregation.uses_disparity() {
        files.extend(evalkit::export_gate_maps(&ckpt, &data, &a.out.out.join("gates"))?);
    }
    files.extend(evalkit::export_stylized(&ckpt, &data, &a.out.out.join("stylized"))?);
    finish(m, &files)
}

/// Replaces the value of `--out` in a recorded argument vector.
fn with_out(args: &[String], out: &Path) -> Vec<String> {
    let mut res = Vec::with_capacity(args.len());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if a.starts_with("--out=") {
            continue;
        } else {
            res.push(a.clone());
        }
    }
    res.push("--out".into());
    res.push(out.to_string_lossy().into_owned());
    res
}

fn replay(a: ReplayArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let original = RunManifest::read(&a.manifest)?;
    let args = with_out(&original.args, &a.out);
    let cli = Cli::try_parse_from(std::iter::once("stereo-style".to_string()).chain(args.iter().cloned()))
        .map_err(|e| config_error(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(config_error("cannot replay a replay"));
    }
    run(cli, args)?;
    let rerun = RunManifest::read(&a.out.join(manifest::MANIFEST_NAME))?;
    let mut mismatches = 0;
    for art in &original.artifacts {
        match rerun.artifacts.iter().find(|b| b.path == art.path) {
            Some(b) if b.sha256 == art.sha256 => println!("match\t{}", art.path),
            Some(_) => {
                mismatches += 1;
                println!("differ\t{}", art.path);
            }
            None => {
                mismatches += 1;
                println!("missing\t{}", art.path);
            }
        }
    }
    if mismatches > 0 || rerun.artifacts.len() != original.artifacts.len() {
        bail!("replay produced {mismatches} differing artifacts");
    }
    println!("replay reproduced {} artifacts", original.artifacts.len());
    Ok(())
}
