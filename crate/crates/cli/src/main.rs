use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use marsdust::degrade::{
    estimate_reflexivity, generate_pairs, read_manifest, resolve_manifest_path, select_dusty_tiles,
    write_manifest, DustyPatchSet, ManifestRecord, PairOptions, Reflexivity,
};
use marsdust::metrics::{corpus_report, ImageSet, DUST_INDEX_LABEL};
use marsdust::nn::{train_manifest, NetConfig, TrainConfig};
use marsdust::raster::{list_pngs, load_image, save_image};
use marsdust::restore::{remove_dust, RestoreMethod};
use marsdust::terrain::write_demo_corpus;

/// Synthesize, remove and evaluate dust storms in orbital imagery.
#[derive(Parser, Debug)]
#[command(name = "marsdust", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-image stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Log more (repeat for debug output). MARSDUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate dust reflexivity from heavy-dust patches.
    EstimatePhi(EstimatePhiArgs),
    /// Build dusty/clean training pairs and their manifest.
    Synth(SynthArgs),
    /// Train the restoration network on a manifest.
    Train(TrainArgs),
    /// Remove dust from every PNG in a directory.
    Remove(RemoveArgs),
    /// Score image sets and write a JSON report.
    Eval(EvalArgs),
    /// Write a small procedural terrain corpus with dust patches.
    DemoCorpus(DemoArgs),
}

#[derive(Args, Debug)]
struct EstimatePhiArgs {
    /// Directory of dust patches, or a manifest whose dusty images are
    /// searched for their dustiest tiles.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tiles taken from each manifest image.
    #[arg(long, default_value_t = 4)]
    auto_top_k: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    phi: PathBuf,
    #[arg(long, default_value_t = 7)]
    maps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Bit depth of the dusty PNGs.
    #[arg(long, default_value_t = 16)]
    bit_depth: u8,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Base channel width of the network.
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Drop the input-to-output skip connection.
    #[arg(long)]
    no_residual: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Method {
    AnalyticKnown,
    AnalyticEst,
    Learned,
}

#[derive(Args, Debug)]
struct RemoveArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Bit depth of the restored PNGs.
    #[arg(long, default_value_t = 8)]
    bit_depth: u8,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma-separated label=dir pairs.
    #[arg(long)]
    sets: String,
    /// Manifest mapping dusty and restored file names to clean references.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    heldout: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
}

/// Failure caused by bad arguments; everything else that is not an I/O
/// problem also maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<marsdust::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if cause.is::<Usage>() {
            return 1;
        }
    }
    1
}

fn check_bit_depth(bits: u8) -> Result<()> {
    if bits != 8 && bits != 16 {
        return Err(usage(format!("--bit-depth must be 8 or 16, got {bits}")));
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn estimate_phi(args: &EstimatePhiArgs) -> Result<()> {
    if args.auto_top_k == 0 {
        return Err(usage("--auto-top-k must be >= 1"));
    }
    let (patches, source) = if args.patches.is_dir() {
        let paths = list_pngs(&args.patches)?;
        let images = paths.iter().map(load_image).collect::<marsdust::Result<Vec<_>>>()?;
        (images, "directory")
    } else {
        let records = read_manifest(&args.patches)?;
        let dir = args.patches.parent().unwrap_or(Path::new("."));
        let mut tiles = Vec::new();
        for r in &records {
            let img = load_image(resolve_manifest_path(dir, &r.dusty))?;
            tiles.extend(select_dusty_tiles(&img, 32, args.auto_top_k)?);
        }
        (tiles, "manifest")
    };
    if patches.is_empty() {
        return Err(usage(format!("no patches found in {}", args.patches.display())));
    }
    let count = patches.len();
    let est = estimate_reflexivity(&DustyPatchSet { patches })?;
    log::info!("phi {:?} from {count} patches", est.phi.values());
    write_json(
        &args.out,
        &json!({
            "phi": est.phi.values(),
            "patches": count,
            "source": source,
            "skipped_pixels": est.skipped_pixels,
            "skipped_patches": est.skipped_patches,
        }),
    )
}

fn read_phi(path: &Path) -> Result<Reflexivity> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let phi: Vec<f64> = value
        .get("phi")
        .and_then(|v| v.as_array())
        .and_then(|a| a.iter().map(|x| x.as_f64()).collect())
        .ok_or_else(|| usage(format!("{} has no numeric \"phi\" array", path.display())))?;
    Ok(Reflexivity::new(phi)?)
}

fn synth(args: &SynthArgs, seed: u64, jobs: usize) -> Result<()> {
    if args.maps == 0 {
        return Err(usage("--maps must be >= 1"));
    }
    check_bit_depth(args.bit_depth)?;
    let phi = read_phi(&args.phi)?;
    let opts = PairOptions {
        maps_per_image: args.maps,
        seed,
        jobs,
        bit_depth: args.bit_depth,
        ..Default::default()
    };
    let records = generate_pairs(&args.clean, &phi, &opts, &args.out)?;
    write_manifest(&args.manifest, &records)?;
    log::info!("{} pairs written to {}", records.len(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs, seed: u64) -> Result<()> {
    let cfg = TrainConfig {
        patch: args.patch,
        batch: args.batch,
        lr: args.lr,
        epochs: args.epochs,
        seed,
        ..Default::default()
    };
    cfg.validate()?;
    let net = NetConfig {
        use_global_residual: !args.no_residual,
        ..NetConfig::with_width(args.width)
    };
    net.validate()?;
    let records = read_manifest(&args.manifest)?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let report = train_manifest(&cfg, &net, &records, dir, &args.out)?;
    println!(
        "trained {} steps on {} pairs: L1 {:.6} -> {:.6}",
        report.steps,
        report.pairs,
        report.first_loss(),
        report.final_loss()
    );
    Ok(())
}

fn remove(args: &RemoveArgs) -> Result<()> {
    check_bit_depth(args.bit_depth)?;
    match args.method {
        Method::Learned if args.weights.is_none() => {
            return Err(usage("--method learned requires --weights"))
        }
        Method::AnalyticKnown if args.manifest.is_none() => {
            return Err(usage("--method analytic-known requires --manifest"))
        }
        _ => {}
    }
    let inputs = list_pngs(&args.input)?;
    if inputs.is_empty() {
        return Err(usage(format!("no PNG images in {}", args.input.display())));
    }
    let by_name: HashMap<String, ManifestRecord> = match (&args.manifest, args.method) {
        (Some(m), Method::AnalyticKnown) => read_manifest(m)?
            .into_iter()
            .filter_map(|r| r.dusty_file_name().map(str::to_owned).map(|n| (n, r)))
            .collect(),
        _ => HashMap::new(),
    };
    let shared = match (&args.weights, args.method) {
        (Some(w), Method::Learned) => Some(RestoreMethod::learned(w)?),
        _ => None,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let results: Vec<Result<()>> = inputs
        .par_iter()
        .map(|path| -> Result<()> {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| anyhow!("unusable file name {}", path.display()))?;
            let method = match args.method {
                Method::AnalyticKnown => RestoreMethod::AnalyticKnown(
                    by_name
                        .get(name)
                        .cloned()
                        .ok_or_else(|| anyhow!("no manifest record for {name}"))?,
                ),
                Method::AnalyticEst => RestoreMethod::AnalyticEstimated,
                Method::Learned => shared.clone().expect("weights loaded above"),
            };
            let img = load_image(path)?;
            let out = remove_dust(&img, &method)?;
            save_image(&out, args.out.join(name), args.bit_depth)?;
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    log::info!("{} images restored into {}", inputs.len(), args.out.display());
    Ok(())
}

fn parse_sets(spec: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut sets = Vec::new();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (label, dir) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("set '{part}' is not label=dir")))?;
        if label.is_empty() || dir.is_empty() {
            return Err(usage(format!("set '{part}' is not label=dir")));
        }
        if sets.iter().any(|(l, _)| l == label) {
            return Err(usage(format!("set label '{label}' repeated")));
        }
        sets.push((label.to_string(), PathBuf::from(dir)));
    }
    if sets.is_empty() {
        return Err(usage("--sets names no sets"));
    }
    Ok(sets)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let specs = parse_sets(&args.sets)?;
    let references: HashMap<String, PathBuf> = match &args.pairs {
        Some(m) => {
            let dir = m.parent().unwrap_or(Path::new("."));
            read_manifest(m)?
                .into_iter()
                .filter_map(|r| {
                    let name = r.dusty_file_name()?.to_owned();
                    Some((name, resolve_manifest_path(dir, &r.clean)))
                })
                .collect()
        }
        None => HashMap::new(),
    };
    let mut sets = Vec::new();
    for (label, dir) in specs {
        sets.push(ImageSet { label, paths: list_pngs(&dir)? });
    }
    let reference = |p: &Path| -> Option<PathBuf> {
        let name = p.file_name()?.to_str()?;
        references.get(name).cloned()
    };
    let report = corpus_report(&sets, &reference)?;
    write_json(&args.out, &report.to_json())?;
    print!("{}", report.to_table());
    println!("dust index: {DUST_INDEX_LABEL}");
    Ok(())
}

fn demo_corpus(args: &DemoArgs, seed: u64) -> Result<()> {
    let c = write_demo_corpus(&args.out, args.train, args.heldout, args.size, seed)?;
    println!(
        "clean: {}\nheldout: {}\npatches: {}",
        c.clean.display(),
        c.heldout.display(),
        c.patches.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(usage("--jobs must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .context("starting worker pool")?;
    match &cli.command {
        Command::EstimatePhi(a) => estimate_phi(a),
        Command::Synth(a) => synth(a, cli.seed, cli.jobs),
        Command::Train(a) => train(a, cli.seed),
        Command::Remove(a) => remove(a),
        Command::Eval(a) => eval(a),
        Command::DemoCorpus(a) => demo_corpus(a, cli.seed),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env(env_logger::Env::new().filter("MARSDUST_LOG"))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
