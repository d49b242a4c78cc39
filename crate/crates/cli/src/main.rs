use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dcube::detector::{blocks_json, detect_topk, DetectorConfig, DetectorStats, SelectionPolicy, Subtensor};
use dcube::instrument::IoSnapshot;
use dcube::store::{ingest, CacheBudget, Delimiter, IngestOptions, Storage};
use dcube::synth::{self, GroundTruthBlock, InjectionSpec};
use dcube::DensityMeasure;

#[derive(Parser)]
#[command(name = "dcube", version, about = "Find dense blocks in multi-way relations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect the top-k dense subtensors of a relation.
    Detect(DetectArgs),
    /// Write a random tensor with planted dense blocks.
    Generate(GenerateArgs),
    /// Exhaustively find the densest block of a tiny relation.
    Oracle(OracleArgs),
    /// Score detected blocks against ground truth or tuple labels.
    Evaluate(EvaluateArgs),
    /// Re-run a detection from its manifest and check the blocks match.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DelimiterArg {
    Tab,
    Comma,
}

impl From<DelimiterArg> for Delimiter {
    fn from(d: DelimiterArg) -> Self {
        match d {
            DelimiterArg::Tab => Delimiter::Tab,
            DelimiterArg::Comma => Delimiter::Comma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MeasureArg {
    Ari,
    Geo,
    Susp,
    Es,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PolicyArg {
    Card,
    Density,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct InputArgs {
    /// Delimited text file: N attribute columns, then the measure.
    #[arg(long)]
    input: PathBuf,
    /// Number of attribute columns.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    dims: u32,
    #[arg(long, value_enum, default_value = "tab")]
    delimiter: DelimiterArg,
    /// Skip the first line.
    #[arg(long)]
    header: bool,
}

impl InputArgs {
    fn options(&self) -> IngestOptions {
        IngestOptions {
            n_dims: self.dims as usize,
            delimiter: self.delimiter.into(),
            header: self.header,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct MeasureArgs {
    #[arg(long, value_enum, default_value = "ari")]
    measure: MeasureArg,
    /// Penalty weight of the entry-surplus measure.
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    alpha: f64,
}

impl MeasureArgs {
    fn measure(&self) -> DensityMeasure {
        match self.measure {
            MeasureArg::Ari => DensityMeasure::Ari,
            MeasureArg::Geo => DensityMeasure::Geo,
            MeasureArg::Susp => DensityMeasure::Susp,
            MeasureArg::Es => DensityMeasure::Es { alpha: self.alpha },
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct DetectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    /// Number of blocks to report.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[command(flatten)]
    #[serde(flatten)]
    measure: MeasureArgs,
    /// Mass threshold multiplier.
    #[arg(long, default_value_t = 1.0, value_parser = parse_theta)]
    theta: f64,
    #[arg(long, value_enum, default_value = "density")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    partitions: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    /// Tuples kept in memory across scans: a count, or "unlimited".
    #[arg(long, default_value = "0", value_parser = parse_budget)]
    cache_budget: Budget,
    /// Directory for working files; falls back to $DCUBE_SCRATCH, then the system temp dir.
    #[arg(long)]
    #[serde(skip)]
    scratch_dir: Option<PathBuf>,
    /// Recorded in the manifest; detection itself draws no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip, default = "default_output_dir")]
    output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Budget {
    Tuples(usize),
    Unlimited(UnlimitedTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum UnlimitedTag {
    Unlimited,
}

impl Budget {
    fn cache(self) -> CacheBudget {
        match self {
            Budget::Tuples(n) => CacheBudget::tuples(n),
            Budget::Unlimited(_) => CacheBudget::UNLIMITED,
        }
    }
}

fn parse_budget(s: &str) -> Result<Budget, String> {
    match s {
        "unlimited" | "inf" => Ok(Budget::Unlimited(UnlimitedTag::Unlimited)),
        _ => s
            .parse()
            .map(Budget::Tuples)
            .map_err(|_| format!("expected a tuple count or \"unlimited\", got {s:?}")),
    }
}

fn parse_theta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() && v >= 1.0 {
        Ok(v)
    } else {
        Err("theta must be ≥ 1".into())
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err("alpha must be ≥ 0".into())
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Comma-separated cardinality of each dimension.
    #[arg(long, value_delimiter = ',', required = true)]
    cards: Vec<usize>,
    /// Background tuples, each a distinct cell of measure 1.
    #[arg(long)]
    tuples: usize,
    #[arg(long, default_value_t = 10)]
    blocks: usize,
    /// Comma-separated block size per dimension; defaults to min(10, cardinality).
    #[arg(long, value_delimiter = ',')]
    block_cards: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10.0)]
    min_multiplier: f64,
    #[arg(long, default_value_t = 100.0)]
    max_multiplier: f64,
    /// Upper bound on any cell's measure after injection.
    #[arg(long, default_value_t = synth::DEFAULT_MAX_CELL_MEASURE)]
    max_cell: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    measure: MeasureArgs,
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// blocks.json from a detection.
    #[arg(long)]
    blocks: PathBuf,
    /// Ground-truth blocks, for recall.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// One 0/1 label per input line, for AUC. Needs --input and --dims.
    #[arg(long, requires_all = ["input", "dims"])]
    labels: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    dims: Option<u32>,
    #[arg(long, value_enum, default_value = "tab")]
    delimiter: DelimiterArg,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
    /// Where to write the replayed outputs; defaults to a scratch location.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    config: DetectArgs,
    input_sha256: String,
    input_bytes: u64,
    seed: u64,
    blocks_sha256: String,
    blocks: Vec<Subtensor>,
    stats: DetectorStats,
    started_unix: f64,
    finished_unix: f64,
}

#[derive(Serialize)]
struct StatsFile<'a> {
    #[serde(flatten)]
    detector: &'a DetectorStats,
    io: IoSnapshot,
}

#[derive(Serialize, Default)]
struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    found: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<f64>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

fn scratch(explicit: Option<&Path>) -> Result<tempfile::TempDir> {
    let base = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("DCUBE_SCRATCH").map(PathBuf::from))
        .unwrap_or_else(std::env::temp_dir);
    fs::create_dir_all(&base).with_context(|| format!("creating {}", base.display()))?;
    tempfile::Builder::new()
        .prefix("dcube-run-")
        .tempdir_in(&base)
        .with_context(|| format!("creating a run directory under {}", base.display()))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable");
    s.push(b'\n');
    s
}

fn summary_table(blocks: &[Subtensor]) -> (String, String) {
    let header = ["order", "volume", "mass", "density"];
    let rows: Vec<[String; 4]> = blocks
        .iter()
        .map(|b| {
            [
                b.rank.to_string(),
                b.volume.to_string(),
                b.mass.to_string(),
                b.density.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut tsv = header.join("\t");
    tsv.push('\n');
    let mut aligned = String::new();
    let line = |cells: &[&str]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    aligned.push_str(&line(&header));
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        tsv.push_str(&cells.join("\t"));
        tsv.push('\n');
        aligned.push_str(&line(&cells));
    }
    (tsv, aligned)
}

struct DetectOutput {
    blocks_json: String,
    manifest: RunManifest,
}

fn run_detection(args: &DetectArgs) -> Result<DetectOutput> {
    let started = unix_now();
    let (input_sha256, input_bytes) = sha256_file(&args.input.input)?;
    let run_dir = scratch(args.scratch_dir.as_deref())?;
    let storage = Storage::new(run_dir.path())?;
    let relation = ingest(&storage, &args.input.input, &args.input.options())
        .with_context(|| format!("reading {}", args.input.input.display()))?;
    let config = DetectorConfig {
        k: args.k as usize,
        theta: args.theta,
        policy: match args.policy {
            PolicyArg::Card => SelectionPolicy::MaxCardinality,
            PolicyArg::Density => SelectionPolicy::MaxDensity,
        },
        measure: args.measure.measure(),
        cache_budget: args.cache_budget.cache(),
        partitions: args.partitions as usize,
        workers: args.workers as usize,
    };
    let detection = detect_topk(&relation, &config)?;
    let blocks_json = blocks_json(&detection.blocks);
    let io = storage.stats().snapshot();
    let stats_file = StatsFile {
        detector: &detection.stats,
        io,
    };
    let out = &args.output_dir;
    write_file(out, "blocks.json", blocks_json.as_bytes())?;
    write_file(out, "stats.json", &to_json(&stats_file))?;
    let (tsv, aligned) = summary_table(&detection.blocks);
    write_file(out, "summary.tsv", tsv.as_bytes())?;
    print!("{aligned}");

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: args.clone(),
        input_sha256,
        input_bytes,
        seed: args.seed,
        blocks_sha256: hex::encode(Sha256::digest(blocks_json.as_bytes())),
        blocks: detection.blocks,
        stats: detection.stats,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_file(out, "manifest.json", &to_json(&manifest))?;
    Ok(DetectOutput {
        blocks_json,
        manifest,
    })
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    if args.workers > args.partitions {
        Cli::command()
            .error(
                clap::error::ErrorKind::ArgumentConflict,
                format!(
                    "--workers ({}) must not exceed --partitions ({})",
                    args.workers, args.partitions
                ),
            )
            .exit();
    }
    run_detection(&args).map(|_| ())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cards = args.cards.clone();
    let block_cards = args
        .block_cards
        .clone()
        .unwrap_or_else(|| cards.iter().map(|&c| c.min(10)).collect());
    let spec = InjectionSpec {
        block_cards: vec![block_cards; args.blocks],
        density_multiplier_range: (args.min_multiplier, args.max_multiplier),
        seed: args.seed,
        max_cell_measure: args.max_cell,
    };
    let tensor = synth::generate(&cards, args.tuples, &spec)?;
    let dir = &args.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("tensor.tsv");
    let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    tensor.write_tsv(BufWriter::new(file))?;
    let path = dir.join("labels.txt");
    let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    tensor.write_labels(BufWriter::new(file))?;
    write_file(dir, "truth.json", &to_json(&tensor.truth))?;
    write_file(
        dir,
        "generation.json",
        &to_json(&serde_json::json!({
            "cards": cards,
            "tuples": tensor.cells.len(),
            "background_tuples": args.tuples,
            "background_density": tensor.background_density,
            "spec": spec,
        })),
    )?;
    println!(
        "wrote {} tuples and {} blocks to {}",
        tensor.cells.len(),
        tensor.truth.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let run_dir = scratch(args.scratch_dir.as_deref())?;
    let storage = Storage::new(run_dir.path())?;
    let relation = ingest(&storage, &args.input.input, &args.input.options())
        .with_context(|| format!("reading {}", args.input.input.display()))?;
    let best = synth::brute_force_densest(&relation, args.measure.measure())?;
    let report = serde_json::json!({
        "best_density": best.best_density,
        "best_mass": best.best_mass,
        "attr_values": best.attr_values(&relation),
    });
    io::stdout().write_all(&to_json(&report))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.truth.is_none() && args.labels.is_none() {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "evaluate needs --truth, --labels, or both",
            )
            .exit();
    }
    let blocks: Vec<Subtensor> = read_json(&args.blocks)?;
    let mut metrics = Metrics::default();
    if let Some(truth_path) = &args.truth {
        let truth: Vec<GroundTruthBlock> = read_json(truth_path)?;
        let found = synth::match_blocks(&blocks, &truth)?;
        metrics.recall = Some(synth::recall(&blocks, &truth)?);
        metrics.found = Some(found);
    }
    if let Some(labels_path) = &args.labels {
        let input = args.input.as_ref().expect("required by clap");
        let options = IngestOptions {
            n_dims: args.dims.expect("required by clap") as usize,
            delimiter: args.delimiter.into(),
            header: args.header,
        };
        let file = File::open(labels_path).with_context(|| format!("opening {}", labels_path.display()))?;
        let labels = synth::read_labels(BufReader::new(file))?;
        let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
        let labels = synth::align_labels(BufReader::new(file), &options, &labels)?;
        let run_dir = scratch(args.scratch_dir.as_deref())?;
        let storage = Storage::new(run_dir.path())?;
        let relation = ingest(&storage, input, &options)?;
        metrics.auc = Some(synth::score_and_auc(&relation, &blocks, &labels)?);
    }
    let path = write_file(&args.output_dir, "metrics.json", &to_json(&metrics))?;
    io::stdout().write_all(&fs::read(path)?)?;
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let manifest: RunManifest = read_json(&args.manifest)?;
    let mut config = manifest.config.clone();
    let (digest, _) = sha256_file(&config.input.input)?;
    if digest != manifest.input_sha256 {
        bail!(
            "{} changed since the recorded run (sha256 {digest}, recorded {})",
            config.input.input.display(),
            manifest.input_sha256
        );
    }
    config.scratch_dir = args.scratch_dir.clone();
    let holder;
    config.output_dir = match &args.output_dir {
        Some(d) => d.clone(),
        None => {
            holder = scratch(args.scratch_dir.as_deref())?;
            holder.path().to_path_buf()
        }
    };
    let replayed = run_detection(&config)?;
    let digest = hex::encode(Sha256::digest(replayed.blocks_json.as_bytes()));
    if digest != manifest.blocks_sha256 {
        bail!("replayed blocks differ from the manifest (sha256 {digest}, recorded {})", manifest.blocks_sha256);
    }
    println!("replay reproduced {} blocks (sha256 {digest})", replayed.manifest.blocks.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(a) => cmd_detect(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
