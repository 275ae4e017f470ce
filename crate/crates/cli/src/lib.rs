//! The `ar1vae` command line: `train`, `compare`, `sample` and `check`.
//!
//! Exit codes: 0 success, 1 invalid flags, 2 runtime failure (non-finite loss,
//! failed self-check), 3 I/O failure.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use ar1vae_core::check::{run_checks, CheckSubjects};
use ar1vae_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use ar1vae_core::data::{read_idx_images, Dataset, Split, SynthSpec};
use ar1vae_core::trainer::{format_decimal, generate_seeded, train_with, EpochStats, TrainOutcome, CSV_HEADER};
use ar1vae_core::{PosteriorKind, ReconLoss, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";

#[derive(Debug, Parser)]
#[command(name = "ar1vae", version, about = "VAEs with diagonal or AR(1) Gaussian posteriors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a manifest, a CSV log and a checkpoint.
    Train(TrainArgs),
    /// Train diag and ar1 models with identical settings and compare test losses.
    Compare(CommonArgs),
    /// Decode draws from the prior into a PGM image grid.
    Sample(SampleArgs),
    /// Run the numerical self-checks and print a table of max errors.
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PosteriorArg {
    Diag,
    Ar1,
}

impl From<PosteriorArg> for PosteriorKind {
    fn from(p: PosteriorArg) -> Self {
        match p {
            PosteriorArg::Diag => PosteriorKind::Diag,
            PosteriorArg::Ar1 => PosteriorKind::Ar1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReconArg {
    Bernoulli,
    Gaussian,
}

impl From<ReconArg> for ReconLoss {
    fn from(r: ReconArg) -> Self {
        match r {
            ReconArg::Bernoulli => ReconLoss::Bernoulli,
            ReconArg::Gaussian => ReconLoss::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "diag")]
    pub posterior: PosteriorArg,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Directory holding train-images-idx3-ubyte and t10k-images-idx3-ubyte, or `synth`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Latent dimension.
    #[arg(long, allow_negative_numbers = true, default_value_t = 20)]
    pub d: usize,
    /// Hidden layer width.
    #[arg(long, allow_negative_numbers = true, default_value_t = 400)]
    pub hidden: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "bernoulli")]
    pub recon: ReconArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t = 4000)]
    pub synth_train: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 1000)]
    pub synth_test: usize,
    /// Side length of synthetic square images.
    #[arg(long, allow_negative_numbers = true, default_value_t = 8)]
    pub synth_side: usize,
    /// Lag-1 correlation between neighbouring synthetic pixels.
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.8)]
    pub synth_rho: f64,
    /// Record real epoch durations in the CSV instead of zeros.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t = 64)]
    pub count: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0)]
    pub seed: u64,
    /// Output PGM file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid arguments: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ar1vae_core::Error> for CliError {
    fn from(e: ar1vae_core::Error) -> Self {
        use ar1vae_core::Error as E;
        match e {
            E::Io(_) | E::UnexpectedMagic { .. } | E::TruncatedPayload { .. } | E::PixelOutOfRange { .. } | E::Checkpoint(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command. Output
/// goes to `out`; the returned value is the process exit code.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ar1vae: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args, out),
        Command::Compare(args) => cmd_compare(&args, out),
        Command::Sample(args) => cmd_sample(&args, out),
        Command::Check => cmd_check(&CheckSubjects::default(), out),
    }
}

fn invalid(flag: &str, value: impl fmt::Display, reason: &str) -> CliError {
    CliError::Validation(format!("{flag} {reason}, got {value}"))
}

fn positive_real(flag: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(flag, v, "must be a finite number greater than zero"))
    }
}

fn positive_int(flag: &str, v: usize) -> CliResult<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(flag, v, "must be at least 1"))
    }
}

impl CommonArgs {
    pub fn validate(&self) -> CliResult<()> {
        positive_real("--beta", self.beta)?;
        positive_real("--lr", self.lr)?;
        positive_int("--d", self.d)?;
        positive_int("--hidden", self.hidden)?;
        positive_int("--batch", self.batch)?;
        if self.is_synth() {
            positive_int("--synth-train", self.synth_train)?;
            positive_int("--synth-test", self.synth_test)?;
            positive_int("--synth-side", self.synth_side)?;
            if !(self.synth_rho.is_finite() && self.synth_rho.abs() < 1.0) {
                return Err(invalid("--synth-rho", self.synth_rho, "must lie strictly between -1 and 1"));
            }
        } else {
            let dir = Path::new(&self.data);
            if !dir.is_dir() {
                return Err(invalid("--data", dir.display(), "must be `synth` or an existing directory"));
            }
            for name in [TRAIN_IMAGES, TEST_IMAGES] {
                if !dir.join(name).is_file() {
                    return Err(CliError::Validation(format!("--data directory {} has no {name}", dir.display())));
                }
            }
        }
        Ok(())
    }

    pub fn is_synth(&self) -> bool {
        self.data == "synth"
    }

    fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            train_count: self.synth_train,
            test_count: self.synth_test,
            side: self.synth_side,
            rho_pix: self.synth_rho,
        }
    }

    pub fn train_config(&self, posterior: PosteriorKind) -> TrainConfig {
        TrainConfig {
            posterior,
            recon: self.recon.into(),
            beta: self.beta,
            latent_dim: self.d,
            hidden_dim: self.hidden,
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }

    fn data_source(&self) -> DataSource {
        if self.is_synth() {
            DataSource::Synth(self.synth_spec())
        } else {
            DataSource::Idx {
                dir: self.data.clone(),
                train: TRAIN_IMAGES,
                test: TEST_IMAGES,
            }
        }
    }

    fn load(&self) -> CliResult<(Dataset, Dataset)> {
        if self.is_synth() {
            return Ok(self.synth_spec().build(self.seed)?);
        }
        let dir = Path::new(&self.data);
        let read = |name: &str, split| -> CliResult<Dataset> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            read_idx_images(&bytes, split).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
        };
        Ok((read(TRAIN_IMAGES, Split::Train)?, read(TEST_IMAGES, Split::Test)?))
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSpec),
    Idx { dir: String, train: &'static str, test: &'static str },
}

/// Everything needed to reproduce a run, written before any work starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: &'static str,
    pub config: C,
    /// sha256 over `"blob <len>\0" ++ config_json` (compact, keys sorted), as
    /// git hashes blobs.
    pub config_hash: String,
    pub reproduce: String,
    pub outputs: Vec<(String, PathBuf)>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &'static str, config: C, reproduce: String, outputs: Vec<(String, PathBuf)>) -> Self {
        // Value maps sort their keys, so the hash does not depend on field order.
        let json = serde_json::to_value(&config).and_then(|v| serde_json::to_string(&v)).expect("config serializes");
        Self {
            command,
            config_hash: git_blob_hash(json.as_bytes()),
            config,
            reproduce,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fs::write(path, json).map_err(|e| CliError::io(path, e))
    }
}

pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    train: TrainConfig,
    data: DataSource,
    wall_clock: bool,
}

#[derive(Debug, Clone, Serialize)]
struct CompareConfig {
    diag: TrainConfig,
    ar1: TrainConfig,
    data: DataSource,
    wall_clock: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SampleConfig {
    checkpoint: PathBuf,
    count: usize,
    seed: u64,
}

fn reproduce_line(sub: &str, posterior: Option<PosteriorArg>, a: &CommonArgs) -> String {
    let mut line = format!("ar1vae {sub}");
    if let Some(p) = posterior {
        line += &format!(" --posterior {}", PosteriorKind::from(p));
    }
    let recon = match a.recon {
        ReconArg::Bernoulli => "bernoulli",
        ReconArg::Gaussian => "gaussian",
    };
    line += &format!(
        " --data {} --d {} --hidden {} --beta {} --epochs {} --batch {} --lr {} --seed {} --recon {recon}",
        a.data, a.d, a.hidden, a.beta, a.epochs, a.batch, a.lr, a.seed
    );
    if a.is_synth() {
        line += &format!(
            " --synth-train {} --synth-test {} --synth-side {} --synth-rho {}",
            a.synth_train, a.synth_test, a.synth_side, a.synth_rho
        );
    }
    if a.wall_clock {
        line += " --wall-clock";
    }
    line + &format!(" --out {}", a.out.display())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Trains one model, appending each epoch's row to `csv_path` as it finishes.
fn train_logged(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    csv_path: &Path,
    wall_clock: bool,
    out: &mut dyn Write,
) -> CliResult<TrainOutcome> {
    let file = File::create(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").and_then(|_| csv.flush()).map_err(|e| CliError::io(csv_path, e))?;
    let mut io_failure = None;
    let outcome = train_with(train, test, cfg, |s: &EpochStats| {
        let _ = writeln!(
            out,
            "[{}] epoch {} train_loss {} test_loss {}",
            cfg.posterior,
            s.epoch,
            format_decimal(s.train_loss),
            format_decimal(s.test_loss)
        );
        if let Err(e) = writeln!(csv, "{}", s.csv_row(wall_clock)).and_then(|_| csv.flush()) {
            io_failure = Some(CliError::io(csv_path, e));
            return Err(ar1vae_core::Error::Checkpoint("log write failed".into()));
        }
        Ok(())
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    Ok(outcome?)
}

fn save_checkpoint(path: &Path, outcome: &TrainOutcome, cfg: &TrainConfig, data: &Dataset) -> CliResult<()> {
    let meta = CheckpointMeta {
        spec: *outcome.model.spec(),
        image_rows: data.rows(),
        image_cols: data.cols(),
        config: Some(*cfg),
    };
    fs::write(path, write_checkpoint(&outcome.model, &meta)).map_err(|e| CliError::io(path, e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let a = &args.common;
    a.validate()?;
    let cfg = a.train_config(args.posterior.into());
    let dir = &a.out;
    let manifest_path = dir.join("manifest.json");
    let csv_path = dir.join("train_log.csv");
    let ckpt_path = dir.join("checkpoint.bin");

    create_dir(dir)?;
    let config = RunConfig {
        train: cfg,
        data: a.data_source(),
        wall_clock: a.wall_clock,
    };
    RunManifest::new(
        "train",
        config,
        reproduce_line("train", Some(args.posterior), a),
        vec![
            ("manifest".into(), manifest_path.clone()),
            ("log".into(), csv_path.clone()),
            ("checkpoint".into(), ckpt_path.clone()),
        ],
    )
    .write(&manifest_path)?;

    let (train, test) = a.load()?;
    let outcome = train_logged(&train, &test, &cfg, &csv_path, a.wall_clock, out)?;
    save_checkpoint(&ckpt_path, &outcome, &cfg, &train)?;
    let _ = writeln!(out, "wrote {}", dir.display());
    Ok(())
}

pub const COMPARE_HEADER: &str = "epoch,diag_test_loss,ar1_test_loss";

pub fn merged_csv(diag: &[EpochStats], ar1: &[EpochStats]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for (a, b) in diag.iter().zip(ar1) {
        s += &format!("{},{},{}\n", a.epoch, format_decimal(a.test_loss), format_decimal(b.test_loss));
    }
    s
}

pub fn summary_line(diag: &[EpochStats], ar1: &[EpochStats]) -> String {
    match (diag.last(), ar1.last()) {
        (Some(d), Some(r)) => {
            let diff = r.test_loss - d.test_loss;
            let verdict = if diff <= 0.0 { "ar1 <= diag" } else { "ar1 > diag" };
            format!(
                "final epoch {}: diag test loss {}, ar1 test loss {}, ar1 - diag = {} ({verdict})",
                d.epoch,
                format_decimal(d.test_loss),
                format_decimal(r.test_loss),
                format_decimal(diff)
            )
        }
        _ => "no epochs run: nothing to compare".to_string(),
    }
}

pub fn cmd_compare(a: &CommonArgs, out: &mut dyn Write) -> CliResult<()> {
    a.validate()?;
    let diag_cfg = a.train_config(PosteriorKind::Diag);
    let ar1_cfg = a.train_config(PosteriorKind::Ar1);
    let dir = &a.out;
    let manifest_path = dir.join("manifest.json");
    let paths = |kind: &str| (dir.join(format!("{kind}_log.csv")), dir.join(format!("{kind}_checkpoint.bin")));
    let (diag_csv, diag_ckpt) = paths("diag");
    let (ar1_csv, ar1_ckpt) = paths("ar1");
    let compare_path = dir.join("compare.csv");
    let summary_path = dir.join("summary.txt");

    create_dir(dir)?;
    let config = CompareConfig {
        diag: diag_cfg,
        ar1: ar1_cfg,
        data: a.data_source(),
        wall_clock: a.wall_clock,
    };
    RunManifest::new(
        "compare",
        config,
        reproduce_line("compare", None, a),
        vec![
            ("manifest".into(), manifest_path.clone()),
            ("diag_log".into(), diag_csv.clone()),
            ("diag_checkpoint".into(), diag_ckpt.clone()),
            ("ar1_log".into(), ar1_csv.clone()),
            ("ar1_checkpoint".into(), ar1_ckpt.clone()),
            ("compare".into(), compare_path.clone()),
            ("summary".into(), summary_path.clone()),
        ],
    )
    .write(&manifest_path)?;

    let (train, test) = a.load()?;
    let diag = train_logged(&train, &test, &diag_cfg, &diag_csv, a.wall_clock, out)?;
    save_checkpoint(&diag_ckpt, &diag, &diag_cfg, &train)?;
    let ar1 = train_logged(&train, &test, &ar1_cfg, &ar1_csv, a.wall_clock, out)?;
    save_checkpoint(&ar1_ckpt, &ar1, &ar1_cfg, &train)?;

    fs::write(&compare_path, merged_csv(&diag.stats, &ar1.stats)).map_err(|e| CliError::io(&compare_path, e))?;
    let summary = summary_line(&diag.stats, &ar1.stats);
    fs::write(&summary_path, format!("{summary}\n")).map_err(|e| CliError::io(&summary_path, e))?;
    let _ = writeln!(out, "{summary}");
    Ok(())
}

/// Tiles `images` (each `rows × cols`, values in `[0, 1]`) into a binary PGM
/// with `⌈√n⌉` tiles per row. Unused tiles stay black.
pub fn pgm_grid(images: &[Vec<f64>], rows: usize, cols: usize) -> Vec<u8> {
    let n = images.len();
    let per_row = (1..=n).find(|k| k * k >= n).unwrap_or(1);
    let grid_rows = n.div_ceil(per_row).max(1);
    let (width, height) = (per_row * cols, grid_rows * rows);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height, 0);
    for (k, img) in images.iter().enumerate() {
        let (ty, tx) = (k / per_row, k % per_row);
        for r in 0..rows {
            for c in 0..cols {
                let v = img[r * cols + c].clamp(0.0, 1.0);
                out[header + (ty * rows + r) * width + tx * cols + c] = (255.0 * v).round() as u8;
            }
        }
    }
    out
}

pub fn cmd_sample(args: &SampleArgs, out: &mut dyn Write) -> CliResult<()> {
    positive_int("--count", args.count)?;
    let mut manifest_name = args.out.file_name().unwrap_or_default().to_os_string();
    manifest_name.push(".manifest.json");
    let manifest_path = args.out.with_file_name(manifest_name);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let config = SampleConfig {
        checkpoint: args.checkpoint.clone(),
        count: args.count,
        seed: args.seed,
    };
    let reproduce = format!(
        "ar1vae sample --checkpoint {} --count {} --seed {} --out {}",
        args.checkpoint.display(),
        args.count,
        args.seed,
        args.out.display()
    );
    RunManifest::new(
        "sample",
        config,
        reproduce,
        vec![("manifest".into(), manifest_path.clone()), ("image".into(), args.out.clone())],
    )
    .write(&manifest_path)?;

    let bytes = fs::read(&args.checkpoint).map_err(|e| CliError::io(&args.checkpoint, e))?;
    let (model, meta) = read_checkpoint(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", args.checkpoint.display())))?;
    let images = generate_seeded(&model, args.count, args.seed)?;
    let pgm = pgm_grid(&images, meta.image_rows, meta.image_cols);
    fs::write(&args.out, pgm).map_err(|e| CliError::io(&args.out, e))?;
    let _ = writeln!(out, "wrote {} samples to {}", args.count, args.out.display());
    Ok(())
}

/// Runs the self-check suite against `subjects`, printing the report table.
pub fn cmd_check(subjects: &CheckSubjects, out: &mut dyn Write) -> CliResult<()> {
    let report = run_checks(subjects);
    let _ = write!(out, "{}", report.render());
    if report.passed() {
        let _ = writeln!(out, "all checks passed");
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|r| r.name).collect();
        Err(CliError::Runtime(format!("failed checks: {}", names.join(", "))))
    }
}
