use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vqt::bench::{bench_offline, bench_online, write_csv};
use vqt::verify::{verify, VerifyOptions};
use vqt::workload::{gen_pairs, gen_workload, EditMix, RevisionStream, Vocabulary};
use vqt::{Error, ModelParams, Precision, RunConfig, Scalar};

#[derive(Parser)]
#[command(name = "vqt", version, about = "Incremental inference for vector-quantized transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a base revision followed by random atomic edits as JSONL.
    GenWorkload {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tokens in the base revision.
        #[arg(long)]
        n: usize,
        #[arg(long = "edits")]
        num_edits: usize,
        /// Replace, insert and delete fractions.
        #[arg(long, default_value = "1,0,0")]
        mix: String,
        /// Vocabulary and length limits are taken from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write revision pairs with a given number of edits each as JSONL.
    GenPairs {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Edits per pair, cycled over the pairs.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        edits: Vec<usize>,
        #[arg(long, default_value = "1,0,0")]
        mix: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay an edit stream and report one row per update.
    BenchOnline {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write rows and summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Edits applied together as one update.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
    /// Process revision pairs and report one row per pair.
    BenchOffline {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
    /// Run the verification suites.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "double")]
        precision: PrecisionArg,
        /// Perturb one codebook bias first; the run must then fail.
        #[arg(long)]
        corrupt_bias: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Verification(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidValue(_) | Error::Toml(_) => Failure::Usage(e.to_string()),
            Error::Invariant { .. } => Failure::Verification(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::from_toml_str(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_stream(path: &Path) -> Result<RevisionStream, Failure> {
    RevisionStream::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn vocabulary(run: &RunConfig) -> Vocabulary {
    Vocabulary { vocab_size: run.model.vocab_size as u32, max_len: run.model.max_seq_len }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_stream(stream: &RevisionStream, path: &Path) -> Result<(), Failure> {
    let mut out = create(path)?;
    stream.write(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<(), Failure> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_rows<R: Serialize>(rows: &[R], path: &Path) -> Result<(), Failure> {
    let mut out = create(path)?;
    write_csv(rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn with_precision(mut run: RunConfig, precision: Option<PrecisionArg>) -> RunConfig {
    if let Some(p) = precision {
        run.model.precision = p.into();
    }
    run
}

fn online<T: Scalar>(run: &RunConfig, stream: &RevisionStream, batch: usize, out: &Path, json: Option<&Path>) -> Result<(), Failure> {
    let params = ModelParams::<T>::calibrated(&run.model, run.seed, run.calibration_docs)?;
    let bench = bench_online(&params, &run.engine, stream, batch)?;
    write_rows(&bench.rows, out)?;
    if let Some(path) = json {
        write_json(&bench, path)?;
    }
    let s = &bench.summary;
    println!(
        "{} updates, median ratio {:.2}, aggregate ratio {:.2}, {} reindex events, {} margin warnings",
        s.updates, s.median_ratio, s.aggregate_ratio, s.reindex_events, s.margin_warnings
    );
    Ok(())
}

fn offline<T: Scalar>(run: &RunConfig, pairs: &[(Vec<u32>, Vec<u32>)], out: &Path, json: Option<&Path>) -> Result<(), Failure> {
    let params = ModelParams::<T>::calibrated(&run.model, run.seed, run.calibration_docs)?;
    let bench = bench_offline(&params, &run.engine, pairs)?;
    write_rows(&bench.rows, out)?;
    if let Some(path) = json {
        write_json(&bench, path)?;
    }
    let s = &bench.summary;
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "{} pairs, median ratio {:.2}, median batch ratio {:.2}, spearman {}, log-log slope {}",
        s.pairs,
        s.median_ratio,
        s.median_batch_ratio,
        show(s.spearman),
        show(s.log_log_slope)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenWorkload { seed, n, num_edits, mix, config, out } => {
            let run = load_config(config.as_deref())?;
            let stream = gen_workload(seed, n, num_edits, EditMix::parse(&mix)?, vocabulary(&run))?;
            write_stream(&stream, &out)
        }
        Command::GenPairs { seed, n, count, edits, mix, config, out } => {
            let run = load_config(config.as_deref())?;
            let stream = gen_pairs(seed, n, count, &edits, EditMix::parse(&mix)?, vocabulary(&run))?;
            write_stream(&stream, &out)
        }
        Command::BenchOnline { stream, config, out, json, batch, precision } => {
            let run = with_precision(load_config(config.as_deref())?, precision);
            if batch == 0 {
                return Err(Failure::Usage("--batch must be at least 1".into()));
            }
            let stream = load_stream(&stream)?;
            match run.model.precision {
                Precision::Single => online::<f32>(&run, &stream, batch, &out, json.as_deref()),
                Precision::Double => online::<f64>(&run, &stream, batch, &out, json.as_deref()),
            }
        }
        Command::BenchOffline { pairs, config, out, json, precision } => {
            let run = with_precision(load_config(config.as_deref())?, precision);
            let pairs = load_stream(&pairs)?.pairs()?;
            match run.model.precision {
                Precision::Single => offline::<f32>(&run, &pairs, &out, json.as_deref()),
                Precision::Double => offline::<f64>(&run, &pairs, &out, json.as_deref()),
            }
        }
        Command::Verify { config, trials, precision, corrupt_bias, json } => {
            if trials == 0 {
                return Err(Failure::Usage("--trials must be at least 1".into()));
            }
            let run = load_config(config.as_deref())?;
            let report = verify(&run, &VerifyOptions { trials, precision: precision.into(), corrupt_bias })?;
            for s in &report.suites {
                println!("{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
            }
            if let Some(path) = json {
                write_json(&report, &path)?;
            }
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect();
                Err(Failure::Verification(format!("failed suites: {}", failed.join(", "))))
            }
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
