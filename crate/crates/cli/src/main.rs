use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stagewise::cascade::{grid_for, GridPolicy};
use stagewise::confidence::{bucketed_accuracy, write_buckets_csv};
use stagewise::metrics::{evaluate_with, risk_coverage_curve, write_curve_csv, write_report_csv, EvalOptions};
use stagewise::record::{
    parse_records, read_records_unchecked, validate_with, write_records, Mode, ParseOptions, RecordSet,
};
use stagewise::simulator::{simulate, SimConfig};

mod plot;

#[derive(Parser)]
#[command(name = "stagewise", version, about = "Guided selective prediction: cascades, risk-coverage curves and AUC")]
struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// Observed confidences plus 0.0.
    Observed,
    /// Observed confidences plus a point inside every gap.
    Complete,
}

impl From<Grid> for GridPolicy {
    fn from(g: Grid) -> Self {
        match g {
            Grid::Observed => GridPolicy::Observed,
            Grid::Complete => GridPolicy::Complete,
        }
    }
}

#[derive(clap::Args)]
struct Input {
    #[arg(long)]
    records: PathBuf,
    /// Reject unknown fields and require stages 0-4 on every record.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print invariant violations; exit 0 iff there are none.
    Validate {
        #[command(flatten)]
        input: Input,
    },
    /// Write a simulated record file.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-dataset, per-stage AUC and improvement over stage 0.
    Evaluate {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "observed")]
        grid: Grid,
    },
    /// Risk-coverage curve of one stage.
    Sweep {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        stage: u8,
        /// Restrict to one dataset tag (required when the file holds several).
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "observed")]
        grid: Grid,
    },
    /// Overlay curve CSV files in an SVG.
    Plot {
        /// Comma-separated curve CSV files.
        #[arg(long, value_delimiter = ',', required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence-vs-accuracy buckets of one stage.
    Buckets {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        stage: u8,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

fn options(strict: bool) -> ParseOptions {
    ParseOptions {
        mode: if strict { Mode::Strict } else { Mode::Lenient },
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load(input: &Input) -> Result<RecordSet, Failure> {
    parse_records(open(&input.records)?, options(input.strict))
        .map_err(|e| Failure::Data(format!("{}: {e}", input.records.display())))
}

fn select_dataset(rs: RecordSet, dataset: Option<&str>) -> Result<RecordSet, Failure> {
    match dataset {
        Some(tag) => {
            let subset = rs.filter_dataset(tag);
            if subset.is_empty() {
                return Err(Failure::Data(format!("no records with dataset '{tag}'")));
            }
            Ok(subset)
        }
        None => {
            let tags = rs.datasets();
            if tags.len() > 1 {
                return Err(Failure::Usage(format!(
                    "records hold several datasets ({}); pick one with --dataset",
                    tags.join(", ")
                )));
            }
            Ok(rs)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { input } => {
            let raw = read_records_unchecked(open(&input.records)?, options(input.strict))
                .map_err(|e| Failure::Data(format!("{}: {e}", input.records.display())))?;
            let violations = validate_with(&raw.set, options(input.strict).mode);
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for v in &violations {
                let _ = writeln!(out, "{v}");
            }
            if violations.is_empty() {
                let _ = writeln!(out, "ok: {} records", raw.set.len());
                Ok(())
            } else {
                Err(Failure::Data(format!("{} violation(s)", violations.len())))
            }
        }
        Command::Simulate { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                    SimConfig::from_toml_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
                }
                None => SimConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rs = simulate(&cfg).map_err(Failure::data)?;
            write_records(&rs, create(&out)?).map_err(Failure::data)
        }
        Command::Evaluate { input, out, grid } => {
            let rs = load(&input)?;
            let reports = evaluate_with(&rs, EvalOptions { grid: grid.into() });
            write_report_csv(&reports, create(&out)?).map_err(Failure::data)
        }
        Command::Sweep {
            input,
            stage,
            dataset,
            out,
            grid,
        } => {
            let rs = select_dataset(load(&input)?, dataset.as_deref())?;
            let g = grid_for(&rs, grid.into());
            let curve = risk_coverage_curve(&rs, stage, &g);
            write_curve_csv(stage, &curve, create(&out)?).map_err(Failure::data)
        }
        Command::Plot { curves, out } => {
            let mut series = Vec::new();
            for path in &curves {
                series.extend(plot::read_curve_csv(path).map_err(Failure::Data)?);
            }
            let svg = plot::render_svg(&series);
            let mut w = create(&out)?;
            w.write_all(svg.as_bytes()).map_err(Failure::data)?;
            w.flush().map_err(Failure::data)
        }
        Command::Buckets {
            input,
            stage,
            bins,
            dataset,
            out,
        } => {
            if bins == 0 {
                return Err(Failure::Usage("--bins must be at least 1".into()));
            }
            let rs = load(&input)?;
            let rs = match dataset.as_deref() {
                Some(_) => select_dataset(rs, dataset.as_deref())?,
                None => rs,
            };
            let buckets = bucketed_accuracy(&rs, stage, bins).map_err(Failure::data)?;
            write_buckets_csv(&buckets, create(&out)?).map_err(Failure::data)
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
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
