use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use duet_core::pipeline::{
    self, envelope_report, load_simulation, model_summary, report, run_analysis, run_simulation, save_simulation,
    ExperimentConfig, RecordFormat, ReportFormat, RunReport,
};
use duet_core::Error;

#[derive(Parser)]
#[command(
    name = "duet",
    version,
    about = "Heralded microwave-optical Bell-pair simulation and analysis"
)]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Start from the measured-imperfection preset instead of the model one.
    #[arg(long, global = true)]
    measured: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Records {
    Csv,
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate herald-tagged heterodyne records into a run directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Records::Bin)]
        format: Records,
    },
    /// Analyze a run directory (or simulate in memory without --input).
    Analyze {
        /// Directory written by `simulate`; its config.toml is used unless --config is given.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for report.json and report files; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Overrides the configured bootstrap iterations.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Closed-form model observables.
    Model {
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
    /// Temporal-mode envelope properties and the readout-delay scan.
    Envelope {
        /// Records per herald in the delay scan; 0 skips it.
        #[arg(long, default_value_t = 300)]
        scan_records: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Re-render a saved report.json.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidParameter { .. } | Error::InvalidDims { .. } => 2,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 3,
    }
}

/// The `--config` file, else the saved config of a run, else a preset.
fn load_config(cli: &Cli, saved: Option<ExperimentConfig>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&cli.config, saved) {
        (Some(p), _) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        (None, Some(saved)) => saved,
        (None, None) if cli.measured => ExperimentConfig::measured(),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>, name: &str) -> Result<(), Error> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn markdown_table(rows: &[(String, String)]) -> String {
    let mut s = String::from("| quantity | value |\n|---|---|\n");
    for (k, v) in rows {
        s.push_str(&format!("| {k} | {v} |\n"));
    }
    s
}

fn render<T: serde::Serialize>(value: &T, rows: Vec<(String, String)>, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(value).expect("serializable") + "\n",
        Format::Csv => {
            let mut s = String::from("quantity,value\n");
            for (k, v) in rows {
                s.push_str(&format!("{k},{v}\n"));
            }
            s
        }
        Format::Markdown => markdown_table(&rows),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate { out, format } => {
            let cfg = load_config(cli, None)?;
            let sim = run_simulation(&cfg)?;
            let format = match format {
                Records::Csv => RecordFormat::Csv,
                Records::Bin => RecordFormat::Binary,
            };
            save_simulation(out, &sim, &cfg, format)?;
            eprintln!(
                "{} Z and {} X heralds ({:.0} s of experiment) written to {}",
                sim.z_records.len(),
                sim.x_records.len(),
                sim.metadata.equivalent_duration,
                out.display()
            );
        }
        Command::Analyze {
            input,
            out,
            format,
            bootstrap,
        } => {
            let (sim, mut cfg) = match input {
                Some(dir) => {
                    let (sim, saved) = load_simulation(dir)?;
                    (sim, load_config(cli, Some(saved))?)
                }
                None => {
                    let cfg = load_config(cli, None)?;
                    (run_simulation(&cfg)?, cfg)
                }
            };
            if let Some(n) = bootstrap {
                cfg.analysis.bootstrap_iterations = *n;
            }
            let run = run_analysis(&sim, &cfg)?;
            if let Some(dir) = out {
                emit(&report(&run, ReportFormat::Json), Some(dir), "report.json")?;
            }
            let ext = match format {
                Format::Json => "json",
                Format::Csv => "csv",
                Format::Markdown => "md",
            };
            if out.is_none() || !matches!(format, Format::Json) {
                emit(
                    &report(&run, (*format).into()),
                    out.as_deref(),
                    &format!("report.{ext}"),
                )?;
            }
        }
        Command::Model { format } => {
            let cfg = load_config(cli, None)?;
            let m = model_summary(&cfg)?;
            let mut rows = vec![
                ("v_z".to_string(), m.v_z.to_string()),
                ("v_x".into(), m.v_x.to_string()),
                ("g2_early".into(), m.g2_early.to_string()),
                ("g2_late".into(), m.g2_late.to_string()),
                ("f_lb".into(), m.f_lb.to_string()),
            ];
            for (i, h) in ["e", "l"].iter().enumerate() {
                for (j, k) in ["e", "l"].iter().enumerate() {
                    rows.push((format!("n_{h}{k}"), m.intensities[i][j].to_string()));
                }
            }
            for (name, p) in [("pz", m.p_z), ("px", m.p_x)] {
                for i in 0..2 {
                    for j in 0..2 {
                        rows.push((format!("{name}_{i}{j}"), p[i][j].to_string()));
                    }
                }
            }
            print!("{}", render(&m, rows, *format));
        }
        Command::Envelope { scan_records, format } => {
            let cfg = load_config(cli, None)?;
            let r = envelope_report(&cfg, *scan_records)?;
            let mut rows = vec![
                ("norm".to_string(), r.norm.to_string()),
                ("swap_delay".into(), r.swap_delay.to_string()),
                ("orthogonal_delay".into(), r.orthogonal_delay.to_string()),
                (
                    "overlap_at_orthogonal_delay".into(),
                    r.overlap_at_orthogonal_delay.to_string(),
                ),
                ("configured_delay".into(), r.configured_delay.to_string()),
                (
                    "overlap_at_configured_delay".into(),
                    r.overlap_at_configured_delay.to_string(),
                ),
                ("extraction_efficiency".into(), r.extraction_efficiency.to_string()),
            ];
            if let Some(scan) = &r.delay_scan {
                rows.push(("t_e".into(), scan.t_e.to_string()));
                rows.push(("t_l".into(), scan.t_l.to_string()));
            }
            print!("{}", render(&r, rows, *format));
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(input)?;
            let run: RunReport = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
            print!("{}", pipeline::report(&run, (*format).into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
