use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_lab::embedding::{margins, PositionalCodec};
use latent_lab::envs::Regime;
use latent_lab::error::Error;
use latent_lab::harness::{self, BenchOutputs, Mode, RunConfig};
use latent_lab::protocol::{Framing, HistoryMode, NoteState};

const EXIT_BREACH: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "latent-lab", version, about = "Handwired online-learning circuits and their benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a circuit against its reference algorithm.
    Verify {
        #[command(subcommand)]
        target: VerifyTarget,
    },
    /// Run a benchmark and write CSV, JSON and SVG artifacts.
    Bench {
        #[command(subcommand)]
        target: BenchTarget,
    },
    /// Interactive prediction protocol.
    Protocol {
        #[command(subcommand)]
        action: ProtocolAction,
    },
    /// Positional codec diagnostics.
    Codec {
        #[command(subcommand)]
        action: CodecAction,
    },
}

#[derive(Subcommand)]
enum VerifyTarget {
    Wma(Common),
    Qlearn(Common),
}

#[derive(Subcommand)]
enum BenchTarget {
    Experts(Common),
    Qlearn(Common),
}

#[derive(Subcommand)]
enum ProtocolAction {
    Run(ProtocolArgs),
}

#[derive(Subcommand)]
enum CodecAction {
    Margins(MarginArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// uniform, stratified, flat or anti-signal.
    #[arg(long)]
    regime: Option<String>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    framing: Option<FramingArg>,
    #[arg(long, value_enum)]
    state: Option<StateArg>,
    #[arg(long, value_enum)]
    history: Option<HistoryArg>,
    /// mw, always_one, counter_note or remote.
    #[arg(long)]
    predictor: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FramingArg {
    Online,
    Weather,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    Note,
    NoNote,
}

#[derive(Clone, Copy, ValueEnum)]
enum HistoryArg {
    Retained,
    Free,
}

#[derive(Args)]
struct MarginArgs {
    #[arg(long, default_value_t = 16)]
    d_pe: usize,
    #[arg(long, default_value_t = 64)]
    t_max: usize,
    /// Comma-separated key offsets.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    offsets: Vec<usize>,
}

fn load(mode: Mode, c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if cfg.mode != mode {
                return Err(Error::Config(format!("config mode {:?} does not match the subcommand", cfg.mode)));
            }
            cfg
        }
        None => RunConfig::new(mode),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.instances {
        cfg.instances = n;
    }
    if let Some(t) = c.horizon {
        cfg.horizon = t;
    }
    if let Some(r) = &c.regime {
        cfg.regime = Regime::parse(r)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn report_outputs(out: &BenchOutputs) {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for s in &out.summary.strategies {
        println!("{:<22} {} = {:.4} ± {:.4} (n = {})", s.strategy, out.summary.metric, s.mean, s.std, s.instances);
    }
    if let Some(dq) = out.summary.max_abs_dq {
        println!("max |dQ| = {dq:.3e}");
    }
    println!("wrote {}", out.csv.display());
    println!("wrote {}", out.summary_path.display());
    if let Some(p) = &out.plot {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Verify { target } => {
            let (mode, common) = match &target {
                VerifyTarget::Wma(c) => (Mode::VerifyWma, c),
                VerifyTarget::Qlearn(c) => (Mode::VerifyQlearn, c),
            };
            let cfg = load(mode, common)?;
            cfg.validate()?;
            let report = match mode {
                Mode::VerifyWma => harness::verify_wma(&cfg)?,
                _ => harness::verify_qlearn(&cfg)?,
            };
            println!(
                "{}: {} episodes, {} steps, max state delta {:.3e}, max output delta {:.3e}, agreement {:.4}",
                report.kind,
                report.episodes,
                report.steps,
                report.max_state_delta,
                report.max_output_delta,
                report.agreement
            );
            if common.out.is_some() || common.config.is_some() {
                println!("wrote {}", harness::write_report(&cfg, &report)?.display());
            }
            if report.passed() {
                println!("PASS");
                Ok(0)
            } else {
                match report.first_divergence {
                    Some(d) => println!("FAIL: first divergence in episode {} (seed {}) at step {}, delta {:.3e}", d.episode, d.seed, d.step, d.delta),
                    None => println!("FAIL: tolerance exceeded"),
                }
                Ok(EXIT_BREACH)
            }
        }
        Command::Bench { target } => {
            let cfg = match &target {
                BenchTarget::Experts(c) => load(Mode::BenchExperts, c)?,
                BenchTarget::Qlearn(c) => load(Mode::BenchQlearn, c)?,
            };
            report_outputs(&harness::run_benchmark(&cfg)?);
            Ok(0)
        }
        Command::Protocol { action: ProtocolAction::Run(args) } => {
            let mut cfg = load(Mode::ProtocolRun, &args.common)?;
            if let Some(f) = args.framing {
                cfg.protocol.framing = match f {
                    FramingArg::Online => Framing::Online,
                    FramingArg::Weather => Framing::Weather,
                };
            }
            if let Some(s) = args.state {
                cfg.protocol.state = match s {
                    StateArg::Note => NoteState::Note,
                    StateArg::NoNote => NoteState::NoNote,
                };
            }
            if let Some(h) = args.history {
                cfg.protocol.history = match h {
                    HistoryArg::Retained => HistoryMode::Retained,
                    HistoryArg::Free => HistoryMode::Free,
                };
            }
            if let Some(p) = args.predictor {
                cfg.predictor = p;
            }
            report_outputs(&harness::run_protocol_batch(&cfg)?);
            Ok(0)
        }
        Command::Codec { action: CodecAction::Margins(m) } => {
            let codec = PositionalCodec::with_default_angles(m.d_pe, m.t_max)?;
            let mg = margins(&codec, &m.offsets)?;
            println!("{}", serde_json::to_string_pretty(&mg)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) | Error::CodecUnsound(_) | Error::Json(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
