use std::path::PathBuf;
use std::process::ExitCode;

use bb84_cli::{default_format, run, CliError, Command, Format, RunConfig};
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "bb84", version, about = "Certified BB84 key lengths, simulation and verification")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Output file; `-` writes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn execute(args: &Args) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(c) = cfg.command {
        if c != args.command {
            return Err(CliError::Config(format!("config is for {c:?}, command line asks for {:?}", args.command)));
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.check_blocks(args.command)?;
    let format = args.format.or(cfg.output.format).unwrap_or_else(|| default_format(args.command));
    let (rendered, status) = run(args.command, &cfg, format);
    let out = args.out.clone().or_else(|| cfg.output.path.as_ref().map(PathBuf::from));
    match out {
        Some(p) if p.as_os_str() != "-" => std::fs::write(&p, &rendered)?,
        _ => print!("{rendered}"),
    }
    status
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bb84: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
