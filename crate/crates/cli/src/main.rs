mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use commands::{execute, Invocation};
use manifest::RunManifest;

/// Drops `--out` and `--jobs` so the recorded arguments say only what shapes the outputs.
fn strip_placement(argv: &[String]) -> Vec<String> {
    let mut kept = Vec::new();
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" || a == "--jobs" {
            it.next();
        } else if !(a.starts_with("--out=") || a.starts_with("--jobs=")) {
            kept.push(a.clone());
        }
    }
    kept
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(&argv)?;
    rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs.max(1)).build_global().ok();
    if let Command::Replay(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        let mut replay = vec![argv[0].clone()];
        replay.extend(m.argv);
        replay.push("--out".into());
        replay.push(cli.common.out.display().to_string());
        replay.push("--jobs".into());
        replay.push(cli.common.jobs.to_string());
        let inner = Cli::try_parse_from(&replay)?;
        if matches!(inner.command, Command::Replay(_)) {
            anyhow::bail!("manifest records a replay");
        }
        return execute(Invocation { argv: strip_placement(&replay[1..]), cli: inner });
    }
    execute(Invocation { argv: strip_placement(&argv[1..]), cli })
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) => {
                let _ = ce.print();
                ExitCode::from(ce.exit_code() as u8)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
