use std::path::PathBuf;

use clap::Parser;

use scenenav::synth::{write_session, SceneSpec};

/// Renders a box-world scene file into a session directory with `gt/`.
#[derive(Debug, Parser)]
#[command(name = "synthgen", version)]
struct Args {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let spec = SceneSpec::read(&args.spec)?;
    write_session(&spec, &args.out)?;
    log::info!("wrote {} frames to {}", spec.frames, args.out.display());
    Ok(())
}
