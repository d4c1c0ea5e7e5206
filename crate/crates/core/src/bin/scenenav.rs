use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Parser;
use log::info;

use scenenav::pipeline::{finish, open_session, run, RunOptions};
use scenenav::service::{self, Controller};

/// Streams a session through alignment, semantics, floor tracking and
/// navigation, and writes the resulting map artifacts.
#[derive(Debug, Parser)]
#[command(name = "scenenav", version)]
struct Args {
    /// Session directory.
    #[arg(long)]
    session: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Serve live state on this port while running.
    #[arg(long)]
    serve: Option<u16>,
    /// Playback speed in blocks per second when serving (0 = unthrottled).
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    /// Ground-truth session directory (with `gt/`) to evaluate against.
    #[arg(long)]
    eval: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let opts = RunOptions {
        session: args.session.clone(),
        out: args.out.clone(),
        config_file: args.config.clone(),
        max_frames: args.max_frames,
        seed: args.seed,
        eval: args.eval.clone(),
    };
    let outcome = match args.serve {
        None => run(&opts)?,
        Some(port) => serve_run(&opts, port, args.speed)?,
    };
    print!("{}", outcome.report.to_text());
    if let Some(eval) = &outcome.eval {
        print!("{}", eval.to_text());
    }
    Ok(())
}

fn serve_run(opts: &RunOptions, port: u16, speed: f64) -> anyhow::Result<scenenav::pipeline::RunOutcome> {
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("--speed must be a non-negative number");
    }
    let (session, mut pipeline) = open_session(opts)?;
    let (mut ctl, shared): (Controller, _) = service::channel(pipeline.class_names().clone(), speed);
    let rt = tokio::runtime::Runtime::new().context("starting the runtime")?;
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = rt.block_on(service::bind(addr))?;
    info!("serving on http://{}", listener.local_addr()?);
    let server = rt.spawn(service::serve(listener, shared));
    let limit = opts.max_frames.unwrap_or(usize::MAX).min(session.len());
    ctl.drive(&mut pipeline, session.frames().take(limit))?;
    let outcome = finish(pipeline, opts)?;
    info!("stream finished; still serving, press Ctrl-C to stop");
    rt.block_on(async {
        tokio::select! {
            r = server => r.context("server task")?.map_err(anyhow::Error::from),
            r = tokio::signal::ctrl_c() => r.context("waiting for Ctrl-C"),
        }
    })?;
    Ok(outcome)
}
