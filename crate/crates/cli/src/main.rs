use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tryon_core::backend::ipc::{serve_connection, serve_tcp};
use tryon_core::backend::{backend_from_selector, ToyBackend};
use tryon_core::error::StageExt;
use tryon_core::imageio::{load_mask, load_rgb, save_rgb};
use tryon_core::inpaint::GuidanceConfig;
use tryon_core::pipeline::{run_try_on, TryOnJob};
use tryon_core::{Result, TryOnError};

#[derive(Parser)]
#[command(name = "tryon", version, about = "Zero-shot virtual try-on")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dress the person in the garment.
    Run(RunArgs),
    /// Serve the toy backend over the wire protocol.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    person: PathBuf,
    #[arg(long)]
    person_mask: PathBuf,
    #[arg(long)]
    garment: PathBuf,
    #[arg(long)]
    garment_mask: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    /// `toy` or `ipc:tcp://host:port` / `ipc:stdio`.
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 15.0)]
    alpha_mea: f64,
    #[arg(long, default_value_t = 7.5)]
    alpha_text: f64,
    #[arg(long, default_value_t = 1.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.35)]
    stroke_frac: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.26)]
    t_feat_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    mls_alpha: f64,
    #[arg(long, value_name = "DIR")]
    save_intermediates: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on, e.g. `127.0.0.1:7878`.
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    listen: Option<String>,
    /// Serve a single connection on stdin/stdout.
    #[arg(long)]
    stdio: bool,
}

fn input<T>(what: &str, path: &Path, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
    load(path).map_err(|e| TryOnError::argument(format!("cannot read {what} {}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<()> {
    let person = input("person image", &args.person, |p| load_rgb(p))?;
    let person_mask = input("person mask", &args.person_mask, |p| load_mask(p))?;
    let garment = input("garment image", &args.garment, |p| load_rgb(p))?;
    let garment_mask = input("garment mask", &args.garment_mask, |p| load_mask(p))?;

    let mut job = TryOnJob::new(person, person_mask, garment, garment_mask, args.prompt);
    job.guidance = GuidanceConfig {
        alpha_mea: args.alpha_mea,
        alpha_text: args.alpha_text,
        stroke_fraction: args.stroke_frac,
        beta: args.beta,
    };
    job.seed = args.seed;
    job.steps = args.steps;
    job.t_feat_fraction = args.t_feat_frac;
    job.mls_alpha = args.mls_alpha;
    job.validate()?;

    let backend = backend_from_selector(&args.backend).stage("backend")?;
    let output = run_try_on(&job, backend.as_ref())?;
    save_rgb(&args.out, &output.image).stage("write output")?;
    if let Some(dir) = &args.save_intermediates {
        output.save_intermediates(dir).stage("write intermediates")?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let backend = ToyBackend::default();
    if args.stdio {
        let mut reader = BufReader::new(io::stdin().lock());
        let mut writer = BufWriter::new(io::stdout().lock());
        return serve_connection(&backend, &mut reader, &mut writer);
    }
    let listener = TcpListener::bind(args.listen.as_deref().unwrap_or_default())?;
    let mut stdout = io::stdout();
    writeln!(stdout, "listening on {}", listener.local_addr()?)?;
    stdout.flush()?;
    serve_tcp(&backend, listener)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
