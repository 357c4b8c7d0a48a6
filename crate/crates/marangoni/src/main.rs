use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use marangoni::driver::{
    load_scene, summarize_diagnostics, write_samples_csv, write_surface_obj, SceneConfig,
    Simulation,
};
use marangoni::Result;

#[derive(Parser)]
#[command(name = "marangoni", version, about = "MPM simulation of free surfaces with spatially varying surface tension")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scene, writing one particle dump per frame and per-step diagnostics
    Run {
        /// Scene description (JSON)
        #[arg(long)]
        scene: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Override the frame count from the scene
        #[arg(long)]
        frames: Option<usize>,
        /// Force single-threaded execution. Runs are bitwise reproducible at
        /// any thread count; this exists to rule the pool out when bisecting.
        #[arg(long)]
        deterministic: bool,
        /// Surface samples carry no momentum (comparison mode, breaks
        /// conservation)
        #[arg(long)]
        massless_mode: bool,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Reconstruct the initial surface and write the mesh and its samples
    SampleSurface {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the diagnostics of a finished run
    Diag {
        /// Run output directory (or a diagnostics CSV directly)
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { scene, out, frames, deterministic, massless_mode, threads } => {
            let threads = if deterministic { Some(1) } else { threads };
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| marangoni::Error::Scene(format!("thread pool: {e}")))?;
            }
            let mut config = load_scene(&scene)?;
            config.massless_mode |= massless_mode;
            run_scene(&config, &out, frames)
        }
        Cmd::SampleSurface { scene, out } => {
            let config = load_scene(&scene)?;
            sample_scene(&config, &out)
        }
        Cmd::Diag { input } => {
            let path = if input.is_dir() { input.join("diagnostics.csv") } else { input };
            print!("{}", summarize_diagnostics(&path)?);
            Ok(())
        }
    }
}

fn run_scene(config: &SceneConfig, out: &Path, frames: Option<usize>) -> Result<()> {
    match config.dimension {
        2 => Simulation::<2>::from_scene(config)?.run(config, out, frames),
        _ => Simulation::<3>::from_scene(config)?.run(config, out, frames),
    }
}

fn sample_scene(config: &SceneConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match config.dimension {
        2 => {
            let sim = Simulation::<2>::from_scene(config)?;
            let (mesh, samples) = sim.sample_surface_now()?;
            write_surface_obj(&out.join("surface.obj"), &mesh)?;
            write_samples_csv(&out.join("samples.csv"), &samples)?;
            println!("{} surface elements, {} samples", mesh.elems.len(), samples.len());
        }
        _ => {
            let sim = Simulation::<3>::from_scene(config)?;
            let (mesh, samples) = sim.sample_surface_now()?;
            write_surface_obj(&out.join("surface.obj"), &mesh)?;
            write_samples_csv(&out.join("samples.csv"), &samples)?;
            println!("{} surface elements, {} samples", mesh.elems.len(), samples.len());
        }
    }
    Ok(())
}
