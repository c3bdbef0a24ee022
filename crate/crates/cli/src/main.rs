mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_mpm::Error;

/// Dataset generation, training, latent inference and re-simulation for
/// the neural MPM material model.
///
/// Exit status: 0 success, 2 bad arguments or configuration, 3 numerical
/// divergence, 4 I/O or file-format error. UNIPHY_THREADS caps the worker
/// thread count.
#[derive(Parser, Debug)]
#[command(name = "latent-mpm", version)]
pub struct Cli {
    /// `key = value` file supplying defaults for the subcommand's flags
    /// (keys are flag names without the dashes).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate ground-truth trajectories and write a dataset file.
    GenData(GenDataArgs),
    /// Fit the networks and per-trajectory latents to a dataset.
    Train(TrainArgs),
    /// Recover a latent from observed positions with the networks frozen.
    Infer(InferArgs),
    /// Roll out a scene with a latent under new conditions.
    Resim(ResimArgs),
    /// Reconstruction error between predicted and ground-truth trajectories.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Comma-separated material names or `all` [default: all].
    #[arg(long)]
    pub materials: Option<String>,
    /// Trajectories per material [default: 4].
    #[arg(long)]
    pub per_material: Option<usize>,
    /// Steps per trajectory [default: 100].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Particle budget per trajectory [default: 512].
    #[arg(long)]
    pub particles: Option<usize>,
    /// Grid nodes per axis [default: 16].
    #[arg(long)]
    pub grid: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Id of the first trajectory [default: 0].
    #[arg(long)]
    pub first_id: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every trajectory's positions as CSV into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: 500]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Rows per optimiser step [default: 256].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Latent prior standard deviation [default: 1].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr_weights: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    pub lr_latents: Option<f64>,
    /// Final learning rate as a fraction of the initial one [default: 0.01].
    #[arg(long)]
    pub lr_final_fraction: Option<f64>,
    /// Decoupled weight decay on network weights [default: 0.01].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Supervision rows drawn per trajectory each epoch [default: 256].
    #[arg(long)]
    pub samples_per_trajectory: Option<usize>,
    /// Stress normalisation [default: RMS stress entry of the dataset].
    #[arg(long)]
    pub stress_scale: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint written at the end (and every `--checkpoint-every` epochs).
    #[arg(long)]
    pub ckpt_out: Option<PathBuf>,
    /// [default: 0, only at the end]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Per-epoch loss table [default: checkpoint path with `.loss.csv`].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset file holding the observed trajectory.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Trajectory id inside `--obs` [default: first record].
    #[arg(long)]
    pub id: Option<u64>,
    /// Observed steps [default: all].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of k-means starting points [default: 5].
    #[arg(long)]
    pub k: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Latent learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// `off` or `cosine` [default: off].
    #[arg(long)]
    pub teacher_forcing: Option<String>,
    /// Drop internal states from the observation.
    #[arg(long)]
    pub positions_only: bool,
    /// Seeds k-means and the random-latent baseline [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ResimArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Results file from `infer` supplying the latent.
    #[arg(long, conflicts_with = "latent_id")]
    pub latent: Option<PathBuf>,
    /// Use the checkpoint's latent for this trajectory id instead.
    #[arg(long)]
    pub latent_id: Option<u64>,
    /// Dataset file holding the source scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Source trajectory id [default: first record].
    #[arg(long)]
    pub id: Option<u64>,
    /// [default: source step count]
    #[arg(long)]
    pub steps: Option<usize>,
    /// New linear velocity `x,y,z`.
    #[arg(long)]
    pub velocity: Option<String>,
    /// New angular velocity `x,y,z`.
    #[arg(long)]
    pub angular: Option<String>,
    /// New centre `x,y,z`.
    #[arg(long)]
    pub center: Option<String>,
    /// New shape: `box:a,b,c`, `sphere:r` or `cylinder:r,h`.
    #[arg(long)]
    pub geometry: Option<String>,
    /// [default: source step, reduced if the new scene needs it]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Output dataset file with the single re-simulated trajectory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also export positions as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted trajectories (dataset file).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth trajectories (dataset file); matched by id.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Export predicted positions as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_divergence() {
        return 3;
    }
    match e {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::BadVersion(_)
        | Error::Crc { .. }
        | Error::Truncated(_) => 4,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("UNIPHY_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "UNIPHY_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = configure_threads().and_then(|_| commands::run(cli));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
