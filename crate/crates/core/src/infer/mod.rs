//! Latent recovery from observed positions with frozen networks, and
//! evaluation helpers.

mod kmeans;

use std::f64::consts::PI;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpointed_rollout_grad, position_loss_value, RolloutGradOptions};
use crate::data::{Record, SceneConfig};
use crate::error::{Error, Result};
use crate::mpm::{
    self, ConstitutiveProvider, GridConfig, ParticleState, SimConfig, SimState, Trajectory,
};
use crate::neural::{init_latent, Latent, Model, NeuralProvider};
use crate::tensor3::Vec3;
use crate::train::{AdamW, OptimizerState};

pub use kmeans::{kmeans_latents, KMEANS_MAX_ITERS};

/// How the position error is reduced, reported next to every number.
pub const METRIC_DEFINITION: &str =
    "mean over frames (initial included) and particles of the squared Euclidean position error";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherForcing {
    Off,
    /// Reset period annealed from `start` to `end` steps over the epochs.
    Cosine {
        start: usize,
        end: usize,
    },
}

impl TeacherForcing {
    pub const DEFAULT_COSINE: TeacherForcing = TeacherForcing::Cosine {
        start: 25,
        end: 200,
    };

    /// Reset period for `epoch` of `total` epochs; `None` when off.
    pub fn period(&self, epoch: usize, total: usize) -> Option<usize> {
        match *self {
            TeacherForcing::Off => None,
            TeacherForcing::Cosine { start, end } => {
                let frac = if total <= 1 {
                    0.0
                } else {
                    epoch.min(total - 1) as f64 / (total - 1) as f64
                };
                let p =
                    start as f64 + (end as f64 - start as f64) * 0.5 * (1.0 - (PI * frac).cos());
                Some(p.round().max(1.0) as usize)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub lr_latent: f64,
    pub epochs: usize,
    pub kmeans_k: usize,
    pub teacher_forcing: TeacherForcing,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            lr_latent: 1e-3,
            epochs: 100,
            kmeans_k: 5,
            teacher_forcing: TeacherForcing::Off,
            seed: 0,
            checkpoint_interval: 20,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_latent > 0.0 && self.lr_latent.is_finite()) {
            return Err(Error::Config(format!(
                "lr_latent must be positive, got {}",
                self.lr_latent
            )));
        }
        if self.kmeans_k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        if let TeacherForcing::Cosine { start, end } = self.teacher_forcing {
            if start == 0 || start > end {
                return Err(Error::Config(format!(
                    "teacher forcing needs 0 < start <= end, got {start}..{end}"
                )));
            }
        }
        Ok(())
    }
}

/// What inference sees: the initial state, the simulation settings, and
/// observed positions per frame. Internal states are only present when
/// teacher forcing is wanted.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub initial: SimState,
    pub sim: SimConfig,
    pub positions: Vec<Vec<Vec3>>,
    pub states: Option<Vec<Vec<ParticleState>>>,
}

impl Observation {
    /// The first `steps` steps of a stored trajectory (all when `None`).
    pub fn from_record(rec: &Record, steps: Option<usize>, with_states: bool) -> Result<Self> {
        let t = &rec.trajectory;
        let steps = steps.unwrap_or(t.steps());
        if steps > t.steps() {
            return Err(Error::Argument(format!(
                "trajectory {} has {} steps, {steps} requested",
                rec.id,
                t.steps()
            )));
        }
        Ok(Observation {
            initial: rec.initial_state(),
            sim: SimConfig {
                steps,
                ..rec.sim_config()
            },
            positions: t.frames[..=steps]
                .iter()
                .map(|f| f.iter().map(|p| p.x).collect())
                .collect(),
            states: with_states.then(|| t.frames[..=steps].to_vec()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.initial.particles.len();
        if self.positions.len() != self.sim.steps + 1 {
            return Err(Error::Argument(format!(
                "{} observed frames for {} steps",
                self.positions.len(),
                self.sim.steps
            )));
        }
        if self.positions.iter().any(|f| f.len() != p) {
            return Err(Error::Argument(format!(
                "observed frames must all have {p} particles"
            )));
        }
        if let Some(s) = &self.states {
            if s.len() != self.positions.len() || s.iter().any(|f| f.len() != p) {
                return Err(Error::Argument(
                    "internal states do not match the observation".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Mean squared Euclidean distance per particle per frame.
pub fn reconstruction_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Argument(format!(
            "shape mismatch: {} vs {} frames",
            pred.len(),
            gt.len()
        )));
    }
    Ok(position_loss_value(pred, gt))
}

/// Position error of the neural rollout under `z`.
pub fn replay_error(obs: &Observation, model: &Model, z: &Latent) -> Result<f64> {
    let p = NeuralProvider::new(model, z.clone());
    let t = mpm::rollout(&obs.initial, &p, &obs.sim, false)?;
    reconstruction_error(&t.positions(), &obs.positions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub z: Latent,
    /// Loss of the iterate at each epoch, then of the final iterate.
    pub history: Vec<f64>,
    /// Loss of each starting candidate; `None` where the rollout diverged.
    pub candidate_losses: Vec<Option<f64>>,
    pub initial_loss: f64,
    /// Loss of the returned latent (the best seen).
    pub final_loss: f64,
    pub epochs: usize,
}

/// Picks the candidate with the lowest replay error, then runs AdamW on
/// the latent alone through the differentiable simulator. Returns the best
/// latent seen, so the final loss never exceeds the initial one.
pub fn infer_latent(
    obs: &Observation,
    model: &Model,
    candidates: &[Latent],
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    obs.validate()?;
    if candidates.is_empty() {
        return Err(Error::Argument("no starting latents".into()));
    }
    if cfg.teacher_forcing != TeacherForcing::Off && obs.states.is_none() {
        return Err(Error::Config(
            "teacher forcing needs ground-truth internal states".into(),
        ));
    }

    let candidate_losses: Vec<Option<f64>> = candidates
        .iter()
        .map(|z| match replay_error(obs, model, z) {
            Ok(l) if l.is_finite() => Some(l),
            Ok(_) => None,
            Err(e) if e.is_divergence() => {
                debug!("candidate discarded: {e}");
                None
            }
            Err(e) => {
                warn!("candidate failed: {e}");
                None
            }
        })
        .collect();
    let (start, initial_loss) = candidate_losses
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Numeric("every starting latent diverged".into()))?;
    info!("starting from candidate {start} with loss {initial_loss:.4e}");

    let opt = AdamW::new(cfg.lr_latent, 0.0);
    let mut z = candidates[start].to_tensor();
    let mut state = OptimizerState::new(std::slice::from_ref(&z));
    let mut best = (candidates[start].clone(), initial_loss);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let steps = obs.sim.steps;

    for epoch in 0..cfg.epochs {
        let period = cfg
            .teacher_forcing
            .period(epoch, cfg.epochs)
            .filter(|&p| p < steps);
        let latent = Latent::new(z.data.clone())?;
        let provider = NeuralProvider::new(model, latent.clone());
        let mask = provider.latent_only();
        let opts = RolloutGradOptions {
            checkpoint_interval: cfg.checkpoint_interval,
            teacher_forcing: period.map(|p| (p, obs.states.as_deref().expect("checked above"))),
            ..RolloutGradOptions::default()
        };
        let r = match checkpointed_rollout_grad(
            &obs.initial,
            &provider,
            &mask,
            &obs.sim,
            &obs.positions,
            &opts,
        ) {
            Ok(r) => r,
            Err(e) if e.is_divergence() => {
                warn!("epoch {epoch}: rollout diverged ({e}); keeping the best latent");
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = r.report.loss;
        history.push(loss);
        if period.is_none() && loss < best.1 {
            best = (latent, loss);
        }
        let g = &r.report.groups[0][0];
        if !g.is_finite() {
            warn!("epoch {epoch}: non-finite latent gradient; stopping");
            break;
        }
        debug!(
            "epoch {epoch}: loss {loss:.4e} |grad| {:.3e}",
            g.norm_squared().sqrt()
        );
        let mut params = [z];
        opt.step(&mut state, &mut params, std::slice::from_ref(g));
        [z] = params;
    }

    if history.len() == cfg.epochs {
        let last = Latent::new(z.data.clone())?;
        match replay_error(obs, model, &last) {
            Ok(l) => {
                history.push(l);
                if l < best.1 {
                    best = (last, l);
                }
            }
            Err(e) if e.is_divergence() => warn!("final iterate diverged: {e}"),
            Err(e) => return Err(e),
        }
    }
    info!("inference: {initial_loss:.4e} -> {:.4e}", best.1);
    Ok(InferenceResult {
        z: best.0,
        history,
        candidate_losses,
        initial_loss,
        final_loss: best.1,
        epochs: cfg.epochs,
    })
}

/// K-means centres of the codebook, as inference starting points.
pub fn initial_candidates(
    codebook: &crate::neural::LatentCodebook,
    k: usize,
    seed: u64,
) -> Result<Vec<Latent>> {
    let k = k.min(codebook.len());
    kmeans_latents(codebook, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Replay error of a standard-normal latent drawn from `seed`; `None` when
/// that rollout diverges.
pub fn random_latent_baseline(obs: &Observation, model: &Model, seed: u64) -> Result<Option<f64>> {
    let z = init_latent(&mut ChaCha8Rng::seed_from_u64(seed));
    match replay_error(obs, model, &z) {
        Ok(l) if l.is_finite() => Ok(Some(l)),
        Ok(_) => Ok(None),
        Err(e) if e.is_divergence() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Rollout of a (possibly new) scene under any provider, with supervision
/// tuples recorded so the result can be stored.
pub fn resimulate_with(
    provider: &dyn ConstitutiveProvider,
    scene: &SceneConfig,
    grid: &GridConfig,
    density: f64,
    sim: &SimConfig,
) -> Result<Trajectory> {
    let state = scene.initial_state(grid, density)?;
    mpm::rollout(&state, provider, sim, true)
}

/// Neural rollout of a scene under an inferred latent.
pub fn resimulate(
    model: &Model,
    z: &Latent,
    scene: &SceneConfig,
    grid: &GridConfig,
    density: f64,
    sim: &SimConfig,
) -> Result<Trajectory> {
    resimulate_with(
        &NeuralProvider::new(model, z.clone()),
        scene,
        grid,
        density,
        sim,
    )
}

/// Structured results file written by the command-line front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub trajectory_id: u64,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub random_baseline: Option<f64>,
    pub epochs: usize,
    pub z: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub candidate_losses: Vec<Option<f64>>,
    pub metric_definition: String,
}

impl InferenceReport {
    pub fn new(trajectory_id: u64, r: &InferenceResult, random_baseline: Option<f64>) -> Self {
        InferenceReport {
            trajectory_id,
            final_loss: r.final_loss,
            initial_loss: r.initial_loss,
            random_baseline,
            epochs: r.epochs,
            z: r.z.as_slice().to_vec(),
            loss_history: r.history.clone(),
            candidate_losses: r.candidate_losses.clone(),
            metric_definition: METRIC_DEFINITION.to_string(),
        }
    }

    pub fn latent(&self) -> Result<Latent> {
        Latent::new(self.z.clone())
    }
}
