//! Joint supervised fitting of both networks and the per-trajectory latents.

mod optim;

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neural::{
    project_on_tape, stress_on_tape, Checkpoint, LatentCodebook, Model, ModelVars,
};
use crate::tensor3::Mat3;

pub use optim::{AdamW, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_weights: f64,
    pub lr_latents: f64,
    /// Both learning rates follow a cosine from 1 down to this fraction
    /// over `epochs`.
    pub lr_final_fraction: f64,
    /// Prior standard deviation of the latents.
    pub sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled decay on network weights; latents are only held by the prior.
    pub weight_decay: f64,
    /// Supervision rows drawn per trajectory per epoch.
    pub samples_per_trajectory: usize,
    /// Stress normalisation; `None` uses the RMS stress entry of the dataset.
    pub stress_scale: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_weights: 1e-3,
            lr_latents: 1e-2,
            lr_final_fraction: 1e-2,
            sigma: 1.0,
            batch_size: 256,
            epochs: 500,
            weight_decay: 1e-2,
            samples_per_trajectory: 256,
            stress_scale: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_weights", self.lr_weights),
            ("lr_latents", self.lr_latents),
            ("sigma", self.sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "lr_final_fraction must be in (0, 1], got {}",
                self.lr_final_fraction
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.samples_per_trajectory == 0 {
            return Err(Error::Config(
                "batch size and sample count must be positive".into(),
            ));
        }
        if let Some(s) = self.stress_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "stress scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Supervision rows; `rows[i]` indexes the latent table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub f: Vec<Mat3>,
    pub f_proj: Vec<Mat3>,
    pub c: Vec<Mat3>,
    pub s: Vec<Mat3>,
    pub rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub f_proj: f64,
    pub stress: f64,
    pub reg: f64,
}

struct LossVars {
    total: Var,
    f_proj: Var,
    stress: Var,
    reg: Var,
}

/// Mean squared projection error, mean squared stress error in units of
/// the model's stress scale, and `mean ‖z‖² / σ²` over the batch rows.
fn loss_on_tape(
    model: &Model,
    tape: &mut Tape,
    vars: &ModelVars,
    table: Var,
    batch: &Batch,
    sigma: f64,
) -> Result<LossVars> {
    let n = batch.len() as f64;
    let z = tape.gather_rows(table, batch.rows.clone());
    let f = tape.constant(Tensor::from_mat3s(&batch.f));
    let fp_gt = tape.constant(Tensor::from_mat3s(&batch.f_proj));
    let c = tape.constant(Tensor::from_mat3s(&batch.c));
    let s_gt = tape.constant(Tensor::from_mat3s(&batch.s));

    // the stress network sees the ground-truth projection
    let fp = project_on_tape(model, tape, &vars.projection, f, z)?;
    let s = stress_on_tape(model, tape, &vars.stress, fp_gt, c, z)?;

    let dp = tape.sub(fp, fp_gt);
    let dp = tape.square(dp);
    let lp = tape.sum(dp);
    let lp = tape.scale(lp, 1.0 / n);

    let ds = tape.sub(s, s_gt);
    let ds = tape.scale(ds, 1.0 / model.stress_scale);
    let ds = tape.square(ds);
    let ls = tape.sum(ds);
    let ls = tape.scale(ls, 1.0 / n);

    let zz = tape.square(z);
    let lr = tape.sum(zz);
    let lr = tape.scale(lr, 1.0 / (n * sigma * sigma));

    let t = tape.add(lp, ls);
    let total = tape.add(t, lr);
    Ok(LossVars {
        total,
        f_proj: lp,
        stress: ls,
        reg: lr,
    })
}

fn parts(tape: &Tape, v: &LossVars) -> LossParts {
    LossParts {
        total: tape.value(v.total).item(),
        f_proj: tape.value(v.f_proj).item(),
        stress: tape.value(v.stress).item(),
        reg: tape.value(v.reg).item(),
    }
}

/// Loss value only. `latents` is the `[M, 32]` table indexed by `batch.rows`.
pub fn loss_joint(model: &Model, latents: &Tensor, batch: &Batch, sigma: f64) -> Result<LossParts> {
    if batch.is_empty() {
        return Ok(LossParts::default());
    }
    let mut tape = Tape::new();
    let vars = ModelVars::register(model, &mut tape, false);
    let table = tape.constant(latents.clone());
    let l = loss_on_tape(model, &mut tape, &vars, table, batch, sigma)?;
    Ok(parts(&tape, &l))
}

/// Loss with gradients for every network tensor (in [`Model::tensors`]
/// order) and for the latent table.
pub fn loss_joint_grad(
    model: &Model,
    latents: &Tensor,
    batch: &Batch,
    sigma: f64,
) -> Result<(LossParts, Vec<Tensor>, Tensor)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(model, &mut tape, true);
    let table = tape.leaf(latents.clone());
    let l = loss_on_tape(model, &mut tape, &vars, table, batch, sigma)?;
    let mut g = tape.backward_scalar(l.total)?;
    let weights = vars
        .flat()
        .into_iter()
        .zip(model.tensors())
        .map(|(v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
        .collect();
    let zg = g
        .take(table)
        .unwrap_or_else(|| Tensor::zeros(latents.rows, latents.cols));
    Ok((parts(&tape, &l), weights, zg))
}

/// Root mean square of every stress entry in the dataset.
pub fn stress_rms(ds: &Dataset) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in &ds.records {
        for t in r.trajectory.tuples.iter().flatten() {
            sum += t.s.0.iter().map(|v| v * v).sum::<f64>();
            n += 9;
        }
    }
    if n == 0 || sum == 0.0 {
        1.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossParts,
}

/// `epoch,loss_total,loss_Fproj,loss_S,loss_reg`
pub fn write_loss_csv(history: &[EpochLoss], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,loss_total,loss_Fproj,loss_S,loss_reg")?;
    for e in history {
        let l = &e.loss;
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, l.total, l.f_proj, l.stress, l.reg
        )?;
    }
    Ok(())
}

/// One supervision row: trajectory index, step, particle.
type SampleRef = (usize, usize, usize);

/// Training state; [`Trainer::run_epoch`] advances it by one epoch.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    pub model: Model,
    pub codebook: LatentCodebook,
    /// Latent table row for each dataset record.
    record_rows: Vec<usize>,
    weights_opt: OptimizerState,
    latents_opt: OptimizerState,
    pub step: u64,
    pub history: Vec<EpochLoss>,
}

impl<'a> Trainer<'a> {
    /// Fresh model and latents drawn from `cfg.seed`, or continues from
    /// `resume`. Optimiser moments always start at zero.
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig, resume: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        if dataset.is_empty() || dataset.records.iter().all(|r| r.trajectory.steps() == 0) {
            return Err(Error::Argument(
                "training needs a dataset with at least one step".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut model, mut codebook, step) = match resume {
            Some(ck) => (ck.model, ck.codebook, ck.step),
            None => {
                let model = Model::init(&mut rng);
                (model, LatentCodebook::new(), 0)
            }
        };
        if step == 0 {
            model.stress_scale = cfg.stress_scale.unwrap_or_else(|| stress_rms(dataset));
        } else if let Some(s) = cfg.stress_scale {
            model.stress_scale = s;
        }
        for id in dataset.ids() {
            if codebook.get(id).is_none() {
                codebook
                    .entries
                    .insert(id, crate::neural::init_latent(&mut rng));
            }
        }
        let ids = codebook.ids();
        let record_rows = dataset
            .records
            .iter()
            .map(|r| ids.binary_search(&r.id).expect("latent allocated"))
            .collect();
        let weights_opt = OptimizerState::new(&model.tensors());
        let latents_opt = OptimizerState::new(&[codebook.to_tensor()]);
        Ok(Trainer {
            dataset,
            cfg,
            model,
            codebook,
            record_rows,
            weights_opt,
            latents_opt,
            step,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Learning-rate multiplier for `epoch` of this run; epochs past the
    /// configured count stay at the final fraction.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let lo = self.cfg.lr_final_fraction;
        if self.cfg.epochs <= 1 {
            return 1.0;
        }
        let t = (epoch as f64 / (self.cfg.epochs - 1) as f64).min(1.0);
        lo + (1.0 - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn draw_samples(&self, rng: &mut impl Rng) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for (ri, r) in self.dataset.records.iter().enumerate() {
            let t = &r.trajectory;
            let (steps, p) = (t.steps(), t.num_particles());
            if steps == 0 || p == 0 {
                continue;
            }
            for _ in 0..self.cfg.samples_per_trajectory.min(steps * p) {
                out.push((ri, rng.random_range(0..steps), rng.random_range(0..p)));
            }
        }
        out.shuffle(rng);
        out
    }

    fn batch(&self, refs: &[SampleRef]) -> Batch {
        let mut b = Batch::default();
        for &(ri, t, p) in refs {
            let tu = &self.dataset.records[ri].trajectory.tuples[t][p];
            b.f.push(tu.f);
            b.f_proj.push(tu.f_proj);
            b.c.push(tu.c);
            b.s.push(tu.s);
            b.rows.push(self.record_rows[ri]);
        }
        b
    }

    /// Shuffled pass over freshly drawn rows. Returns the batch-size
    /// weighted mean of the losses seen before each update.
    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.history.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step.wrapping_add(1));
        let samples = self.draw_samples(&mut rng);
        let f = self.lr_factor(epoch);
        let w_opt = AdamW::new(self.cfg.lr_weights * f, self.cfg.weight_decay);
        let z_opt = AdamW::new(self.cfg.lr_latents * f, 0.0);
        let mut acc = LossParts::default();
        for (bi, chunk) in samples.chunks(self.cfg.batch_size).enumerate() {
            let batch = self.batch(chunk);
            let table = self.codebook.to_tensor();
            let (l, wg, zg) = loss_joint_grad(&self.model, &table, &batch, self.cfg.sigma)?;
            if !l.total.is_finite() || !wg.iter().all(Tensor::is_finite) || !zg.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            let mut params = self.model.tensors();
            w_opt.step(&mut self.weights_opt, &mut params, &wg);
            self.model.set_tensors(&params);
            let mut zt = [table];
            z_opt.step(&mut self.latents_opt, &mut zt, &[zg]);
            self.codebook.set_from_tensor(&zt[0])?;
            self.step += 1;
            let w = batch.len() as f64;
            acc.total += w * l.total;
            acc.f_proj += w * l.f_proj;
            acc.stress += w * l.stress;
            acc.reg += w * l.reg;
        }
        let n = samples.len().max(1) as f64;
        let loss = LossParts {
            total: acc.total / n,
            f_proj: acc.f_proj / n,
            stress: acc.stress / n,
            reg: acc.reg / n,
        };
        let e = EpochLoss { epoch, loss };
        info!(
            "epoch {epoch}: total {:.4e} (F_proj {:.3e}, S {:.3e}, reg {:.3e})",
            loss.total, loss.f_proj, loss.stress, loss.reg
        );
        self.history.push(e);
        Ok(e)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            codebook: self.codebook.clone(),
            step: self.step,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub codebook: LatentCodebook,
    pub history: Vec<EpochLoss>,
    pub step: u64,
}

/// Runs `cfg.epochs` epochs from scratch.
pub fn train_loop(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, cfg.clone(), None)?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(TrainOutcome {
        model: t.model,
        codebook: t.codebook,
        history: t.history,
        step: t.step,
    })
}

#[cfg(test)]
mod tests;
