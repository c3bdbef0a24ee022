use super::tape::{CustomOp, Tape, Var};
use super::tensor::Tensor;
use super::GradReport;
use crate::error::{Error, Result};
use crate::mpm::{
    transfer, transfer_vjp, GridConfig, ParticleState, SimConfig, SimState, TransferInputs,
};
use crate::tensor3::{Mat3, Vec3};

/// Constitutive model expressed on a tape, so rollouts can be
/// differentiated with respect to its parameters.
pub trait DiffProvider: Sync {
    /// Parameter tensors in a fixed order; may be empty.
    fn parameters(&self) -> Vec<Tensor>;

    /// `f: [N, 9] -> F_proj: [N, 9]`; `params` mirrors [`Self::parameters`].
    fn project(&self, tape: &mut Tape, params: &[Var], f: Var, dt: f64) -> Result<Var>;

    /// `(F_proj, C): [N, 9] -> S: [N, 9]` (Cauchy stress).
    fn stress(&self, tape: &mut Tape, params: &[Var], f_proj: Var, c: Var) -> Result<Var>;
}

/// Particle state on a tape: `x, v: [N, 3]`, `c, f: [N, 9]`.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub x: Var,
    pub v: Var,
    pub c: Var,
    pub f: Var,
}

impl StateVars {
    fn vars(&self) -> [Var; 4] {
        [self.x, self.v, self.c, self.f]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StateTensors {
    x: Tensor,
    v: Tensor,
    c: Tensor,
    f: Tensor,
}

impl StateTensors {
    fn from_particles(ps: &[ParticleState]) -> Self {
        StateTensors {
            x: Tensor::from_vec3s(&ps.iter().map(|p| p.x).collect::<Vec<_>>()),
            v: Tensor::from_vec3s(&ps.iter().map(|p| p.v).collect::<Vec<_>>()),
            c: Tensor::from_mat3s(&ps.iter().map(|p| p.c).collect::<Vec<_>>()),
            f: Tensor::from_mat3s(&ps.iter().map(|p| p.f).collect::<Vec<_>>()),
        }
    }

    fn register(&self, tape: &mut Tape, differentiable: bool) -> StateVars {
        let mut put = |t: &Tensor| {
            if differentiable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        StateVars {
            x: put(&self.x),
            v: put(&self.v),
            c: put(&self.c),
            f: put(&self.f),
        }
    }

    fn read(tape: &Tape, s: &StateVars) -> Self {
        StateTensors {
            x: tape.value(s.x).clone(),
            v: tape.value(s.v).clone(),
            c: tape.value(s.c).clone(),
            f: tape.value(s.f).clone(),
        }
    }
}

/// Grid transfer as a tape op: inputs `(x, v, C, τ)`, output `[N, 12]`
/// holding the new velocity and affine matrix.
pub struct TransferOp {
    grid: GridConfig,
    dt: f64,
    gravity: Vec3,
    mass: Vec<f64>,
    volume: Vec<f64>,
}

impl TransferOp {
    fn run(&self, x: &Tensor, v: &Tensor, c: &Tensor, tau: &Tensor) -> Result<Tensor> {
        let (xs, vs, cs, ts) = (x.to_vec3s(), v.to_vec3s(), c.to_mat3s(), tau.to_mat3s());
        let inp = TransferInputs {
            x: &xs,
            v: &vs,
            c: &cs,
            tau: &ts,
            mass: &self.mass,
            volume: &self.volume,
        };
        let (vn, cn) = transfer(&self.grid, self.dt, self.gravity, &inp)?;
        let mut data = Vec::with_capacity(vn.len() * 12);
        for (v, c) in vn.iter().zip(&cn) {
            data.extend_from_slice(&v.to_array());
            data.extend_from_slice(&c.0);
        }
        Ok(Tensor::new(vn.len(), 12, data))
    }
}

impl CustomOp for TransferOp {
    fn name(&self) -> &'static str {
        "mpm_transfer"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (xs, vs, cs, ts) = (
            inputs[0].to_vec3s(),
            inputs[1].to_vec3s(),
            inputs[2].to_mat3s(),
            inputs[3].to_mat3s(),
        );
        let inp = TransferInputs {
            x: &xs,
            v: &vs,
            c: &cs,
            tau: &ts,
            mass: &self.mass,
            volume: &self.volume,
        };
        let n = grad.rows;
        let v_bar: Vec<Vec3> = (0..n)
            .map(|r| {
                let g = grad.row(r);
                Vec3::new(g[0], g[1], g[2])
            })
            .collect();
        let c_bar: Vec<Mat3> = (0..n)
            .map(|r| Mat3::from_slice(&grad.row(r)[3..12]))
            .collect();
        let g = transfer_vjp(&self.grid, self.dt, self.gravity, &inp, &v_bar, &c_bar)?;
        Ok(vec![
            Tensor::from_vec3s(&g.x),
            Tensor::from_vec3s(&g.v),
            Tensor::from_mat3s(&g.c),
            Tensor::from_mat3s(&g.tau),
        ])
    }
}

/// One MPM step on the tape. Mirrors [`crate::mpm::step`] operation for
/// operation, so both produce bitwise-identical states.
#[allow(clippy::too_many_arguments)]
pub fn diff_step(
    tape: &mut Tape,
    provider: &dyn DiffProvider,
    params: &[Var],
    s: StateVars,
    grid: &GridConfig,
    sim: &SimConfig,
    mass: &[f64],
    volume: &[f64],
) -> Result<StateVars> {
    let dt = sim.dt;
    let fp = provider.project(tape, params, s.f, dt)?;
    let stress = provider.stress(tape, params, fp, s.c)?;
    let j = tape.det3(fp);
    if let Some(&bad) = tape.value(j).data.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::SingularDeformation { det: bad });
    }
    let tau = tape.mul(stress, j);
    let op = TransferOp {
        grid: *grid,
        dt,
        gravity: sim.gravity,
        mass: mass.to_vec(),
        volume: volume.to_vec(),
    };
    let out = op.run(
        tape.value(s.x),
        tape.value(s.v),
        tape.value(s.c),
        tape.value(tau),
    )?;
    let out = tape.custom(Box::new(op), vec![s.x, s.v, s.c, tau], out);
    let v = tape.slice(out, 0, 3);
    let c = tape.slice(out, 3, 9);
    let dx = tape.scale(v, dt);
    let moved = tape.add(s.x, dx);
    let (lo, hi) = grid.interior();
    let x = tape.clamp_range(moved, lo, hi);
    let cdt = tape.scale(c, dt);
    let eye = tape.constant(Tensor::identity3());
    let a = tape.add(cdt, eye);
    let f = tape.matmul3(a, fp);
    Ok(StateVars { x, v, c, f })
}

/// Settings for [`checkpointed_rollout_grad`].
#[derive(Clone, Debug)]
pub struct RolloutGradOptions<'a> {
    /// Steps between stored states; the forward is recomputed in between.
    pub checkpoint_interval: usize,
    pub max_steps: usize,
    /// Also return adjoints of the initial `(x, v, C, F)`.
    pub grad_initial_state: bool,
    /// Reset to these ground-truth frames every `period` steps; no adjoint
    /// crosses a reset.
    pub teacher_forcing: Option<(usize, &'a [Vec<ParticleState>])>,
}

impl Default for RolloutGradOptions<'_> {
    fn default() -> Self {
        RolloutGradOptions {
            checkpoint_interval: 20,
            max_steps: 10_000,
            grad_initial_state: false,
            teacher_forcing: None,
        }
    }
}

/// Loss, gradients and the simulated positions of a differentiated rollout.
#[derive(Clone, Debug)]
pub struct RolloutGrad {
    /// `groups[0]` mirrors the provider parameters (zeros where frozen);
    /// `groups[1]`, when requested, holds the initial `x, v, C, F`.
    pub report: GradReport,
    pub positions: Vec<Vec<Vec3>>,
}

/// Mean over frames and particles of `‖x − x_target‖²`.
pub fn position_loss_value(pred: &[Vec<Vec3>], target: &[Vec<Vec3>]) -> f64 {
    let n: usize = pred.iter().map(Vec::len).sum();
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (*p - *q).norm_squared()))
        .sum();
    s / n as f64
}

struct Segment {
    start: usize,
    end: usize,
    /// Starts from a ground-truth reset rather than the previous segment.
    reset: bool,
}

struct SegmentRun {
    tape: Tape,
    params: Vec<Var>,
    start: StateVars,
    end: StateVars,
    loss: Var,
    frames: Vec<Vec<Vec3>>,
}

struct Ctx<'a> {
    provider: &'a dyn DiffProvider,
    param_values: Vec<Tensor>,
    trainable: &'a [bool],
    grid: GridConfig,
    sim: &'a SimConfig,
    mass: Vec<f64>,
    volume: Vec<f64>,
    target: &'a [Vec<Vec3>],
    norm: f64,
}

impl Ctx<'_> {
    fn frame_loss(&self, tape: &mut Tape, x: Var, t: usize) -> Var {
        let gt = tape.constant(Tensor::from_vec3s(&self.target[t]));
        let d = tape.sub(x, gt);
        let sq = tape.square(d);
        tape.sum(sq)
    }

    fn run(&self, seg: &Segment, start: &StateTensors, start_grad: bool) -> Result<SegmentRun> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .param_values
            .iter()
            .zip(self.trainable)
            .map(|(t, &on)| {
                if on {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let s0 = start.register(&mut tape, start_grad);
        let mut s = s0;
        let mut loss = if seg.start == 0 {
            self.frame_loss(&mut tape, s.x, 0)
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let mut frames = Vec::with_capacity(seg.end - seg.start);
        let h = self.grid.h();
        for t in seg.start..seg.end {
            let vmax = tape
                .value(s.v)
                .to_vec3s()
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.norm()));
            if !vmax.is_finite() {
                return Err(Error::Divergence { step: t });
            }
            if vmax > 0.0 && self.sim.dt > crate::mpm::CFL_LIMIT * h / vmax {
                return Err(Error::Cfl {
                    step: t,
                    dt: self.sim.dt,
                    bound: crate::mpm::CFL_LIMIT * h / vmax,
                });
            }
            s = diff_step(
                &mut tape,
                self.provider,
                &params,
                s,
                &self.grid,
                self.sim,
                &self.mass,
                &self.volume,
            )
            .map_err(|e| match e {
                Error::Cfl { .. } | Error::OutOfDomain { .. } => e,
                _ => Error::Divergence { step: t },
            })?;
            let st = StateTensors::read(&tape, &s);
            if !(st.x.is_finite() && st.v.is_finite() && st.c.is_finite() && st.f.is_finite()) {
                return Err(Error::Divergence { step: t });
            }
            frames.push(st.x.to_vec3s());
            let fl = self.frame_loss(&mut tape, s.x, t + 1);
            loss = tape.add(loss, fl);
        }
        let loss = tape.scale(loss, self.norm);
        Ok(SegmentRun {
            tape,
            params,
            start: s0,
            end: s,
            loss,
            frames,
        })
    }
}

/// Gradient of the position loss ([`position_loss_value`] against
/// `target`, which holds `steps + 1` frames) through a whole rollout.
///
/// Only states at segment boundaries are kept; each segment's forward is
/// recomputed during the backward sweep.
pub fn checkpointed_rollout_grad(
    initial: &SimState,
    provider: &dyn DiffProvider,
    trainable: &[bool],
    sim: &SimConfig,
    target: &[Vec<Vec3>],
    opts: &RolloutGradOptions<'_>,
) -> Result<RolloutGrad> {
    sim.validate()?;
    initial.validate()?;
    let steps = sim.steps;
    let np = initial.particles.len();
    if steps > opts.max_steps {
        return Err(Error::Argument(format!(
            "{steps} steps exceed the limit of {}",
            opts.max_steps
        )));
    }
    if opts.checkpoint_interval == 0 {
        return Err(Error::Argument(
            "checkpoint interval must be positive".into(),
        ));
    }
    if target.len() != steps + 1 || target.iter().any(|f| f.len() != np) {
        return Err(Error::Argument(format!(
            "target needs {} frames of {np} particles",
            steps + 1
        )));
    }
    let param_values = provider.parameters();
    if trainable.len() != param_values.len() {
        return Err(Error::Argument(
            "trainable mask does not match provider parameters".into(),
        ));
    }
    if let Some((period, states)) = opts.teacher_forcing {
        if period == 0 {
            return Err(Error::Argument(
                "teacher-forcing period must be positive".into(),
            ));
        }
        if states.len() != steps + 1 || states.iter().any(|f| f.len() != np) {
            return Err(Error::Config(
                "teacher forcing needs a full ground-truth state per step".into(),
            ));
        }
    }

    let mut segments = Vec::new();
    let mut t = 0;
    while t < steps {
        let mut end = (t / opts.checkpoint_interval + 1) * opts.checkpoint_interval;
        if let Some((period, _)) = opts.teacher_forcing {
            end = end.min((t / period + 1) * period);
        }
        let end = end.min(steps);
        let reset = matches!(opts.teacher_forcing, Some((p, _)) if t > 0 && t % p == 0);
        segments.push(Segment {
            start: t,
            end,
            reset,
        });
        t = end;
    }

    let ctx = Ctx {
        provider,
        param_values,
        trainable,
        grid: initial.grid,
        sim,
        mass: initial.particles.iter().map(|p| p.mass).collect(),
        volume: initial.particles.iter().map(|p| p.volume0).collect(),
        target,
        norm: 1.0 / ((steps + 1) * np) as f64,
    };
    let start_grad = |i: usize, seg: &Segment| {
        if i == 0 {
            opts.grad_initial_state
        } else {
            !seg.reset
        }
    };

    // forward: keep segment start states, the loss, and the last tape
    let mut starts = Vec::with_capacity(segments.len());
    let mut positions = vec![initial.positions()];
    let mut loss = 0.0;
    let mut state = StateTensors::from_particles(&initial.particles);
    let mut last_run = None;
    if segments.is_empty() {
        loss = position_loss_value(&positions, target);
    }
    for (i, seg) in segments.iter().enumerate() {
        if seg.reset {
            let (_, states) = opts.teacher_forcing.expect("reset without teacher forcing");
            state = StateTensors::from_particles(&states[seg.start]);
        }
        let run = ctx.run(seg, &state, start_grad(i, seg))?;
        loss += run.tape.value(run.loss).item();
        positions.extend(run.frames.iter().cloned());
        starts.push(state);
        state = StateTensors::read(&run.tape, &run.end);
        if i + 1 == segments.len() {
            last_run = Some(run);
        }
    }

    // backward over segments in reverse
    let mut param_grads: Vec<Tensor> = ctx
        .param_values
        .iter()
        .map(|t| Tensor::zeros(t.rows, t.cols))
        .collect();
    let mut carried: Option<[Tensor; 4]> = None;
    let mut initial_grads = None;
    for (i, seg) in segments.iter().enumerate().rev() {
        let run = match last_run.take() {
            Some(r) => r,
            None => ctx.run(seg, &starts[i], start_grad(i, seg))?,
        };
        let mut seeds = vec![(run.loss, Tensor::scalar(1.0))];
        if let Some(adj) = carried.take() {
            for (v, g) in run.end.vars().into_iter().zip(adj) {
                seeds.push((v, g));
            }
        }
        let grads = run.tape.backward(&seeds)?;
        for ((acc, &p), &on) in param_grads.iter_mut().zip(&run.params).zip(trainable) {
            if on {
                if let Some(g) = grads.get(p) {
                    acc.add_assign(g);
                }
            }
        }
        if start_grad(i, seg) {
            let st = &starts[i];
            let adj = [
                grads.get_or_zeros(run.start.x, &st.x),
                grads.get_or_zeros(run.start.v, &st.v),
                grads.get_or_zeros(run.start.c, &st.c),
                grads.get_or_zeros(run.start.f, &st.f),
            ];
            if i == 0 {
                initial_grads = Some(adj);
            } else {
                carried = Some(adj);
            }
        }
    }
    if opts.grad_initial_state && initial_grads.is_none() {
        // no steps: only frame 0 contributes
        let st = StateTensors::from_particles(&initial.particles);
        let mut gx = Tensor::zeros(np, 3);
        for (r, (p, q)) in initial.positions().iter().zip(&target[0]).enumerate() {
            let d = (*p - *q) * (2.0 * ctx.norm);
            gx.row_mut(r).copy_from_slice(&d.to_array());
        }
        initial_grads = Some([
            gx,
            Tensor::zeros(np, 3),
            Tensor::zeros(st.c.rows, 9),
            Tensor::zeros(st.f.rows, 9),
        ]);
    }

    let mut groups = vec![param_grads];
    if let Some(g) = initial_grads {
        groups.push(g.to_vec());
    }
    Ok(RolloutGrad {
        report: GradReport::from_groups(loss, groups),
        positions,
    })
}
