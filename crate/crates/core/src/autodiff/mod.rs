//! Reverse-mode differentiation over batched tensors, with a differentiable
//! MPM step and checkpointed gradients through whole rollouts.

mod analytic;
mod rollout;
mod svd;
mod tape;
mod tensor;

pub use rollout::{
    checkpointed_rollout_grad, diff_step, position_loss_value, DiffProvider, RolloutGrad,
    RolloutGradOptions, StateVars, TransferOp,
};
pub use svd::{svd3_vjp, SVD_GAP_EPS};
pub use tape::{gelu, gelu_grad, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Gradients of a scalar program with respect to groups of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    /// Same nesting and shapes as the parameter groups passed in.
    pub groups: Vec<Vec<Tensor>>,
    pub finite: bool,
    pub max_abs: f64,
}

impl GradReport {
    pub fn from_groups(loss: f64, groups: Vec<Vec<Tensor>>) -> Self {
        let finite = loss.is_finite() && groups.iter().flatten().all(Tensor::is_finite);
        let max_abs = groups
            .iter()
            .flatten()
            .fold(0.0_f64, |m, t| m.max(t.max_abs()));
        GradReport {
            loss,
            groups,
            finite,
            max_abs,
        }
    }
}

/// Runs `program` on a fresh tape with every parameter registered as a
/// leaf, then differentiates the scalar it returns.
pub fn grad<P>(groups: &[Vec<Tensor>], program: P) -> Result<GradReport>
where
    P: FnOnce(&mut Tape, &[Vec<Var>]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = groups
        .iter()
        .map(|g| g.iter().map(|t| tape.leaf(t.clone())).collect())
        .collect();
    let loss = program(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward_scalar(loss)?;
    let out = vars
        .iter()
        .zip(groups)
        .map(|(vs, ts)| {
            vs.iter()
                .zip(ts)
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect()
        })
        .collect();
    Ok(GradReport::from_groups(loss_value, out))
}
