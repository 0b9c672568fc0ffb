use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamParams,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, hyper: AdamParams) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            hyper,
            v: m.clone(),
            m,
            ids,
            step: 0,
        }
    }
}

/// AdamW with decoupled weight decay: `θ ← θ·(1 − lr·wd)` followed by the
/// bias-corrected Adam step. Only the state's parameters are touched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![grads.len()],
            rhs: vec![state.ids.len()],
        });
    }
    for (k, (&id, g)) in state.ids.iter().zip(grads).enumerate() {
        if g.shape() != store.get(id).shape() || state.m[k].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: g.shape().to_vec(),
                rhs: store.get(id).shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let AdamParams { beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (k, (&id, g)) in state.ids.iter().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g.data()[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.data()[i] * g.data()[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Peak rate `base_lr·batch_size/256`, cosine-annealed to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, batch_size: usize) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let lr0 = base_lr * batch_size as f64 / 256.0;
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}
