use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::TensorFile;
use crate::model::{param_kind, ParamKind};
use crate::tensor::{Real, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl OptimConfig {
    /// Linear warmup to `learning_rate` over `warmup_steps`, then constant.
    /// `step` is the 0-based index of the update.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Whether a named parameter receives weight decay. Norm parameters,
/// embeddings and biases are exempt.
pub fn decays(name: &str) -> bool {
    param_kind(name) == ParamKind::Matrix
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self { v: m.clone(), m }
    }
}

/// Applies update number `step` (0-based) to every parameter.
///
/// Gradients are checked before anything is modified; a non-finite value
/// aborts with the step and the parameter name.
pub fn optimizer_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    names: &[&str],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != names.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer got {} params, {} names, {} grads, {} moment buffers",
            params.len(),
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (g, name) in grads.iter().zip(names) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step,
                name: format!("gradient of {name}"),
            });
        }
    }
    let t = (step + 1) as i32;
    let f = T::from_f64_lossy;
    let (b1, b2, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.adam_eps));
    let c1 = f(1.0 - cfg.beta1.powi(t));
    let c2 = f(1.0 - cfg.beta2.powi(t));
    let lr = f(cfg.lr_at(step));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let wd = if decays(names[i]) { f(cfg.weight_decay) } else { T::zero() };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

/// Writes moments and the number of completed updates.
pub fn save_optimizer(path: &Path, names: &[&str], state: &AdamState<f32>, steps_done: u64) -> Result<()> {
    let mut tensors = Vec::with_capacity(2 * names.len());
    for (prefix, bufs) in [("m", &state.m), ("v", &state.v)] {
        for (name, b) in names.iter().zip(bufs) {
            tensors.push((format!("{prefix}.{name}"), Tensor::from_vec(vec![b.len()], b.clone())?));
        }
    }
    TensorFile {
        fields: vec![
            ("kind".into(), "adamw".into()),
            ("step".into(), steps_done.to_string()),
        ],
        tensors,
    }
    .write(path)
}

pub fn load_optimizer(path: &Path, names: &[&str]) -> Result<(AdamState<f32>, u64)> {
    let file = TensorFile::read(path)?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if file.field("kind") != Some("adamw") {
        return Err(corrupt("not an optimizer state file".into()));
    }
    let step = file
        .field("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("missing step".into()))?;
    if file.tensors.len() != 2 * names.len() {
        return Err(corrupt(format!("{} buffers for {} parameters", file.tensors.len(), names.len())));
    }
    let mut it = file.tensors.into_iter();
    let mut take = |prefix: &str| -> Result<Vec<Vec<f32>>> {
        names
            .iter()
            .map(|name| {
                let (got, t) = it.next().expect("length checked");
                if got != format!("{prefix}.{name}") {
                    return Err(corrupt(format!("buffer `{got}` out of order")));
                }
                Ok(t.into_data())
            })
            .collect()
    };
    let m = take("m")?;
    let v = take("v")?;
    Ok((AdamState { m, v }, step))
}
