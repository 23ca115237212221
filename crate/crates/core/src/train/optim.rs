//! Stochastic gradient descent with Nesterov momentum and polynomial decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimCfg {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub poly_exponent: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training cases.
    pub iterations_per_epoch: Option<usize>,
}

impl Default for OptimCfg {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            poly_exponent: 0.9,
            epochs: 100,
            iterations_per_epoch: None,
        }
    }
}

impl OptimCfg {
    /// `lr0 · (1 - epoch/epochs)^exponent`, reaching 0 at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return 0.0;
        }
        let frac = 1.0 - (epoch.min(self.epochs) as f64 / self.epochs as f64);
        self.lr * frac.powf(self.poly_exponent)
    }
}

/// Momentum buffers, one per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<E> {
    pub momentum: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        Self {
            momentum: params.tensors().iter().map(|t| vec![E::ZERO; t.len()]).collect(),
        }
    }
}

/// One SGD update. `grads[i]` is the gradient of parameter `i`, or `None`
/// when the parameter did not take part in the loss (it is left untouched).
pub fn sgd_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &[Option<&[E]>],
    state: &mut SgdState<E>,
    cfg: &OptimCfg,
    epoch: usize,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                let id = params.ids().nth(i).expect("param index");
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {} at element {pos}",
                    params.name(id)
                )));
            }
        }
    }
    let lr = E::from_f64(cfg.lr_at(epoch));
    let mu = E::from_f64(cfg.momentum);
    let wd = E::from_f64(cfg.weight_decay);
    for ((p, g), buf) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.momentum) {
        let Some(g) = g else { continue };
        for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
            let d = gv + wd * *w;
            *v = mu * *v + d;
            let step = if cfg.nesterov { d + mu * *v } else { *v };
            *w -= lr * step;
        }
    }
    Ok(())
}
