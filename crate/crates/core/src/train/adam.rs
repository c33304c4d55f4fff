use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::{ModelParams, TensorKind};

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    step: u64,
}

/// Adam with bias correction and per-tensor step counters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<(TensorKind, Moments)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }

    /// Number of updates applied to `kind` so far.
    pub fn steps(&self, kind: TensorKind) -> u64 {
        self.slots.iter().find(|(k, _)| *k == kind).map_or(0, |(_, s)| s.step)
    }

    /// Applies one update. Tensors absent from `grads` are left untouched.
    /// Nothing is modified if any gradient is non-finite or misshaped.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[(TensorKind, Array2<f64>)],
        lr: impl Fn(TensorKind) -> f64,
    ) -> Result<()> {
        for (kind, g) in grads {
            if g.dim() != params.tensor(*kind).dim() {
                return Err(Error::Contract(format!(
                    "gradient of {} has shape {:?}, parameter {:?}",
                    kind.name(),
                    g.dim(),
                    params.tensor(*kind).dim()
                )));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", kind.name())));
            }
        }
        for (kind, g) in grads {
            let idx = match self.slots.iter().position(|(k, _)| k == kind) {
                Some(i) => i,
                None => {
                    let zeros = Array2::zeros(g.dim());
                    self.slots.push((
                        *kind,
                        Moments {
                            m: zeros.clone(),
                            v: zeros,
                            step: 0,
                        },
                    ));
                    self.slots.len() - 1
                }
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let s = &mut self.slots[idx].1;
            s.step += 1;
            let c1 = 1.0 - b1.powi(s.step as i32);
            let c2 = 1.0 - b2.powi(s.step as i32);
            let eta = lr(*kind);
            Zip::from(params.tensor_mut(*kind))
                .and(&mut s.m)
                .and(&mut s.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= eta * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}
