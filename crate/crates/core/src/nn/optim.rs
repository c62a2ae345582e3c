use serde::{Deserialize, Serialize};

use super::network::Param;
use super::tensor::Scalar;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const SGD_DEFAULT: OptimizerKind = OptimizerKind::SgdMomentum { momentum: 0.9 };
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Per-parameter optimizer slots. Weight decay enters as `wd * w` added to
/// the gradient before the update.
///
/// SGD keeps a velocity `v <- momentum * v + g` and steps `w <- w - lr * v`.
/// Adam keeps bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.step
    }

    /// Velocity (SGD) or first moment (Adam) of parameter `i`.
    pub fn first_moment(&self, i: usize) -> Option<&[T]> {
        self.first.get(i).map(Vec::as_slice)
    }

    fn ensure_slots(&mut self, params: &[Param<T>]) -> Result<(), NnError> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        let same = self.first.len() == params.len()
            && self.first.iter().zip(params).all(|(s, p)| s.len() == p.value.len() && p.grad.len() == p.value.len());
        if same {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch("optimizer slots do not match parameters".into()))
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>], lr: f64) -> Result<(), NnError> {
        self.ensure_slots(params)?;
        self.step += 1;
        let lr_t = T::lit(lr);
        let wd = T::lit(self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = T::lit(momentum);
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                        *v = mu * *v + g + wd * *w;
                        *w = *w - lr_t * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let eps = T::lit(eps);
                let one = T::one();
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + wd * *w;
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
