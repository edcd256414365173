use crate::error::{Error, Result};
use crate::tensor::{DiffNode, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// tied to the parameter order passed in.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        Ok(Adam {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut DiffNode>) -> Result<()> {
        let params: Vec<&mut DiffNode> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if m.dims() != p.value.dims() {
                return Err(Error::shape("parameter shape changed between optimizer steps"));
            }
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
