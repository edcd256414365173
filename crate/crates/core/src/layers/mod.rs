//! Differentiable layers of the CRNN. Feature maps are `[batch, time,
//! frequency, channel]`; sequences are `[batch, time, width]`.

mod batchnorm;
mod conv;
mod fc;
mod gru;
mod pool;

pub use batchnorm::{BatchNorm, BatchNormCache, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use fc::{Activation, Linear, LinearCache};
pub use gru::{BiGru, DirectionCache, GruCache, GruDirection};
pub use pool::{FreqMaxPool, PoolCache};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{DiffNode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward/backward pair. `forward` returns whatever the matching
/// `backward` needs; `backward` accumulates parameter gradients and returns
/// the gradient with respect to the input.
pub trait Layer {
    type Cache;

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Self::Cache)>;

    /// Eval-mode forward without touching any state.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;

    fn backward(&mut self, cache: &Self::Cache, grad: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&DiffNode>;

    fn params_mut(&mut self) -> Vec<&mut DiffNode>;
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot(rng: &mut impl Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Result<DiffNode> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Ok(DiffNode::new(Tensor::from_vec(dims, data)?))
}

pub(crate) fn zeros_param(dims: &[usize]) -> Result<DiffNode> {
    Ok(DiffNode::new(Tensor::zeros(dims)?))
}
