use rand::Rng;

use super::{glorot, zeros_param, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::ops::{gemm_nn, gemm_nt, gemm_tn, sigmoid};
use crate::tensor::{DiffNode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
}

/// Affine map over the last axis followed by an activation.
#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`
    pub weight: DiffNode,
    pub bias: DiffNode,
    pub activation: Activation,
}

pub struct LinearCache {
    input: Tensor,
    output: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: glorot(rng, &[inputs, outputs], inputs, outputs)?,
            bias: zeros_param(&[outputs])?,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.dims()[1]
    }

    /// Affine part only, before the activation.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let width = *x.dims().last().expect("rank >= 1");
        if width != self.inputs() {
            return Err(Error::shape(format!(
                "linear layer expects width {}, got {width}",
                self.inputs()
            )));
        }
        let rows = x.numel() / width;
        let n = self.outputs();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm_nn(x.data(), self.weight.value.data(), &mut out, rows, width, n);
        let mut dims = x.dims().to_vec();
        *dims.last_mut().expect("rank >= 1") = n;
        Tensor::from_vec(&dims, out)
    }

    fn activate(&self, z: Tensor) -> Tensor {
        match self.activation {
            Activation::Linear => z,
            Activation::Sigmoid => z.map(sigmoid),
        }
    }

    /// Backward from a gradient on the logits, bypassing the activation.
    pub fn backward_logits(&mut self, input: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let width = self.inputs();
        let n = self.outputs();
        let rows = input.numel() / width;
        if grad.numel() != rows * n {
            return Err(Error::shape("linear gradient does not match input rows"));
        }
        let mut gw = vec![0.0; width * n];
        gemm_tn(input.data(), grad.data(), &mut gw, rows, width, n);
        let mut gb = vec![0.0; n];
        for row in grad.data().chunks(n) {
            for (a, g) in gb.iter_mut().zip(row) {
                *a += g;
            }
        }
        let mut gx = vec![0.0; rows * width];
        gemm_nt(grad.data(), self.weight.value.data(), &mut gx, rows, n, width);
        self.weight.accumulate(&Tensor::from_vec(&[width, n], gw)?)?;
        self.bias.accumulate(&Tensor::from_vec(&[n], gb)?)?;
        Tensor::from_vec(input.dims(), gx)
    }
}

impl Layer for Linear {
    type Cache = LinearCache;

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<(Tensor, LinearCache)> {
        let y = self.activate(self.logits(x)?);
        Ok((
            y.clone(),
            LinearCache {
                input: x.clone(),
                output: y,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.activate(self.logits(x)?))
    }

    fn backward(&mut self, cache: &LinearCache, grad: &Tensor) -> Result<Tensor> {
        let gz = match self.activation {
            Activation::Linear => grad.clone(),
            Activation::Sigmoid => {
                let mut g = grad.clone();
                for (gv, y) in g.data_mut().iter_mut().zip(cache.output.data()) {
                    *gv *= y * (1.0 - y);
                }
                g
            }
        };
        self.backward_logits(&cache.input, &gz)
    }

    fn params(&self) -> Vec<&DiffNode> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(i: usize, o: usize, act: Activation) -> Linear {
        Linear::new(i, o, act, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn identity_weights() {
        let mut l = layer(3, 3, Activation::Linear);
        l.weight.value = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::from_vec(&[1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        assert_eq!(l.infer(&x).unwrap(), x);
    }

    #[test]
    fn zero_sigmoid_is_half() {
        let mut l = layer(4, 2, Activation::Sigmoid);
        l.weight.value.fill(0.0);
        let x = Tensor::full(&[2, 3, 4], 9.0).unwrap();
        let y = l.infer(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eleven_way_sigmoid_range() {
        let l = layer(16, 11, Activation::Sigmoid);
        let x = Tensor::from_vec(&[1, 4, 16], (0..64).map(|i| (i as f64 - 30.0) * 0.4).collect()).unwrap();
        assert!(l.infer(&x).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn width_mismatch() {
        let l = layer(4, 2, Activation::Linear);
        assert!(matches!(l.infer(&Tensor::zeros(&[1, 1, 3]).unwrap()), Err(Error::Shape(_))));
    }
}
