use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{DiffNode, Tensor};

/// Non-overlapping max over frequency windows; time is untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreqMaxPool {
    pub width: usize,
}

impl FreqMaxPool {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::argument("pool width must be positive"));
        }
        Ok(FreqMaxPool { width })
    }

    pub fn output_bins(&self, bins: usize) -> Result<usize> {
        if !bins.is_multiple_of(self.width) {
            return Err(Error::argument(format!(
                "{bins} frequency bins are not divisible by pool width {}",
                self.width
            )));
        }
        Ok(bins / self.width)
    }

    /// Output and, per output element, the flat input index that won. Ties
    /// go to the lowest frequency.
    fn pool(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        x.expect_rank(4, "pool input")?;
        let d = x.dims();
        let (bt, f, c) = (d[0] * d[1], d[2], d[3]);
        let fo = self.output_bins(f)?;
        let mut out = vec![0.0; bt * fo * c];
        let mut arg = vec![0; bt * fo * c];
        let xs = x.data();
        for row in 0..bt {
            for j in 0..fo {
                for ch in 0..c {
                    let mut best = row * f * c + j * self.width * c + ch;
                    for k in 1..self.width {
                        let idx = row * f * c + (j * self.width + k) * c + ch;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (row * fo + j) * c + ch;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        Ok((Tensor::from_vec(&[d[0], d[1], fo, c], out)?, arg))
    }
}

pub struct PoolCache {
    input_dims: Vec<usize>,
    argmax: Vec<usize>,
}

impl Layer for FreqMaxPool {
    type Cache = PoolCache;

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<(Tensor, PoolCache)> {
        let (y, argmax) = self.pool(x)?;
        Ok((
            y,
            PoolCache {
                input_dims: x.dims().to_vec(),
                argmax,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pool(x)?.0)
    }

    fn backward(&mut self, cache: &PoolCache, grad: &Tensor) -> Result<Tensor> {
        if grad.numel() != cache.argmax.len() {
            return Err(Error::shape("pool gradient does not match cached output"));
        }
        let mut gx = Tensor::zeros(&cache.input_dims)?;
        for (&src, &g) in cache.argmax.iter().zip(grad.data()) {
            gx.data_mut()[src] += g;
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&DiffNode> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_first_pool() {
        let p = FreqMaxPool::new(8).unwrap();
        assert_eq!(p.output_bins(256).unwrap(), 32);
        assert!(matches!(p.output_bins(30), Err(Error::Argument(_))));
    }

    #[test]
    fn picks_window_max() {
        let p = FreqMaxPool::new(8).unwrap();
        let x = Tensor::from_vec(&[1, 1, 8, 1], (1..=8).map(f64::from).collect()).unwrap();
        assert_eq!(p.infer(&x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn constant_in_constant_out() {
        let p = FreqMaxPool::new(4).unwrap();
        let x = Tensor::full(&[2, 3, 16, 5], -0.3).unwrap();
        let y = p.infer(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 4, 5]);
        assert!(y.data().iter().all(|&v| v == -0.3));
    }

    #[test]
    fn gradient_routes_to_winner() {
        let mut p = FreqMaxPool::new(2).unwrap();
        let x = Tensor::from_vec(&[1, 1, 4, 1], vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        let (_, cache) = p.forward(&x, Mode::Train).unwrap();
        let g = Tensor::from_vec(&[1, 1, 2, 1], vec![10.0, 20.0]).unwrap();
        let gx = p.backward(&cache, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 10.0, 20.0, 0.0]);
    }
}
