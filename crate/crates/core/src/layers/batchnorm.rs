use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{DiffNode, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel normalization over every axis except the last.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: DiffNode,
    pub beta: DiffNode,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    stats_ready: bool,
}

pub struct BatchNormCache {
    /// Normalized input.
    xhat: Vec<f64>,
    /// 1/sqrt(var + eps) per channel, from batch or running statistics.
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: DiffNode::new(Tensor::full(&[channels], 1.0)?),
            beta: DiffNode::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            stats_ready: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Whether the running statistics have been populated, by a train-mode
    /// pass, a checkpoint, or [`BatchNorm::mark_stats_ready`].
    pub fn stats_ready(&self) -> bool {
        self.stats_ready
    }

    pub fn mark_stats_ready(&mut self) {
        self.stats_ready = true;
    }

    fn channel_count(&self, x: &Tensor) -> Result<(usize, usize)> {
        let c = *x.dims().last().expect("rank >= 1");
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels()
            )));
        }
        Ok((x.numel() / c, c))
    }

    fn normalize_eval(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if !self.stats_ready {
            return Err(Error::State(
                "batchnorm running statistics are uninitialized".into(),
            ));
        }
        let (_, c) = self.channel_count(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let mean = self.running_mean.data();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
            }
        }
        Ok((y, inv_std))
    }
}

impl Layer for BatchNorm {
    type Cache = BatchNormCache;

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        if mode == Mode::Eval {
            let (y, inv_std) = self.normalize_eval(x)?;
            let c = inv_std.len();
            let mean = self.running_mean.data();
            let mut xhat = x.data().to_vec();
            for row in xhat.chunks_mut(c) {
                for ch in 0..c {
                    row[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                }
            }
            return Ok((
                y,
                BatchNormCache {
                    xhat,
                    inv_std,
                    train: false,
                },
            ));
        }
        let (n, c) = self.channel_count(x)?;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = x.data().to_vec();
        let mut y = x.clone();
        for (xr, yr) in xhat.chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
            for ch in 0..c {
                xr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                yr[ch] = xr[ch] * gamma[ch] + beta[ch];
            }
        }

        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.stats_ready = true;

        Ok((
            y,
            BatchNormCache {
                xhat,
                inv_std,
                train: true,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.normalize_eval(x)?.0)
    }

    fn backward(&mut self, cache: &BatchNormCache, grad: &Tensor) -> Result<Tensor> {
        let (n, c) = self.channel_count(grad)?;
        if cache.xhat.len() != grad.numel() {
            return Err(Error::shape("batchnorm gradient does not match cache"));
        }
        let gamma = self.gamma.value.data().to_vec();
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gx = grad.clone();

        for (g, xh) in grad.data().chunks(c).zip(cache.xhat.chunks(c)) {
            for ch in 0..c {
                gbeta[ch] += g[ch];
                ggamma[ch] += g[ch] * xh[ch];
            }
        }
        if !cache.train {
            for row in gx.data_mut().chunks_mut(c) {
                for ch in 0..c {
                    row[ch] *= gamma[ch] * cache.inv_std[ch];
                }
            }
            self.gamma.accumulate(&Tensor::from_vec(&[c], ggamma)?)?;
            self.beta.accumulate(&Tensor::from_vec(&[c], gbeta)?)?;
            return Ok(gx);
        }
        let nf = n as f64;
        for (row, xh) in gx.data_mut().chunks_mut(c).zip(cache.xhat.chunks(c)) {
            for ch in 0..c {
                row[ch] = gamma[ch] * cache.inv_std[ch] / nf
                    * (nf * row[ch] - gbeta[ch] - xh[ch] * ggamma[ch]);
            }
        }
        self.gamma.accumulate(&Tensor::from_vec(&[c], ggamma)?)?;
        self.beta.accumulate(&Tensor::from_vec(&[c], gbeta)?)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&DiffNode> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
