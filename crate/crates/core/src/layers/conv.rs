use rand::Rng;
use rayon::prelude::*;

use super::{glorot, zeros_param, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{DiffNode, Tensor};

const K: usize = 3;

/// 3×3 same-padded cross-correlation over (time, frequency).
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[3, 3, in, out]`
    pub weight: DiffNode,
    pub bias: DiffNode,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Conv2d {
            weight: glorot(rng, &[K, K, in_ch, out_ch], K * K * in_ch, K * K * out_ch)?,
            bias: zeros_param(&[out_ch])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[3]
    }

    fn check_input(&self, x: &Tensor) -> Result<[usize; 4]> {
        x.expect_rank(4, "conv input")?;
        let d = x.dims();
        if d[3] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                d[3]
            )));
        }
        Ok([d[0], d[1], d[2], d[3]])
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let [b, t, f, cin] = self.check_input(x)?;
        let cout = self.out_channels();
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let item_in = t * f * cin;
        let item_out = t * f * cout;
        let mut out = vec![0.0; b * item_out];
        out.par_chunks_mut(item_out)
            .zip(x.data().par_chunks(item_in))
            .for_each(|(o, xi)| {
                for ti in 0..t {
                    for fi in 0..f {
                        let dst = &mut o[(ti * f + fi) * cout..(ti * f + fi + 1) * cout];
                        dst.copy_from_slice(bias);
                        for kt in 0..K {
                            let ts = ti + kt;
                            if ts < 1 || ts > t {
                                continue;
                            }
                            for kf in 0..K {
                                let fs = fi + kf;
                                if fs < 1 || fs > f {
                                    continue;
                                }
                                let src = ((ts - 1) * f + fs - 1) * cin;
                                let wbase = (kt * K + kf) * cin * cout;
                                for ci in 0..cin {
                                    let xv = xi[src + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    for (d, &wv) in dst.iter_mut().zip(wrow) {
                                        *d += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Tensor::from_vec(&[b, t, f, cout], out)
    }
}

impl Layer for Conv2d {
    type Cache = Tensor;

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<(Tensor, Tensor)> {
        Ok((self.compute(x)?, x.clone()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let [b, t, f, cin] = self.check_input(x)?;
        let cout = self.out_channels();
        grad.expect_shape(&[b, t, f, cout])?;
        let w = self.weight.value.data();
        let item_in = t * f * cin;
        let item_out = t * f * cout;
        let wlen = K * K * cin * cout;

        let mut gx = vec![0.0; b * item_in];
        // Per-item weight/bias partials, summed afterwards in item order so the
        // result does not depend on scheduling.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = gx
            .par_chunks_mut(item_in)
            .zip(x.data().par_chunks(item_in))
            .zip(grad.data().par_chunks(item_out))
            .map(|((gxi, xi), gi)| {
                let mut gw = vec![0.0; wlen];
                let mut gb = vec![0.0; cout];
                for ti in 0..t {
                    for fi in 0..f {
                        let g = &gi[(ti * f + fi) * cout..(ti * f + fi + 1) * cout];
                        for (acc, &gv) in gb.iter_mut().zip(g) {
                            *acc += gv;
                        }
                        for kt in 0..K {
                            let ts = ti + kt;
                            if ts < 1 || ts > t {
                                continue;
                            }
                            for kf in 0..K {
                                let fs = fi + kf;
                                if fs < 1 || fs > f {
                                    continue;
                                }
                                let src = ((ts - 1) * f + fs - 1) * cin;
                                let wbase = (kt * K + kf) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    gxi[src + ci] +=
                                        wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                                    let xv = xi[src + ci];
                                    if xv != 0.0 {
                                        let gwrow =
                                            &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        for (acc, &gv) in gwrow.iter_mut().zip(g) {
                                            *acc += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect();

        let mut gw = Tensor::zeros_like(&self.weight.value);
        let mut gb = Tensor::zeros_like(&self.bias.value);
        for (pw, pb) in partials {
            for (a, v) in gw.data_mut().iter_mut().zip(pw) {
                *a += v;
            }
            for (a, v) in gb.data_mut().iter_mut().zip(pb) {
                *a += v;
            }
        }
        self.weight.accumulate(&gw)?;
        self.bias.accumulate(&gb)?;
        Tensor::from_vec(&[b, t, f, cin], gx)
    }

    fn params(&self) -> Vec<&DiffNode> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        vec![&mut self.weight, &mut self.bias]
    }
}
