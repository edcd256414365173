//! Bidirectional GRU with directions merged by elementwise sum.
//!
//! Per direction:
//!
//! ```text
//! z  = σ(x·Wz + h·Uz + bz)
//! r  = σ(x·Wr + h·Ur + br)
//! h̃  = tanh(x·Wh + (r ⊙ h)·Uh + bh)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use super::{glorot, zeros_param, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::ops::{gemm_nn, gemm_nt, gemm_tn, sigmoid};
use crate::tensor::{DiffNode, Tensor};

#[derive(Clone, Debug)]
pub struct GruDirection {
    pub w_z: DiffNode,
    pub w_r: DiffNode,
    pub w_h: DiffNode,
    pub u_z: DiffNode,
    pub u_r: DiffNode,
    pub u_h: DiffNode,
    pub b_z: DiffNode,
    pub b_r: DiffNode,
    pub b_h: DiffNode,
}

/// Per-step activations of one direction, each `[batch, time, hidden]`
/// indexed by absolute time.
pub struct DirectionCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    reverse: bool,
}

pub struct GruCache {
    input: Tensor,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

impl GruDirection {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GruDirection {
            w_z: glorot(rng, &[inputs, hidden], inputs, hidden)?,
            w_r: glorot(rng, &[inputs, hidden], inputs, hidden)?,
            w_h: glorot(rng, &[inputs, hidden], inputs, hidden)?,
            u_z: glorot(rng, &[hidden, hidden], hidden, hidden)?,
            u_r: glorot(rng, &[hidden, hidden], hidden, hidden)?,
            u_h: glorot(rng, &[hidden, hidden], hidden, hidden)?,
            b_z: zeros_param(&[hidden])?,
            b_r: zeros_param(&[hidden])?,
            b_h: zeros_param(&[hidden])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.w_z.value.dims()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_z.value.dims()[1]
    }

    fn input_projection(&self, x: &Tensor, w: &DiffNode, b: &DiffNode) -> Vec<f64> {
        let (rows, width, h) = (x.numel() / self.inputs(), self.inputs(), self.hidden());
        let mut out = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            out.extend_from_slice(b.value.data());
        }
        gemm_nn(x.data(), w.value.data(), &mut out, rows, width, h);
        out
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        x.expect_rank(3, "gru input")?;
        let d = x.dims();
        if d[2] != self.inputs() {
            return Err(Error::shape(format!(
                "gru expects width {}, got {}",
                self.inputs(),
                d[2]
            )));
        }
        Ok((d[0], d[1]))
    }

    /// Runs the recurrence over `x: [batch, time, in]`, in reverse time when
    /// `reverse` is set, starting from `h0: [batch, hidden]` (zeros if absent).
    pub fn run(&self, x: &Tensor, reverse: bool, h0: Option<&Tensor>) -> Result<(Tensor, DirectionCache)> {
        let (b, t) = self.check(x)?;
        let h = self.hidden();
        let xz = self.input_projection(x, &self.w_z, &self.b_z);
        let xr = self.input_projection(x, &self.w_r, &self.b_r);
        let xh = self.input_projection(x, &self.w_h, &self.b_h);

        let mut state = match h0 {
            Some(s) => {
                s.expect_shape(&[b, h])?;
                s.data().to_vec()
            }
            None => vec![0.0; b * h],
        };
        let n = b * t * h;
        let mut cache = DirectionCache {
            h_prev: vec![0.0; n],
            z: vec![0.0; n],
            r: vec![0.0; n],
            cand: vec![0.0; n],
            reverse,
        };
        let mut out = vec![0.0; n];
        let mut az = vec![0.0; b * h];
        let mut ar = vec![0.0; b * h];
        let mut ah = vec![0.0; b * h];
        let mut rh = vec![0.0; b * h];

        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            for bi in 0..b {
                let src = (bi * t + ti) * h;
                az[bi * h..(bi + 1) * h].copy_from_slice(&xz[src..src + h]);
                ar[bi * h..(bi + 1) * h].copy_from_slice(&xr[src..src + h]);
                ah[bi * h..(bi + 1) * h].copy_from_slice(&xh[src..src + h]);
            }
            gemm_nn(&state, self.u_z.value.data(), &mut az, b, h, h);
            gemm_nn(&state, self.u_r.value.data(), &mut ar, b, h, h);
            for i in 0..b * h {
                az[i] = sigmoid(az[i]);
                ar[i] = sigmoid(ar[i]);
                rh[i] = ar[i] * state[i];
            }
            gemm_nn(&rh, self.u_h.value.data(), &mut ah, b, h, h);
            for bi in 0..b {
                let dst = (bi * t + ti) * h;
                for k in 0..h {
                    let i = bi * h + k;
                    let c = ah[i].tanh();
                    let hp = state[i];
                    cache.h_prev[dst + k] = hp;
                    cache.z[dst + k] = az[i];
                    cache.r[dst + k] = ar[i];
                    cache.cand[dst + k] = c;
                    let hn = (1.0 - az[i]) * hp + az[i] * c;
                    state[i] = hn;
                    out[dst + k] = hn;
                }
            }
        }
        Ok((Tensor::from_vec(&[b, t, h], out)?, cache))
    }

    /// Backpropagation through time. Returns the input gradient.
    fn backward(&mut self, x: &Tensor, cache: &DirectionCache, grad: &Tensor) -> Result<Tensor> {
        let (b, t) = self.check(x)?;
        let h = self.hidden();
        let width = self.inputs();
        grad.expect_shape(&[b, t, h])?;
        let n = b * t * h;
        let mut dxz = vec![0.0; n];
        let mut dxr = vec![0.0; n];
        let mut dxh = vec![0.0; n];
        let mut du_z = vec![0.0; h * h];
        let mut du_r = vec![0.0; h * h];
        let mut du_h = vec![0.0; h * h];

        let mut dh = vec![0.0; b * h];
        let mut hp = vec![0.0; b * h];
        let mut rh = vec![0.0; b * h];
        let mut da_z = vec![0.0; b * h];
        let mut da_r = vec![0.0; b * h];
        let mut da_h = vec![0.0; b * h];
        let mut dhp = vec![0.0; b * h];
        let mut drh = vec![0.0; b * h];

        for step in (0..t).rev() {
            let ti = if cache.reverse { t - 1 - step } else { step };
            for bi in 0..b {
                let at = (bi * t + ti) * h;
                for k in 0..h {
                    let i = bi * h + k;
                    let j = at + k;
                    dh[i] += grad.data()[j];
                    let (z, r, c, p) = (cache.z[j], cache.r[j], cache.cand[j], cache.h_prev[j]);
                    hp[i] = p;
                    rh[i] = r * p;
                    da_z[i] = dh[i] * (c - p) * z * (1.0 - z);
                    da_h[i] = dh[i] * z * (1.0 - c * c);
                    dhp[i] = dh[i] * (1.0 - z);
                    drh[i] = 0.0;
                }
            }
            gemm_nt(&da_h, self.u_h.value.data(), &mut drh, b, h, h);
            gemm_tn(&rh, &da_h, &mut du_h, b, h, h);
            for bi in 0..b {
                let at = (bi * t + ti) * h;
                for k in 0..h {
                    let i = bi * h + k;
                    let r = cache.r[at + k];
                    da_r[i] = drh[i] * hp[i] * r * (1.0 - r);
                    dhp[i] += drh[i] * r;
                }
            }
            gemm_nt(&da_r, self.u_r.value.data(), &mut dhp, b, h, h);
            gemm_nt(&da_z, self.u_z.value.data(), &mut dhp, b, h, h);
            gemm_tn(&hp, &da_r, &mut du_r, b, h, h);
            gemm_tn(&hp, &da_z, &mut du_z, b, h, h);
            for bi in 0..b {
                let at = (bi * t + ti) * h;
                dxz[at..at + h].copy_from_slice(&da_z[bi * h..(bi + 1) * h]);
                dxr[at..at + h].copy_from_slice(&da_r[bi * h..(bi + 1) * h]);
                dxh[at..at + h].copy_from_slice(&da_h[bi * h..(bi + 1) * h]);
            }
            dh.copy_from_slice(&dhp);
        }

        let rows = b * t;
        let mut gx = vec![0.0; rows * width];
        for (dxg, w, bias) in [
            (&dxz, &mut self.w_z, &mut self.b_z),
            (&dxr, &mut self.w_r, &mut self.b_r),
            (&dxh, &mut self.w_h, &mut self.b_h),
        ] {
            let mut gw = vec![0.0; width * h];
            gemm_tn(x.data(), dxg, &mut gw, rows, width, h);
            let mut gb = vec![0.0; h];
            for row in dxg.chunks(h) {
                for (a, g) in gb.iter_mut().zip(row) {
                    *a += g;
                }
            }
            gemm_nt(dxg, w.value.data(), &mut gx, rows, h, width);
            w.accumulate(&Tensor::from_vec(&[width, h], gw)?)?;
            bias.accumulate(&Tensor::from_vec(&[h], gb)?)?;
        }
        self.u_z.accumulate(&Tensor::from_vec(&[h, h], du_z)?)?;
        self.u_r.accumulate(&Tensor::from_vec(&[h, h], du_r)?)?;
        self.u_h.accumulate(&Tensor::from_vec(&[h, h], du_h)?)?;
        Tensor::from_vec(&[b, t, width], gx)
    }

    pub fn params(&self) -> Vec<&DiffNode> {
        vec![
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn param_names() -> [&'static str; 9] {
        ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"]
    }
}

#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

impl BiGru {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BiGru {
            fwd: GruDirection::new(inputs, hidden, rng)?,
            bwd: GruDirection::new(inputs, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn inputs(&self) -> usize {
        self.fwd.inputs()
    }

    fn run_both(&self, x: &Tensor) -> Result<(Tensor, DirectionCache, DirectionCache)> {
        let (mut y, fc) = self.fwd.run(x, false, None)?;
        let (yb, bc) = self.bwd.run(x, true, None)?;
        y.add_assign(&yb)?;
        Ok((y, fc, bc))
    }
}

impl Layer for BiGru {
    type Cache = GruCache;

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<(Tensor, GruCache)> {
        let (y, fwd, bwd) = self.run_both(x)?;
        Ok((
            y,
            GruCache {
                input: x.clone(),
                fwd,
                bwd,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run_both(x)?.0)
    }

    fn backward(&mut self, cache: &GruCache, grad: &Tensor) -> Result<Tensor> {
        let mut gx = self.fwd.backward(&cache.input, &cache.fwd, grad)?;
        gx.add_assign(&self.bwd.backward(&cache.input, &cache.bwd, grad)?)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&DiffNode> {
        let mut p = self.fwd.params();
        p.extend(self.bwd.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        let mut p = self.fwd.params_mut();
        p.extend(self.bwd.params_mut());
        p
    }
}
