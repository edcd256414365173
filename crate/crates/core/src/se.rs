//! Squeeze-and-excitation recalibration over `[batch, time, freq, channel]`
//! feature maps.
//!
//! * **Channel SE (cSE)**: squeeze each channel over (time, freq) by global
//!   average (or max) pooling, excite through a `C → C/r → C` bottleneck
//!   (`ReLU` inside, gate outside), and rescale each channel.
//! * **Time-frequency SE (tfSE)**: squeeze the channels at every (t, f)
//!   location with one shared bias-free 1×1 convolution, gate it, and rescale
//!   every channel vector at that location.
//! * **tfc-SE**: both, either in parallel branches joined by an aggregation
//!   or chained channel-first.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot, zeros_param, Layer, Mode};
use crate::tensor::ops::{self, BinaryOp, ReduceOp, UnaryOp};
use crate::tensor::{DiffNode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeVariant {
    #[serde(rename = "c")]
    Channel,
    #[serde(rename = "tf")]
    TimeFrequency,
    #[serde(rename = "tfc-concurrent")]
    Concurrent,
    #[serde(rename = "tfc-sequential")]
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "add")]
    Addition,
    #[serde(rename = "mul")]
    Multiplication,
    #[serde(rename = "max")]
    Maximization,
    #[serde(rename = "concat")]
    Concatenation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqueezeOp {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExciteOp {
    Sigmoid,
    Relu,
    Tanh,
}

impl SqueezeOp {
    fn reduce_op(self) -> ReduceOp {
        match self {
            SqueezeOp::Avg => ReduceOp::Mean,
            SqueezeOp::Max => ReduceOp::Max,
        }
    }
}

impl ExciteOp {
    fn unary(self) -> UnaryOp {
        match self {
            ExciteOp::Sigmoid => UnaryOp::Sigmoid,
            ExciteOp::Relu => UnaryOp::Relu,
            ExciteOp::Tanh => UnaryOp::Tanh,
        }
    }
}

macro_rules! token_enum {
    ($ty:ty, $what:literal, $($variant:path => $tok:literal),+ $(,)?) => {
        impl $ty {
            pub fn token(self) -> &'static str {
                match self { $($variant => $tok),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tok => Ok($variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($tok),+].join(", ")
                    ))),
                }
            }
        }
    };
}

token_enum!(SeVariant, "SE variant",
    SeVariant::Channel => "c",
    SeVariant::TimeFrequency => "tf",
    SeVariant::Concurrent => "tfc-concurrent",
    SeVariant::Sequential => "tfc-sequential",
);
token_enum!(Aggregation, "aggregation",
    Aggregation::Addition => "add",
    Aggregation::Multiplication => "mul",
    Aggregation::Maximization => "max",
    Aggregation::Concatenation => "concat",
);
token_enum!(SqueezeOp, "squeeze operator",
    SqueezeOp::Avg => "avg",
    SqueezeOp::Max => "max",
);
token_enum!(ExciteOp, "excitation operator",
    ExciteOp::Sigmoid => "sigmoid",
    ExciteOp::Relu => "relu",
    ExciteOp::Tanh => "tanh",
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeConfig {
    pub variant: SeVariant,
    /// Only read by [`SeVariant::Concurrent`].
    pub aggregation: Aggregation,
    pub reduction: usize,
    pub squeeze: SqueezeOp,
    pub excite: ExciteOp,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            variant: SeVariant::Concurrent,
            aggregation: Aggregation::Maximization,
            reduction: 8,
            squeeze: SqueezeOp::Avg,
            excite: ExciteOp::Sigmoid,
        }
    }
}

impl SeConfig {
    pub fn with_variant(variant: SeVariant) -> Self {
        SeConfig {
            variant,
            ..SeConfig::default()
        }
    }

    pub fn has_channel_branch(&self) -> bool {
        self.variant != SeVariant::TimeFrequency
    }

    pub fn has_tf_branch(&self) -> bool {
        self.variant != SeVariant::Channel
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::argument("reduction ratio must be positive"));
        }
        if self.has_channel_branch() && (!channels.is_multiple_of(self.reduction) || channels < self.reduction) {
            return Err(Error::argument(format!(
                "{channels} channels are not divisible by reduction ratio {}",
                self.reduction
            )));
        }
        Ok(())
    }

    /// Channel extent after the block.
    pub fn output_channels(&self, channels: usize) -> usize {
        if self.variant == SeVariant::Concurrent && self.aggregation == Aggregation::Concatenation {
            2 * channels
        } else {
            channels
        }
    }
}

/// Closed-form parameter count of one SE block on `channels` channels.
pub fn se_param_count(cfg: &SeConfig, channels: usize) -> Result<usize> {
    cfg.validate(channels)?;
    let mut n = 0;
    if cfg.has_channel_branch() {
        let mid = channels / cfg.reduction;
        n += channels * mid + mid + mid * channels + channels;
    }
    if cfg.has_tf_branch() {
        n += channels;
    }
    Ok(n)
}

/// `z[b, 0, 0, c]`: mean (or max) of channel `c` over time and frequency.
pub fn cse_squeeze(u: &Tensor, op: SqueezeOp) -> Result<Tensor> {
    u.expect_rank(4, "SE input")?;
    ops::reduce(op.reduce_op(), u, &[1, 2])
}

/// `X̂_c = s_c · U_c` with `s: [batch, 1, 1, C]`.
pub fn cse_scale(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    ops::binary(BinaryOp::Mul, u, s)
}

/// The `C → C/r → C` excitation of channel SE.
#[derive(Clone, Debug)]
pub struct CseBlock {
    /// `[C/r, C]`
    pub w1: DiffNode,
    pub b1: DiffNode,
    /// `[C, C/r]`
    pub w2: DiffNode,
    pub b2: DiffNode,
}

pub struct ExciteCache {
    z: Tensor,
    h_pre: Tensor,
    h: Tensor,
    a: Tensor,
    s: Tensor,
}

impl CseBlock {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let mid = channels / reduction;
        Ok(CseBlock {
            w1: glorot(rng, &[mid, channels], channels, mid)?,
            b1: zeros_param(&[mid])?,
            w2: glorot(rng, &[channels, mid], mid, channels)?,
            b2: zeros_param(&[channels])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.value.dims()[1]
    }

    /// `s = excite(W2 · relu(W1 · z + b1) + b2)` for each row of `z: [batch, C]`.
    pub fn excite(&self, z: &Tensor, op: ExciteOp) -> Result<(Tensor, ExciteCache)> {
        let mut h_pre = ops::matmul(z, &ops::transpose(&self.w1.value)?)?;
        add_row_bias(&mut h_pre, &self.b1.value);
        let h = ops::unary(UnaryOp::Relu, &h_pre);
        let mut a = ops::matmul(&h, &ops::transpose(&self.w2.value)?)?;
        add_row_bias(&mut a, &self.b2.value);
        let s = ops::unary(op.unary(), &a);
        Ok((
            s.clone(),
            ExciteCache {
                z: z.clone(),
                h_pre,
                h,
                a,
                s,
            },
        ))
    }

    /// Accumulates parameter gradients and returns ∂L/∂z.
    fn excite_backward(&mut self, cache: &ExciteCache, gs: &Tensor, op: ExciteOp) -> Result<Tensor> {
        let ga = ops::unary_backward(op.unary(), &cache.a, &cache.s, gs);
        let w2t = ops::transpose(&self.w2.value)?;
        let (gh, gw2t) = ops::matmul_backward(&cache.h, &w2t, &ga)?;
        self.w2.accumulate(&ops::transpose(&gw2t)?)?;
        self.b2.accumulate(&column_sums(&ga)?)?;
        let gh_pre = ops::unary_backward(UnaryOp::Relu, &cache.h_pre, &cache.h, &gh);
        let w1t = ops::transpose(&self.w1.value)?;
        let (gz, gw1t) = ops::matmul_backward(&cache.z, &w1t, &gh_pre)?;
        self.w1.accumulate(&ops::transpose(&gw1t)?)?;
        self.b1.accumulate(&column_sums(&gh_pre)?)?;
        Ok(gz)
    }

    pub fn params(&self) -> Vec<&DiffNode> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn add_row_bias(x: &mut Tensor, bias: &Tensor) {
    let n = bias.numel();
    for row in x.data_mut().chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn column_sums(x: &Tensor) -> Result<Tensor> {
    let n = x.dims()[1];
    let mut out = vec![0.0; n];
    for row in x.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(&[n], out)
}

/// Shared bias-free 1×1 convolution `C → 1` producing the (t, f) gate.
#[derive(Clone, Debug)]
pub struct TfseBlock {
    /// `[C, 1]`
    pub w: DiffNode,
}

pub struct TfseCache {
    u: Tensor,
    pre: Tensor,
    s: Tensor,
}

impl TfseBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(TfseBlock {
            w: glorot(rng, &[channels, 1], channels, 1)?,
        })
    }

    /// Gate map `S: [batch, time, freq, 1]`.
    pub fn gate(&self, u: &Tensor, op: ExciteOp) -> Result<Tensor> {
        Ok(self.gate_parts(u, op)?.1)
    }

    fn gate_parts(&self, u: &Tensor, op: ExciteOp) -> Result<(Tensor, Tensor)> {
        u.expect_rank(4, "SE input")?;
        let d = u.dims();
        let rows = d[0] * d[1] * d[2];
        let flat = u.clone().reshape(&[rows, d[3]])?;
        let pre = ops::matmul(&flat, &self.w.value)?;
        let s = ops::unary(op.unary(), &pre).reshape(&[d[0], d[1], d[2], 1])?;
        Ok((pre, s))
    }

    pub fn forward(&self, u: &Tensor, op: ExciteOp, unit_gate: bool) -> Result<(Tensor, TfseCache)> {
        let (pre, s) = self.gate_parts(u, op)?;
        let s = if unit_gate { s.map(|_| 1.0) } else { s };
        let y = ops::binary(BinaryOp::Mul, u, &s)?;
        Ok((
            y,
            TfseCache {
                u: u.clone(),
                pre,
                s,
            },
        ))
    }

    fn backward(&mut self, cache: &TfseCache, grad: &Tensor, op: ExciteOp, unit_gate: bool) -> Result<Tensor> {
        let (mut gu, gs) = ops::binary_backward(BinaryOp::Mul, &cache.u, &cache.s, grad)?;
        if unit_gate {
            return Ok(gu);
        }
        let d = cache.u.dims().to_vec();
        let rows = d[0] * d[1] * d[2];
        let s_flat = cache.s.clone().reshape(&[rows, 1])?;
        let gs = gs.reshape(&[rows, 1])?;
        let gpre = ops::unary_backward(op.unary(), &cache.pre, &s_flat, &gs);
        let flat = cache.u.clone().reshape(&[rows, d[3]])?;
        let (gflat, gw) = ops::matmul_backward(&flat, &self.w.value, &gpre)?;
        self.w.accumulate(&gw)?;
        gu.add_assign(&gflat.reshape(&d)?)?;
        Ok(gu)
    }
}

/// Channel SE forward shared by the cSE, concurrent and sequential paths.
fn cse_forward(
    block: &CseBlock,
    u: &Tensor,
    cfg: &SeConfig,
    unit_gate: bool,
) -> Result<(Tensor, CseCache)> {
    let z4 = cse_squeeze(u, cfg.squeeze)?;
    let d = u.dims();
    let z = z4.reshape(&[d[0], d[3]])?;
    let (s, excite) = block.excite(&z, cfg.excite)?;
    let s4 = if unit_gate {
        Tensor::full(&[d[0], 1, 1, d[3]], 1.0)?
    } else {
        s.reshape(&[d[0], 1, 1, d[3]])?
    };
    let y = cse_scale(u, &s4)?;
    Ok((
        y,
        CseCache {
            u: u.clone(),
            s4,
            excite,
        },
    ))
}

pub struct CseCache {
    u: Tensor,
    s4: Tensor,
    excite: ExciteCache,
}

fn cse_backward(
    block: &mut CseBlock,
    cache: &CseCache,
    grad: &Tensor,
    cfg: &SeConfig,
    unit_gate: bool,
) -> Result<Tensor> {
    let (mut gu, gs4) = ops::binary_backward(BinaryOp::Mul, &cache.u, &cache.s4, grad)?;
    if unit_gate {
        return Ok(gu);
    }
    let d = cache.u.dims();
    let gs = gs4.reshape(&[d[0], d[3]])?;
    let gz = block.excite_backward(&cache.excite, &gs, cfg.excite)?;
    let gz4 = gz.reshape(&[d[0], 1, 1, d[3]])?;
    gu.add_assign(&ops::reduce_backward(cfg.squeeze.reduce_op(), &cache.u, &[1, 2], &gz4)?)?;
    Ok(gu)
}

/// Stack `[a; b]` along the channel axis.
fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_shape(b.dims())?;
    let d = a.dims();
    let c = d[3];
    let mut out = Vec::with_capacity(a.numel() * 2);
    for (ra, rb) in a.data().chunks(c).zip(b.data().chunks(c)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::from_vec(&[d[0], d[1], d[2], 2 * c], out)
}

fn split_channels(g: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = g.dims();
    let c = d[3] / 2;
    let mut a = Vec::with_capacity(g.numel() / 2);
    let mut b = Vec::with_capacity(g.numel() / 2);
    for row in g.data().chunks(2 * c) {
        a.extend_from_slice(&row[..c]);
        b.extend_from_slice(&row[c..]);
    }
    Ok((
        Tensor::from_vec(&[d[0], d[1], d[2], c], a)?,
        Tensor::from_vec(&[d[0], d[1], d[2], c], b)?,
    ))
}

/// Attention coefficients an SE block would apply to a given input.
#[derive(Clone, Debug)]
pub struct Attention {
    /// `[batch, C]`
    pub channel: Option<Tensor>,
    /// `[batch, time, freq, 1]`
    pub time_frequency: Option<Tensor>,
}

/// One configured SE block, inserted after a convolutional stage.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub config: SeConfig,
    pub cse: Option<CseBlock>,
    pub tfse: Option<TfseBlock>,
    /// Replace every gate by exactly 1. Diagnostic only.
    pub force_unit_attention: bool,
}

pub enum SeCache {
    Channel(CseCache),
    TimeFrequency(TfseCache),
    Concurrent {
        a: Tensor,
        b: Tensor,
        cse: CseCache,
        tfse: TfseCache,
    },
    Sequential(CseCache, TfseCache),
}

impl SeBlock {
    pub fn new(config: SeConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(channels)?;
        let cse = if config.has_channel_branch() {
            Some(CseBlock::new(channels, config.reduction, rng)?)
        } else {
            None
        };
        let tfse = if config.has_tf_branch() {
            Some(TfseBlock::new(channels, rng)?)
        } else {
            None
        };
        Ok(SeBlock {
            config,
            cse,
            tfse,
            force_unit_attention: false,
        })
    }

    pub fn output_channels(&self, channels: usize) -> usize {
        self.config.output_channels(channels)
    }

    fn cse_ref(&self) -> &CseBlock {
        self.cse.as_ref().expect("variant has a channel branch")
    }

    fn tfse_ref(&self) -> &TfseBlock {
        self.tfse.as_ref().expect("variant has a time-frequency branch")
    }

    pub fn attention(&self, u: &Tensor) -> Result<Attention> {
        let channel = match &self.cse {
            Some(block) => {
                let d = u.dims();
                let z = cse_squeeze(u, self.config.squeeze)?.reshape(&[d[0], d[3]])?;
                Some(block.excite(&z, self.config.excite)?.0)
            }
            None => None,
        };
        let time_frequency = match (&self.tfse, self.config.variant) {
            (Some(block), SeVariant::Sequential) => {
                let (x, _) = cse_forward(self.cse_ref(), u, &self.config, false)?;
                Some(block.gate(&x, self.config.excite)?)
            }
            (Some(block), _) => Some(block.gate(u, self.config.excite)?),
            (None, _) => None,
        };
        Ok(Attention {
            channel,
            time_frequency,
        })
    }

    fn run(&self, u: &Tensor) -> Result<(Tensor, SeCache)> {
        u.expect_rank(4, "SE input")?;
        let unit = self.force_unit_attention;
        let cfg = &self.config;
        match cfg.variant {
            SeVariant::Channel => {
                let (y, c) = cse_forward(self.cse_ref(), u, cfg, unit)?;
                Ok((y, SeCache::Channel(c)))
            }
            SeVariant::TimeFrequency => {
                let (y, c) = self.tfse_ref().forward(u, cfg.excite, unit)?;
                Ok((y, SeCache::TimeFrequency(c)))
            }
            SeVariant::Sequential => {
                let (x, cc) = cse_forward(self.cse_ref(), u, cfg, unit)?;
                let (y, tc) = self.tfse_ref().forward(&x, cfg.excite, unit)?;
                Ok((y, SeCache::Sequential(cc, tc)))
            }
            SeVariant::Concurrent => {
                let (a, cse) = cse_forward(self.cse_ref(), u, cfg, unit)?;
                let (b, tfse) = self.tfse_ref().forward(u, cfg.excite, unit)?;
                let y = match cfg.aggregation {
                    Aggregation::Addition => ops::binary(BinaryOp::Add, &a, &b)?,
                    Aggregation::Multiplication => ops::binary(BinaryOp::Mul, &a, &b)?,
                    Aggregation::Maximization => ops::binary(BinaryOp::Max, &a, &b)?,
                    Aggregation::Concatenation => concat_channels(&a, &b)?,
                };
                Ok((y, SeCache::Concurrent { a, b, cse, tfse }))
            }
        }
    }
}

impl Layer for SeBlock {
    type Cache = SeCache;

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<(Tensor, SeCache)> {
        self.run(x)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    fn backward(&mut self, cache: &SeCache, grad: &Tensor) -> Result<Tensor> {
        let unit = self.force_unit_attention;
        let cfg = self.config;
        match cache {
            SeCache::Channel(c) => {
                cse_backward(self.cse.as_mut().expect("cSE"), c, grad, &cfg, unit)
            }
            SeCache::TimeFrequency(c) => {
                self.tfse.as_mut().expect("tfSE").backward(c, grad, cfg.excite, unit)
            }
            SeCache::Sequential(cc, tc) => {
                let gx = self.tfse.as_mut().expect("tfSE").backward(tc, grad, cfg.excite, unit)?;
                cse_backward(self.cse.as_mut().expect("cSE"), cc, &gx, &cfg, unit)
            }
            SeCache::Concurrent { a, b, cse, tfse } => {
                let (ga, gb) = match cfg.aggregation {
                    Aggregation::Addition => ops::binary_backward(BinaryOp::Add, a, b, grad)?,
                    Aggregation::Multiplication => ops::binary_backward(BinaryOp::Mul, a, b, grad)?,
                    Aggregation::Maximization => ops::binary_backward(BinaryOp::Max, a, b, grad)?,
                    Aggregation::Concatenation => split_channels(grad)?,
                };
                let mut gu = cse_backward(self.cse.as_mut().expect("cSE"), cse, &ga, &cfg, unit)?;
                gu.add_assign(&self.tfse.as_mut().expect("tfSE").backward(tfse, &gb, cfg.excite, unit)?)?;
                Ok(gu)
            }
        }
    }

    fn params(&self) -> Vec<&DiffNode> {
        let mut p = Vec::new();
        if let Some(c) = &self.cse {
            p.extend(c.params());
        }
        if let Some(t) = &self.tfse {
            p.push(&t.w);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        let mut p = Vec::new();
        if let Some(c) = &mut self.cse {
            p.extend(c.params_mut());
        }
        if let Some(t) = &mut self.tfse {
            p.push(&mut t.w);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_block(cfg: SeConfig, c: usize) -> SeBlock {
        let mut b = SeBlock::new(cfg, c, &mut rng(0)).unwrap();
        for p in b.params_mut() {
            p.value.fill(0.0);
        }
        b
    }

    fn concurrent(agg: Aggregation) -> SeConfig {
        SeConfig {
            aggregation: agg,
            reduction: 2,
            ..SeConfig::default()
        }
    }

    fn scaled(u: &Tensor, k: f64) -> Tensor {
        u.map(|v| v * k)
    }

    #[test]
    fn squeeze_examples() {
        let u = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cse_squeeze(&u, SqueezeOp::Avg).unwrap().data(), &[2.5]);
        assert_eq!(cse_squeeze(&u, SqueezeOp::Max).unwrap().data(), &[4.0]);
        let k = Tensor::full(&[2, 3, 4, 2], 0.75).unwrap();
        assert!(cse_squeeze(&k, SqueezeOp::Avg).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn zero_weight_excitation() {
        let mut b = CseBlock::new(8, 4, &mut rng(1)).unwrap();
        for p in b.params_mut() {
            p.value.fill(0.0);
        }
        let z = random(&[3, 8], 2);
        let (s, _) = b.excite(&z, ExciteOp::Sigmoid).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
        for op in [ExciteOp::Relu, ExciteOp::Tanh] {
            assert!(b.excite(&z, op).unwrap().0.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn excitation_matches_naive_loops() {
        let b = CseBlock::new(8, 2, &mut rng(3)).unwrap();
        let mut b = b;
        for p in [&mut b.b1, &mut b.b2] {
            *p = DiffNode::new(random(p.value.dims(), 4));
        }
        let z = random(&[2, 8], 5);
        let (s, _) = b.excite(&z, ExciteOp::Sigmoid).unwrap();
        let (c, m) = (8, 4);
        for row in 0..2 {
            let zr = &z.data()[row * c..(row + 1) * c];
            let mut hidden = vec![0.0; m];
            for j in 0..m {
                let mut acc = b.b1.value.data()[j];
                for i in 0..c {
                    acc += b.w1.value.data()[j * c + i] * zr[i];
                }
                hidden[j] = acc.max(0.0);
            }
            for i in 0..c {
                let mut acc = b.b2.value.data()[i];
                for j in 0..m {
                    acc += b.w2.value.data()[i * m + j] * hidden[j];
                }
                let expect = 1.0 / (1.0 + (-acc).exp());
                assert!((s.data()[row * c + i] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scale_examples() {
        let u = random(&[1, 2, 3, 3], 6);
        let ones = Tensor::full(&[1, 1, 1, 3], 1.0).unwrap();
        assert_eq!(cse_scale(&u, &ones).unwrap(), u);
        let half = Tensor::full(&[1, 1, 1, 3], 0.5).unwrap();
        assert_eq!(cse_scale(&u, &half).unwrap(), scaled(&u, 0.5));
        let hot = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = cse_scale(&u, &hot).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            if i % 3 == 1 {
                assert_eq!(*v, u.data()[i]);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn tfse_examples() {
        let u = random(&[2, 3, 4, 5], 7);
        let mut t = TfseBlock::new(5, &mut rng(8)).unwrap();
        t.w.value.fill(0.0);
        let (y, _) = t.forward(&u, ExciteOp::Sigmoid, false).unwrap();
        assert_eq!(y, scaled(&u, 0.5));
        let t = TfseBlock::new(5, &mut rng(9)).unwrap();
        let zero = Tensor::zeros(&[2, 3, 4, 5]).unwrap();
        assert_eq!(t.forward(&zero, ExciteOp::Sigmoid, false).unwrap().0.max_abs(), 0.0);
    }

    #[test]
    fn tfse_matches_triple_loop() {
        let (b, t, f, c) = (2, 3, 4, 5);
        let u = random(&[b, t, f, c], 10);
        let block = TfseBlock::new(c, &mut rng(11)).unwrap();
        let (y, _) = block.forward(&u, ExciteOp::Sigmoid, false).unwrap();
        let w = block.w.value.data();
        for loc in 0..b * t * f {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += w[ch] * u.data()[loc * c + ch];
            }
            let s = 1.0 / (1.0 + (-acc).exp());
            assert!(s > 0.0 && s < 1.0);
            for ch in 0..c {
                assert!((y.data()[loc * c + ch] - s * u.data()[loc * c + ch]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn concurrent_zero_weight_aggregations() {
        let u = random(&[1, 3, 4, 4], 12);
        let cases = [
            (Aggregation::Addition, 1.0),
            (Aggregation::Maximization, 0.5),
            (Aggregation::Multiplication, 0.25),
        ];
        for (agg, _) in cases {
            let y = zero_block(concurrent(agg), 4).infer(&u).unwrap();
            let expect: Vec<f64> = u
                .data()
                .iter()
                .map(|&v| match agg {
                    Aggregation::Addition => 0.5 * v + 0.5 * v,
                    Aggregation::Maximization => (0.5 * v).max(0.5 * v),
                    _ => (0.5 * v) * (0.5 * v),
                })
                .collect();
            assert_eq!(y.data(), &expect[..], "{agg}");
        }
        let y = zero_block(concurrent(Aggregation::Addition), 4).infer(&u).unwrap();
        for (a, b) in y.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn concatenation_doubles_channels() {
        let u = random(&[2, 3, 4, 4], 13);
        let b = SeBlock::new(concurrent(Aggregation::Concatenation), 4, &mut rng(14)).unwrap();
        assert_eq!(b.infer(&u).unwrap().dims(), &[2, 3, 4, 8]);
        assert_eq!(b.output_channels(4), 8);
    }

    #[test]
    fn maximization_dominates_branches() {
        let u = random(&[2, 3, 4, 4], 15);
        let b = SeBlock::new(concurrent(Aggregation::Maximization), 4, &mut rng(16)).unwrap();
        let (y, cache) = b.run(&u).unwrap();
        let SeCache::Concurrent { a, b: tb, .. } = cache else {
            panic!("expected concurrent cache")
        };
        for i in 0..y.numel() {
            assert!(y.data()[i] >= a.data()[i] && y.data()[i] >= tb.data()[i]);
        }
    }

    #[test]
    fn sequential_examples() {
        let u = random(&[1, 2, 4, 4], 17);
        let cfg = SeConfig {
            variant: SeVariant::Sequential,
            reduction: 2,
            ..SeConfig::default()
        };
        let y = zero_block(cfg, 4).infer(&u).unwrap();
        for (a, b) in y.data().iter().zip(u.data()) {
            assert_eq!(*a, 0.5 * (0.5 * b));
        }

        // cSE gate forced to 1 leaves tfSE alone.
        let block = SeBlock::new(cfg, 4, &mut rng(18)).unwrap();
        let (x, _) = cse_forward(block.cse_ref(), &u, &cfg, true).unwrap();
        assert_eq!(x, u);
        let (y, _) = block.tfse_ref().forward(&x, cfg.excite, false).unwrap();
        let (direct, _) = block.tfse_ref().forward(&u, cfg.excite, false).unwrap();
        assert_eq!(y, direct);

        // Composition of the two branch computations.
        let (y, _) = block.run(&u).unwrap();
        let (x, _) = cse_forward(block.cse_ref(), &u, &cfg, false).unwrap();
        let (expect, _) = block.tfse_ref().forward(&x, cfg.excite, false).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn param_counts() {
        let cfg = SeConfig::default();
        assert_eq!(se_param_count(&cfg, 64).unwrap(), 1160);
        assert_eq!(se_param_count(&SeConfig::with_variant(SeVariant::Channel), 64).unwrap(), 1096);
        assert_eq!(
            se_param_count(&SeConfig::with_variant(SeVariant::TimeFrequency), 64).unwrap(),
            64
        );
        assert!(matches!(se_param_count(&cfg, 60), Err(Error::Argument(_))));
        // tfSE has no bottleneck so any channel count works.
        assert_eq!(
            se_param_count(&SeConfig::with_variant(SeVariant::TimeFrequency), 60).unwrap(),
            60
        );
    }

    #[test]
    fn token_round_trip() {
        for v in ["c", "tf", "tfc-concurrent", "tfc-sequential"] {
            assert_eq!(v.parse::<SeVariant>().unwrap().token(), v);
        }
        for a in ["add", "mul", "max", "concat"] {
            assert_eq!(a.parse::<Aggregation>().unwrap().to_string(), a);
        }
        assert!("avg".parse::<ExciteOp>().is_err());
    }
}
