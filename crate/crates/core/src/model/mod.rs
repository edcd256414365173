//! The CRNN sound event detector: three conv stages (conv → ReLU →
//! batchnorm → optional SE → frequency max-pool), two bidirectional GRUs, a
//! linear FC layer and a sigmoid FC classifier.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNorm, BatchNormCache, BiGru, Conv2d, FreqMaxPool, GruCache, GruDirection,
    Layer, Linear, LinearCache, Mode, PoolCache,
};
use crate::metrics::EventRoll;
use crate::se::{SeBlock, SeCache, SeConfig};
use crate::tensor::ops::{self, UnaryOp};
use crate::tensor::{DiffNode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrnnConfig {
    /// Frames per input sequence (T).
    pub frames: usize,
    pub freq_bins: usize,
    pub in_channels: usize,
    /// Conv filters per stage (P).
    pub filters: usize,
    /// One frequency pooling width per conv stage.
    pub pool_widths: Vec<usize>,
    /// GRU hidden width per direction (Q).
    pub gru_hidden: usize,
    /// Width of the linear FC layer (R).
    pub fc_hidden: usize,
    /// Sound event classes (N).
    pub classes: usize,
    pub se: Option<SeConfig>,
    pub seed: u64,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        CrnnConfig {
            frames: 256,
            freq_bins: 256,
            in_channels: 16,
            filters: 64,
            pool_widths: vec![8, 8, 2],
            gru_hidden: 128,
            fc_hidden: 128,
            classes: 11,
            se: None,
            seed: 0,
        }
    }
}

impl CrnnConfig {
    /// Frequency bins left after all pooling stages.
    pub fn pooled_bins(&self) -> Result<usize> {
        let mut bins = self.freq_bins;
        for (i, &w) in self.pool_widths.iter().enumerate() {
            if w == 0 || !bins.is_multiple_of(w) {
                return Err(Error::config(format!(
                    "pool stage {} of width {w} cannot divide {bins} frequency bins",
                    i + 1
                )));
            }
            bins /= w;
        }
        Ok(bins)
    }

    pub fn stage_output_channels(&self) -> usize {
        match &self.se {
            Some(se) => se.output_channels(self.filters),
            None => self.filters,
        }
    }

    /// Width of the flattened `[F', C]` vector fed to the first GRU.
    pub fn gru_input_width(&self) -> Result<usize> {
        Ok(self.pooled_bins()? * self.stage_output_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("freq_bins", self.freq_bins),
            ("in_channels", self.in_channels),
            ("filters", self.filters),
            ("gru_hidden", self.gru_hidden),
            ("fc_hidden", self.fc_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.pool_widths.is_empty() {
            return Err(Error::config("at least one conv stage is required"));
        }
        self.pooled_bins()?;
        if let Some(se) = &self.se {
            se.validate(self.filters).map_err(|e| match e {
                Error::Argument(msg) => Error::Config(msg),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub se: Option<SeBlock>,
    pub pool: FreqMaxPool,
}

struct StageCache {
    conv_in: Tensor,
    pre_relu: Tensor,
    post_relu: Tensor,
    bn: BatchNormCache,
    se: Option<SeCache>,
    pool: PoolCache,
}

pub struct ModelCache {
    stages: Vec<StageCache>,
    pooled_dims: Vec<usize>,
    gru1: GruCache,
    gru2: GruCache,
    fc1: LinearCache,
    fc2_input: Tensor,
}

/// Input and output shape of one layer, without the batch axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRecord {
    pub layer: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SedModel {
    config: CrnnConfig,
    pub stages: Vec<ConvStage>,
    pub gru1: BiGru,
    pub gru2: BiGru,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SedModel {
    pub fn new(config: CrnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stages = Vec::with_capacity(config.pool_widths.len());
        let mut in_ch = config.in_channels;
        for &w in &config.pool_widths {
            let conv = Conv2d::new(in_ch, config.filters, &mut rng)?;
            let bn = BatchNorm::new(config.filters)?;
            let se = match &config.se {
                Some(se) => Some(SeBlock::new(*se, config.filters, &mut rng)?),
                None => None,
            };
            in_ch = config.stage_output_channels();
            stages.push(ConvStage {
                conv,
                bn,
                se,
                pool: FreqMaxPool::new(w)?,
            });
        }
        let gru1 = BiGru::new(config.gru_input_width()?, config.gru_hidden, &mut rng)?;
        let gru2 = BiGru::new(config.gru_hidden, config.gru_hidden, &mut rng)?;
        let fc1 = Linear::new(config.gru_hidden, config.fc_hidden, Activation::Linear, &mut rng)?;
        let fc2 = Linear::new(config.fc_hidden, config.classes, Activation::Sigmoid, &mut rng)?;
        Ok(SedModel {
            config,
            stages,
            gru1,
            gru2,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &CrnnConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        x.expect_rank(4, "model input")?;
        let d = x.dims();
        let c = &self.config;
        if d[1..] != [c.frames, c.freq_bins, c.in_channels] {
            return Err(Error::shape(format!(
                "model expects [batch, {}, {}, {}], got {}",
                c.frames,
                c.freq_bins,
                c.in_channels,
                x.shape()
            )));
        }
        Ok(d[0])
    }

    /// Logits `[batch, T, N]` plus everything the backward pass needs.
    pub fn forward_logits(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ModelCache)> {
        let batch = self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let (pre_relu, conv_in) = stage.conv.forward(&h, mode)?;
            let post_relu = ops::unary(UnaryOp::Relu, &pre_relu);
            let (normed, bn) = stage.bn.forward(&post_relu, mode)?;
            let (recal, se) = match &mut stage.se {
                Some(block) => {
                    let (y, c) = block.forward(&normed, mode)?;
                    (y, Some(c))
                }
                None => (normed, None),
            };
            let (pooled, pool) = stage.pool.forward(&recal, mode)?;
            caches.push(StageCache {
                conv_in,
                pre_relu,
                post_relu,
                bn,
                se,
                pool,
            });
            h = pooled;
        }
        let pooled_dims = h.dims().to_vec();
        let seq = flatten_frames(h, batch, self.config.frames)?;
        let (g1, gru1) = self.gru1.forward(&seq, mode)?;
        let (g2, gru2) = self.gru2.forward(&g1, mode)?;
        let (f1, fc1) = self.fc1.forward(&g2, mode)?;
        let logits = self.fc2.logits(&f1)?;
        Ok((
            logits,
            ModelCache {
                stages: caches,
                pooled_dims,
                gru1,
                gru2,
                fc1,
                fc2_input: f1,
            },
        ))
    }

    /// Per-frame class probabilities `[batch, T, N]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(ops::unary(UnaryOp::Sigmoid, &self.forward_logits(x, mode)?.0))
    }

    /// Eval-mode probabilities without mutating the model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_traced(x, None)
    }

    /// Eval-mode forward that records each layer's input shape.
    pub fn trace_shapes(&self, x: &Tensor) -> Result<Vec<ShapeRecord>> {
        let mut trace = Vec::new();
        self.infer_traced(x, Some(&mut trace))?;
        Ok(trace)
    }

    fn infer_traced(&self, x: &Tensor, mut trace: Option<&mut Vec<ShapeRecord>>) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let mut record = |layer: String, input: &Tensor, output: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(ShapeRecord {
                    layer,
                    input: input.dims()[1..].to_vec(),
                    output: output.dims()[1..].to_vec(),
                });
            }
        };
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let a = ops::unary(UnaryOp::Relu, &stage.conv.infer(&h)?);
            let mut y = stage.bn.infer(&a)?;
            record(format!("Conv{}", i + 1), &h, &y);
            if let Some(se) = &stage.se {
                let z = se.infer(&y)?;
                record(format!("SE{}", i + 1), &y, &z);
                y = z;
            }
            h = stage.pool.infer(&y)?;
            record(format!("Maxpool{}", i + 1), &y, &h);
        }
        let seq = flatten_frames(h, batch, self.config.frames)?;
        let g1 = self.gru1.infer(&seq)?;
        record("Bi-GRU1".into(), &seq, &g1);
        let g2 = self.gru2.infer(&g1)?;
        record("Bi-GRU2".into(), &g1, &g2);
        let f1 = self.fc1.infer(&g2)?;
        record("FC1".into(), &g2, &f1);
        let probs = self.fc2.infer(&f1)?;
        record("FC2".into(), &f1, &probs);
        Ok(probs)
    }

    /// Backward from a gradient on the logits. Accumulates into every
    /// parameter and returns the input gradient.
    pub fn backward(&mut self, cache: &ModelCache, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward_logits(&cache.fc2_input, grad_logits)?;
        let g = self.fc1.backward(&cache.fc1, &g)?;
        let g = self.gru2.backward(&cache.gru2, &g)?;
        let g = self.gru1.backward(&cache.gru1, &g)?;
        let mut g = g.reshape(&cache.pooled_dims)?;
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages).rev() {
            g = stage.pool.backward(&sc.pool, &g)?;
            if let (Some(block), Some(se_cache)) = (&mut stage.se, &sc.se) {
                g = block.backward(se_cache, &g)?;
            }
            g = stage.bn.backward(&sc.bn, &g)?;
            g = ops::unary_backward(UnaryOp::Relu, &sc.pre_relu, &sc.post_relu, &g);
            g = stage.conv.backward(&sc.conv_in, &g)?;
        }
        Ok(g)
    }

    /// Trainable parameters in model order.
    pub fn params_mut(&mut self) -> Vec<&mut DiffNode> {
        let mut p = Vec::new();
        for s in &mut self.stages {
            p.extend(s.conv.params_mut());
            p.extend(s.bn.params_mut());
            if let Some(se) = &mut s.se {
                p.extend(se.params_mut());
            }
        }
        p.extend(self.gru1.params_mut());
        p.extend(self.gru2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&DiffNode> {
        let mut p = Vec::new();
        for s in &self.stages {
            p.extend(s.conv.params());
            p.extend(s.bn.params());
            if let Some(se) = &s.se {
                p.extend(se.params());
            }
        }
        p.extend(self.gru1.params());
        p.extend(self.gru2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn zero_grad(&mut self) {
        crate::tensor::zero_grad(self.params_mut());
    }

    /// Every stored array in model order, batchnorm running statistics
    /// included. This is the checkpoint layout.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("conv{}", i + 1);
            out.push((format!("{p}.weight"), &s.conv.weight.value));
            out.push((format!("{p}.bias"), &s.conv.bias.value));
            out.push((format!("{p}.bn.gamma"), &s.bn.gamma.value));
            out.push((format!("{p}.bn.beta"), &s.bn.beta.value));
            out.push((format!("{p}.bn.running_mean"), &s.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &s.bn.running_var));
            if let Some(se) = &s.se {
                if let Some(c) = &se.cse {
                    out.push((format!("{p}.se.cse.w1"), &c.w1.value));
                    out.push((format!("{p}.se.cse.b1"), &c.b1.value));
                    out.push((format!("{p}.se.cse.w2"), &c.w2.value));
                    out.push((format!("{p}.se.cse.b2"), &c.b2.value));
                }
                if let Some(t) = &se.tfse {
                    out.push((format!("{p}.se.tfse.w"), &t.w.value));
                }
            }
        }
        for (name, gru) in [("gru1", &self.gru1), ("gru2", &self.gru2)] {
            for (dir, d) in [("fwd", &gru.fwd), ("bwd", &gru.bwd)] {
                for (pname, p) in GruDirection::param_names().iter().zip(d.params()) {
                    out.push((format!("{name}.{dir}.{pname}"), &p.value));
                }
            }
        }
        out.push(("fc1.weight".into(), &self.fc1.weight.value));
        out.push(("fc1.bias".into(), &self.fc1.bias.value));
        out.push(("fc2.weight".into(), &self.fc2.weight.value));
        out.push(("fc2.bias".into(), &self.fc2.bias.value));
        out
    }

    /// Mutable counterpart of [`SedModel::named_arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.conv.weight.value);
            out.push(&mut s.conv.bias.value);
            out.push(&mut s.bn.gamma.value);
            out.push(&mut s.bn.beta.value);
            out.push(&mut s.bn.running_mean);
            out.push(&mut s.bn.running_var);
            if let Some(se) = &mut s.se {
                if let Some(c) = &mut se.cse {
                    out.push(&mut c.w1.value);
                    out.push(&mut c.b1.value);
                    out.push(&mut c.w2.value);
                    out.push(&mut c.b2.value);
                }
                if let Some(t) = &mut se.tfse {
                    out.push(&mut t.w.value);
                }
            }
        }
        for gru in [&mut self.gru1, &mut self.gru2] {
            for d in [&mut gru.fwd, &mut gru.bwd] {
                out.extend(d.params_mut().into_iter().map(|p| &mut p.value));
            }
        }
        out.push(&mut self.fc1.weight.value);
        out.push(&mut self.fc1.bias.value);
        out.push(&mut self.fc2.weight.value);
        out.push(&mut self.fc2.bias.value);
        out
    }

    /// Marks all running statistics as usable for eval mode.
    pub fn mark_stats_ready(&mut self) {
        for s in &mut self.stages {
            s.bn.mark_stats_ready();
        }
    }

    /// Forces every SE gate to exactly 1 (diagnostic).
    pub fn set_unit_attention(&mut self, on: bool) {
        for s in &mut self.stages {
            if let Some(se) = &mut s.se {
                se.force_unit_attention = on;
            }
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sum of all stored array sizes, batchnorm running statistics included.
pub fn count_parameters(model: &SedModel) -> usize {
    model.named_arrays().iter().map(|(_, t)| t.numel()).sum()
}

/// `[B, T, F', C] → [B, T, F'·C]`, frequency-major then channel.
fn flatten_frames(h: Tensor, batch: usize, frames: usize) -> Result<Tensor> {
    let width = h.numel() / (batch * frames);
    h.reshape(&[batch, frames, width])
}

/// Binary rolls from probabilities `[batch, T, N]`: active where `p > threshold`.
pub fn predict_events(probs: &Tensor, threshold: f64, frame_hop_seconds: f64) -> Result<Vec<EventRoll>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::argument(format!(
            "threshold {threshold} must lie strictly between 0 and 1"
        )));
    }
    probs.expect_rank(3, "probabilities")?;
    let d = probs.dims();
    let (frames, classes) = (d[1], d[2]);
    probs
        .data()
        .chunks(frames * classes)
        .map(|item| {
            let mut roll = EventRoll::new(frames, classes, frame_hop_seconds)?;
            for (i, &p) in item.iter().enumerate() {
                roll.set(i / classes, i % classes, p > threshold);
            }
            Ok(roll)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se::{Aggregation, SeVariant};

    fn toy() -> CrnnConfig {
        CrnnConfig {
            frames: 6,
            freq_bins: 16,
            in_channels: 2,
            filters: 4,
            pool_widths: vec![2, 2, 2],
            gru_hidden: 5,
            fc_hidden: 3,
            classes: 2,
            se: None,
            seed: 3,
        }
    }

    fn input(cfg: &CrnnConfig, batch: usize) -> Tensor {
        let n = batch * cfg.frames * cfg.freq_bins * cfg.in_channels;
        let data = (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        Tensor::from_vec(&[batch, cfg.frames, cfg.freq_bins, cfg.in_channels], data).unwrap()
    }

    #[test]
    fn impossible_pooling_is_config_error() {
        let cfg = CrnnConfig {
            frames: 8,
            freq_bins: 24,
            in_channels: 2,
            filters: 4,
            pool_widths: vec![4, 4, 2],
            ..toy()
        };
        assert!(matches!(SedModel::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_probabilities() {
        let mut m = SedModel::new(toy()).unwrap();
        let p = m.forward(&input(&toy(), 2), Mode::Train).unwrap();
        assert_eq!(p.dims(), &[2, 6, 2]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut m = SedModel::new(toy()).unwrap();
        m.fc2.weight.value.fill(0.0);
        m.mark_stats_ready();
        let p = m.infer(&input(&toy(), 1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = SedModel::new(toy()).unwrap();
        m.forward(&input(&toy(), 2), Mode::Train).unwrap();
        let x = input(&toy(), 2);
        assert_eq!(m.infer(&x).unwrap(), m.infer(&x).unwrap());
        assert_eq!(m.forward(&x, Mode::Eval).unwrap(), m.infer(&x).unwrap());
    }

    #[test]
    fn wrong_input_shape() {
        let m = SedModel::new(toy()).unwrap();
        let x = Tensor::zeros(&[1, 6, 16, 3]).unwrap();
        assert!(matches!(m.infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_count_matches_array_enumeration() {
        for se in [
            None,
            Some(SeConfig {
                reduction: 2,
                ..SeConfig::default()
            }),
            Some(SeConfig {
                reduction: 2,
                aggregation: Aggregation::Concatenation,
                ..SeConfig::default()
            }),
            Some(SeConfig {
                variant: SeVariant::TimeFrequency,
                ..SeConfig::default()
            }),
        ] {
            let cfg = CrnnConfig { se, ..toy() };
            let mut m = SedModel::new(cfg.clone()).unwrap();
            // Independent per-array arithmetic.
            let (p, q, r, n) = (cfg.filters, cfg.gru_hidden, cfg.fc_hidden, cfg.classes);
            let out_ch = cfg.stage_output_channels();
            let se_count = cfg
                .se
                .map(|s| crate::se::se_param_count(&s, p).unwrap())
                .unwrap_or(0);
            let mut expect = 0;
            let mut in_ch = cfg.in_channels;
            for _ in 0..3 {
                expect += 9 * in_ch * p + p + 4 * p + se_count;
                in_ch = out_ch;
            }
            let gru_in = 2 * out_ch;
            expect += 2 * 3 * (gru_in * q + q * q + q);
            expect += 2 * 3 * (q * q + q * q + q);
            expect += q * r + r + r * n + n;
            assert_eq!(count_parameters(&m), expect);
            assert_eq!(m.named_arrays().len(), m.arrays_mut().len());
        }
    }

    #[test]
    fn predict_events_threshold() {
        let half = Tensor::full(&[1, 3, 2], 0.5).unwrap();
        assert_eq!(predict_events(&half, 0.5, 0.1).unwrap()[0].active_count(), 0);
        let high = Tensor::full(&[2, 3, 2], 0.9).unwrap();
        let rolls = predict_events(&high, 0.5, 0.1).unwrap();
        assert_eq!(rolls.len(), 2);
        assert!(rolls.iter().all(|r| r.active_count() == 6));
        assert!(predict_events(&high, 1.0, 0.1).is_err());
        assert!(predict_events(&high, 0.0, 0.1).is_err());
    }

    #[test]
    fn raising_threshold_never_adds_frames() {
        let data: Vec<f64> = (0..60).map(|i| (i as f64 * 0.618).fract()).collect();
        let p = Tensor::from_vec(&[1, 20, 3], data).unwrap();
        let mut prev = usize::MAX;
        for th in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let c = predict_events(&p, th, 0.1).unwrap()[0].active_count();
            assert!(c <= prev);
            prev = c;
        }
    }
}
