//! Central finite-difference gradient checks.
//!
//! Every case is a scalar function of a list of arrays (an input plus
//! parameters) together with its analytic gradient. Layers are reduced to a
//! scalar by `L = Σ out ⊙ R` for a fixed random `R`.
//!
//! Elements sitting on a kink (ReLU zero, max tie) have no derivative. An
//! element is skipped when the one-sided differences disagree or the central
//! difference at `h` and `h/2` disagree; skips are counted in the report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Activation, BatchNorm, BiGru, Conv2d, FreqMaxPool, Layer, Linear, Mode};
use crate::model::{CrnnConfig, SedModel};
use crate::se::{Aggregation, ExciteOp, SeBlock, SeConfig, SeVariant, SqueezeOp};
use crate::tensor::ops::{self, BinaryOp, ReduceOp, UnaryOp};
use crate::tensor::Tensor;
use crate::train::loss::bce_with_logits;

/// Tolerances per case family.
pub const OP_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Largest fraction of elements allowed to be skipped as kinks.
    pub max_skip_fraction: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 1e-5,
            floor: 1e-3,
            max_skip_fraction: 0.05,
        }
    }
}

type LossFn = Box<dyn Fn(&[Tensor]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[Tensor]) -> Result<Vec<Tensor>>>;

pub struct Case {
    pub name: String,
    pub tolerance: f64,
    vars: Vec<Tensor>,
    loss: LossFn,
    grad: GradFn,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        tolerance: f64,
        vars: Vec<Tensor>,
        loss: impl Fn(&[Tensor]) -> Result<f64> + 'static,
        grad: impl Fn(&[Tensor]) -> Result<Vec<Tensor>> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            tolerance,
            vars,
            loss: Box::new(loss),
            grad: Box::new(grad),
        }
    }

    pub fn run(&self, settings: &CheckSettings) -> Result<CheckReport> {
        let analytic = (self.grad)(&self.vars)?;
        let base = (self.loss)(&self.vars)?;
        let h = settings.step;
        let mut vars = self.vars.clone();
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
        for (v, g) in analytic.iter().enumerate() {
            g.expect_shape(self.vars[v].dims())?;
            for i in 0..self.vars[v].numel() {
                let x0 = self.vars[v].data()[i];
                let mut at = |dx: f64| -> Result<f64> {
                    vars[v].data_mut()[i] = x0 + dx;
                    let l = (self.loss)(&vars);
                    vars[v].data_mut()[i] = x0;
                    l
                };
                let (fp, fm) = (at(h)?, at(-h)?);
                let (fp2, fm2) = (at(h / 2.0)?, at(-h / 2.0)?);
                let central = (fp - fm) / (2.0 * h);
                let central2 = (fp2 - fm2) / h;
                let (fwd, bwd) = ((fp - base) / h, (base - fm) / h);
                let scale = central.abs().max(settings.floor);
                let kink = (fwd - bwd).abs() > 0.1 * scale
                    || (central - central2).abs() > 0.1 * self.tolerance * scale;
                if kink {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                worst = worst.max(relative_error(g.data()[i], central, settings.floor));
            }
        }
        let total = checked + skipped;
        let passed = worst <= self.tolerance
            && total > 0
            && (skipped as f64) <= settings.max_skip_fraction * total as f64;
        Ok(CheckReport {
            name: self.name.clone(),
            max_rel_error: worst,
            checked,
            skipped,
            tolerance: self.tolerance,
            passed,
        })
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<6} {:<44} max_rel={:.3e} tol={:.0e} checked={} skipped={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped
        )
    }
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid dims")
}

/// Gradient check of any [`Layer`]: the first variable is the input, the
/// rest are the layer's parameters in `params()` order.
pub fn layer_case<L>(
    name: impl Into<String>,
    tolerance: f64,
    mut layer: L,
    x: Tensor,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Case>
where
    L: Layer + Clone + 'static,
{
    let (out, _) = layer.clone().forward(&x, mode)?;
    let r = random_tensor(rng, out.dims());
    for p in layer.params_mut() {
        p.value = random_tensor(rng, p.value.dims());
    }
    let mut vars = vec![x];
    vars.extend(layer.params().iter().map(|p| p.value.clone()));

    let load = {
        let layer = layer.clone();
        move |vars: &[Tensor]| {
            let mut l = layer.clone();
            for (p, v) in l.params_mut().into_iter().zip(&vars[1..]) {
                p.value = v.clone();
                p.zero_grad();
            }
            l
        }
    };
    let load2 = load.clone();
    let r2 = r.clone();
    Ok(Case::new(
        name,
        tolerance,
        vars,
        move |v| {
            let (out, _) = load(v).forward(&v[0], mode)?;
            out.dot(&r)
        },
        move |v| {
            let mut l = load2(v);
            let (_, cache) = l.forward(&v[0], mode)?;
            let gx = l.backward(&cache, &r2)?;
            let mut grads = vec![gx];
            grads.extend(l.params().iter().map(|p| p.grad.clone()));
            Ok(grads)
        },
    ))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    for op in [UnaryOp::Sigmoid, UnaryOp::Relu, UnaryOp::Tanh] {
        let x = random_tensor(rng, &[3, 4]);
        let r = random_tensor(rng, &[3, 4]);
        let r2 = r.clone();
        cases.push(Case::new(
            format!("op {op:?}"),
            OP_TOL,
            vec![x],
            move |v| ops::unary(op, &v[0]).dot(&r),
            move |v| {
                let y = ops::unary(op, &v[0]);
                Ok(vec![ops::unary_backward(op, &v[0], &y, &r2)])
            },
        ));
    }
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Max] {
        for b_dims in [[2, 3, 4], [2, 1, 4]] {
            let a = random_tensor(rng, &[2, 3, 4]);
            let b = random_tensor(rng, &b_dims);
            let r = random_tensor(rng, &[2, 3, 4]);
            let r2 = r.clone();
            let tag = if b_dims[1] == 1 { " broadcast" } else { "" };
            cases.push(Case::new(
                format!("op {op:?}{tag}"),
                OP_TOL,
                vec![a, b],
                move |v| ops::binary(op, &v[0], &v[1])?.dot(&r),
                move |v| {
                    let (ga, gb) = ops::binary_backward(op, &v[0], &v[1], &r2)?;
                    Ok(vec![ga, gb])
                },
            ));
        }
    }
    {
        let a = random_tensor(rng, &[3, 4]);
        let b = random_tensor(rng, &[4, 5]);
        let r = random_tensor(rng, &[3, 5]);
        let r2 = r.clone();
        cases.push(Case::new(
            "op matmul",
            OP_TOL,
            vec![a, b],
            move |v| ops::matmul(&v[0], &v[1])?.dot(&r),
            move |v| {
                let (ga, gb) = ops::matmul_backward(&v[0], &v[1], &r2)?;
                Ok(vec![ga, gb])
            },
        ));
    }
    for op in [ReduceOp::Mean, ReduceOp::Max] {
        let a = random_tensor(rng, &[2, 3, 4, 2]);
        let axes = vec![1usize, 2];
        let r = random_tensor(rng, &[2, 1, 1, 2]);
        let (r2, axes2) = (r.clone(), axes.clone());
        cases.push(Case::new(
            format!("op reduce {op:?}"),
            OP_TOL,
            vec![a],
            move |v| ops::reduce(op, &v[0], &axes)?.dot(&r),
            move |v| Ok(vec![ops::reduce_backward(op, &v[0], &axes2, &r2)?]),
        ));
    }
    {
        let x = random_tensor(rng, &[2, 3, 2]).map(|v| 3.0 * v);
        let y = random_tensor(rng, &[2, 3, 2]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).expect("mask");
        let (y2, mask2) = (y.clone(), mask.clone());
        cases.push(Case::new(
            "loss bce with logits (masked)",
            OP_TOL,
            vec![x],
            move |v| Ok(bce_with_logits(&v[0], &y, Some(&mask))?.loss),
            move |v| Ok(vec![bce_with_logits(&v[0], &y2, Some(&mask2))?.grad]),
        ));
    }
    cases
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let conv = Conv2d::new(3, 2, rng)?;
    let x = random_tensor(rng, &[2, 3, 4, 3]);
    cases.push(layer_case("layer conv2d 3x3", LAYER_TOL, conv, x, Mode::Train, rng)?);

    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm::new(3)?;
        bn.running_mean = random_tensor(rng, &[3]);
        bn.running_var = random_tensor(rng, &[3]).map(|v| 0.5 + v.abs());
        bn.mark_stats_ready();
        let x = random_tensor(rng, &[2, 3, 4, 3]);
        cases.push(layer_case(format!("layer batchnorm {mode:?}"), LAYER_TOL, bn, x, mode, rng)?);
    }

    let x = random_tensor(rng, &[2, 2, 6, 3]);
    cases.push(layer_case("layer freq maxpool", LAYER_TOL, FreqMaxPool::new(3)?, x, Mode::Train, rng)?);

    for act in [Activation::Linear, Activation::Sigmoid] {
        let fc = Linear::new(4, 3, act, rng)?;
        let x = random_tensor(rng, &[2, 3, 4]);
        cases.push(layer_case(format!("layer fc {act:?}"), LAYER_TOL, fc, x, Mode::Train, rng)?);
    }

    let gru = BiGru::new(3, 4, rng)?;
    let x = random_tensor(rng, &[2, 5, 3]);
    cases.push(layer_case("layer bi-gru", LAYER_TOL, gru, x, Mode::Train, rng)?);
    Ok(cases)
}

/// Every SE configuration the ablations reach.
pub fn se_configs() -> Vec<(String, SeConfig)> {
    let base = SeConfig {
        reduction: 2,
        ..SeConfig::default()
    };
    let mut out = vec![
        ("cSE".to_string(), SeConfig { variant: SeVariant::Channel, ..base }),
        ("tfSE".to_string(), SeConfig { variant: SeVariant::TimeFrequency, ..base }),
        ("tfc-sequential".to_string(), SeConfig { variant: SeVariant::Sequential, ..base }),
    ];
    for agg in [
        Aggregation::Addition,
        Aggregation::Multiplication,
        Aggregation::Maximization,
        Aggregation::Concatenation,
    ] {
        out.push((
            format!("tfc-concurrent {}", agg.token()),
            SeConfig {
                aggregation: agg,
                ..base
            },
        ));
    }
    out.push(("cSE squeeze max".into(), SeConfig { variant: SeVariant::Channel, squeeze: SqueezeOp::Max, ..base }));
    out.push(("tfc-concurrent squeeze max".into(), SeConfig { squeeze: SqueezeOp::Max, ..base }));
    for excite in [ExciteOp::Relu, ExciteOp::Tanh] {
        out.push((
            format!("tfc-concurrent excite {}", excite.token()),
            SeConfig { excite, ..base },
        ));
        out.push((
            format!("tfc-sequential excite {}", excite.token()),
            SeConfig {
                variant: SeVariant::Sequential,
                excite,
                ..base
            },
        ));
    }
    out
}

fn se_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, cfg) in se_configs() {
        let block = SeBlock::new(cfg, 4, rng)?;
        let x = random_tensor(rng, &[2, 3, 4, 4]);
        cases.push(layer_case(format!("se {name}"), LAYER_TOL, block, x, Mode::Train, rng)?);
    }
    Ok(cases)
}

/// The tiny whole-model configuration used by the model check.
pub fn tiny_model_config(se: Option<SeConfig>) -> CrnnConfig {
    CrnnConfig {
        frames: 4,
        freq_bins: 16,
        in_channels: 2,
        filters: 2,
        pool_widths: vec![2, 2, 2],
        gru_hidden: 4,
        fc_hidden: 4,
        classes: 2,
        se,
        seed: 11,
    }
}

/// Whole-model check through the fused BCE loss in train mode.
pub fn model_case(name: impl Into<String>, cfg: CrnnConfig, rng: &mut impl Rng) -> Result<Case> {
    let mut model = SedModel::new(cfg.clone())?;
    for p in model.params_mut() {
        p.value = random_tensor(rng, p.value.dims()).map(|v| 0.8 * v);
    }
    let x = random_tensor(rng, &[2, cfg.frames, cfg.freq_bins, cfg.in_channels]);
    let y = random_tensor(rng, &[2, cfg.frames, cfg.classes]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut vars = vec![x];
    vars.extend(model.params().iter().map(|p| p.value.clone()));
    let load = move |vars: &[Tensor]| {
        let mut m = model.clone();
        for (p, v) in m.params_mut().into_iter().zip(&vars[1..]) {
            p.value = v.clone();
            p.zero_grad();
        }
        m
    };
    let load2 = load.clone();
    let y2 = y.clone();
    Ok(Case::new(
        name,
        MODEL_TOL,
        vars,
        move |v| {
            let (logits, _) = load(v).forward_logits(&v[0], Mode::Train)?;
            Ok(bce_with_logits(&logits, &y, None)?.loss)
        },
        move |v| {
            let mut m = load2(v);
            let (logits, cache) = m.forward_logits(&v[0], Mode::Train)?;
            let g = bce_with_logits(&logits, &y2, None)?.grad;
            let gx = m.backward(&cache, &g)?;
            let mut grads = vec![gx];
            grads.extend(m.params().iter().map(|p| p.grad.clone()));
            Ok(grads)
        },
    ))
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let se = |variant, aggregation| SeConfig {
        variant,
        aggregation,
        reduction: 2,
        ..SeConfig::default()
    };
    let configs = [
        ("model baseline", None),
        ("model tfc-concurrent max", Some(se(SeVariant::Concurrent, Aggregation::Maximization))),
        ("model tfc-concurrent concat", Some(se(SeVariant::Concurrent, Aggregation::Concatenation))),
        ("model tfc-sequential", Some(se(SeVariant::Sequential, Aggregation::Maximization))),
    ];
    configs
        .into_iter()
        .map(|(name, s)| model_case(name, tiny_model_config(s), rng))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Layers,
    Se,
    Model,
}

pub fn build_suite(suite: Suite, seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ suite as u64);
    match suite {
        Suite::Ops => Ok(op_cases(&mut rng)),
        Suite::Layers => layer_cases(&mut rng),
        Suite::Se => se_cases(&mut rng),
        Suite::Model => model_cases(&mut rng),
    }
}

/// Runs every suite and returns one report per case.
pub fn run_all(seed: u64, settings: &CheckSettings) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for suite in [Suite::Ops, Suite::Layers, Suite::Se, Suite::Model] {
        for case in build_suite(suite, seed)? {
            reports.push(case.run(settings)?);
        }
    }
    Ok(reports)
}
