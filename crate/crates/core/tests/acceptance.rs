//! Acceptance criteria, one printed PASS/FAIL line each.
//!
//! Two criteria cannot be met as literally stated and print FAIL: the
//! reported "+tf-SE" scores are internally inconsistent, and
//! attention forced to 1 cannot reproduce the input for additive or
//! multiplicative aggregation. For those the test asserts that the deviation
//! is exactly the known one and nothing else.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfcse::audio::MultichannelAudio;
use tfcse::dataset::FeatureParams;
use tfcse::experiment::{run_split, synthesize_recordings, ExperimentConfig, SeChoice, SynthConfig};
use tfcse::features::{dft, extract_features, hamming};
use tfcse::gradcheck::{run_all, CheckSettings};
use tfcse::layers::Mode;
use tfcse::metrics::{evaluate, s_sed, EventRoll};
use tfcse::model::{checkpoint, count_parameters, CrnnConfig, SedModel};
use tfcse::se::{Aggregation, SeBlock, SeConfig, SeVariant};
use tfcse::synth::GenParams;
use tfcse::tensor::Tensor;

/// Writes straight to the stderr handle so the lines survive the test
/// harness output capture.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

fn report(n: u32, pass: bool, name: &str, detail: &str, elapsed: Duration) {
    say!(
        "criterion {n} {} {name}: {detail} [{:.2}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn random(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tfc_default() -> SeConfig {
    SeConfig {
        variant: SeVariant::Concurrent,
        aggregation: Aggregation::Maximization,
        reduction: 8,
        ..SeConfig::default()
    }
}

#[test]
fn criterion_1_parameter_counts() {
    let start = Instant::now();
    let base = count_parameters(&SedModel::new(CrnnConfig::default()).unwrap());
    let se = count_parameters(
        &SedModel::new(CrnnConfig {
            se: Some(tfc_default()),
            ..CrnnConfig::default()
        })
        .unwrap(),
    );
    let delta = se - base;
    let overhead = format!("{:.2}", 100.0 * delta as f64 / base as f64);
    let elapsed = start.elapsed();
    let pass = base == 496_587 && se == 500_067 && delta == 3_480 && overhead == "0.70" && elapsed.as_secs_f64() < 1.0;
    report(
        1,
        pass,
        "parameter counts",
        &format!("baseline={base} tfc-SE={se} delta={delta} overhead={overhead}%"),
        elapsed,
    );
    assert!(pass);
}

/// (model, F1 %, ER, printed S_SED) as reported.
const REPORTED_SYSTEMS: [(&str, f64, f64, f64); 5] = [
    ("CRNN", 79.67, 0.2538, 0.2285),
    ("+c-SE", 79.91, 0.2378, 0.2194),
    ("+tf-SE", 82.95, 0.2233, 0.1952),
    ("+tfc-SE concurrent", 83.57, 0.1982, 0.1812),
    ("+tfc-SE sequential", 84.23, 0.2026, 0.1801),
];

const REPORTED_ABLATIONS: [(&str, f64, f64, f64); 12] = [
    ("Addition", 84.92, 0.1791, 0.1649),
    ("Multiplication", 84.48, 0.1959, 0.1756),
    ("Maximization", 85.79, 0.1703, 0.1562),
    ("Concatenation", 85.26, 0.1841, 0.1657),
    ("r=2", 85.07, 0.1751, 0.1622),
    ("r=4", 85.59, 0.1881, 0.1661),
    ("r=8", 85.79, 0.1703, 0.1562),
    ("r=16", 83.51, 0.1957, 0.1803),
    ("Max squeeze", 82.89, 0.1971, 0.1841),
    ("Avg squeeze", 85.79, 0.1703, 0.1562),
    ("ReLU", 83.42, 0.1799, 0.1728),
    ("Tanh", 82.58, 0.2196, 0.1969),
];

#[test]
fn criterion_2_s_sed_consistency() {
    let start = Instant::now();
    let dev = |&(_, f1, er, printed): &(&str, f64, f64, f64)| (s_sed(er, f1 / 100.0) - printed).abs();
    let bad: Vec<(&str, f64)> = REPORTED_SYSTEMS
        .iter()
        .filter(|r| dev(r) > 5e-4)
        .map(|r| (r.0, dev(r)))
        .collect();
    let ablation_ok = REPORTED_ABLATIONS.iter().all(|r| dev(r) <= 5e-4);
    let examples_ok = (s_sed(0.2538, 0.7967) - 0.2285).abs() <= 5e-4 && (s_sed(0.2026, 0.8423) - 0.1801).abs() <= 5e-4;
    let detail = format!(
        "{}/5 system rows within 5e-4{}; all {} ablation rows within 5e-4: {}",
        5 - bad.len(),
        bad.iter()
            .map(|(m, d)| format!(
                "; {m} gives {:.5} vs printed 0.1952 (|d|={d:.2e}, inconsistent as printed)",
                s_sed(0.2233, 0.8295)
            ))
            .collect::<String>(),
        REPORTED_ABLATIONS.len(),
        ablation_ok
    );
    report(2, bad.is_empty() && ablation_ok && examples_ok, "S_SED consistency", &detail, start.elapsed());
    assert!(examples_ok && ablation_ok);
    // Known deviation: only the +tf-SE row, by (0.2233 + 1 - 0.8295)/2 - 0.1952.
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].0, "+tf-SE");
    assert!((bad[0].1 - 0.0017).abs() < 1e-9);
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let reports = run_all(2024, &CheckSettings::default()).unwrap();
    for r in &reports {
        say!("  {}", r.line());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst_layer = reports
        .iter()
        .filter(|r| !r.name.starts_with("model"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let worst_model = reports
        .iter()
        .filter(|r| r.name.starts_with("model"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = failed.is_empty() && worst_layer <= 1e-5 && worst_model <= 1e-4 && elapsed.as_secs() < 120;
    report(
        3,
        pass,
        "gradient suite",
        &format!(
            "{} cases, worst op/layer/SE rel err {worst_layer:.2e}, worst model rel err {worst_model:.2e}, failed {failed:?}",
            reports.len()
        ),
        elapsed,
    );
    assert!(pass);
}

/// Independent per-segment counting from the definitions.
fn oracle(reference: &EventRoll, estimate: &EventRoll, seg: f64) -> (f64, f64) {
    let frames = reference.frames();
    let classes = reference.classes();
    let times: Vec<f64> = (0..frames).map(|t| reference.frame_time(t)).collect();
    let last = times.last().copied().unwrap_or(0.0);
    let mut k_count = 0;
    while (k_count as f64) * seg <= last {
        k_count += 1;
    }
    let (mut n, mut tp, mut fp, mut fn_, mut s, mut d, mut i) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for k in 0..k_count {
        let lo = k as f64 * seg;
        let hi = (k + 1) as f64 * seg;
        let (mut sn, mut stp, mut sfp, mut sfn) = (0u64, 0u64, 0u64, 0u64);
        for c in 0..classes {
            let r = (0..frames).any(|t| times[t] >= lo && times[t] < hi && reference.get(t, c));
            let e = (0..frames).any(|t| times[t] >= lo && times[t] < hi && estimate.get(t, c));
            sn += r as u64;
            stp += (r && e) as u64;
            sfp += (!r && e) as u64;
            sfn += (r && !e) as u64;
        }
        n += sn;
        tp += stp;
        fp += sfp;
        fn_ += sfn;
        s += sfn.min(sfp);
        d += sfn.saturating_sub(sfp);
        i += sfp.saturating_sub(sfn);
    }
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (f1, (s + d + i) as f64 / n as f64)
}

#[test]
fn criterion_4_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut compared, mut mismatches, mut undefined) = (0, 0, 0);
    while compared + undefined < 1000 {
        let frames = rng.gen_range(1..=40);
        let classes = rng.gen_range(1..=4);
        let hop = rng.gen_range(0.01..0.5);
        let seg = [0.25, 0.5, 1.0, 1.3][rng.gen_range(0..4)];
        let density = rng.gen_range(0.05..0.9);
        let mk = |rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<bool>> = (0..frames)
                .map(|_| (0..classes).map(|_| rng.gen_bool(density)).collect())
                .collect();
            EventRoll::from_rows(&rows, hop).unwrap()
        };
        let (r, e) = (mk(&mut rng), mk(&mut rng));
        match evaluate(&r, &e, seg) {
            Ok(scores) => {
                let (f1, er) = oracle(&r, &e, seg);
                if scores.f1 != f1 || scores.er != er {
                    mismatches += 1;
                }
                compared += 1;
            }
            Err(_) => {
                assert_eq!(r.active_count(), 0, "only an empty reference may be undefined");
                undefined += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(
        4,
        pass,
        "metric oracle equivalence",
        &format!("{compared} pairs compared exactly, {mismatches} mismatches, {undefined} with empty reference (undefined ER)"),
        start.elapsed(),
    );
    assert!(pass);
}

fn se_model_config(se: Option<SeConfig>) -> CrnnConfig {
    CrnnConfig {
        frames: 8,
        freq_bins: 32,
        in_channels: 4,
        filters: 8,
        pool_widths: vec![4, 4, 2],
        gru_hidden: 6,
        fc_hidden: 5,
        classes: 3,
        se,
        seed: 21,
    }
}

/// Baseline model carrying the SE model's non-SE weights.
fn matching_baseline(se_model: &SedModel) -> SedModel {
    let mut base = SedModel::new(se_model_config(None)).unwrap();
    let source: HashMap<String, Tensor> = se_model
        .named_arrays()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let names: Vec<String> = base.named_arrays().into_iter().map(|(n, _)| n).collect();
    for (name, dst) in names.iter().zip(base.arrays_mut()) {
        *dst = source[name].clone();
    }
    base.mark_stats_ready();
    base
}

#[test]
fn criterion_5_se_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Sigmoid gates lie strictly inside (0, 1).
    let mut gates_ok = true;
    for variant in [SeVariant::Channel, SeVariant::TimeFrequency, SeVariant::Concurrent, SeVariant::Sequential] {
        let block = SeBlock::new(
            SeConfig {
                variant,
                reduction: 2,
                ..SeConfig::default()
            },
            8,
            &mut rng,
        )
        .unwrap();
        for _ in 0..20 {
            let u = random(&mut rng, &[2, 5, 6, 8]).map(|v| 4.0 * v);
            let a = block.attention(&u).unwrap();
            for t in a.channel.iter().chain(a.time_frequency.iter()) {
                gates_ok &= t.data().iter().all(|&s| s > 0.0 && s < 1.0);
            }
        }
    }

    // Attention forced to 1 against the baseline network.
    let variants = [
        ("c", SeVariant::Channel, Aggregation::Maximization),
        ("tf", SeVariant::TimeFrequency, Aggregation::Maximization),
        ("tfc-concurrent max", SeVariant::Concurrent, Aggregation::Maximization),
        ("tfc-sequential", SeVariant::Sequential, Aggregation::Maximization),
        ("tfc-concurrent add", SeVariant::Concurrent, Aggregation::Addition),
        ("tfc-concurrent mul", SeVariant::Concurrent, Aggregation::Multiplication),
    ];
    let x = random(&mut rng, &[2, 8, 32, 4]);
    let mut identical = Vec::new();
    let mut differing = Vec::new();
    for (name, variant, aggregation) in variants {
        let cfg = se_model_config(Some(SeConfig {
            variant,
            aggregation,
            reduction: 2,
            ..SeConfig::default()
        }));
        let mut m = SedModel::new(cfg).unwrap();
        for s in &mut m.stages {
            s.bn.running_mean = random(&mut rng, &[8]).map(|v| 0.1 * v);
            s.bn.running_var = random(&mut rng, &[8]).map(|v| 1.0 + 0.5 * v);
        }
        m.mark_stats_ready();
        m.set_unit_attention(true);
        let base = matching_baseline(&m);
        if m.infer(&x).unwrap() == base.infer(&x).unwrap() {
            identical.push(name);
        } else {
            differing.push(name);
        }
    }

    // Closed forms of the two aggregations that cannot reduce to U.
    let u = random(&mut rng, &[1, 3, 4, 8]);
    let mut closed_forms_ok = true;
    for (agg, expect) in [
        (Aggregation::Addition, u.map(|v| 2.0 * v)),
        (Aggregation::Multiplication, u.map(|v| v * v)),
        (Aggregation::Concatenation, {
            let mut d = Vec::new();
            for row in u.data().chunks(8) {
                d.extend_from_slice(row);
                d.extend_from_slice(row);
            }
            Tensor::from_vec(&[1, 3, 4, 16], d).unwrap()
        }),
    ] {
        let mut b = SeBlock::new(
            SeConfig {
                aggregation: agg,
                reduction: 2,
                ..SeConfig::default()
            },
            8,
            &mut rng,
        )
        .unwrap();
        b.force_unit_attention = true;
        use tfcse::layers::Layer;
        closed_forms_ok &= b.infer(&u).unwrap() == expect;
    }

    // cSE gates do not depend on where things are in (T, F).
    let mut perm_err = 0.0f64;
    for squeeze in [tfcse::se::SqueezeOp::Avg, tfcse::se::SqueezeOp::Max] {
        let block = SeBlock::new(
            SeConfig {
                variant: SeVariant::Channel,
                squeeze,
                reduction: 2,
                ..SeConfig::default()
            },
            8,
            &mut rng,
        )
        .unwrap();
        for _ in 0..50 {
            let u = random(&mut rng, &[1, 5, 6, 8]);
            let mut pos: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() {
                pos.swap(i, rng.gen_range(0..=i));
            }
            let mut p = Tensor::zeros_like(&u);
            for (dst, &src) in pos.iter().enumerate() {
                p.data_mut()[dst * 8..dst * 8 + 8].copy_from_slice(&u.data()[src * 8..src * 8 + 8]);
            }
            let a = block.attention(&u).unwrap().channel.unwrap();
            let b = block.attention(&p).unwrap().channel.unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                perm_err = perm_err.max((x - y).abs());
            }
        }
    }

    let perm_ok = perm_err <= 1e-12;
    let pass = gates_ok && perm_ok && closed_forms_ok && differing.is_empty();
    report(
        5,
        pass,
        "SE invariants",
        &format!(
            "gates in (0,1): {gates_ok}; unit attention bit-identical to baseline for {identical:?}, not for {differing:?} \
             (unit-gated add gives 2U and mul gives U*U, verified: {closed_forms_ok}); cSE permutation max diff {perm_err:.1e}"
        ),
        start.elapsed(),
    );
    assert!(gates_ok && perm_ok && closed_forms_ok);
    assert_eq!(identical, ["c", "tf", "tfc-concurrent max", "tfc-sequential"]);
    assert_eq!(differing, ["tfc-concurrent add", "tfc-concurrent mul"]);
}

#[test]
fn criterion_6_shape_chain() {
    let start = Instant::now();
    let mut model = SedModel::new(CrnnConfig::default()).unwrap();
    model.mark_stats_ready();
    let x = Tensor::zeros(&[1, 256, 256, 16]).unwrap();
    let trace = model.trace_shapes(&x).unwrap();
    let by_name: HashMap<&str, &tfcse::model::ShapeRecord> = trace.iter().map(|r| (r.layer.as_str(), r)).collect();
    // The reference listing gives the pooled (output) shape for Maxpool2 and Maxpool3.
    let rows: [(&str, &[usize], bool); 10] = [
        ("Conv1", &[256, 256, 16], true),
        ("Maxpool1", &[256, 256, 64], true),
        ("Conv2", &[256, 32, 64], true),
        ("Maxpool2", &[256, 4, 64], false),
        ("Conv3", &[256, 4, 64], true),
        ("Maxpool3", &[256, 2, 64], false),
        ("Bi-GRU1", &[256, 128], true),
        ("Bi-GRU2", &[256, 128], true),
        ("FC1", &[256, 128], true),
        ("FC2", &[256, 128], true),
    ];
    let mut bad = Vec::new();
    for (name, shape, is_input) in rows {
        let r = by_name[name];
        let got = if is_input { &r.input } else { &r.output };
        if got != shape {
            bad.push(format!("{name}: {got:?} != {shape:?}"));
        }
    }
    let final_ok = by_name["FC2"].output == [256, 11];
    let pass = bad.is_empty() && final_ok;
    let chain: Vec<String> = trace
        .iter()
        .map(|r| format!("{}{:?}", r.layer, r.output))
        .collect();
    report(
        6,
        pass,
        "shape chain",
        &format!("input [256, 256, 16] -> {}; mismatches {bad:?}", chain.join(" -> ")),
        start.elapsed(),
    );
    assert!(pass);
}

fn desk_scene() -> GenParams {
    GenParams {
        duration: 10.0,
        sample_rate: 4000,
        mics: 4,
        classes: 4,
        max_overlap: 2,
        events: 8,
        min_event_seconds: 0.5,
        max_event_seconds: 3.0,
        ..GenParams::default()
    }
}

fn desk_config(se: SeChoice) -> ExperimentConfig {
    ExperimentConfig {
        window: 64,
        sequence_length: 128,
        classes: 4,
        filters: 16,
        gru_hidden: 32,
        fc_hidden: 32,
        pool_widths: vec![4, 4, 2],
        se,
        agg: if se.0 == Some(SeVariant::Concurrent) {
            Some(Aggregation::Maximization)
        } else {
            None
        },
        r: 8,
        epochs: 150,
        batch: 16,
        lr: 1e-3,
        patience: 5,
        seed: 7,
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_7_desk_scale_training() {
    let start = Instant::now();
    let fp = FeatureParams {
        window: 64,
        sequence_length: 128,
        classes: 4,
    };
    let synth = |scenes, seed| SynthConfig {
        scenes,
        folds: 1,
        seed,
        scene: desk_scene(),
        ..SynthConfig::default()
    };
    let train_all = synthesize_recordings(&synth(40, 100), &fp).unwrap();
    let test = synthesize_recordings(&synth(10, 200), &fp).unwrap();
    // 10% of the training scenes monitor early stopping.
    let (train, val) = train_all.split_at(36);

    let mut results = Vec::new();
    for choice in ["tfc-concurrent", "none", "c", "tf"] {
        let se: SeChoice = choice.parse().unwrap();
        let t0 = Instant::now();
        let r = run_split(&desk_config(se), 0, train, val, &test, |_| {}).unwrap();
        say!(
            "  se={choice:<15} test {} best_epoch={} epochs={} [{:.0}s]",
            r.scores.record_line(),
            r.best_epoch,
            r.epochs_run,
            t0.elapsed().as_secs_f64()
        );
        results.push((choice, r, t0.elapsed()));
    }
    let (_, tfc, tfc_time) = &results[0];
    let pass = tfc.scores.f1 >= 0.85 && tfc.scores.er <= 0.35 && tfc.epochs_run <= 150 && tfc_time.as_secs() <= 1800;
    let order: Vec<String> = {
        let mut v: Vec<(&str, f64)> = results.iter().map(|(c, r, _)| (*c, r.scores.s_sed)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v.iter().map(|(c, s)| format!("{c}={s:.4}")).collect()
    };
    report(
        7,
        pass,
        "desk-scale training",
        &format!(
            "tfc-SE concurrent max r=8: F1={:.4} ER={:.4} after {} epochs in {:.0}s; S_SED ordering (reported only, best first): {}",
            tfc.scores.f1,
            tfc.scores.er,
            tfc.epochs_run,
            tfc_time.as_secs_f64(),
            order.join(" < ")
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let start = Instant::now();
    let fp = FeatureParams {
        window: 64,
        sequence_length: 32,
        classes: 3,
    };
    let synth = SynthConfig {
        scenes: 6,
        folds: 1,
        seed: 8,
        scene: GenParams {
            duration: 3.0,
            sample_rate: 4000,
            mics: 2,
            classes: 3,
            max_overlap: 2,
            events: 3,
            max_event_seconds: 1.5,
            ..GenParams::default()
        },
        ..SynthConfig::default()
    };
    let recs = synthesize_recordings(&synth, &fp).unwrap();
    let again = synthesize_recordings(&synth, &fp).unwrap();
    let data_same = recs
        .iter()
        .zip(&again)
        .all(|(a, b)| a.features == b.features && a.roll == b.roll);
    let cfg = ExperimentConfig {
        window: 64,
        sequence_length: 32,
        classes: 3,
        filters: 4,
        gru_hidden: 6,
        fc_hidden: 6,
        pool_widths: vec![4, 4, 2],
        se: "tfc-concurrent".parse().unwrap(),
        r: 2,
        epochs: 4,
        batch: 4,
        patience: 3,
        seed: 9,
        ..ExperimentConfig::default()
    };
    let run = || run_split(&cfg, 0, &recs[..4], &recs[4..5], &recs[5..], |_| {}).unwrap();
    let (a, b) = (run(), run());
    let history_same = a.history == b.history
        && a.history
            .iter()
            .zip(&b.history)
            .all(|(x, y)| x.train_loss.to_bits() == y.train_loss.to_bits() && x.validation.s_sed.to_bits() == y.validation.s_sed.to_bits());

    let bytes = checkpoint::encode(&a.model).unwrap();
    let loaded = checkpoint::decode(&bytes).unwrap();
    let arrays_same = a
        .model
        .named_arrays()
        .iter()
        .zip(loaded.named_arrays())
        .all(|((na, ta), (nb, tb))| {
            *na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 32, 32, 4]);
    let forward_same = a.model.infer(&x).unwrap() == loaded.infer(&x).unwrap();
    let reencoded_same = checkpoint::encode(&loaded).unwrap() == bytes;
    let mut trained = a.model.clone();
    let train_mode_same = trained.forward(&x, Mode::Eval).unwrap() == loaded.infer(&x).unwrap();

    let pass = data_same && history_same && arrays_same && forward_same && reencoded_same && train_mode_same;
    report(
        8,
        pass,
        "determinism and persistence",
        &format!(
            "data {data_same}, {}-epoch history bit-identical {history_same}, checkpoint arrays {arrays_same}, \
             eval forward after load {forward_same}, re-encode identical {reencoded_same}",
            a.history.len()
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_9_feature_pipeline() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = hamming(512);
    let w0_err = (w[0] - 0.08).abs();

    let mut parseval_err = 0.0f64;
    for m in [64usize, 512] {
        let w = hamming(m);
        for _ in 0..20 {
            let frame: Vec<f64> = (0..m).map(|n| rng.gen_range(-1.0..1.0) * w[n]).collect();
            let time: f64 = frame.iter().map(|v| v * v).sum();
            let freq: f64 = dft(&frame).iter().map(|c| c.norm_sqr()).sum::<f64>() / m as f64;
            parseval_err = parseval_err.max((time - freq).abs());
        }
    }

    let samples = 255 * 256 + 512;
    let channels = (0..8)
        .map(|_| (0..samples).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let audio = MultichannelAudio::new(channels, 44100).unwrap();
    let feats = extract_features(&audio, 512).unwrap();
    let shape_ok = feats.dims() == [256, 256, 16];

    let pass = w0_err <= 1e-12 && parseval_err <= 1e-9 && shape_ok;
    report(
        9,
        pass,
        "feature pipeline",
        &format!("Parseval max abs err {parseval_err:.2e}, default feature shape {:?}, |w[0]-0.08| = {w0_err:.1e}", feats.dims()),
        start.elapsed(),
    );
    assert!(pass);
}
