use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfcse::audio::MultichannelAudio;
use tfcse::features::{dft, extract_features, frame_and_window, hamming, split_channels, stft_mag_phase};

/// Direct O(M²) transform.
fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let m = x.len();
    (0..m)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
                let a = -2.0 * PI * (k * n % m) as f64 / m as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn noise(rng: &mut ChaCha8Rng, mics: usize, n: usize) -> MultichannelAudio {
    let ch = (0..mics).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    MultichannelAudio::new(ch, 16000).unwrap()
}

#[test]
fn fft_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [2, 8, 30, 64, 512] {
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (fast, (re, im)) in dft(&x).iter().zip(naive_dft(&x)) {
            assert!((fast.re - re).abs() < 1e-9 && (fast.im - im).abs() < 1e-9, "M={m}");
        }
    }
}

#[test]
fn hamming_formula() {
    for m in [2, 3, 16, 511, 512] {
        let w = hamming(m);
        for (n, &v) in w.iter().enumerate() {
            let expect = 0.54 - 0.46 * (2.0 * PI * n as f64 / (m as f64 - 1.0)).cos();
            assert!((v - expect).abs() < 1e-15);
            assert!((v - w[m - 1 - n]).abs() < 1e-15);
        }
    }
    let w = hamming(513);
    assert!((w[256] - 1.0).abs() < 1e-15);
}

#[test]
fn spectra_match_direct_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 32;
    let audio = noise(&mut rng, 3, 200);
    let frames = frame_and_window(&audio, m).unwrap();
    let spec = stft_mag_phase(&frames, m).unwrap();
    let w = hamming(m);
    let t = spec.magnitude.dims()[0];
    assert_eq!(t, (200 - m) / (m / 2) + 1);
    for f in 0..t {
        for mic in 0..3 {
            let x: Vec<f64> = (0..m).map(|n| audio.channels()[mic][f * m / 2 + n] * w[n]).collect();
            let bins = naive_dft(&x);
            for k in 1..=m / 2 {
                let i = (f * m / 2 + k - 1) * 3 + mic;
                let (re, im) = bins[k];
                assert!((spec.magnitude.data()[i] - re.hypot(im)).abs() < 1e-9);
                assert!(angle_diff(spec.phase.data()[i], im.atan2(re)) < 1e-9);
                let p = spec.phase.data()[i];
                assert!(p > -PI && p <= PI);
            }
        }
    }
}

#[test]
fn tone_peaks_in_its_bin() {
    let (m, k0, fs) = (64usize, 5usize, 8000u32);
    let freq = k0 as f64 * fs as f64 / m as f64;
    let x: Vec<f64> = (0..1024).map(|n| (2.0 * PI * freq * n as f64 / fs as f64).sin()).collect();
    let audio = MultichannelAudio::new(vec![x], fs).unwrap();
    let spec = stft_mag_phase(&frame_and_window(&audio, m).unwrap(), m).unwrap();
    let bins = m / 2;
    for f in 0..spec.magnitude.dims()[0] {
        let row = &spec.magnitude.data()[f * bins..(f + 1) * bins];
        let best = (0..bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best + 1, k0);
    }
}

#[test]
fn features_stack_normalized_magnitude_then_phase() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 16;
    let audio = noise(&mut rng, 2, 100);
    let feats = extract_features(&audio, m).unwrap();
    assert_eq!(feats.dims(), [(100 - 16) / 8 + 1, 8, 4]);
    let spec = stft_mag_phase(&frame_and_window(&audio, m).unwrap(), m).unwrap();
    let (mag, phase) = split_channels(&feats).unwrap();
    for (src, got) in [(&spec.magnitude, &mag), (&spec.phase, &phase)] {
        let (t, bins, mics) = (src.dims()[0], src.dims()[1], src.dims()[2]);
        for f in 0..t {
            for c in 0..mics {
                let col: Vec<f64> = (0..bins).map(|k| src.data()[(f * bins + k) * mics + c]).collect();
                let mean = col.iter().sum::<f64>() / bins as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bins as f64).sqrt();
                for k in 0..bins {
                    let expect = (col[k] - mean) / sd.max(1e-8);
                    assert!((got.data()[(f * bins + k) * mics + c] - expect).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn rejects_bad_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let audio = noise(&mut rng, 1, 50);
    for m in [0, 1, 7, 64] {
        assert!(extract_features(&audio, m).is_err(), "M={m}");
    }
}
