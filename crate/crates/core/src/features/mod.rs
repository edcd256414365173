//! Magnitude/phase spectrogram features.
//!
//! Audio is cut into Hamming-windowed frames of length `M` with hop `M/2`,
//! transformed with a real DFT, and bins `1..=M/2` are kept. Magnitude and
//! phase are stacked on the channel axis (`[mag_0..mag_K, phase_0..phase_K]`)
//! and every frame is normalized per channel across frequency.

pub mod array;

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for zero-variance frames during normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Symmetric Hamming window `0.54 - 0.46 cos(2πn / (M-1))`.
pub fn hamming(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    (0..m)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (m - 1) as f64).cos())
        .collect()
}

pub fn frame_count(num_samples: usize, m: usize) -> usize {
    if num_samples < m {
        0
    } else {
        (num_samples - m) / (m / 2) + 1
    }
}

fn check_window(audio: &MultichannelAudio, m: usize) -> Result<()> {
    if m < 2 || !m.is_multiple_of(2) {
        return Err(Error::argument(format!("window length {m} must be even and at least 2")));
    }
    if audio.num_samples() < m {
        return Err(Error::argument(format!(
            "audio of {} samples is shorter than one window of {m}",
            audio.num_samples()
        )));
    }
    Ok(())
}

/// Frames `[T, M, mics]` multiplied by the given window.
pub fn frame_with_window(audio: &MultichannelAudio, m: usize, window: &[f64]) -> Result<Tensor> {
    check_window(audio, m)?;
    if window.len() != m {
        return Err(Error::argument("window length must equal the frame length"));
    }
    let (hop, mics) = (m / 2, audio.num_channels());
    let t = frame_count(audio.num_samples(), m);
    let mut out = Tensor::zeros(&[t, m, mics])?;
    let d = out.data_mut();
    for f in 0..t {
        for (mic, ch) in audio.channels().iter().enumerate() {
            for n in 0..m {
                d[(f * m + n) * mics + mic] = ch[f * hop + n] * window[n];
            }
        }
    }
    Ok(out)
}

/// Hamming-windowed frames `[T, M, mics]` with hop `M/2`.
pub fn frame_and_window(audio: &MultichannelAudio, m: usize) -> Result<Tensor> {
    frame_with_window(audio, m, &hamming(m))
}

/// Full complex DFT `X_k = Σ x[n] e^{-2πikn/M}` of a real frame.
pub fn dft(frame: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectroFrames {
    /// `[T, M/2, mics]`, bins 1..=M/2.
    pub magnitude: Tensor,
    /// Same layout, radians in (−π, π].
    pub phase: Tensor,
    pub window: usize,
}

impl SpectroFrames {
    pub fn hop(&self) -> usize {
        self.window / 2
    }
}

/// Phase of `x` in (−π, π]; zero for an exactly zero bin.
pub fn phase_of(x: Complex64) -> f64 {
    if x.re == 0.0 && x.im == 0.0 {
        return 0.0;
    }
    let p = x.im.atan2(x.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn stft_mag_phase(frames: &Tensor, m: usize) -> Result<SpectroFrames> {
    frames.expect_rank(3, "framed signal")?;
    let d = frames.dims();
    if d[1] != m || m < 2 || !m.is_multiple_of(2) {
        return Err(Error::shape(format!("frames {} do not have even length {m}", frames.shape())));
    }
    let (t, mics, bins) = (d[0], d[2], m / 2);
    let fft = FftPlanner::new().plan_fft_forward(m);
    let mut magnitude = Tensor::zeros(&[t, bins, mics])?;
    let mut phase = Tensor::zeros(&[t, bins, mics])?;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for f in 0..t {
        for mic in 0..mics {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(frames.data()[(f * m + n) * mics + mic], 0.0);
            }
            fft.process(&mut buf);
            for k in 1..=bins {
                let i = (f * bins + k - 1) * mics + mic;
                magnitude.data_mut()[i] = buf[k].norm();
                phase.data_mut()[i] = phase_of(buf[k]);
            }
        }
    }
    Ok(SpectroFrames {
        magnitude,
        phase,
        window: m,
    })
}

/// Normalizes every `[frame, ·, channel]` slice across frequency to zero
/// mean and unit (biased) variance, dividing by `max(std, NORM_EPS)`.
pub fn normalize_frames(x: &mut Tensor) -> Result<()> {
    x.expect_rank(3, "feature map")?;
    let d = x.dims().to_vec();
    let (t, bins, ch) = (d[0], d[1], d[2]);
    let data = x.data_mut();
    for f in 0..t {
        for c in 0..ch {
            let idx = |k: usize| (f * bins + k) * ch + c;
            let mean = (0..bins).map(|k| data[idx(k)]).sum::<f64>() / bins as f64;
            let var = (0..bins).map(|k| (data[idx(k)] - mean).powi(2)).sum::<f64>() / bins as f64;
            let scale = var.sqrt().max(NORM_EPS);
            for k in 0..bins {
                data[idx(k)] = (data[idx(k)] - mean) / scale;
            }
        }
    }
    Ok(())
}

/// `[T, M/2, 2·mics]`: magnitudes then phases, frame-normalized.
pub fn assemble_features(spec: &SpectroFrames) -> Result<Tensor> {
    let mut out = stack_channels(spec)?;
    normalize_frames(&mut out)?;
    Ok(out)
}

/// Channel stacking without normalization.
pub fn stack_channels(spec: &SpectroFrames) -> Result<Tensor> {
    spec.phase.expect_shape(spec.magnitude.dims())?;
    let d = spec.magnitude.dims();
    let (t, bins, mics) = (d[0], d[1], d[2]);
    let mut out = Tensor::zeros(&[t, bins, 2 * mics])?;
    let o = out.data_mut();
    for p in 0..t * bins {
        for mic in 0..mics {
            o[p * 2 * mics + mic] = spec.magnitude.data()[p * mics + mic];
            o[p * 2 * mics + mics + mic] = spec.phase.data()[p * mics + mic];
        }
    }
    Ok(out)
}

/// Splits stacked channels back into `(magnitude, phase)`.
pub fn split_channels(features: &Tensor) -> Result<(Tensor, Tensor)> {
    features.expect_rank(3, "feature map")?;
    let d = features.dims();
    if !d[2].is_multiple_of(2) {
        return Err(Error::shape("stacked features need an even channel count"));
    }
    let (t, bins, mics) = (d[0], d[1], d[2] / 2);
    let mut mag = Tensor::zeros(&[t, bins, mics])?;
    let mut phase = Tensor::zeros(&[t, bins, mics])?;
    for p in 0..t * bins {
        for mic in 0..mics {
            mag.data_mut()[p * mics + mic] = features.data()[p * 2 * mics + mic];
            phase.data_mut()[p * mics + mic] = features.data()[p * 2 * mics + mics + mic];
        }
    }
    Ok((mag, phase))
}

/// Full pipeline for one recording.
pub fn extract_features(audio: &MultichannelAudio, m: usize) -> Result<Tensor> {
    let frames = frame_and_window(audio, m)?;
    assemble_features(&stft_mag_phase(&frames, m)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// `[T, F, C]`.
    pub features: Tensor,
    /// One entry per frame; false for zero padding.
    pub valid: Vec<bool>,
}

/// Non-overlapping `T`-frame chunks; the last one is zero-padded.
pub fn chunk_sequences(features: &Tensor, t: usize) -> Result<Vec<Chunk>> {
    if t == 0 {
        return Err(Error::argument("chunk length must be positive"));
    }
    features.expect_rank(3, "feature map")?;
    let d = features.dims();
    let (total, row) = (d[0], d[1] * d[2]);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < total {
        let n = t.min(total - start);
        let mut data = vec![0.0; t * row];
        data[..n * row].copy_from_slice(&features.data()[start * row..(start + n) * row]);
        let mut valid = vec![false; t];
        valid[..n].iter_mut().for_each(|v| *v = true);
        chunks.push(Chunk {
            features: Tensor::from_vec(&[t, d[1], d[2]], data)?,
            valid,
        });
        start += t;
    }
    Ok(chunks)
}
