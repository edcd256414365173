//! Synthetic polyphonic multi-microphone scenes with exact labels.
//!
//! Each class has a fixed source kind and base frequency so classes are
//! separable. Every event reaches microphone `m` with an integer delay and a
//! gain; microphone 0 is the reference (no delay, unit gain).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};
use crate::metrics::EventRoll;

pub const MAX_DELAY_SAMPLES: usize = 8;
pub const MIN_GAIN: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Tone,
    Chirp,
    NoiseBurst,
    AmTone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class_id: usize,
    pub onset: f64,
    pub offset: f64,
    pub kind: SourceKind,
    /// Hz.
    pub freq: f64,
    /// Hz; chirp sweep span or noise band half-width.
    pub bandwidth: f64,
    pub level: f64,
    /// Seeds the noise-burst partials.
    pub seed: u64,
    /// Per-microphone delay in samples.
    pub delays: Vec<usize>,
    pub gains: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub duration: f64,
    pub sample_rate: u32,
    pub mics: usize,
    pub classes: usize,
    pub max_overlap: usize,
    /// Decay time of the optional comb reverberation tail; 0 disables it.
    pub reverb_seconds: f64,
    pub events: Vec<EventSpec>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub duration: f64,
    pub sample_rate: u32,
    pub mics: usize,
    pub classes: usize,
    pub max_overlap: usize,
    /// Events requested per scene.
    pub events: usize,
    pub min_event_seconds: f64,
    pub max_event_seconds: f64,
    pub reverb_seconds: f64,
    /// Placement attempts per event before giving up.
    pub max_tries: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            duration: 30.0,
            sample_rate: 44100,
            mics: 8,
            classes: 11,
            max_overlap: 3,
            events: 20,
            min_event_seconds: 0.5,
            max_event_seconds: 3.0,
            reverb_seconds: 0.0,
            max_tries: 1000,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_overlap == 0 {
            return Err(Error::config("max_overlap must be at least 1"));
        }
        if self.mics == 0 || self.classes == 0 || self.sample_rate == 0 {
            return Err(Error::config("mics, classes and sample_rate must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration must be positive"));
        }
        if !(self.min_event_seconds > 0.0 && self.min_event_seconds <= self.max_event_seconds) {
            return Err(Error::config("need 0 < min_event_seconds <= max_event_seconds"));
        }
        if self.reverb_seconds < 0.0 || !self.reverb_seconds.is_finite() {
            return Err(Error::config("reverb_seconds must be non-negative"));
        }
        Ok(())
    }
}

/// Kind, base frequency and bandwidth of a class. Base frequencies are log
/// spaced between 5% and 80% of Nyquist.
pub fn class_profile(class_id: usize, classes: usize, sample_rate: u32) -> (SourceKind, f64, f64) {
    let kinds = [SourceKind::Tone, SourceKind::Chirp, SourceKind::NoiseBurst, SourceKind::AmTone];
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (0.05 * nyquist, 0.8 * nyquist);
    let pos = if classes > 1 {
        class_id as f64 / (classes - 1) as f64
    } else {
        0.5
    };
    let freq = lo * (hi / lo).powf(pos);
    (kinds[class_id % kinds.len()], freq, 0.15 * freq)
}

/// Largest number of simultaneously active events in `events` plus a
/// candidate on `[onset, offset)`.
fn overlap_with(events: &[EventSpec], onset: f64, offset: f64) -> usize {
    let points = std::iter::once(onset).chain(
        events
            .iter()
            .map(|e| e.onset)
            .filter(|&p| p >= onset && p < offset),
    );
    points
        .map(|p| 1 + events.iter().filter(|e| e.onset <= p && p < e.offset).count())
        .max()
        .unwrap_or(1)
}

/// Random scene with the overlap cap enforced by rejection. Same-class
/// events never overlap.
pub fn sample_scene(params: &GenParams, seed: u64) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = params.max_event_seconds.min(params.duration);
    let min_len = params.min_event_seconds.min(max_len);
    let mut events: Vec<EventSpec> = Vec::with_capacity(params.events);
    for i in 0..params.events {
        let mut placed = None;
        for _ in 0..params.max_tries {
            let class_id = rng.gen_range(0..params.classes);
            let len = rng.gen_range(min_len..=max_len);
            let onset = rng.gen_range(0.0..=(params.duration - len));
            let offset = onset + len;
            let same_class = events
                .iter()
                .any(|e| e.class_id == class_id && e.onset < offset && onset < e.offset);
            if !same_class && overlap_with(&events, onset, offset) <= params.max_overlap {
                placed = Some((class_id, onset, offset));
                break;
            }
        }
        let (class_id, onset, offset) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place event {} of {} under overlap cap {} after {} tries",
                i + 1,
                params.events,
                params.max_overlap,
                params.max_tries
            ))
        })?;
        let (kind, base, bandwidth) = class_profile(class_id, params.classes, params.sample_rate);
        let mut delays = vec![0];
        let mut gains = vec![1.0];
        for _ in 1..params.mics {
            delays.push(rng.gen_range(0..=MAX_DELAY_SAMPLES));
            gains.push(rng.gen_range(MIN_GAIN..=1.0));
        }
        events.push(EventSpec {
            class_id,
            onset,
            offset,
            kind,
            freq: base * rng.gen_range(0.95..1.05),
            bandwidth,
            level: rng.gen_range(0.3..0.7),
            seed: rng.gen(),
            delays,
            gains,
        });
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    Ok(SceneSpec {
        duration: params.duration,
        sample_rate: params.sample_rate,
        mics: params.mics,
        classes: params.classes,
        max_overlap: params.max_overlap,
        reverb_seconds: params.reverb_seconds,
        events,
        seed,
    })
}

/// First sample index at or after `seconds`.
pub fn sample_index(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).ceil().max(0.0) as usize
}

/// The dry source signal of one event at the reference microphone, one
/// value per sample of `[onset, offset)`.
pub fn event_signal(event: &EventSpec, sample_rate: u32) -> Vec<f64> {
    let start = sample_index(event.onset, sample_rate);
    let end = sample_index(event.offset, sample_rate);
    let n = end.saturating_sub(start);
    let fs = sample_rate as f64;
    let dur = (n as f64 / fs).max(1.0 / fs);
    let partials: Vec<(f64, f64)> = if event.kind == SourceKind::NoiseBurst {
        let mut rng = ChaCha8Rng::seed_from_u64(event.seed);
        (0..12)
            .map(|_| {
                let f = event.freq + rng.gen_range(-1.0..1.0) * event.bandwidth;
                (f, rng.gen_range(0.0..2.0 * PI))
            })
            .collect()
    } else {
        Vec::new()
    };
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let v = match event.kind {
                SourceKind::Tone => (2.0 * PI * event.freq * t).sin(),
                SourceKind::Chirp => {
                    (2.0 * PI * (event.freq * t + event.bandwidth * t * t / (2.0 * dur))).sin()
                }
                SourceKind::NoiseBurst => {
                    partials
                        .iter()
                        .map(|&(f, ph)| (2.0 * PI * f * t + ph).sin())
                        .sum::<f64>()
                        / (partials.len() as f64 / 2.0).sqrt()
                }
                SourceKind::AmTone => {
                    (2.0 * PI * event.freq * t).sin() * (0.6 + 0.4 * (2.0 * PI * 5.0 * t).sin())
                }
            };
            event.level * v
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub audio: MultichannelAudio,
    /// Factor the mixture was multiplied by to stay within ±1 (1 if none).
    pub scale: f64,
}

pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    let n = sample_index(spec.duration, spec.sample_rate);
    let mut channels = vec![vec![0.0; n]; spec.mics];
    for e in &spec.events {
        if e.delays.len() != spec.mics || e.gains.len() != spec.mics {
            return Err(Error::argument("event microphone parameters do not match the scene"));
        }
        if !(0.0 <= e.onset && e.onset < e.offset && e.offset <= spec.duration) {
            return Err(Error::argument(format!(
                "event [{}, {}) lies outside the scene",
                e.onset, e.offset
            )));
        }
        let start = sample_index(e.onset, spec.sample_rate);
        let sig = event_signal(e, spec.sample_rate);
        for (m, ch) in channels.iter_mut().enumerate() {
            let (d, g) = (e.delays[m], e.gains[m]);
            for (i, &v) in sig.iter().enumerate() {
                if let Some(s) = ch.get_mut(start + i + d) {
                    *s += g * v;
                }
            }
        }
    }
    if spec.reverb_seconds > 0.0 {
        let fs = spec.sample_rate as f64;
        let lag = ((0.03 * fs) as usize).max(1);
        let feedback = (-3.0 * lag as f64 / (spec.reverb_seconds * fs) * std::f64::consts::LN_10).exp();
        for ch in &mut channels {
            for i in lag..ch.len() {
                ch[i] += feedback * ch[i - lag];
            }
        }
    }
    let peak = channels.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if scale != 1.0 {
        channels.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    Ok(RenderedScene {
        audio: MultichannelAudio::new(channels, spec.sample_rate)?,
        scale,
    })
}

/// Frame `t` of a window `2·hop` long is centered at `(t + 1)·hop`; it is
/// active for class `n` iff the center lies in `[onset, offset)` of an event
/// of that class.
pub fn intervals_to_roll(
    intervals: &[(usize, f64, f64)],
    classes: usize,
    frame_hop_seconds: f64,
    frames: usize,
) -> Result<EventRoll> {
    let mut roll = EventRoll::new(frames, classes, frame_hop_seconds)?.with_origin(frame_hop_seconds);
    for &(class, onset, offset) in intervals {
        if class >= classes {
            return Err(Error::argument(format!("class {class} out of range for {classes} classes")));
        }
        for t in 0..frames {
            let c = roll.frame_time(t);
            if onset <= c && c < offset {
                roll.set(t, class, true);
            }
        }
    }
    Ok(roll)
}

pub fn scene_to_roll(spec: &SceneSpec, frame_hop_seconds: f64, frames: usize) -> Result<EventRoll> {
    let intervals: Vec<_> = spec
        .events
        .iter()
        .map(|e| (e.class_id, e.onset, e.offset))
        .collect();
    intervals_to_roll(&intervals, spec.classes, frame_hop_seconds, frames)
}
