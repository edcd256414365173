//! Label files, manifests, and turning recordings into training sequences.
//!
//! Label CSV: `class_id,onset_seconds,offset_seconds`, one event per row,
//! with an optional header row. Manifest CSV: `audio_path,label_path,fold`,
//! paths relative to the manifest's directory.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_audio, MultichannelAudio};
use crate::error::{Error, Result};
use crate::features::{array, chunk_sequences, extract_features, frame_count};
use crate::metrics::EventRoll;
use crate::synth::intervals_to_roll;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub class_id: usize,
    pub onset_seconds: f64,
    pub offset_seconds: f64,
}

pub const LABEL_HEADER: [&str; 3] = ["class_id", "onset_seconds", "offset_seconds"];
pub const MANIFEST_HEADER: [&str; 3] = ["audio_path", "label_path", "fold"];

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn records(
    what: &'static str,
    text: &str,
    header: [&str; 3],
) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for (i, rec) in csv_reader(text).records().enumerate() {
        let rec = rec.map_err(|e| Error::format(what, e.to_string()))?;
        if i == 0 && rec.get(0) == Some(header[0]) {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::format(what, format!("row {} has {} fields, expected 3", i + 1, rec.len())));
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRow>> {
    records("label file", text, LABEL_HEADER)?
        .into_iter()
        .map(|(row, rec)| {
            let bad = |f: &str| Error::format("label file", format!("row {row}: bad {f}"));
            let class_id = rec[0].parse().map_err(|_| bad("class_id"))?;
            let onset: f64 = rec[1].parse().map_err(|_| bad("onset"))?;
            let offset: f64 = rec[2].parse().map_err(|_| bad("offset"))?;
            if !(onset.is_finite() && offset.is_finite() && 0.0 <= onset && onset < offset) {
                return Err(Error::format(
                    "label file",
                    format!("row {row}: need 0 <= onset < offset, got [{onset}, {offset})"),
                ));
            }
            Ok(LabelRow {
                class_id,
                onset_seconds: onset,
                offset_seconds: offset,
            })
        })
        .collect()
}

pub fn format_labels(rows: &[LabelRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABEL_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.class_id.to_string(),
            r.onset_seconds.to_string(),
            r.offset_seconds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii")
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    parse_labels(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    std::fs::write(path, format_labels(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub labels: PathBuf,
    pub fold: usize,
}

/// Relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    records("manifest", text, MANIFEST_HEADER)?
        .into_iter()
        .map(|(row, rec)| {
            if rec[0].is_empty() || rec[1].is_empty() {
                return Err(Error::format("manifest", format!("row {row}: empty path")));
            }
            let fold = rec[2]
                .parse()
                .map_err(|_| Error::format("manifest", format!("row {row}: bad fold {:?}", &rec[2])))?;
            Ok(ManifestEntry {
                audio: base.join(&rec[0]),
                labels: base.join(&rec[1]),
                fold,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Writes paths relative to `base` when possible.
pub fn format_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory write");
    for e in entries {
        w.write_record([rel(&e.audio), rel(&e.labels), e.fold.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 paths")
}

pub fn folds(entries: &[ManifestEntry]) -> Vec<usize> {
    let mut f: Vec<usize> = entries.iter().map(|e| e.fold).collect();
    f.sort_unstable();
    f.dedup();
    f
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Fold `test_fold` becomes the test set; `validation_fraction` of the
/// remaining entries (rounded up, at least one when two or more remain) is
/// held out by a seeded shuffle. With a fraction of 0 the test set doubles as
/// the validation set.
pub fn make_split(
    entries: &[ManifestEntry],
    test_fold: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("validation fraction must lie in [0, 1)"));
    }
    let (test, mut train): (Vec<_>, Vec<_>) = entries.iter().cloned().partition(|e| e.fold == test_fold);
    if test.is_empty() {
        return Err(Error::config(format!("no manifest entries in fold {test_fold}")));
    }
    if train.is_empty() {
        return Err(Error::config("no training entries outside the test fold"));
    }
    let validation = if validation_fraction == 0.0 {
        test.clone()
    } else {
        let n = ((train.len() as f64 * validation_fraction).ceil() as usize).min(train.len() - 1);
        if n == 0 {
            return Err(Error::config("too few training entries to hold out validation data"));
        }
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let val = train.split_off(train.len() - n);
        train.sort_by(|a, b| a.audio.cmp(&b.audio));
        val
    };
    Ok(Split {
        train,
        validation,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// STFT window length `M`; the hop is `M/2`.
    pub window: usize,
    /// Frames per training sequence `T`.
    pub sequence_length: usize,
    pub classes: usize,
}

impl FeatureParams {
    pub fn hop_seconds(&self, sample_rate: u32) -> f64 {
        (self.window / 2) as f64 / sample_rate as f64
    }
}

/// Features and frame labels of one recording.
#[derive(Clone, Debug)]
pub struct Recording {
    pub source: PathBuf,
    /// `[frames, M/2, 2·mics]`.
    pub features: Tensor,
    pub roll: EventRoll,
}

impl Recording {
    pub fn from_audio(
        source: PathBuf,
        audio: &MultichannelAudio,
        labels: &[LabelRow],
        params: &FeatureParams,
    ) -> Result<Self> {
        let features = extract_features(audio, params.window)?;
        Ok(Recording {
            source,
            features,
            roll: label_roll(audio, labels, params)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.roll.frames()
    }
}

/// Frame labels on the feature frame grid of `audio`.
pub fn label_roll(audio: &MultichannelAudio, labels: &[LabelRow], params: &FeatureParams) -> Result<EventRoll> {
    let frames = frame_count(audio.num_samples(), params.window);
    let intervals: Vec<_> = labels
        .iter()
        .map(|l| (l.class_id, l.onset_seconds, l.offset_seconds))
        .collect();
    intervals_to_roll(&intervals, params.classes, params.hop_seconds(audio.sample_rate()), frames)
}

/// Cached feature file for an audio file and window length.
pub fn feature_cache_path(audio: &Path, window: usize) -> PathBuf {
    let mut s = audio.as_os_str().to_owned();
    s.push(format!(".m{window}.feat"));
    PathBuf::from(s)
}

pub fn load_recording(entry: &ManifestEntry, params: &FeatureParams) -> Result<Recording> {
    let audio = read_audio(&entry.audio)?;
    let labels = read_labels(&entry.labels)?;
    let cache = feature_cache_path(&entry.audio, params.window);
    if !cache.exists() {
        return Recording::from_audio(entry.audio.clone(), &audio, &labels, params);
    }
    let features = array::load(&cache)?;
    let roll = label_roll(&audio, &labels, params)?;
    let expected = [roll.frames(), params.window / 2, 2 * audio.num_channels()];
    if features.dims() != expected {
        return Err(Error::format(
            "feature array",
            format!("{} does not match its audio file", cache.display()),
        ));
    }
    Ok(Recording {
        source: entry.audio.clone(),
        features,
        roll,
    })
}

/// Loads recordings in parallel, keeping manifest order.
pub fn load_recordings(entries: &[ManifestEntry], params: &FeatureParams) -> Result<Vec<Recording>> {
    entries.par_iter().map(|e| load_recording(e, params)).collect()
}

/// Fixed-length sequences cut from a set of recordings.
#[derive(Clone, Debug)]
pub struct SequenceSet {
    /// `[T, F, C]` each.
    pub inputs: Vec<Tensor>,
    /// `[T, N]` each.
    pub targets: Vec<Tensor>,
    pub valid: Vec<Vec<bool>>,
    /// `(recording index, chunk index)` of every sequence.
    pub origin: Vec<(usize, usize)>,
}

impl SequenceSet {
    pub fn from_recordings(recordings: &[Recording], t: usize) -> Result<Self> {
        let mut set = SequenceSet {
            inputs: Vec::new(),
            targets: Vec::new(),
            valid: Vec::new(),
            origin: Vec::new(),
        };
        for (r, rec) in recordings.iter().enumerate() {
            let classes = rec.roll.classes();
            for (c, chunk) in chunk_sequences(&rec.features, t)?.into_iter().enumerate() {
                let mut y = Tensor::zeros(&[t, classes])?;
                for f in 0..t {
                    let frame = c * t + f;
                    if frame < rec.frames() {
                        for n in 0..classes {
                            if rec.roll.get(frame, n) {
                                y.data_mut()[f * classes + n] = 1.0;
                            }
                        }
                    }
                }
                set.inputs.push(chunk.features);
                set.targets.push(y);
                set.valid.push(chunk.valid);
                set.origin.push((r, c));
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the given sequences into `([B,T,F,C], [B,T,N], mask [B,T])`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let first = indices
            .first()
            .ok_or_else(|| Error::argument("empty batch"))?;
        let (xd, yd) = (self.inputs[*first].dims().to_vec(), self.targets[*first].dims().to_vec());
        let mut x = Vec::with_capacity(indices.len() * self.inputs[*first].numel());
        let mut y = Vec::with_capacity(indices.len() * self.targets[*first].numel());
        let mut mask = Vec::with_capacity(indices.len() * xd[0]);
        for &i in indices {
            x.extend_from_slice(self.inputs[i].data());
            y.extend_from_slice(self.targets[i].data());
            mask.extend(self.valid[i].iter().map(|&v| if v { 1.0 } else { 0.0 }));
        }
        let b = indices.len();
        Ok((
            Tensor::from_vec(&[b, xd[0], xd[1], xd[2]], x)?,
            Tensor::from_vec(&[b, yd[0], yd[1]], y)?,
            Tensor::from_vec(&[b, xd[0]], mask)?,
        ))
    }
}
