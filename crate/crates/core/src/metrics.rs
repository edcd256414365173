//! Segment-based polyphonic SED metrics.
//!
//! Frame-level event rolls are collapsed into fixed-length, non-overlapping
//! segments. Per segment `k` with `N(k)` reference actives:
//!
//! ```text
//! S(k) = min(FN, FP)   D(k) = max(0, FN − FP)   I(k) = max(0, FP − FN)
//! ER   = Σ(S + D + I) / ΣN
//! F1   = 2ΣTP / (2ΣTP + ΣFP + ΣFN)
//! S_SED = (ER + 1 − F1) / 2
//! ```
//!
//! Counts are pooled over classes and segments (micro average).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary activity matrix `[frames, classes]`. Frame `t` is stamped at
/// `origin_seconds + t · frame_hop_seconds`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRoll {
    frames: usize,
    classes: usize,
    active: Vec<bool>,
    pub frame_hop_seconds: f64,
    pub origin_seconds: f64,
}

impl EventRoll {
    pub fn new(frames: usize, classes: usize, frame_hop_seconds: f64) -> Result<Self> {
        if !(frame_hop_seconds > 0.0 && frame_hop_seconds.is_finite()) {
            return Err(Error::argument("frame hop must be positive"));
        }
        Ok(EventRoll {
            frames,
            classes,
            active: vec![false; frames * classes],
            frame_hop_seconds,
            origin_seconds: 0.0,
        })
    }

    pub fn from_rows(rows: &[Vec<bool>], frame_hop_seconds: f64) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        let mut roll = EventRoll::new(rows.len(), classes, frame_hop_seconds)?;
        for (t, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape("ragged event roll rows"));
            }
            for (n, &v) in row.iter().enumerate() {
                roll.set(t, n, v);
            }
        }
        Ok(roll)
    }

    pub fn with_origin(mut self, origin_seconds: f64) -> Self {
        self.origin_seconds = origin_seconds;
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, t: usize, n: usize) -> bool {
        self.active[t * self.classes + n]
    }

    pub fn set(&mut self, t: usize, n: usize, v: bool) {
        self.active[t * self.classes + n] = v;
    }

    pub fn frame_time(&self, t: usize) -> f64 {
        self.origin_seconds + t as f64 * self.frame_hop_seconds
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Appends `other`'s frames after this roll's.
    pub fn extend(&mut self, other: &EventRoll) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("cannot join rolls with different class counts"));
        }
        self.active.extend_from_slice(&other.active);
        self.frames += other.frames;
        Ok(())
    }

    pub fn truncate(&mut self, frames: usize) {
        if frames < self.frames {
            self.frames = frames;
            self.active.truncate(frames * self.classes);
        }
    }
}

/// Index of the segment `[k·seg, (k+1)·seg)` containing `time`.
fn segment_of(time: f64, segment_seconds: f64) -> usize {
    let mut k = (time / segment_seconds).floor().max(0.0) as usize;
    while k > 0 && time < k as f64 * segment_seconds {
        k -= 1;
    }
    while time >= (k + 1) as f64 * segment_seconds {
        k += 1;
    }
    k
}

/// Segment-level activity `[segments, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRoll {
    pub segments: usize,
    pub classes: usize,
    pub active: Vec<bool>,
}

impl SegmentRoll {
    pub fn get(&self, k: usize, n: usize) -> bool {
        self.active[k * self.classes + n]
    }
}

/// Segment `k` of class `n` is active iff any frame stamped inside
/// `[k·seg, (k+1)·seg)` is active. The trailing partial segment is kept.
pub fn roll_to_segments(roll: &EventRoll, segment_seconds: f64) -> Result<SegmentRoll> {
    if !(segment_seconds > 0.0 && segment_seconds.is_finite()) {
        return Err(Error::argument("segment length must be positive"));
    }
    let segments = if roll.frames == 0 {
        0
    } else {
        segment_of(roll.frame_time(roll.frames - 1), segment_seconds) + 1
    };
    let mut active = vec![false; segments * roll.classes];
    for t in 0..roll.frames {
        let k = segment_of(roll.frame_time(t), segment_seconds);
        for n in 0..roll.classes {
            if roll.get(t, n) {
                active[k * roll.classes + n] = true;
            }
        }
    }
    Ok(SegmentRoll {
        segments,
        classes: roll.classes,
        active,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegmentTally {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl SegmentTally {
    pub fn substitutions(&self) -> u64 {
        self.fn_.min(self.fp)
    }

    pub fn deletions(&self) -> u64 {
        self.fn_.saturating_sub(self.fp)
    }

    pub fn insertions(&self) -> u64 {
        self.fp.saturating_sub(self.fn_)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
}

/// Per-segment and per-class counts; merge across files by [`SegmentCounts::merge`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentCounts {
    pub segments: Vec<SegmentTally>,
    /// Indexed by class; `n` is reference-active segments of that class.
    pub per_class: Vec<SegmentTally>,
}

impl SegmentCounts {
    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for s in &self.segments {
            t.n += s.n;
            t.tp += s.tp;
            t.fp += s.fp;
            t.fn_ += s.fn_;
            t.substitutions += s.substitutions();
            t.deletions += s.deletions();
            t.insertions += s.insertions();
        }
        t
    }

    pub fn merge(&mut self, other: &SegmentCounts) -> Result<()> {
        if self.per_class.is_empty() {
            self.per_class = vec![SegmentTally::default(); other.per_class.len()];
        }
        if other.per_class.len() != self.per_class.len() {
            return Err(Error::shape("cannot merge counts over different class sets"));
        }
        self.segments.extend_from_slice(&other.segments);
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.n += b.n;
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<SedScores> {
        let t = self.totals();
        if t.n == 0 {
            return Err(Error::Metric(
                "error rate is undefined without reference activity".into(),
            ));
        }
        let er = (t.substitutions + t.deletions + t.insertions) as f64 / t.n as f64;
        Ok(SedScores::new(f1_score(t.tp, t.fp, t.fn_), er))
    }

    /// `class,tp,fp,fn,n,f1,er` rows; class-wise ER is `(FN + FP) / N`.
    pub fn class_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,n,f1,er\n");
        for (c, s) in self.per_class.iter().enumerate() {
            let er = if s.n == 0 {
                f64::NAN
            } else {
                (s.fn_ + s.fp) as f64 / s.n as f64
            };
            let _ = writeln!(
                out,
                "{c},{},{},{},{},{:.6},{:.6}",
                s.tp,
                s.fp,
                s.fn_,
                s.n,
                f1_score(s.tp, s.fp, s.fn_),
                er
            );
        }
        out
    }
}

/// `2TP / (2TP + FP + FN)`, 0 when nothing is active on either side.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn s_sed(er: f64, f1: f64) -> f64 {
    (er + 1.0 - f1) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SedScores {
    pub f1: f64,
    pub er: f64,
    pub s_sed: f64,
}

impl SedScores {
    pub fn new(f1: f64, er: f64) -> Self {
        SedScores {
            f1,
            er,
            s_sed: s_sed(er, f1),
        }
    }

    /// `F1=<float> ER=<float> S_SED=<float>`
    pub fn record_line(&self) -> String {
        format!("F1={:.6} ER={:.6} S_SED={:.6}", self.f1, self.er, self.s_sed)
    }
}

fn check_pair(reference: &EventRoll, estimate: &EventRoll) -> Result<()> {
    if reference.frames != estimate.frames || reference.classes != estimate.classes {
        return Err(Error::shape(format!(
            "reference roll is {}×{}, estimate is {}×{}",
            reference.frames, reference.classes, estimate.frames, estimate.classes
        )));
    }
    if reference.frame_hop_seconds != estimate.frame_hop_seconds
        || reference.origin_seconds != estimate.origin_seconds
    {
        return Err(Error::shape("reference and estimate use different time grids"));
    }
    Ok(())
}

pub fn segment_counts(
    reference: &EventRoll,
    estimate: &EventRoll,
    segment_seconds: f64,
) -> Result<SegmentCounts> {
    check_pair(reference, estimate)?;
    let r = roll_to_segments(reference, segment_seconds)?;
    let e = roll_to_segments(estimate, segment_seconds)?;
    let mut counts = SegmentCounts {
        segments: Vec::with_capacity(r.segments),
        per_class: vec![SegmentTally::default(); r.classes],
    };
    for k in 0..r.segments {
        let mut seg = SegmentTally::default();
        for n in 0..r.classes {
            let (a, b) = (r.get(k, n), e.get(k, n));
            let class = &mut counts.per_class[n];
            if a {
                seg.n += 1;
                class.n += 1;
            }
            match (a, b) {
                (true, true) => {
                    seg.tp += 1;
                    class.tp += 1;
                }
                (false, true) => {
                    seg.fp += 1;
                    class.fp += 1;
                }
                (true, false) => {
                    seg.fn_ += 1;
                    class.fn_ += 1;
                }
                (false, false) => {}
            }
        }
        counts.segments.push(seg);
    }
    Ok(counts)
}

pub fn evaluate(reference: &EventRoll, estimate: &EventRoll, segment_seconds: f64) -> Result<SedScores> {
    segment_counts(reference, estimate, segment_seconds)?.scores()
}
