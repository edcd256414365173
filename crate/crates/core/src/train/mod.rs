//! Minibatch training with Adam and early stopping on validation S_SED.

pub mod adam;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Recording, SequenceSet};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{segment_counts, EventRoll, SedScores, SegmentCounts};
use crate::model::SedModel;
use crate::tensor::Tensor;

use adam::Adam;
use loss::bce_with_logits;

/// A new best must beat the previous one by at least this much.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub threshold: f64,
    pub seed: u64,
    pub segment_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 64,
            lr: 1e-3,
            patience: 100,
            threshold: 0.5,
            seed: 0,
            segment_seconds: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.patience == 0 || self.patience >= self.epochs {
            return Err(Error::config(format!(
                "patience {} must satisfy 0 < patience < epochs ({})",
                self.patience, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie strictly between 0 and 1"));
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds.is_finite()) {
            return Err(Error::config("segment length must be positive"));
        }
        Ok(())
    }
}

/// Any-frame detection per (sequence, class).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl SequenceReport {
    pub fn f1(&self) -> f64 {
        crate::metrics::f1_score(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: SedScores,
    pub counts: SegmentCounts,
    pub sequences: SequenceReport,
}

/// Sequences run through the network per inference call.
const EVAL_BATCH: usize = 16;

/// Frame probabilities `[frames, N]` for a whole recording.
pub fn recording_probabilities(model: &SedModel, rec: &Recording, t: usize) -> Result<Tensor> {
    let set = SequenceSet::from_recordings(std::slice::from_ref(rec), t)?;
    let classes = model.config().classes;
    let mut probs = Vec::with_capacity(set.len() * t * classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _, _) = set.batch(chunk)?;
        probs.extend_from_slice(model.infer(&x)?.data());
    }
    probs.truncate(rec.frames() * classes);
    Tensor::from_vec(&[rec.frames(), classes], probs)
}

/// Binary roll on the reference roll's time grid.
pub fn probabilities_to_roll(probs: &Tensor, threshold: f64, reference: &EventRoll) -> Result<EventRoll> {
    let d = probs.dims();
    let mut roll = EventRoll::new(d[0], d[1], reference.frame_hop_seconds)?.with_origin(reference.origin_seconds);
    for (i, &p) in probs.data().iter().enumerate() {
        roll.set(i / d[1], i % d[1], p > threshold);
    }
    Ok(roll)
}

/// Segment metrics pooled over all recordings plus the any-frame report.
pub fn evaluate_recordings(
    model: &SedModel,
    recordings: &[Recording],
    threshold: f64,
    segment_seconds: f64,
) -> Result<Evaluation> {
    let t = model.config().frames;
    let mut counts: Option<SegmentCounts> = None;
    let mut seq = SequenceReport::default();
    for rec in recordings {
        let probs = recording_probabilities(model, rec, t)?;
        let est = probabilities_to_roll(&probs, threshold, &rec.roll)?;
        let c = segment_counts(&rec.roll, &est, segment_seconds)?;
        match &mut counts {
            Some(total) => total.merge(&c)?,
            None => counts = Some(c),
        }
        for start in (0..rec.frames()).step_by(t) {
            let end = (start + t).min(rec.frames());
            for n in 0..rec.roll.classes() {
                let truth = (start..end).any(|f| rec.roll.get(f, n));
                let hit = (start..end).any(|f| est.get(f, n));
                match (truth, hit) {
                    (true, true) => seq.tp += 1,
                    (false, true) => seq.fp += 1,
                    (true, false) => seq.fn_ += 1,
                    (false, false) => seq.tn += 1,
                }
            }
        }
    }
    let counts = counts.ok_or_else(|| Error::argument("no recordings to evaluate"))?;
    Ok(Evaluation {
        scores: counts.scores()?,
        counts,
        sequences: seq,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: SedScores,
    pub improved: bool,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={:.6} {}{}",
            self.epoch,
            self.train_loss,
            self.validation.record_line(),
            if self.improved { " *" } else { "" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: SedModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Runs one epoch over `set` in a seeded shuffled order and returns the mean
/// batch loss.
pub fn train_epoch(
    model: &mut SedModel,
    opt: &mut Adam,
    set: &SequenceSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let (x, y, mask) = set.batch(chunk)?;
        model.zero_grad();
        let (logits, cache) = model.forward_logits(&x, Mode::Train)?;
        let non_finite = |model: &SedModel| Error::NonFinite {
            epoch,
            batch: b + 1,
            param_norm: model.param_norm(),
        };
        if !logits.all_finite() {
            return Err(non_finite(model));
        }
        let out = bce_with_logits(&logits, &y, Some(&mask))?;
        if !out.loss.is_finite() {
            return Err(non_finite(model));
        }
        model.backward(&cache, &out.grad)?;
        opt.step(model.params_mut())?;
        model.mark_stats_ready();
        total += out.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains until the epoch budget runs out or validation S_SED stops
/// improving for `patience` epochs. Returns the best model seen.
pub fn train(
    mut model: SedModel,
    train_set: &SequenceSet,
    validation: &[Recording],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::argument("training and validation sets must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr)?;
    let mut best: Option<(f64, usize, SedModel)> = None;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let train_loss = train_epoch(&mut model, &mut opt, train_set, cfg.batch_size, &mut rng, epoch)?;
        let validation = evaluate_recordings(&model, validation, cfg.threshold, cfg.segment_seconds)?.scores;
        let improved = match &best {
            None => true,
            Some((score, _, _)) => validation.s_sed <= score - MIN_IMPROVEMENT,
        };
        if improved {
            best = Some((validation.s_sed, epoch, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            validation,
            improved,
        };
        on_epoch(&record);
        history.push(record);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
