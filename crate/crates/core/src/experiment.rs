//! Experiment configuration, dataset synthesis to disk, and the
//! cross-validation driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_raw, write_wav};
use crate::dataset::{
    folds, format_manifest, load_recordings, make_split, read_manifest, write_labels, FeatureParams, LabelRow,
    ManifestEntry, Recording, SequenceSet,
};
use crate::error::{Error, Result};
use crate::metrics::SedScores;
use crate::model::{checkpoint, count_parameters, CrnnConfig, SedModel};
use crate::se::{Aggregation, ExciteOp, SeConfig, SeVariant, SqueezeOp};
use crate::synth::{render_scene, sample_scene, GenParams, SceneSpec};
use crate::train::{evaluate_recordings, train, EpochRecord, SequenceReport, TrainConfig};

/// `none` or one of the SE variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SeChoice(pub Option<SeVariant>);

impl FromStr for SeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(SeChoice(None))
        } else {
            Ok(SeChoice(Some(s.parse()?)))
        }
    }
}

impl std::fmt::Display for SeChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some(v) => f.write_str(v.token()),
        }
    }
}

impl Serialize for SeChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SeChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a training run needs. Field names match the CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    /// Directory for checkpoints and reports.
    pub output: Option<PathBuf>,
    /// Test fold; every fold in turn when unset.
    pub split: Option<usize>,
    /// Share of the training folds held out for early stopping. 0 monitors
    /// the test fold instead.
    pub validation_fraction: f64,

    pub window: usize,
    pub sequence_length: usize,
    pub classes: usize,

    pub filters: usize,
    pub pool_widths: Vec<usize>,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
    pub se: SeChoice,
    pub agg: Option<Aggregation>,
    pub r: usize,
    pub squeeze: SqueezeOp,
    pub excite: ExciteOp,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub threshold: f64,
    pub segment_seconds: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = CrnnConfig::default();
        let train = TrainConfig::default();
        let se = SeConfig::default();
        ExperimentConfig {
            manifest: None,
            output: None,
            split: None,
            validation_fraction: 0.1,
            window: 512,
            sequence_length: model.frames,
            classes: model.classes,
            filters: model.filters,
            pool_widths: model.pool_widths,
            gru_hidden: model.gru_hidden,
            fc_hidden: model.fc_hidden,
            se: SeChoice(None),
            agg: None,
            r: se.reduction,
            squeeze: se.squeeze,
            excite: se.excite,
            epochs: train.epochs,
            batch: train.batch_size,
            lr: train.lr,
            patience: train.patience,
            threshold: train.threshold,
            segment_seconds: train.segment_seconds,
            seed: train.seed,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config file", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn se_config(&self) -> Option<SeConfig> {
        self.se.0.map(|variant| SeConfig {
            variant,
            aggregation: self.agg.unwrap_or(SeConfig::default().aggregation),
            reduction: self.r,
            squeeze: self.squeeze,
            excite: self.excite,
        })
    }

    /// Non-fatal oddities in the flag combination.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.agg.is_some() && self.se.0 != Some(SeVariant::Concurrent) {
            w.push(format!("--agg only applies to tfc-concurrent; ignored for --se {}", self.se));
        }
        if self.se.0.is_none() {
            let d = SeConfig::default();
            if self.r != d.reduction || self.squeeze != d.squeeze || self.excite != d.excite {
                w.push("SE options are ignored with --se none".into());
            }
        }
        if self.se.0 == Some(SeVariant::TimeFrequency) && (self.r != SeConfig::default().reduction || self.squeeze != SqueezeOp::Avg) {
            w.push("--r and --squeeze only affect the channel branch; ignored for --se tf".into());
        }
        w
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams {
            window: self.window,
            sequence_length: self.sequence_length,
            classes: self.classes,
        }
    }

    /// Model config for input with `mics` microphones.
    pub fn model_config(&self, mics: usize) -> CrnnConfig {
        CrnnConfig {
            frames: self.sequence_length,
            freq_bins: self.window / 2,
            in_channels: 2 * mics,
            filters: self.filters,
            pool_widths: self.pool_widths.clone(),
            gru_hidden: self.gru_hidden,
            fc_hidden: self.fc_hidden,
            classes: self.classes,
            se: self.se_config(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            patience: self.patience,
            threshold: self.threshold,
            seed: self.seed,
            segment_seconds: self.segment_seconds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return Err(Error::config("window must be even and at least 2"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        self.train_config().validate()?;
        self.model_config(1).validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AudioFormat {
    #[default]
    Wav,
    Raw,
}

impl FromStr for AudioFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wav" => Ok(AudioFormat::Wav),
            "raw" => Ok(AudioFormat::Raw),
            _ => Err(Error::argument(format!("unknown audio format {s:?} (wav, raw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub folds: usize,
    pub seed: u64,
    pub format: AudioFormat,
    #[serde(flatten)]
    pub scene: GenParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 30,
            folds: 3,
            seed: 0,
            format: AudioFormat::Wav,
            scene: GenParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("synth config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Per-scene seeds drawn from the dataset seed.
    pub fn scene_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.scenes).map(|_| rng.gen()).collect()
    }

    pub fn sample_scenes(&self) -> Result<Vec<SceneSpec>> {
        if self.folds == 0 {
            return Err(Error::config("folds must be positive"));
        }
        self.scene_seeds()
            .into_iter()
            .map(|s| sample_scene(&self.scene, s))
            .collect()
    }
}

pub fn scene_labels(spec: &SceneSpec) -> Vec<LabelRow> {
    spec.events
        .iter()
        .map(|e| LabelRow {
            class_id: e.class_id,
            onset_seconds: e.onset,
            offset_seconds: e.offset,
        })
        .collect()
}

/// Renders scenes straight to feature/label recordings without touching disk.
pub fn synthesize_recordings(cfg: &SynthConfig, params: &FeatureParams) -> Result<Vec<Recording>> {
    let scenes = cfg.sample_scenes()?;
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let audio = render_scene(spec)?.audio;
            Recording::from_audio(format!("scene_{i:04}").into(), &audio, &scene_labels(spec), params)
        })
        .collect()
}

/// Writes audio, label CSVs and `manifest.csv` into `dir`; scene `i` goes
/// to fold `i mod folds`. Returns the manifest path.
pub fn synthesize_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = cfg.sample_scenes()?;
    let entries = scenes
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let stem = format!("scene_{i:04}");
            let audio_path = dir.join(match cfg.format {
                AudioFormat::Wav => format!("{stem}.wav"),
                AudioFormat::Raw => format!("{stem}.f32"),
            });
            let rendered = render_scene(spec)?;
            match cfg.format {
                AudioFormat::Wav => write_wav(&audio_path, &rendered.audio)?,
                AudioFormat::Raw => write_raw(&audio_path, &rendered.audio)?,
            }
            let label_path = dir.join(format!("{stem}.csv"));
            write_labels(&label_path, &scene_labels(spec))?;
            Ok(ManifestEntry {
                audio: audio_path,
                labels: label_path,
                fold: i % cfg.folds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join("manifest.csv");
    std::fs::write(&manifest, format_manifest(&entries, dir)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub fold: usize,
    pub scores: SedScores,
    pub sequences: SequenceReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub model: SedModel,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub parameters: usize,
    pub splits: Vec<SplitResult>,
}

impl ExperimentReport {
    /// Mean F1 and ER over splits; S_SED is recomputed from the means.
    pub fn mean(&self) -> SedScores {
        let n = self.splits.len() as f64;
        let f1 = self.splits.iter().map(|s| s.scores.f1).sum::<f64>() / n;
        let er = self.splits.iter().map(|s| s.scores.er).sum::<f64>() / n;
        SedScores::new(f1, er)
    }

    pub fn table(&self) -> String {
        let mut out = format!("parameters={}\nsplit,f1,er,s_sed,best_epoch,epochs,seq_f1\n", self.parameters);
        for s in &self.splits {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{},{},{:.4}",
                s.fold,
                s.scores.f1,
                s.scores.er,
                s.scores.s_sed,
                s.best_epoch,
                s.epochs_run,
                s.sequences.f1()
            );
        }
        let m = self.mean();
        let _ = writeln!(out, "mean,{:.4},{:.4},{:.4},,,", m.f1, m.er, m.s_sed);
        out
    }
}

/// Trains and tests one split given already loaded recordings.
pub fn run_split(
    cfg: &ExperimentConfig,
    fold: usize,
    train_recs: &[Recording],
    val_recs: &[Recording],
    test_recs: &[Recording],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<SplitResult> {
    let mics = train_recs
        .first()
        .ok_or_else(|| Error::argument("empty training set"))?
        .features
        .dims()[2]
        / 2;
    let model = SedModel::new(cfg.model_config(mics))?;
    let set = SequenceSet::from_recordings(train_recs, cfg.sequence_length)?;
    let outcome = train(model, &set, val_recs, &cfg.train_config(), on_epoch)?;
    let eval = evaluate_recordings(&outcome.best, test_recs, cfg.threshold, cfg.segment_seconds)?;
    Ok(SplitResult {
        fold,
        scores: eval.scores,
        sequences: eval.sequences,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        history: outcome.history,
        model: outcome.best,
    })
}

/// Full cross-validation run from a manifest. `on_epoch` receives the fold
/// and each epoch record.
pub fn run_experiment(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(usize, &EpochRecord)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("a manifest is required"))?;
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::config("manifest lists no recordings"));
    }
    let params = cfg.feature_params();
    let recordings = load_recordings(&entries, &params)?;
    let mics = recordings[0].features.dims()[2] / 2;
    if recordings.iter().any(|r| r.features.dims()[2] != 2 * mics) {
        return Err(Error::config("all recordings must have the same microphone count"));
    }
    let pick = |subset: &[ManifestEntry]| -> Vec<Recording> {
        subset
            .iter()
            .map(|e| {
                let i = entries.iter().position(|x| x == e).expect("entry from manifest");
                recordings[i].clone()
            })
            .collect()
    };
    let test_folds = match cfg.split {
        Some(k) => vec![k],
        None => folds(&entries),
    };
    if let Some(out) = &cfg.output {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut splits = Vec::new();
    for fold in test_folds {
        let split = make_split(&entries, fold, cfg.validation_fraction, cfg.seed)?;
        let result = run_split(
            cfg,
            fold,
            &pick(&split.train),
            &pick(&split.validation),
            &pick(&split.test),
            |r| on_epoch(fold, r),
        )?;
        if let Some(out) = &cfg.output {
            checkpoint::save(&result.model, &out.join(format!("fold{fold}.ckpt")))?;
        }
        splits.push(result);
    }
    let parameters = count_parameters(&SedModel::new(cfg.model_config(mics))?);
    let report = ExperimentReport { parameters, splits };
    if let Some(out) = &cfg.output {
        let path = out.join("report.csv");
        std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
