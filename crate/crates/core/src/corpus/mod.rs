//! Corpus ingestion: manifests, length normalization, speed perturbation,
//! leave-one-speaker-out folds and the synthetic stand-in corpus.

mod dataset;
mod folds;
mod store;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{resample, Waveform};
use crate::error::{Error, Result};

pub use dataset::{prepare_utterances, Example, FoldData, Split, Utterance};
pub use folds::{make_folds, read_folds, sessions_from_speakers, write_folds, FoldSpec, Session};
pub use store::{read_feature_store, write_feature_store, FEATURE_INDEX};
pub use synth::{
    emotion_profile, generate_synthetic, oracle_labels, speaker_profile, EmotionProfile, SpeakerProfile,
    SynthConfig, SynthFactors, SynthUtterance, SyntheticCorpus,
};

pub const TARGET_SECONDS: f64 = 14.0;
pub const SPEED_RATIOS: [f64; 4] = [0.8, 0.9, 1.1, 1.2];
pub const EMOTIONS: [&str; 4] = ["angry", "happy", "neutral", "sad"];

/// Crops to the centered window when longer than `target_s`, tiles the whole
/// utterance end to end (truncating the last copy) when shorter.
pub fn normalize_length(w: &Waveform, target_s: f64) -> Result<Waveform> {
    if !(target_s.is_finite() && target_s > 0.0) {
        return Err(Error::Parameter(format!("target duration {target_s}")));
    }
    let target = (target_s * w.sample_rate() as f64).round() as usize;
    let x = w.samples();
    let n = x.len();
    let out = if n > target {
        let start = (n - target) / 2;
        x[start..start + target].to_vec()
    } else {
        x.iter().cycle().take(target).copied().collect()
    };
    Waveform::new(out, w.sample_rate())
}

/// Changes speaking rate by resampling, so pitch moves with speed.
/// The result lasts `duration / ratio`.
pub fn speed_perturb(w: &Waveform, ratio: f64) -> Result<Waveform> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Parameter(format!("speed ratio must be positive, got {ratio}")));
    }
    Waveform::new(resample(w.samples(), ratio)?, w.sample_rate())
}

/// One manifest row: `id,path,speaker_id,emotion,duration_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: String,
    pub speaker_id: String,
    pub emotion: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative audio paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "path", "speaker_id", "emotion", "duration_s"] {
            return Err(Error::Manifest(format!(
                "{}: header must be id,path,speaker_id,emotion,duration_s",
                path.display()
            )));
        }
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<UtteranceRecord>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id {}", r.id)));
            }
        }
        Ok(Manifest {
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn audio_path(&self, r: &UtteranceRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    /// The closed emotion set, sorted.
    pub fn emotions(&self) -> Vec<String> {
        label_set(self.records.iter().map(|r| r.emotion.as_str()))
    }

    pub fn speakers(&self) -> Vec<String> {
        label_set(self.records.iter().map(|r| r.speaker_id.as_str()))
    }
}

pub fn label_set<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = labels.collect();
    set.into_iter().map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;

    fn ramp(seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        Waveform::new((0..n).map(|i| i as f64).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn long_input_keeps_the_middle() {
        let out = normalize_length(&ramp(20.0), 14.0).unwrap();
        assert_eq!(out.len(), 224_000);
        assert_eq!(out.samples()[0], 48_000.0);
        assert_eq!(*out.samples().last().unwrap(), 271_999.0);
    }

    #[test]
    fn short_input_is_cycled() {
        let w = ramp(5.0);
        let out = normalize_length(&w, 14.0).unwrap();
        assert_eq!(out.len(), 224_000);
        assert_eq!(&out.samples()[..80_000], w.samples());
        assert_eq!(&out.samples()[80_000..160_000], w.samples());
        assert_eq!(&out.samples()[160_000..], &w.samples()[..64_000]);
    }

    #[test]
    fn exact_length_is_identity() {
        let w = ramp(14.0);
        assert_eq!(normalize_length(&w, 14.0).unwrap(), w);
    }

    #[test]
    fn perturbed_duration() {
        let w = Waveform::new(vec![0.0; 160_000], SAMPLE_RATE).unwrap();
        let out = speed_perturb(&w, 0.8).unwrap();
        assert!((out.duration_s() - 12.5).abs() < 1e-9);
        assert_eq!(speed_perturb(&w, 1.0).unwrap(), w);
        assert!(matches!(speed_perturb(&w, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn manifest_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let m = Manifest {
            records: vec![UtteranceRecord {
                id: "u1".into(),
                path: "wav/u1.wav".into(),
                speaker_id: "ses01-F".into(),
                emotion: "sad".into(),
                duration_s: 3.25,
            }],
            root: dir.path().into(),
        };
        m.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,path,speaker_id,emotion,duration_s\n"));
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.audio_path(&back.records[0]), dir.path().join("wav/u1.wav"));

        std::fs::write(&p, "id,file,speaker,emotion,duration\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Manifest(_))));
    }
}
