use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::{normalize_length, speed_perturb, FoldSpec, UtteranceRecord};
use crate::dsp::{extract_features, FeatureMatrix, Waveform};
use crate::error::{Error, Result};

/// A feature matrix with its labels. Augmented copies keep the id of their
/// source in `source_id` and carry the speed ratio.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub source_id: String,
    pub speaker: String,
    pub emotion: String,
    pub speed: Option<f64>,
    pub features: FeatureMatrix,
}

/// Length-normalizes and featurizes every record, adding one perturbed copy
/// per ratio. Perturbation runs before length normalization so every copy
/// ends up exactly `target_s` long.
pub fn prepare_utterances(
    items: &[(UtteranceRecord, Waveform)],
    target_s: f64,
    ratios: &[f64],
) -> Result<Vec<Utterance>> {
    let jobs: Vec<(usize, Option<f64>)> = (0..items.len())
        .flat_map(|i| std::iter::once((i, None)).chain(ratios.iter().map(move |&r| (i, Some(r)))))
        .collect();
    jobs.par_iter()
        .map(|&(i, speed)| {
            let (rec, w) = &items[i];
            let w = match speed {
                Some(r) => speed_perturb(w, r)?,
                None => w.clone(),
            };
            let features = extract_features(&normalize_length(&w, target_s)?)?;
            Ok(Utterance {
                id: match speed {
                    Some(r) => format!("{}@sp{r}", rec.id),
                    None => rec.id.clone(),
                },
                source_id: rec.id.clone(),
                speaker: rec.speaker_id.clone(),
                emotion: rec.emotion.clone(),
                speed,
                features,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Example {
    pub utt: Arc<Utterance>,
    pub emotion: usize,
    /// Index into the fold's training speakers; `None` outside the train split.
    pub speaker: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub examples: Vec<Example>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn emotion_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.emotion).collect()
    }
}

/// The three splits of one fold. Augmented copies only ever enter `train`.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub spec: FoldSpec,
    pub emotions: Vec<String>,
    /// Training speakers in speaker-classifier output order.
    pub speakers: Vec<String>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl FoldData {
    pub fn build(spec: &FoldSpec, emotions: &[String], utterances: &[Arc<Utterance>]) -> Result<Self> {
        spec.check_disjoint()?;
        let emo_index: BTreeMap<&str, usize> = emotions.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let mut speakers = spec.train_speakers.clone();
        speakers.sort();
        let spk_index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let (mut train, mut val, mut test) = (Split::default(), Split::default(), Split::default());
        for u in utterances {
            let emotion = *emo_index
                .get(u.emotion.as_str())
                .ok_or_else(|| Error::Label(format!("{}: emotion {:?} not in label set", u.id, u.emotion)))?;
            let ex = |speaker| Example {
                utt: Arc::clone(u),
                emotion,
                speaker,
            };
            if let Some(&k) = spk_index.get(u.speaker.as_str()) {
                train.examples.push(ex(Some(k)));
            } else if u.speed.is_none() && u.speaker == spec.val_speaker {
                val.examples.push(ex(None));
            } else if u.speed.is_none() && u.speaker == spec.test_speaker {
                test.examples.push(ex(None));
            }
        }
        for (name, s) in [("train", &train), ("val", &val), ("test", &test)] {
            if s.is_empty() {
                return Err(Error::Config(format!("fold {}: empty {name} split", spec.fold)));
            }
        }
        Ok(FoldData {
            spec: spec.clone(),
            emotions: emotions.to_vec(),
            speakers,
            train,
            val,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;

    fn rec(id: &str, spk: &str, emo: &str) -> (UtteranceRecord, Waveform) {
        let w: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        (
            UtteranceRecord {
                id: id.into(),
                path: String::new(),
                speaker_id: spk.into(),
                emotion: emo.into(),
                duration_s: 0.25,
            },
            Waveform::new(w, SAMPLE_RATE).unwrap(),
        )
    }

    #[test]
    fn augmentation_stays_in_train() {
        let items = vec![
            rec("a", "s1-F", "sad"),
            rec("b", "s1-M", "sad"),
            rec("c", "s2-F", "angry"),
            rec("d", "s2-M", "angry"),
        ];
        let utts: Vec<Arc<Utterance>> = prepare_utterances(&items, 0.1, &[0.9, 1.1])
            .unwrap()
            .into_iter()
            .map(Arc::new)
            .collect();
        assert_eq!(utts.len(), 12);
        assert!(utts.iter().all(|u| u.features.frames() == 7));
        let spec = FoldSpec {
            fold: 0,
            train_speakers: vec!["s2-M".into(), "s2-F".into()],
            val_speaker: "s1-F".into(),
            test_speaker: "s1-M".into(),
        };
        let emotions = vec!["angry".to_string(), "sad".to_string()];
        let fd = FoldData::build(&spec, &emotions, &utts).unwrap();
        assert_eq!(fd.train.len(), 6);
        assert_eq!(fd.val.len(), 1);
        assert_eq!(fd.test.len(), 1);
        assert_eq!(fd.speakers, ["s2-F", "s2-M"]);
        assert!(fd.val.examples[0].utt.speed.is_none());
        assert_eq!(fd.train.examples[0].speaker, Some(0));
        assert_eq!(fd.val.emotion_labels(), [1]);

        let bad = vec!["angry".to_string()];
        assert!(matches!(FoldData::build(&spec, &bad, &utts), Err(Error::Label(_))));
    }
}
