use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

pub const FEATURE_INDEX: &str = "index.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    source_id: String,
    speaker_id: String,
    emotion: String,
    speed: Option<f64>,
    file: String,
}

fn file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.fea")
}

/// Writes one feature file per utterance plus `index.csv` describing them.
pub fn write_feature_store(dir: &Path, utterances: &[Utterance]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(FEATURE_INDEX);
    let mut w = csv::Writer::from_path(&index).map_err(|e| Error::format(&index, e.to_string()))?;
    for u in utterances {
        let file = file_name(&u.id);
        u.features.save(&dir.join(&file))?;
        w.serialize(IndexRow {
            id: u.id.clone(),
            source_id: u.source_id.clone(),
            speaker_id: u.speaker.clone(),
            emotion: u.emotion.clone(),
            speed: u.speed,
            file,
        })
        .map_err(|e| Error::format(&index, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))
}

pub fn read_feature_store(dir: &Path) -> Result<Vec<Utterance>> {
    let index = dir.join(FEATURE_INDEX);
    let file = std::fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let rows = csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<IndexRow>, _>>()
        .map_err(|e| Error::format(&index, e.to_string()))?;
    rows.into_iter()
        .map(|r| {
            Ok(Utterance {
                features: FeatureMatrix::load(&dir.join(&r.file))?,
                id: r.id,
                source_id: r.source_id,
                speaker: r.speaker_id,
                emotion: r.emotion,
                speed: r.speed,
            })
        })
        .collect()
}
