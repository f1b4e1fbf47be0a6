use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A recording session holding exactly two speakers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub name: String,
    pub speakers: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold: usize,
    pub train_speakers: Vec<String>,
    pub val_speaker: String,
    pub test_speaker: String,
}

impl FoldSpec {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&str> = self.train_speakers.iter().map(String::as_str).collect();
        if train.len() != self.train_speakers.len()
            || self.val_speaker == self.test_speaker
            || train.contains(self.val_speaker.as_str())
            || train.contains(self.test_speaker.as_str())
        {
            return Err(Error::Manifest(format!("fold {} has overlapping speaker splits", self.fold)));
        }
        Ok(())
    }
}

/// Groups speakers into sessions by the part of the id before the last
/// `-` (`ses01-F`, `ses01-M` → session `ses01`).
pub fn sessions_from_speakers(speakers: &[String]) -> Result<Vec<Session>> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in speakers {
        let Some((session, _)) = s.rsplit_once('-') else {
            return Err(Error::Manifest(format!("speaker id {s:?} has no <session>-<speaker> form")));
        };
        groups.entry(session).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(name, mut spk)| {
            spk.sort_unstable();
            spk.dedup();
            match spk.as_slice() {
                [a, b] => Ok(Session {
                    name: name.to_owned(),
                    speakers: [(*a).to_owned(), (*b).to_owned()],
                }),
                _ => Err(Error::Manifest(format!(
                    "session {name} has {} speakers, expected 2",
                    spk.len()
                ))),
            }
        })
        .collect()
}

/// Two folds per session: each speaker of the held-out session serves once
/// as validation and once as test; all other speakers train.
pub fn make_folds(sessions: &[Session]) -> Result<Vec<FoldSpec>> {
    if sessions.len() < 2 {
        return Err(Error::Manifest("need at least two sessions".into()));
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for s in sessions {
        if s.speakers[0] == s.speakers[1] {
            return Err(Error::Manifest(format!("session {} lists one speaker twice", s.name)));
        }
        for spk in &s.speakers {
            if let Some(prev) = owner.insert(spk, &s.name) {
                return Err(Error::Manifest(format!(
                    "speaker {spk} appears in sessions {prev} and {}",
                    s.name
                )));
            }
        }
    }
    let mut folds = Vec::with_capacity(2 * sessions.len());
    for (si, s) in sessions.iter().enumerate() {
        let train: Vec<String> = sessions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != si)
            .flat_map(|(_, o)| o.speakers.iter().cloned())
            .collect();
        for (v, t) in [(0, 1), (1, 0)] {
            let fold = FoldSpec {
                fold: folds.len(),
                train_speakers: train.clone(),
                val_speaker: s.speakers[v].clone(),
                test_speaker: s.speakers[t].clone(),
            };
            fold.check_disjoint()?;
            folds.push(fold);
        }
    }
    Ok(folds)
}

pub fn write_folds(path: &Path, folds: &[FoldSpec]) -> Result<()> {
    let json = serde_json::to_string_pretty(folds).expect("fold specs serialize");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_folds(path: &Path) -> Result<Vec<FoldSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let folds: Vec<FoldSpec> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for f in &folds {
        f.check_disjoint()?;
    }
    Ok(folds)
}
