//! Accuracy metrics, the residual-speaker probe, cross-validation
//! orchestration and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, FoldData, Utterance};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Head, Model, EMBED_DIM};
use crate::numerics::{Adam, Graph, ParamStore, Tensor};
use crate::training::{
    speaker_classifier_accuracy, split_accuracy, train_fold, Batch, Regime, TrainConfig,
};

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Metric("empty label sequence".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

/// Percentage of correct predictions.
pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Mean per-class recall, in percent, over the classes present in `labels`.
pub fn unweighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    unweighted_accuracy_over(preds, labels, None)
}

/// As [`unweighted_accuracy`], but every class in `0..n_classes` must occur.
pub fn unweighted_accuracy_over(preds: &[usize], labels: &[usize], n_classes: Option<usize>) -> Result<f64> {
    check_pairs(preds, labels)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        let e = per.entry(l).or_default();
        e.1 += 1;
        e.0 += usize::from(p == l);
    }
    if let Some(k) = n_classes {
        if let Some(missing) = (0..k).find(|c| !per.contains_key(c)) {
            return Err(Error::Metric(format!("class {missing} has no samples")));
        }
    }
    Ok(100.0 * per.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per.len() as f64)
}

// ---- probe ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch Adam steps.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 400,
            lr: 0.01,
            seed: 11,
        }
    }
}

/// Trains a fresh classifier shaped like the speaker classifier on frozen
/// embeddings and returns its held-out accuracy in percent.
///
/// Embedding dimensions are standardized with training statistics first,
/// so the probe is insensitive to how the encoder scales its output.
pub fn speaker_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    check_pairs(&vec![0; train.len()], train_labels)?;
    check_pairs(&vec![0; test.len()], test_labels)?;
    let k = train_labels.iter().chain(test_labels).max().unwrap() + 1;
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return Err(Error::Metric("probe training labels have a single class".into()));
    }
    let dim = train[0].len();
    if dim != EMBED_DIM || train.iter().chain(test).any(|v| v.len() != dim) {
        return Err(Error::Dimension(format!("probe expects {EMBED_DIM}-dim embeddings")));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| train.iter().map(|v| v[d]).sum::<f64>() / n).collect();
    let inv: Vec<f64> = (0..dim)
        .map(|d| {
            let var = train.iter().map(|v| (v[d] - mean[d]).powi(2)).sum::<f64>() / n;
            1.0 / var.sqrt().max(1e-6)
        })
        .collect();
    let stack = |vs: &[Vec<f64>]| -> Result<Tensor> {
        let data = vs
            .iter()
            .flat_map(|v| v.iter().enumerate().map(|(d, x)| (x - mean[d]) * inv[d]))
            .collect();
        Tensor::new(vec![vs.len(), dim], data)
    };
    let (xtr, xte) = (stack(train)?, stack(test)?);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = Head::new(&mut store, &mut rng, "probe", "probe", k);
    let mut adam = Adam::new();
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let lp = head.forward(&mut g, &store, x)?;
        let loss = g.nll(lp, train_labels)?;
        let grads = g.backward(loss)?;
        g.accumulate_param_grads(&grads, &mut store)?;
        adam.step(&mut store, cfg.lr)?;
    }
    let mut g = Graph::new();
    let x = g.constant(xte);
    let lp = head.forward(&mut g, &store, x)?;
    weighted_accuracy(&argmax_rows(g.value(lp).data(), k), test_labels)
}

/// Splits training-speaker originals into probe train / probe test halves,
/// alternating within each (speaker, emotion) cell.
pub fn probe_split(data: &FoldData) -> (Vec<&Example>, Vec<&Example>) {
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for e in data.train.examples.iter().filter(|e| e.utt.speed.is_none()) {
        let c = seen.entry((e.speaker.unwrap_or(0), e.emotion)).or_default();
        if *c % 2 == 0 { &mut tr } else { &mut te }.push(e);
        *c += 1;
    }
    (tr, te)
}

/// Probe accuracy on `model`'s embeddings of the fold's training speakers.
pub fn probe_model(model: &Model, data: &FoldData, cfg: &ProbeConfig) -> Result<f64> {
    let (tr, te) = probe_split(data);
    let emb = |ex: &[&Example]| model.embed(&ex.iter().map(|e| &e.utt.features).collect::<Vec<_>>());
    let labels = |ex: &[&Example]| ex.iter().map(|e| e.speaker.unwrap_or(0)).collect::<Vec<_>>();
    speaker_probe(&emb(&tr)?, &labels(&tr), &emb(&te)?, &labels(&te), cfg)
}

// ---- reports ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub regime: Regime,
    pub val_speaker: String,
    pub test_speaker: String,
    pub best_epoch: usize,
    #[serde(rename = "val_WA")]
    pub val_wa: f64,
    #[serde(rename = "val_UA")]
    pub val_ua: f64,
    #[serde(rename = "test_WA")]
    pub test_wa: f64,
    #[serde(rename = "test_UA")]
    pub test_ua: f64,
    #[serde(rename = "delta_WA")]
    pub delta_wa: f64,
    #[serde(rename = "delta_UA")]
    pub delta_ua: f64,
    pub probe_accuracy: f64,
    /// Accuracy of the trained speaker classifier on training-speaker originals.
    pub sc_accuracy: Option<f64>,
    /// Mean per-utterance max−min gap of speaker-classifier probabilities.
    pub sc_prob_gap: Option<f64>,
    /// Mean speaker entropy over the final epoch's batches.
    pub final_h_spk: Option<f64>,
    pub n_train_speakers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        Some(Stat {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "val_WA")]
    pub val_wa: Stat,
    #[serde(rename = "val_UA")]
    pub val_ua: Stat,
    #[serde(rename = "test_WA")]
    pub test_wa: Stat,
    #[serde(rename = "test_UA")]
    pub test_ua: Stat,
    /// Per-fold Δ, averaged.
    #[serde(rename = "delta_WA")]
    pub delta_wa: Stat,
    #[serde(rename = "delta_UA")]
    pub delta_ua: Stat,
    /// Mean test minus mean validation.
    #[serde(rename = "delta_WA_of_means")]
    pub delta_wa_of_means: f64,
    #[serde(rename = "delta_UA_of_means")]
    pub delta_ua_of_means: f64,
    pub probe_accuracy: Stat,
    pub sc_accuracy: Option<Stat>,
    pub final_h_spk: Option<Stat>,
}

impl Aggregate {
    pub fn of(folds: &[FoldReport]) -> Result<Self> {
        let st = |f: fn(&FoldReport) -> f64| Stat::of(folds.iter().map(f)).ok_or_else(|| Error::Metric("no folds".into()));
        let opt = |f: fn(&FoldReport) -> Option<f64>| -> Option<Stat> {
            folds.iter().map(f).collect::<Option<Vec<f64>>>().and_then(Stat::of)
        };
        let (val_wa, val_ua, test_wa, test_ua) = (st(|r| r.val_wa)?, st(|r| r.val_ua)?, st(|r| r.test_wa)?, st(|r| r.test_ua)?);
        Ok(Aggregate {
            delta_wa: st(|r| r.delta_wa)?,
            delta_ua: st(|r| r.delta_ua)?,
            delta_wa_of_means: test_wa.mean - val_wa.mean,
            delta_ua_of_means: test_ua.mean - val_ua.mean,
            val_wa,
            val_ua,
            test_wa,
            test_ua,
            probe_accuracy: st(|r| r.probe_accuracy)?,
            sc_accuracy: opt(|r| r.sc_accuracy),
            final_h_spk: opt(|r| r.final_h_spk),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub regime: Regime,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
}

/// Mean (accuracy, max−min probability gap) of the model's speaker
/// classifier on training-speaker originals.
fn speaker_head_stats(model: &Model, data: &FoldData) -> Result<(f64, f64)> {
    let head = model.sc.as_ref().ok_or_else(|| Error::Usage("no speaker classifier".into()))?;
    let ex: Vec<&Example> = data.train.examples.iter().filter(|e| e.utt.speed.is_none()).collect();
    let mut gap = 0.0;
    for chunk in ex.chunks(16) {
        let batch = Batch::from_examples(chunk)?;
        let mut g = Graph::new();
        let v = model.encode(&mut g, &batch.features)?.embedding;
        let lp = head.forward(&mut g, &model.store, v)?;
        for row in g.value(lp).data().chunks(head.n_out()) {
            let p: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            gap += p.iter().copied().fold(f64::MIN, f64::max) - p.iter().copied().fold(f64::MAX, f64::min);
        }
    }
    let originals = crate::corpus::Split {
        examples: ex.into_iter().cloned().collect(),
    };
    Ok((speaker_classifier_accuracy(model, &originals)?, gap / originals.len() as f64))
}

/// Evaluates a selected model on one fold.
pub fn evaluate_fold(
    model: &Model,
    data: &FoldData,
    regime: Regime,
    best_epoch: usize,
    final_h_spk: Option<f64>,
    probe: &ProbeConfig,
) -> Result<FoldReport> {
    let (val_wa, val_ua) = split_accuracy(model, &data.val)?;
    let (test_wa, test_ua) = split_accuracy(model, &data.test)?;
    let sc = match model.sc {
        Some(_) => Some(speaker_head_stats(model, data)?),
        None => None,
    };
    Ok(FoldReport {
        fold: data.spec.fold,
        regime,
        val_speaker: data.spec.val_speaker.clone(),
        test_speaker: data.spec.test_speaker.clone(),
        best_epoch,
        val_wa,
        val_ua,
        test_wa,
        test_ua,
        delta_wa: test_wa - val_wa,
        delta_ua: test_ua - val_ua,
        probe_accuracy: probe_model(model, data, probe)?,
        sc_accuracy: sc.map(|s| s.0),
        sc_prob_gap: sc.map(|s| s.1),
        final_h_spk,
        n_train_speakers: data.speakers.len(),
    })
}

pub fn checkpoint_meta(cfg: &TrainConfig, data: &FoldData, best_epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("regime".to_owned(), cfg.regime.to_string()),
        ("fold".to_owned(), data.spec.fold.to_string()),
        ("best_epoch".to_owned(), best_epoch.to_string()),
        ("emotions".to_owned(), data.emotions.join(",")),
        ("speakers".to_owned(), data.speakers.join(",")),
        ("config".to_owned(), serde_json::to_string(cfg).expect("config serializes")),
    ])
}

/// Trains and evaluates one fold. With `out_dir`, writes
/// `fold_NN/{log.jsonl, checkpoint.bin, report.json}` beneath it.
pub fn run_fold(cfg: &TrainConfig, probe: &ProbeConfig, data: &FoldData, out_dir: Option<&Path>) -> Result<FoldReport> {
    let dir = out_dir.map(|d| d.join(format!("fold_{:02}", data.spec.fold)));
    let outcome = match &dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("log.jsonl");
            let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            let o = train_fold(cfg, data, &mut w)?;
            std::io::Write::flush(&mut w).map_err(|e| Error::io(&p, e))?;
            o
        }
        None => train_fold(cfg, data, &mut std::io::sink())?,
    };
    let final_h = outcome.epoch_rows.last().and_then(|r| r.losses.h_spk);
    let report = evaluate_fold(&outcome.best, data, cfg.regime, outcome.best_epoch, final_h, probe)?;
    if let Some(d) = &dir {
        outcome
            .best
            .checkpoint(&outcome.best_adam, outcome.best_step, checkpoint_meta(cfg, data, outcome.best_epoch))
            .save(&d.join("checkpoint.bin"))?;
        write_json(&d.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Runs every fold (in parallel when threads are available; results are
/// independent of scheduling) and aggregates.
pub fn run_cv(cfg: &TrainConfig, probe: &ProbeConfig, folds: &[FoldData], out_dir: Option<&Path>) -> Result<CvReport> {
    let reports = folds
        .par_iter()
        .map(|f| run_fold(cfg, probe, f, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let report = CvReport {
        regime: cfg.regime,
        aggregate: Aggregate::of(&reports)?,
        folds: reports,
    };
    if let Some(d) = out_dir {
        write_json(&d.join("cv_report.json"), &report)?;
        let p = d.join("cv_table.txt");
        std::fs::write(&p, format_table(std::slice::from_ref(&report))).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

/// Aligned text table: one row per regime, Val/Test/Δ for WA and UA, then
/// mean probe and speaker-classifier accuracy.
pub fn format_table(reports: &[CvReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7} {:>7}",
        "", "WA val", "test", "Δ", "UA val", "test", "Δ", "probe", "SC acc"
    );
    let _ = writeln!(s, "{}", "-".repeat(78));
    for r in reports {
        let a = &r.aggregate;
        let sc = a.sc_accuracy.map_or("-".to_owned(), |x| format!("{:.2}", x.mean));
        let _ = writeln!(
            s,
            "{:<10} | {:>7.2} {:>7.2} {:>+7.2} | {:>7.2} {:>7.2} {:>+7.2} | {:>7.2} {:>7}",
            r.regime.as_str(),
            a.val_wa.mean,
            a.test_wa.mean,
            a.delta_wa.mean,
            a.val_ua.mean,
            a.test_ua.mean,
            a.delta_ua.mean,
            a.probe_accuracy.mean,
            sc
        );
    }
    s
}

// ---- export -----------------------------------------------------------------

/// Writes `id,speaker_id,emotion,v_0..v_95`, one row per utterance.
pub fn export_embeddings(model: &Model, utterances: &[&Utterance], path: &Path) -> Result<usize> {
    let feats: Vec<&FeatureMatrix> = utterances.iter().map(|u| &u.features).collect();
    let emb = model.embed(&feats)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec!["id".to_owned(), "speaker_id".to_owned(), "emotion".to_owned()];
    header.extend((0..EMBED_DIM).map(|i| format!("v_{i}")));
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (u, v) in utterances.iter().zip(&emb) {
        let mut row = vec![u.id.clone(), u.speaker.clone(), u.emotion.clone()];
        row.extend(v.iter().map(|x| format!("{x:e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(utterances.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(weighted_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(weighted_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 50.0);
        assert_eq!(unweighted_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1]).unwrap(), 50.0);
        assert_eq!(weighted_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1]).unwrap(), 75.0);
        assert!(matches!(weighted_accuracy(&[], &[]), Err(Error::Metric(_))));
        assert!(matches!(unweighted_accuracy_over(&[0], &[0], Some(2)), Err(Error::Metric(_))));
    }

    #[test]
    fn one_hot_codes_are_fully_probed_and_constants_are_not() {
        let k = 4;
        let code = |s: usize, j: usize| {
            let mut v = vec![0.0; EMBED_DIM];
            v[s] = 1.0;
            v[50] = j as f64 * 0.01;
            v
        };
        let mut tr = Vec::new();
        let mut te = Vec::new();
        let (mut ltr, mut lte) = (Vec::new(), Vec::new());
        for s in 0..k {
            for j in 0..10 {
                tr.push(code(s, j));
                ltr.push(s);
                te.push(code(s, j + 10));
                lte.push(s);
            }
        }
        let cfg = ProbeConfig::default();
        assert_eq!(speaker_probe(&tr, &ltr, &te, &lte, &cfg).unwrap(), 100.0);

        let constant = vec![vec![0.3; EMBED_DIM]; tr.len()];
        let acc = speaker_probe(&constant, &ltr, &constant, &lte, &cfg).unwrap();
        assert!((acc - 25.0).abs() < 1e-9, "{acc}");
        assert!(matches!(
            speaker_probe(&tr, &vec![0; tr.len()], &te, &lte, &cfg),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn stat_and_table() {
        let s = Stat::of([1.0, 4.0, 2.5]).unwrap();
        assert_eq!((s.mean, s.min, s.max), (2.5, 1.0, 4.0));
        assert!(Stat::of([]).is_none());
    }
}
