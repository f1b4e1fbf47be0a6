//! Losses, per-batch update rules for the four regimes, and the epoch loop.
//!
//! | regime      | objective for ENC + EC                      | speaker classifier            |
//! |-------------|---------------------------------------------|-------------------------------|
//! | `ec_only`   | `L_emo`                                     | absent                        |
//! | `multitask` | `λ·L_emo + (1−λ)·CE_spk`, one joint step    | trained jointly on `CE_spk`   |
//! | `dat`       | `λ·L_emo + CE_spk(SC(R(v)))`, one joint step | `R` flips gradient by `−(1−λ)` |
//! | `menan`     | `λ·L_emo − (1−λ)·H_spk`, SC frozen          | own step on `CE_spk` first    |
//!
//! All logarithms are natural.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, FoldData, Split};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::eval::{unweighted_accuracy, weighted_accuracy};
use crate::model::{argmax_rows, Model, GROUP_EC, GROUP_ENC, GROUP_SC};
use crate::numerics::{Adam, Graph, PolynomialDecay, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    EcOnly,
    Multitask,
    Dat,
    Menan,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::EcOnly, Regime::Multitask, Regime::Dat, Regime::Menan];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::EcOnly => "ec_only",
            Regime::Multitask => "multitask",
            Regime::Dat => "dat",
            Regime::Menan => "menan",
        }
    }

    pub fn has_speaker_head(self) -> bool {
        self != Regime::EcOnly
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub decay_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Menan,
            lambda: 0.5,
            lr: 1e-3,
            batch_size: 16,
            epochs: 300,
            seed: 7,
            decay_power: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be ≥1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay_power >= 0.0) {
            return Err(Error::Config(format!("lr {} / decay_power {}", self.lr, self.decay_power)));
        }
        Ok(())
    }
}

/// Loss values of one batch. Speaker terms are absent when the regime has
/// no speaker classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_D_Spk", skip_serializing_if = "Option::is_none")]
    pub d_spk: Option<f64>,
    #[serde(rename = "L_H_Spk", skip_serializing_if = "Option::is_none")]
    pub h_spk: Option<f64>,
    #[serde(rename = "L_D_Emo")]
    pub d_emo: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

/// The adversarial objective `λ·L_emo − (1−λ)·H`.
pub fn menan_total(lambda: f64, d_emo: f64, h_spk: f64) -> f64 {
    lambda * d_emo - (1.0 - lambda) * h_spk
}

// ---- losses on graph values -------------------------------------------------

/// Mean `−log P(k_i)` over the batch.
pub fn speaker_ce_loss(g: &mut Graph, logp: Var, labels: &[usize]) -> Result<Var> {
    g.nll(logp, labels)
}

pub fn emotion_ce_loss(g: &mut Graph, logp: Var, labels: &[usize]) -> Result<Var> {
    g.nll(logp, labels)
}

/// Mean over rows of `−Σ_j p_j log p_j` for log-probability rows `[B, K]`.
pub fn speaker_entropy(g: &mut Graph, logp: Var) -> Result<Var> {
    match *g.value(logp).shape() {
        [b, _] if b > 0 => g.mean_entropy(logp),
        ref s => Err(Error::Dimension(format!("entropy: expected [batch, classes], got {s:?}"))),
    }
}

// ---- the same losses on plain probability rows ------------------------------

fn rows(probs: &[f64], k: usize) -> Result<std::slice::Chunks<'_, f64>> {
    if k == 0 || probs.is_empty() || probs.len() % k != 0 {
        return Err(Error::Dimension(format!("{} probabilities for {k} classes", probs.len())));
    }
    Ok(probs.chunks(k))
}

/// Mean entropy of probability rows, with `0·log 0 = 0`.
pub fn mean_entropy(probs: &[f64], k: usize) -> Result<f64> {
    let r = rows(probs, k)?;
    let n = r.len();
    Ok(r.map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64)
}

/// Mean `−log p[label]` of probability rows.
pub fn mean_cross_entropy(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    let r = rows(probs, k)?;
    if r.len() != labels.len() {
        return Err(Error::Dimension(format!("{} rows, {} labels", r.len(), labels.len())));
    }
    let mut s = 0.0;
    for (row, &l) in r.zip(labels) {
        let p = *row
            .get(l)
            .ok_or_else(|| Error::Label(format!("class {l} outside 0..{k}")))?;
        s -= p.ln();
    }
    Ok(s / labels.len() as f64)
}

// ---- update rules -----------------------------------------------------------

/// One mini-batch: equal-length feature matrices and their labels.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub features: Vec<&'a FeatureMatrix>,
    pub emotions: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn from_examples(examples: &[&'a Example]) -> Result<Self> {
        let speakers = examples
            .iter()
            .map(|e| {
                e.speaker
                    .ok_or_else(|| Error::Label(format!("{} is not a training speaker", e.utt.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Batch {
            features: examples.iter().map(|e| &e.utt.features).collect(),
            emotions: examples.iter().map(|e| e.emotion).collect(),
            speakers,
        })
    }
}

/// Graph handles of a joint objective, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub embedding: Var,
    pub loss: Var,
    pub d_emo: Var,
    pub d_spk: Option<Var>,
    pub h_spk: Option<Var>,
}

/// Records the ENC + EC objective of `regime` on `g` (for `menan`, the
/// generator side of the game). Which parameters receive gradients is
/// decided by the store's freeze flags at recording time.
pub fn objective(g: &mut Graph, model: &Model, batch: &Batch, regime: Regime, lambda: f64) -> Result<Objective> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let embedding = model.encode(g, &batch.features)?.embedding;
    let emo = model.classify_emotion(g, embedding)?;
    let d_emo = emotion_ce_loss(g, emo, &batch.emotions)?;
    let weighted_emo = g.scale(d_emo, lambda)?;
    let (loss, d_spk, h_spk) = match regime {
        Regime::EcOnly => (d_emo, None, None),
        Regime::Multitask => {
            let spk = model.classify_speaker(g, embedding)?;
            let ce = speaker_ce_loss(g, spk, &batch.speakers)?;
            let w = g.scale(ce, 1.0 - lambda)?;
            let h = speaker_entropy(g, spk)?;
            (g.add(weighted_emo, w)?, Some(ce), Some(h))
        }
        Regime::Dat => {
            let rev = g.grad_reverse(embedding, 1.0 - lambda)?;
            let spk = model.classify_speaker(g, rev)?;
            let ce = speaker_ce_loss(g, spk, &batch.speakers)?;
            let h = speaker_entropy(g, spk)?;
            (g.add(weighted_emo, ce)?, Some(ce), Some(h))
        }
        Regime::Menan => {
            let spk = model.classify_speaker(g, embedding)?;
            let h = speaker_entropy(g, spk)?;
            let w = g.scale(h, 1.0 - lambda)?;
            let ce = speaker_ce_loss(g, spk, &batch.speakers)?;
            (g.sub(weighted_emo, w)?, Some(ce), Some(h))
        }
    };
    Ok(Objective {
        embedding,
        loss,
        d_emo,
        d_spk,
        h_spk,
    })
}

fn item(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn report(g: &Graph, o: &Objective) -> LossReport {
    LossReport {
        d_spk: o.d_spk.map(|v| item(g, v)),
        h_spk: o.h_spk.map(|v| item(g, v)),
        d_emo: item(g, o.d_emo),
        total: item(g, o.loss),
    }
}

fn descend(g: &Graph, loss: Var, model: &mut Model, adam: &mut Adam, lr: f64) -> Result<()> {
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut model.store)?;
    adam.step(&mut model.store, lr)
}

/// Which parameter groups a sub-step may change; used by freeze checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStep {
    Speaker,
    EncoderEmotion,
    Joint,
}

/// One alternating round: (a) SC descends `CE_spk` with ENC and EC frozen,
/// then (b) ENC and EC descend `λ·L_emo − (1−λ)·H` with SC frozen.
/// `observe` runs after each sub-step.
pub fn menan_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    lambda: f64,
    lr: f64,
    observe: &mut dyn FnMut(SubStep, &Model),
) -> Result<LossReport> {
    // The encoder is unchanged by (a), so one forward pass serves both.
    model.store.train_only(&[GROUP_ENC, GROUP_EC]);
    let mut g = Graph::new();
    let embedding = model.encode(&mut g, &batch.features)?.embedding;

    model.store.train_only(&[GROUP_SC]);
    let mut ga = Graph::new();
    let v = ga.constant(g.value(embedding).clone());
    let spk = model.classify_speaker(&mut ga, v)?;
    let ce = speaker_ce_loss(&mut ga, spk, &batch.speakers)?;
    let d_spk = item(&ga, ce);
    descend(&ga, ce, model, adam, lr)?;
    observe(SubStep::Speaker, model);

    model.store.train_only(&[GROUP_ENC, GROUP_EC]);
    let emo = model.classify_emotion(&mut g, embedding)?;
    let d_emo_v = emotion_ce_loss(&mut g, emo, &batch.emotions)?;
    let spk = model.classify_speaker(&mut g, embedding)?;
    let h = speaker_entropy(&mut g, spk)?;
    let we = g.scale(d_emo_v, lambda)?;
    let wh = g.scale(h, 1.0 - lambda)?;
    let loss = g.sub(we, wh)?;
    let r = LossReport {
        d_spk: Some(d_spk),
        h_spk: Some(item(&g, h)),
        d_emo: item(&g, d_emo_v),
        total: item(&g, loss),
    };
    descend(&g, loss, model, adam, lr)?;
    observe(SubStep::EncoderEmotion, model);
    Ok(r)
}

/// One joint step of `ec_only`, `multitask` or `dat`.
pub fn joint_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    regime: Regime,
    lambda: f64,
    lr: f64,
) -> Result<LossReport> {
    if regime == Regime::Menan {
        return Err(Error::Usage("menan alternates; use menan_step".into()));
    }
    if regime.has_speaker_head() {
        model.store.train_only(&[GROUP_ENC, GROUP_EC, GROUP_SC]);
    } else {
        model.store.train_only(&[GROUP_ENC, GROUP_EC]);
    }
    let mut g = Graph::new();
    let o = objective(&mut g, model, batch, regime, lambda)?;
    let r = report(&g, &o);
    descend(&g, o.loss, model, adam, lr)?;
    Ok(r)
}

pub fn dat_step(model: &mut Model, adam: &mut Adam, batch: &Batch, lambda: f64, lr: f64) -> Result<LossReport> {
    joint_step(model, adam, batch, Regime::Dat, lambda, lr)
}

// ---- epoch loop -------------------------------------------------------------

/// One line of the training log. Batch rows carry losses; epoch rows carry
/// epoch-mean losses and validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(rename = "val_WA", skip_serializing_if = "Option::is_none")]
    pub val_wa: Option<f64>,
    #[serde(rename = "val_UA", skip_serializing_if = "Option::is_none")]
    pub val_ua: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model at the epoch with the best validation UA.
    pub best: Model,
    pub best_adam: Adam,
    pub best_epoch: usize,
    pub best_step: u64,
    /// Model after the last epoch.
    pub last: Model,
    pub epoch_rows: Vec<LogRow>,
}

/// Validation (WA, UA) of `model` on a split.
pub fn split_accuracy(model: &Model, split: &Split) -> Result<(f64, f64)> {
    let feats: Vec<&FeatureMatrix> = split.examples.iter().map(|e| &e.utt.features).collect();
    let preds = model.predict_emotions(&feats)?;
    let labels = split.emotion_labels();
    Ok((weighted_accuracy(&preds, &labels)?, unweighted_accuracy(&preds, &labels)?))
}

/// Accuracy of the model's own speaker classifier on a split's
/// training-speaker utterances.
pub fn speaker_classifier_accuracy(model: &Model, split: &Split) -> Result<f64> {
    let head = model
        .sc
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no speaker classifier".into()))?;
    let ex: Vec<&Example> = split.examples.iter().filter(|e| e.speaker.is_some()).collect();
    let mut correct = 0usize;
    for chunk in ex.chunks(16) {
        let batch = Batch::from_examples(chunk)?;
        let mut g = Graph::new();
        let v = model.encode(&mut g, &batch.features)?.embedding;
        let lp = head.forward(&mut g, &model.store, v)?;
        let pred = argmax_rows(g.value(lp).data(), head.n_out());
        correct += pred.iter().zip(&batch.speakers).filter(|(a, b)| a == b).count();
    }
    if ex.is_empty() {
        return Err(Error::Metric("no training-speaker utterances".into()));
    }
    Ok(100.0 * correct as f64 / ex.len() as f64)
}

fn mean_report(rs: &[LossReport]) -> LossReport {
    let n = rs.len() as f64;
    let mean_opt = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
        rs.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    LossReport {
        d_spk: mean_opt(|r| r.d_spk),
        h_spk: mean_opt(|r| r.h_spk),
        d_emo: rs.iter().map(|r| r.d_emo).sum::<f64>() / n,
        total: rs.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Trains one fold, writing one JSON object per line to `log`.
pub fn train_fold(cfg: &TrainConfig, data: &FoldData, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_spk = cfg.regime.has_speaker_head().then_some(data.speakers.len());
    let mut model = Model::new(data.emotions.len(), n_spk, cfg.seed)?;
    model.fit_normalization(data.train.examples.iter().map(|e| &e.utt.features))?;
    let mut adam = Adam::new();

    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let decay = PolynomialDecay {
        base: cfg.lr,
        total_steps: (per_epoch * cfg.epochs) as u64,
        power: cfg.decay_power,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut best: Option<(f64, usize, u64, Model, Adam)> = None;
    let mut epoch_rows = Vec::with_capacity(cfg.epochs);
    let emit = |row: &LogRow, log: &mut dyn Write| -> Result<()> {
        let line = serde_json::to_string(row).expect("log rows serialize");
        writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(per_epoch);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ex: Vec<&Example> = idx.iter().map(|&i| &data.train.examples[i]).collect();
            let batch = Batch::from_examples(&ex)?;
            let lr = decay.lr_at(step);
            let r = match cfg.regime {
                Regime::Menan => menan_step(&mut model, &mut adam, &batch, cfg.lambda, lr, &mut |_, _| {})?,
                other => joint_step(&mut model, &mut adam, &batch, other, cfg.lambda, lr)?,
            };
            step += 1;
            emit(
                &LogRow {
                    epoch,
                    batch: Some(bi),
                    losses: r,
                    lr: Some(lr),
                    val_wa: None,
                    val_ua: None,
                },
                log,
            )?;
            reports.push(r);
        }
        let (wa, ua) = split_accuracy(&model, &data.val)?;
        let row = LogRow {
            epoch,
            batch: None,
            losses: mean_report(&reports),
            lr: None,
            val_wa: Some(wa),
            val_ua: Some(ua),
        };
        emit(&row, log)?;
        epoch_rows.push(row);
        if best.as_ref().is_none_or(|b| ua > b.0) {
            best = Some((ua, epoch, step, model.clone(), adam.clone()));
        }
    }
    let (_, best_epoch, best_step, best_model, best_adam) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_model,
        best_adam,
        best_epoch,
        best_step,
        last: model,
        epoch_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!("gan".parse::<Regime>().is_err());
    }

    #[test]
    fn loss_examples() {
        let u8 = vec![0.125; 8];
        assert!((mean_entropy(&u8, 8).unwrap() - 8f64.ln()).abs() < 1e-15);
        let mut half = vec![0.0; 8];
        half[..2].copy_from_slice(&[0.5, 0.5]);
        assert!((mean_entropy(&half, 8).unwrap() - 2f64.ln()).abs() < 1e-15);
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        assert_eq!(mean_entropy(&one, 8).unwrap(), 0.0);

        assert_eq!(mean_cross_entropy(&one, 8, &[3]).unwrap(), 0.0);
        assert!((mean_cross_entropy(&u8, 8, &[5]).unwrap() - 8f64.ln()).abs() < 1e-15);
        let two = [0.5, 0.5, 0.25, 0.75];
        assert!((mean_cross_entropy(&two, 2, &[0, 0]).unwrap() - 1.039_720_770_839_918).abs() < 1e-12);
        assert!((mean_cross_entropy(&[0.7, 0.1, 0.1, 0.1], 4, &[0]).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(matches!(mean_cross_entropy(&u8, 8, &[8]), Err(Error::Label(_))));
        assert!((menan_total(0.5, 1.0, 2.0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for lambda in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(TrainConfig { lambda, ..Default::default() }.validate().is_err());
        }
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
