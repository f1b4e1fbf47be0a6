//! Encoder, emotion classifier and speaker classifier.
//!
//! ```text
//! ENC: [B,T,43] → Conv1D(43→32, k=10, s=2) → PReLU → Conv1D(32→32, k=5, s=2) → PReLU
//!      → GRU(32) → Linear(32→32) per step → PReLU → [mean ‖ std ‖ max] over time → [B,96]
//! EC:  96 → 32 → PReLU → 10 → PReLU → |emotions| → log-softmax
//! SC:  96 → 32 → PReLU → 10 → PReLU → |train speakers| → log-softmax
//! ```
//!
//! Inputs are standardized per channel with statistics fixed from the
//! training split (group `norm`, never trained). That is one affine map
//! shared by every utterance, not per-speaker or per-utterance normalization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{FeatureMatrix, N_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

pub const HIDDEN: usize = 32;
pub const EMBED_DIM: usize = 3 * HIDDEN;
pub const HEAD_HIDDEN: [usize; 2] = [32, 10];
pub const CONV1: (usize, usize) = (10, 2);
pub const CONV2: (usize, usize) = (5, 2);
/// Shortest input for which both convolutions produce an output step.
pub const MIN_FRAMES: usize = 24;
pub const PRELU_INIT: f64 = 0.25;

pub const GROUP_ENC: &str = "enc";
pub const GROUP_EC: &str = "ec";
pub const GROUP_SC: &str = "sc";
pub const GROUP_NORM: &str = "norm";

/// Steps left after the two strided convolutions.
pub fn encoder_steps(frames: usize) -> Option<usize> {
    let t1 = frames.checked_sub(CONV1.0)? / CONV1.1 + 1;
    Some(t1.checked_sub(CONV2.0)? / CONV2.1 + 1)
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let gain = (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// `blocks` stacked `n × n` orthogonal matrices (Gram–Schmidt on Gaussian draws).
fn orthogonal_blocks(rng: &mut ChaCha8Rng, blocks: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(blocks * n * n);
    for _ in 0..blocks {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        while rows.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        data.extend(rows.into_iter().flatten());
    }
    Tensor::new(vec![blocks * n, n], data).expect("finite init")
}

fn slope(store: &mut ParamStore, name: String, group: &str) -> ParamId {
    store.add(name, group, Tensor::new(vec![1], vec![PRELU_INIT]).unwrap())
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
}

/// Three linear layers with PReLU in between, ending in log-softmax.
#[derive(Clone, Debug)]
pub struct Head {
    layers: [(ParamId, ParamId); 3],
    slopes: [ParamId; 2],
    n_out: usize,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, group: &str, n_out: usize) -> Self {
        let dims = [EMBED_DIM, HEAD_HIDDEN[0], HEAD_HIDDEN[1], n_out];
        let layers = [0, 1, 2].map(|l| {
            let w = store.add(
                format!("{prefix}.l{l}.w"),
                group,
                kaiming_uniform(rng, &[dims[l + 1], dims[l]], dims[l]),
            );
            let b = store.add(format!("{prefix}.l{l}.b"), group, Tensor::zeros(&[dims[l + 1]]));
            (w, b)
        });
        let slopes = [0, 1].map(|l| slope(store, format!("{prefix}.a{l}"), group));
        Head { layers, slopes, n_out }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = [(ParamId(0), ParamId(0)); 3];
        for (l, slot) in layers.iter_mut().enumerate() {
            *slot = (
                lookup(store, &format!("{prefix}.l{l}.w"))?,
                lookup(store, &format!("{prefix}.l{l}.b"))?,
            );
        }
        let slopes = [lookup(store, &format!("{prefix}.a0"))?, lookup(store, &format!("{prefix}.a1"))?];
        let n_out = store.value(layers[2].0).shape()[0];
        Ok(Head { layers, slopes, n_out })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Log-probabilities `[B, n_out]` for embeddings `[B, 96]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let mut h = v;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.linear(h, w, b)?;
            if l < 2 {
                let a = g.param(store, self.slopes[l]);
                h = g.prelu(h, a)?;
            }
        }
        g.log_softmax(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        p.extend(self.slopes);
        p
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    gru: [ParamId; 4],
    lin: (ParamId, ParamId),
    slopes: [ParamId; 3],
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTrace {
    /// Per-step activations fed to pooling, `[B, T', 32]`.
    pub frames: Var,
    /// `[B, 96]`: mean, then std, then max.
    pub embedding: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let g = GROUP_ENC;
        let (k1, k2) = (CONV1.0, CONV2.0);
        let conv1 = (
            store.add("enc.conv1.w", g, kaiming_uniform(rng, &[HIDDEN, k1, N_CHANNELS], k1 * N_CHANNELS)),
            store.add("enc.conv1.b", g, Tensor::zeros(&[HIDDEN])),
        );
        let conv2 = (
            store.add("enc.conv2.w", g, kaiming_uniform(rng, &[HIDDEN, k2, HIDDEN], k2 * HIDDEN)),
            store.add("enc.conv2.b", g, Tensor::zeros(&[HIDDEN])),
        );
        let bound = (3.0 / HIDDEN as f64).sqrt();
        let w_ih: Vec<f64> = (0..3 * HIDDEN * HIDDEN).map(|_| rng.random_range(-bound..bound)).collect();
        let gru = [
            store.add("enc.gru.w_ih", g, Tensor::new(vec![3 * HIDDEN, HIDDEN], w_ih).unwrap()),
            store.add("enc.gru.w_hh", g, orthogonal_blocks(rng, 3, HIDDEN)),
            store.add("enc.gru.b_ih", g, Tensor::zeros(&[3 * HIDDEN])),
            store.add("enc.gru.b_hh", g, Tensor::zeros(&[3 * HIDDEN])),
        ];
        let lin = (
            store.add("enc.lin.w", g, kaiming_uniform(rng, &[HIDDEN, HIDDEN], HIDDEN)),
            store.add("enc.lin.b", g, Tensor::zeros(&[HIDDEN])),
        );
        let slopes = [0, 1, 2].map(|l| slope(store, format!("enc.a{l}"), g));
        Encoder {
            conv1,
            conv2,
            gru,
            lin,
            slopes,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let p = |n: &str| lookup(store, n);
        Ok(Encoder {
            conv1: (p("enc.conv1.w")?, p("enc.conv1.b")?),
            conv2: (p("enc.conv2.w")?, p("enc.conv2.b")?),
            gru: [p("enc.gru.w_ih")?, p("enc.gru.w_hh")?, p("enc.gru.b_ih")?, p("enc.gru.b_hh")?],
            lin: (p("enc.lin.w")?, p("enc.lin.b")?),
            slopes: [p("enc.a0")?, p("enc.a1")?, p("enc.a2")?],
        })
    }

    /// Runs the encoder on `x: [B, T, 43]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderTrace> {
        let t = g.value(x).shape().get(1).copied().unwrap_or(0);
        if t < MIN_FRAMES {
            return Err(Error::Dimension(format!("encoder needs ≥{MIN_FRAMES} frames, got {t}")));
        }
        let a: Vec<Var> = self.slopes.iter().map(|&s| g.param(store, s)).collect();
        let (w, b) = (g.param(store, self.conv1.0), g.param(store, self.conv1.1));
        let h = g.conv1d(x, w, b, CONV1.1)?;
        let h = g.prelu(h, a[0])?;
        let (w, b) = (g.param(store, self.conv2.0), g.param(store, self.conv2.1));
        let h = g.conv1d(h, w, b, CONV2.1)?;
        let h = g.prelu(h, a[1])?;
        let [wi, wh, bi, bh] = self.gru.map(|p| g.param(store, p));
        let h = g.gru(h, wi, wh, bi, bh)?;
        let (w, b) = (g.param(store, self.lin.0), g.param(store, self.lin.1));
        let h = g.linear(h, w, b)?;
        let frames = g.prelu(h, a[2])?;
        let mean = g.mean_time(frames)?;
        let std = g.std_time(frames)?;
        let max = g.max_time(frames)?;
        let embedding = g.concat(&[mean, std, max])?;
        Ok(EncoderTrace { frames, embedding })
    }
}

/// ENC + EC (+ SC when speakers are adversaries or co-targets), plus the
/// fixed input standardization.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub ec: Head,
    pub sc: Option<Head>,
    norm: (ParamId, ParamId),
}

impl Model {
    pub fn new(n_emotions: usize, n_speakers: Option<usize>, seed: u64) -> Result<Self> {
        if n_emotions < 2 || n_speakers.is_some_and(|k| k < 2) {
            return Err(Error::Parameter(format!(
                "need ≥2 emotion classes and ≥2 speakers, got {n_emotions} and {n_speakers:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let norm = (
            store.add("norm.mean", GROUP_NORM, Tensor::zeros(&[N_CHANNELS])),
            store.add("norm.inv_std", GROUP_NORM, Tensor::new(vec![N_CHANNELS], vec![1.0; N_CHANNELS])?),
        );
        let encoder = Encoder::new(&mut store, &mut rng);
        let ec = Head::new(&mut store, &mut rng, "ec", GROUP_EC, n_emotions);
        let sc = n_speakers.map(|k| Head::new(&mut store, &mut rng, "sc", GROUP_SC, k));
        store.set_frozen(GROUP_NORM, true);
        Ok(Model {
            store,
            encoder,
            ec,
            sc,
            norm,
        })
    }

    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let norm = (lookup(&store, "norm.mean")?, lookup(&store, "norm.inv_std")?);
        let encoder = Encoder::from_store(&store)?;
        let ec = Head::from_store(&store, "ec")?;
        let sc = match store.find("sc.l0.w") {
            Some(_) => Some(Head::from_store(&store, "sc")?),
            None => None,
        };
        store.set_frozen(GROUP_NORM, true);
        Ok(Model {
            store,
            encoder,
            ec,
            sc,
            norm,
        })
    }

    pub fn checkpoint(&self, adam: &Adam, global_step: u64, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            meta,
            global_step,
            store: self.store.clone(),
            adam: adam.clone(),
        }
    }

    /// Fixes the per-channel standardization from a set of feature matrices.
    pub fn fit_normalization<'a>(&mut self, features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<()> {
        let mut sum = [0.0; N_CHANNELS];
        let mut sq = [0.0; N_CHANNELS];
        let mut n = 0usize;
        for f in features {
            for t in 0..f.frames() {
                for (c, &v) in f.row(t).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += f.frames();
        }
        if n == 0 {
            return Err(Error::Config("no frames to fit normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| 1.0 / (s / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        *self.store.value_mut(self.norm.0) = Tensor::new(vec![N_CHANNELS], mean)?;
        *self.store.value_mut(self.norm.1) = Tensor::new(vec![N_CHANNELS], inv)?;
        Ok(())
    }

    /// Standardized `[B, T, 43]` input leaf for a batch of equal-length matrices.
    pub fn input(&self, g: &mut Graph, batch: &[&FeatureMatrix]) -> Result<Var> {
        let t = batch.first().map(|f| f.frames()).ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let (mean, inv) = (self.store.value(self.norm.0).data(), self.store.value(self.norm.1).data());
        let mut data = Vec::with_capacity(batch.len() * t * N_CHANNELS);
        for f in batch {
            if f.frames() != t {
                return Err(Error::Dimension(format!("batch mixes {t} and {} frames", f.frames())));
            }
            data.extend(
                f.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean[i % N_CHANNELS]) * inv[i % N_CHANNELS]),
            );
        }
        Ok(g.constant(Tensor::new(vec![batch.len(), t, N_CHANNELS], data)?))
    }

    pub fn encode(&self, g: &mut Graph, batch: &[&FeatureMatrix]) -> Result<EncoderTrace> {
        let x = self.input(g, batch)?;
        self.encoder.forward(g, &self.store, x)
    }

    pub fn classify_emotion(&self, g: &mut Graph, v: Var) -> Result<Var> {
        self.ec.forward(g, &self.store, v)
    }

    pub fn classify_speaker(&self, g: &mut Graph, v: Var) -> Result<Var> {
        self.sc
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no speaker classifier".into()))?
            .forward(g, &self.store, v)
    }

    /// Embeddings for many utterances, evaluated in chunks; one row per input.
    pub fn embed(&self, features: &[&FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(16) {
            let mut g = Graph::new();
            let tr = self.encode(&mut g, chunk)?;
            out.extend(g.value(tr.embedding).data().chunks(EMBED_DIM).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Most probable emotion index per utterance.
    pub fn predict_emotions(&self, features: &[&FeatureMatrix]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(16) {
            let mut g = Graph::new();
            let tr = self.encode(&mut g, chunk)?;
            let lp = self.classify_emotion(&mut g, tr.embedding)?;
            out.extend(argmax_rows(g.value(lp).data(), self.ec.n_out()));
        }
        Ok(out)
    }
}

pub fn argmax_rows(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|r| (0..width).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(t: usize, seed: u64) -> FeatureMatrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(t, (0..t * N_CHANNELS).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_lengths_for_fourteen_seconds() {
        assert_eq!(encoder_steps(1397), Some(345));
        assert_eq!(encoder_steps(24), Some(2));
        assert_eq!(encoder_steps(18), Some(1));
        assert_eq!(encoder_steps(17), None);
    }

    #[test]
    fn embedding_is_96_and_deterministic() {
        let m = Model::new(4, Some(8), 1).unwrap();
        let f = features(60, 2);
        let a = m.embed(&[&f]).unwrap();
        assert_eq!(a[0].len(), 96);
        assert_eq!(a, m.embed(&[&f]).unwrap());
        assert!(a[0][32..64].iter().all(|&s| s >= 0.0));
        let m2 = Model::new(4, Some(8), 1).unwrap();
        assert_eq!(a, m2.embed(&[&f]).unwrap());
    }

    #[test]
    fn too_short_input_is_rejected() {
        let m = Model::new(4, None, 1).unwrap();
        assert!(matches!(m.embed(&[&features(23, 0)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn heads_output_log_probabilities() {
        let m = Model::new(4, Some(8), 3).unwrap();
        let f = features(40, 4);
        let mut g = Graph::new();
        let tr = m.encode(&mut g, &[&f, &f]).unwrap();
        let e = m.classify_emotion(&mut g, tr.embedding).unwrap();
        let s = m.classify_speaker(&mut g, tr.embedding).unwrap();
        assert_eq!(g.value(e).shape(), [2, 4]);
        assert_eq!(g.value(s).shape(), [2, 8]);
        for row in g.value(s).data().chunks(8) {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_emotions() {
        let mut m = Model::new(4, None, 5).unwrap();
        let w = m.store.find("ec.l2.w").unwrap();
        *m.store.value_mut(w) = Tensor::zeros(&[4, 10]);
        let mut g = Graph::new();
        let tr = m.encode(&mut g, &[&features(30, 1)]).unwrap();
        let lp = m.classify_emotion(&mut g, tr.embedding).unwrap();
        for v in g.value(lp).data() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let q = orthogonal_blocks(&mut r, 3, 8);
        for b in 0..3 {
            let blk = &q.data()[b * 64..(b + 1) * 64];
            for i in 0..8 {
                for j in 0..8 {
                    let d: f64 = (0..8).map(|k| blk[i * 8 + k] * blk[j * 8 + k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn store_round_trip_rebuilds_model() {
        let m = Model::new(4, Some(8), 9).unwrap();
        let back = Model::from_store(m.store.clone()).unwrap();
        assert_eq!(back.sc.as_ref().unwrap().n_out(), 8);
        let f = features(30, 1);
        assert_eq!(m.embed(&[&f]).unwrap(), back.embed(&[&f]).unwrap());
        let no_sc = Model::new(4, None, 9).unwrap();
        assert!(Model::from_store(no_sc.store).unwrap().sc.is_none());
    }
}
