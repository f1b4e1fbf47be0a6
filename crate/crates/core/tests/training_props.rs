mod common;

use menan::dsp::FeatureMatrix;
use menan::model::{Model, GROUP_EC, GROUP_ENC, GROUP_SC};
use menan::numerics::{Adam, Graph, ParamId, Tensor};
use menan::training::{
    joint_step, mean_entropy, menan_step, menan_total, objective, speaker_ce_loss, speaker_entropy, Batch, Regime,
    SubStep,
};
use proptest::prelude::*;
use rand::Rng;

fn batch_data(seed: u64, b: usize, t: usize) -> (Vec<FeatureMatrix>, Vec<usize>, Vec<usize>) {
    let mut r = common::rng(seed);
    let fs = (0..b).map(|_| common::random_features(&mut r, t)).collect();
    let emo = (0..b).map(|_| r.random_range(0..4)).collect();
    let spk = (0..b).map(|_| r.random_range(0..8)).collect();
    (fs, emo, spk)
}

fn batch(d: &(Vec<FeatureMatrix>, Vec<usize>, Vec<usize>)) -> Batch<'_> {
    Batch {
        features: d.0.iter().collect(),
        emotions: d.1.clone(),
        speakers: d.2.clone(),
    }
}

fn log_probs(g: &mut Graph, rows: &[f64], k: usize) -> menan::numerics::Var {
    let x = g.constant(Tensor::new(vec![rows.len() / k, k], rows.to_vec()).unwrap());
    g.log_softmax(x).unwrap()
}

#[test]
fn graph_losses_match_hand_values() {
    let mut g = Graph::new();
    let uniform = log_probs(&mut g, &[0.0; 8], 8);
    let h = speaker_entropy(&mut g, uniform).unwrap();
    assert!((g.value(h).data()[0] - 8f64.ln()).abs() < 1e-15);
    let ce = speaker_ce_loss(&mut g, uniform, &[3]).unwrap();
    assert!((g.value(ce).data()[0] - 8f64.ln()).abs() < 1e-15);

    let lp = g.constant(Tensor::new(vec![2, 2], vec![0.5f64.ln(), 0.5f64.ln(), 0.25f64.ln(), 0.75f64.ln()]).unwrap());
    let ce = speaker_ce_loss(&mut g, lp, &[0, 0]).unwrap();
    assert!((g.value(ce).data()[0] - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    assert!(matches!(speaker_ce_loss(&mut g, lp, &[0, 2]), Err(menan::Error::Label(_))));
}

#[test]
fn uniform_rows_give_exactly_ln_k() {
    for k in 2..=16 {
        for b in 1..=9 {
            let mut g = Graph::new();
            let lp = log_probs(&mut g, &vec![0.37; b * k], k);
            let h = speaker_entropy(&mut g, lp).unwrap();
            assert_eq!(g.value(h).data()[0], (k as f64).ln(), "K={k} B={b}");
        }
    }
}

#[test]
fn entropy_is_stationary_at_the_uniform_point() {
    let k = 8;
    let h_at = |logits: &[f64]| {
        let mut g = Graph::new();
        let lp = log_probs(&mut g, logits, k);
        let h = speaker_entropy(&mut g, lp).unwrap();
        g.value(h).data()[0]
    };
    let x0 = vec![0.3; k];
    let step = common::FD_STEP;
    for j in 0..k {
        let (mut up, mut dn) = (x0.clone(), x0.clone());
        up[j] += step;
        dn[j] -= step;
        let fd = (h_at(&up) - h_at(&dn)) / (2.0 * step);
        assert!(fd.abs() < 1e-9, "logit {j}: {fd}");
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, k], x0).unwrap(), true);
    let lp = g.log_softmax(x).unwrap();
    let h = speaker_entropy(&mut g, lp).unwrap();
    let grads = g.backward(h).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn alternation_freezes_the_idle_side_for_100_batches() {
    let mut model = Model::new(4, Some(8), 3).unwrap();
    let mut adam = Adam::new();
    let mut checked = 0;
    for i in 0..100 {
        let d = batch_data(i, 4, 30);
        let before = [GROUP_ENC, GROUP_EC, GROUP_SC].map(|g| model.store.group_hash(g));
        let mut last = before;
        let r = menan_step(&mut model, &mut adam, &batch(&d), 0.5, 1e-3, &mut |sub, m| {
            let now = [GROUP_ENC, GROUP_EC, GROUP_SC].map(|g| m.store.group_hash(g));
            match sub {
                SubStep::Speaker => {
                    assert_eq!(now[0], last[0], "encoder moved during the speaker step");
                    assert_eq!(now[1], last[1], "emotion head moved during the speaker step");
                    assert_ne!(now[2], last[2]);
                }
                SubStep::EncoderEmotion => {
                    assert_eq!(now[2], last[2], "speaker head moved during the encoder step");
                    assert_ne!(now[0], last[0]);
                    assert_ne!(now[1], last[1]);
                }
                SubStep::Joint => unreachable!(),
            }
            last = now;
            checked += 1;
        })
        .unwrap();
        let h = r.h_spk.unwrap();
        assert!((r.total - menan_total(0.5, r.d_emo, h)).abs() <= 1e-12);
        assert!((0.0..=8f64.ln() + 1e-12).contains(&h));
    }
    assert_eq!(checked, 200);
}

/// Parameter gradients of one objective, without stepping.
fn grads_of(model: &mut Model, b: &Batch, regime: Regime, lambda: f64) -> Vec<(ParamId, Vec<f64>)> {
    model.store.train_only(&[GROUP_ENC, GROUP_EC, GROUP_SC]);
    model.store.zero_grad();
    let mut g = Graph::new();
    let o = objective(&mut g, model, b, regime, lambda).unwrap();
    let gr = g.backward(o.loss).unwrap();
    g.accumulate_param_grads(&gr, &mut model.store).unwrap();
    let out = model
        .store
        .iter()
        .filter(|(_, p)| p.group == GROUP_ENC)
        .map(|(id, p)| (id, p.grad.as_ref().map_or(vec![0.0; p.value.len()], |t| t.data().to_vec())))
        .collect();
    model.store.zero_grad();
    out
}

#[test]
fn reversal_scales_the_speaker_gradient_reaching_the_encoder() {
    let d = batch_data(9, 5, 40);
    let b = batch(&d);
    let mut model = Model::new(4, Some(8), 4).unwrap();
    let lambda = 0.3;
    // multitask(λ) = λ·emo + (1−λ)·CE, ec_only = emo; so the plain speaker
    // gradient is (multitask − λ·ec_only) / (1−λ).
    let mt = grads_of(&mut model, &b, Regime::Multitask, lambda);
    let ec = grads_of(&mut model, &b, Regime::EcOnly, lambda);
    let dat = grads_of(&mut model, &b, Regime::Dat, lambda);
    for ((m, e), d) in mt.iter().zip(&ec).zip(&dat) {
        for k in 0..m.1.len() {
            let spk = (m.1[k] - lambda * e.1[k]) / (1.0 - lambda);
            let expect = lambda * e.1[k] - (1.0 - lambda) * spk;
            assert!((d.1[k] - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "{} vs {expect}", d.1[k]);
        }
    }
    // Zero reversal (λ = 1) leaves only the emotion gradient.
    let dat1 = grads_of(&mut model, &b, Regime::Dat, 1.0);
    let ec1 = grads_of(&mut model, &b, Regime::EcOnly, 1.0);
    assert_eq!(dat1, ec1);
}

#[test]
fn joint_steps_touch_the_right_groups() {
    let d = batch_data(2, 4, 30);
    let mut model = Model::new(4, None, 8).unwrap();
    let mut adam = Adam::new();
    let norm = model.store.group_hash("norm");
    let r = joint_step(&mut model, &mut adam, &batch(&d), Regime::EcOnly, 0.5, 1e-3).unwrap();
    assert!(r.d_spk.is_none() && r.h_spk.is_none());
    assert_eq!(r.total, r.d_emo);
    let mut mt = Model::new(4, Some(8), 8).unwrap();
    let r = joint_step(&mut mt, &mut adam, &batch(&d), Regime::Multitask, 0.5, 1e-3).unwrap();
    assert!((r.total - (0.5 * r.d_emo + 0.5 * r.d_spk.unwrap())).abs() < 1e-12);
    assert_eq!(model.store.group_hash("norm"), norm);
    assert!(joint_step(&mut mt, &mut adam, &batch(&d), Regime::Menan, 0.5, 1e-3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_stays_within_zero_and_ln_k(seed in any::<u64>(), k in 2usize..12, b in 1usize..6, scale in 0.0f64..30.0) {
        let mut r = common::rng(seed);
        let logits: Vec<f64> = (0..b * k).map(|_| scale * (r.random::<f64>() - 0.5)).collect();
        let mut g = Graph::new();
        let lp = log_probs(&mut g, &logits, k);
        let h = speaker_entropy(&mut g, lp).unwrap();
        let hv = g.value(h).data()[0];
        prop_assert!(hv >= -1e-12 && hv <= (k as f64).ln() + 1e-12);
        let probs: Vec<f64> = g.value(lp).data().iter().map(|v| v.exp()).collect();
        prop_assert!((mean_entropy(&probs, k).unwrap() - hv).abs() < 1e-10);
    }

    #[test]
    fn adversarial_total_identity_holds_on_random_batches(seed in any::<u64>(), lambda in 0.01f64..0.99) {
        let d = batch_data(seed, 3, 26);
        let mut model = Model::new(4, Some(8), seed).unwrap();
        let mut adam = Adam::new();
        let r = menan_step(&mut model, &mut adam, &batch(&d), lambda, 1e-3, &mut |_, _| {}).unwrap();
        prop_assert!((r.total - menan_total(lambda, r.d_emo, r.h_spk.unwrap())).abs() <= 1e-12);
        prop_assert!(r.d_emo >= 0.0 && r.d_spk.unwrap() >= 0.0);
    }
}
