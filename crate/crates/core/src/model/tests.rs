use rand_distr::{Distribution, StandardNormal};

use super::infer::{joint_step, pred_start, pred_step, project_audio, project_pred};
use super::*;
use crate::lattice::{transducer_loss, LatticeLogProbs};
use crate::numerics::tensor::{layer_norm, sinusoidal_positions};
use crate::numerics::SeedStream;
use crate::vocab::{TokenSequence, UnitSystem};

fn tiny() -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        subsample: 2,
        d_model: 8,
        heads: 2,
        ff_dim: 16,
        enc_layers: 1,
        concat_layers: 1,
        mlm_layers: 1,
        asr_vocab: 4,
        lm_vocab: 6,
    }
}

fn params(seed: u64) -> ModelParams<f64> {
    ModelParams::init(&tiny(), &mut SeedStream::new(seed).rng()).unwrap()
}

fn feats(seed: u64, frames: usize, dim: usize) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed).rng();
    let data = (0..frames * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(frames, dim, data).unwrap()
}

fn lm(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec(), UnitSystem::Lm)
}

fn encode(p: &ModelParams<f64>, o: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(p, BindMode::Eval);
    let enc = audio_encode(&mut g, &mut b, o).unwrap();
    g.value(enc.e).clone()
}

fn row_mass_error(t: &Tensor<f64>) -> f64 {
    (0..t.rows())
        .map(|r| (t.row(r).iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn encoder_subsamples_and_is_deterministic() {
    let p = params(1);
    for frames in [1, 6, 7] {
        let o = feats(2, frames, 3);
        let e = encode(&p, &o);
        assert_eq!(e.shape(), &[frames.div_ceil(2), 8]);
        assert_eq!(e, encode(&p, &o));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    assert!(audio_encode(&mut g, &mut b, &Tensor::<f64>::zeros(&[0, 3])).is_err());
    assert!(audio_encode(&mut g, &mut b, &feats(2, 4, 5)).is_err());
}

#[test]
fn permuted_features_with_permuted_projection_leave_encoding_unchanged() {
    let p = params(3);
    let o = feats(4, 7, 3);
    let perm = [2usize, 0, 1];
    let mut o2 = o.clone();
    for r in 0..o.rows() {
        for (j, &src) in perm.iter().enumerate() {
            o2.row_mut(r)[j] = o.row(r)[src];
        }
    }
    let mut p2 = p.clone();
    let w = p.get("enc.in.w").unwrap().clone();
    let w2 = p2.get_mut("enc.in.w").unwrap();
    // stacked input rows: frame block k, feature j
    for k in 0..2 {
        for (j, &src) in perm.iter().enumerate() {
            w2.row_mut(k * 3 + j).copy_from_slice(w.row(k * 3 + src));
        }
    }
    let (a, b) = (encode(&p, &o), encode(&p2, &o2));
    let gap = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(gap < 1e-12, "{gap}");
}

#[test]
fn mlm_shapes_and_unit_check() {
    let p = params(5);
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    let h = mlm_embed(&mut g, &mut b, &lm(&[2, 2, 2])).unwrap();
    assert_eq!(g.value(h).shape(), &[3, 8]);
    let asr = TokenSequence::new(vec![1], UnitSystem::Asr);
    assert!(mlm_embed(&mut g, &mut b, &asr).is_err());
    assert!(mlm_embed(&mut g, &mut b, &lm(&[6])).is_err());
}

#[test]
fn concat_shapes_normalisation_and_live_conditioning() {
    let p = params(6);
    let o = feats(7, 8, 3);
    let run = |ids: &[u32]| {
        let mut g = Graph::new();
        let mut b = Binder::new(&p, BindMode::Eval);
        let enc = audio_encode(&mut g, &mut b, &o).unwrap();
        let h = mlm_embed(&mut g, &mut b, &lm(ids)).unwrap();
        let out = concat_net(&mut g, &mut b, enc.e, h).unwrap();
        (
            g.value(out.audio).clone(),
            g.value(out.frame_logprobs).clone(),
        )
    };
    let (audio, lp) = run(&[3, 2, 4]);
    assert_eq!(audio.shape(), &[4, 8]);
    assert_eq!(lp.shape(), &[4, 7]);
    assert!(row_mass_error(&lp) < 1e-9);
    let (_, lp2) = run(&[3, 5, 4]);
    assert!(lp
        .data()
        .iter()
        .zip(lp2.data())
        .any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn concat_with_zeroed_blocks_is_positionwise() {
    let mut p = params(8);
    for (name, t) in p.tensors.iter_mut() {
        if name.starts_with("cat.0.")
            && (name.contains(".w") || name.contains(".b"))
            && !name.contains("ln")
        {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let o = feats(9, 6, 3);
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    let enc = audio_encode(&mut g, &mut b, &o).unwrap();
    let h = mlm_embed(&mut g, &mut b, &lm(&[1, 3])).unwrap();
    let out = concat_net(&mut g, &mut b, enc.e, h).unwrap();
    let e = g.value(enc.e);
    let seg = p.get("cat.seg").unwrap().row(0).to_vec();
    let pos = sinusoidal_positions::<f64>(5, 8);
    let mut x = e.clone();
    for r in 0..3 {
        for (j, v) in x.row_mut(r).iter_mut().enumerate() {
            *v += seg[j] + pos.row(r)[j];
        }
    }
    let (want, _, _) = layer_norm(
        &x,
        p.get("cat.ln.g").unwrap(),
        p.get("cat.ln.b").unwrap(),
        LN_EPS,
    )
    .unwrap();
    let got = g.value(out.audio);
    let gap = want
        .data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap < 1e-12, "{gap}");
}

#[test]
fn prediction_states_are_incremental() {
    let p = params(10);
    let labels = [1u32, 3, 0];
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    let q = prediction_net(&mut g, &mut b, &labels).unwrap();
    let q = g.value(q).clone();
    assert_eq!(q.shape(), &[4, 8]);

    let mut s = pred_start(&p).unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(q.row(0), s.h.data()));
    for (u, &y) in labels.iter().enumerate() {
        s = pred_step(&p, Some(&s), y).unwrap();
        assert!(close(q.row(u + 1), s.h.data()));
    }
    let after_one = pred_step(&p, Some(&pred_start(&p).unwrap()), 1).unwrap();
    let two = pred_step(&p, Some(&after_one), 3).unwrap();
    let mut g2 = Graph::new();
    let mut b2 = Binder::new(&p, BindMode::Eval);
    let q2 = prediction_net(&mut g2, &mut b2, &[1, 3]).unwrap();
    assert!(close(g2.value(q2).row(2), two.h.data()));
    assert_eq!(pred_start(&p).unwrap(), pred_start(&p).unwrap());
    assert!(prediction_net(&mut g2, &mut b2, &[4]).is_err());
}

#[test]
fn joint_lattice_matches_single_steps() {
    let p = params(11);
    let o = feats(12, 5, 3);
    let labels = [2u32, 2];
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    let enc = audio_encode(&mut g, &mut b, &o).unwrap();
    let q = prediction_net(&mut g, &mut b, &labels).unwrap();
    let lat = joint_lattice(&mut g, &mut b, enc.e, q).unwrap();
    let lat = g.value(lat).clone();
    assert_eq!(lat.shape(), &[3 * 3, 5]);
    assert!(row_mass_error(&lat) < 1e-9);

    let audio = project_audio(&p, g.value(enc.e)).unwrap();
    let mut s = pred_start(&p).unwrap();
    for u in 0..3 {
        let pp = project_pred(&p, &s).unwrap();
        for t in 0..3 {
            let step = joint_step(&p, audio.row(t), &pp).unwrap();
            let want = lat.row(t * 3 + u);
            assert!(step.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        if u < 2 {
            s = pred_step(&p, Some(&s), labels[u]).unwrap();
        }
    }
}

#[test]
fn zero_joint_gives_uniform_lattice() {
    let mut p = params(13);
    for name in ["joint.out.w", "joint.out.b"] {
        p.get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let o = feats(14, 8, 3);
    let labels = [0u32, 1, 3];
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Eval);
    let enc = audio_encode(&mut g, &mut b, &o).unwrap();
    let q = prediction_net(&mut g, &mut b, &labels).unwrap();
    let lat = joint_lattice(&mut g, &mut b, enc.e, q).unwrap();
    let (t, m, c) = (4usize, 3usize, 5usize);
    let lp = LatticeLogProbs::new(t, m + 1, c, g.value(lat).to_f64_vec()).unwrap();
    let nll = transducer_loss(&lp, &labels).unwrap().nll;
    // every path has (1/C)^(T+M); there are C(T+M-1, M) of them
    let paths = 20.0f64; // C(6, 3)
    let want = (t + m) as f64 * (c as f64).ln() - paths.ln();
    assert!((nll - want).abs() < 1e-12, "{nll} vs {want}");
}

#[test]
fn full_wiring_dimensions() {
    let p = params(15);
    let o = feats(16, 9, 3);
    let mut g = Graph::new();
    let mut b = Binder::new(&p, BindMode::Train);
    let enc = audio_encode(&mut g, &mut b, &o).unwrap();
    assert_eq!(enc.frames, 5);
    let ictc = intermediate_ctc_logprobs(&mut g, &mut b, &enc).unwrap();
    assert_eq!(g.value(ictc).shape(), &[5, 5]);
    assert!(row_mass_error(g.value(ictc)) < 1e-9);
    let h = mlm_embed(&mut g, &mut b, &lm(&[2, 4])).unwrap();
    assert!(!g.needs_grad(h));
    let cat = concat_net(&mut g, &mut b, enc.e, h).unwrap();
    assert_eq!(g.value(cat.frame_logprobs).shape(), &[5, 7]);
    let q = prediction_net(&mut g, &mut b, &[1, 2, 3]).unwrap();
    assert_eq!(g.value(q).shape(), &[4, 8]);
    let lat = joint_lattice(&mut g, &mut b, cat.audio, q).unwrap();
    assert_eq!(g.value(lat).shape(), &[5 * 4, 5]);
    let total = g.sum(lat);
    let grads = b.gradients(&g.backward(total).unwrap());
    assert!(grads.keys().all(|k| !k.starts_with(MLM_PREFIX)));
    assert!(grads.contains_key("enc.in.w") && grads.contains_key("pred.wh"));
}

#[test]
fn init_is_deterministic_and_names_sorted() {
    let a = params(17);
    assert_eq!(a, params(17));
    assert_ne!(a, params(18));
    assert!(a.frozen_names().iter().all(|n| n.starts_with("mlm.")));
    assert_eq!(
        a.frozen_names().len() + a.trainable_names().len(),
        a.tensors.len()
    );
    let bad = ModelConfig { heads: 3, ..tiny() };
    assert!(ModelParams::<f32>::init(&bad, &mut SeedStream::new(0).rng()).is_err());
}

fn mlm_corpus() -> Vec<TokenSequence> {
    // ids 3..=5 in a fixed cycle so every masked token is predictable
    (0..60)
        .map(|i| {
            lm(&[
                3 + (i % 3) as u32,
                3 + ((i + 1) % 3) as u32,
                3 + ((i + 2) % 3) as u32,
            ])
        })
        .collect()
}

#[test]
fn mlm_pretraining_learns_and_is_deterministic() {
    let cfg = MlmConfig {
        steps: 150,
        batch: 4,
        peak_lr: 3e-3,
        warmup: 20,
        mask_prob: 0.3,
        heldout: 10,
    };
    let base: ModelParams<f32> = params(19).cast();
    let mut a = base.clone();
    let ra = pretrain_mlm(&mut a, &mlm_corpus(), 2, &cfg, 7).unwrap();
    assert!(ra.final_heldout < ra.initial_heldout);
    assert!(ra.final_heldout < ra.uniform);
    let mut b = base.clone();
    let rb = pretrain_mlm(&mut b, &mlm_corpus(), 2, &cfg, 7).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    for name in base.trainable_names() {
        assert_eq!(
            base.get(name).unwrap(),
            a.get(name).unwrap(),
            "{name} changed"
        );
    }
}
