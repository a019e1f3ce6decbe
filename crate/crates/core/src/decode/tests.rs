use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::lattice::transducer_loss;
use crate::masking::mask_count;
use crate::model::ModelConfig;
use crate::numerics::SeedStream;
use crate::vocab::{build_asr_vocab, build_lm_vocab};

fn config(asr_vocab: usize, lm_vocab: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        subsample: 2,
        d_model: 8,
        heads: 2,
        ff_dim: 16,
        enc_layers: 1,
        concat_layers: 1,
        mlm_layers: 1,
        asr_vocab,
        lm_vocab,
    }
}

/// Random model with weights scaled up so the joint distribution is peaked
/// enough for search choices to matter.
fn model(seed: u64, asr_vocab: usize, scale: f64) -> ModelParams<f64> {
    let mut p = ModelParams::init(&config(asr_vocab, 8), &mut SeedStream::new(seed).rng()).unwrap();
    for name in [
        "joint.enc.w",
        "joint.pred.w",
        "joint.out.w",
        "pred.wx",
        "pred.emb",
    ] {
        p.get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= scale);
    }
    p
}

fn audio(seed: u64, frames: usize, d: usize) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed).path(&[7]).rng();
    let data = (0..frames * d)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::matrix(frames, d, data).unwrap()
}

fn sequences(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u32>| {
                (0..vocab).map(move |k| {
                    let mut s = s.clone();
                    s.push(k);
                    s
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

#[test]
fn width_one_is_greedy() {
    for seed in 0..200 {
        let p = model(seed, 3, 3.0);
        let a = audio(seed, 3, 8);
        let g = greedy_transducer(&p, &a, DEFAULT_MAX_SYMBOLS).unwrap();
        let b = beam_search_transducer(&p, &a, 1, DEFAULT_MAX_SYMBOLS).unwrap();
        assert_eq!(g, b, "seed {seed}");
    }
}

/// Fraction of random instances where width-4 search returns the label
/// sequence of highest exact probability among all sequences up to `max_len`.
pub(crate) fn exhaustive_match_rate(
    instances: u64,
    scale: f64,
    frames: usize,
    max_symbols: usize,
    max_len: usize,
) -> f64 {
    let all = sequences(3, max_len);
    let matched = (0..instances)
        .filter(|&seed| {
            let p = model(seed, 3, scale);
            let a = audio(seed, frames, 8);
            let b = beam_search_transducer(&p, &a, 4, max_symbols).unwrap();
            let best = all
                .iter()
                .map(|s| (transducer_log_prob(&p, &a, s).unwrap(), s))
                .max_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap();
            assert!(b.log_score <= best.0 + 1e-9 || b.tokens.len() > max_len);
            &b.tokens.ids == best.1
        })
        .count();
    matched as f64 / instances as f64
}

#[test]
fn beam_matches_exhaustive_search() {
    assert_eq!(exhaustive_match_rate(300, 1.0, 2, 2, 4), 1.0);
    assert_eq!(exhaustive_match_rate(300, 3.0, 1, 2, 2), 1.0);
}

#[test]
fn beam_never_below_greedy() {
    for seed in 0..50 {
        let p = model(seed, 3, 3.0);
        let a = audio(seed, 4, 8);
        let g = greedy_transducer(&p, &a, DEFAULT_MAX_SYMBOLS).unwrap();
        for width in [2, 3, 5] {
            let b = beam_search_transducer(&p, &a, width, DEFAULT_MAX_SYMBOLS).unwrap();
            assert!(b.log_score >= g.log_score, "seed {seed} width {width}");
        }
    }
}

#[test]
fn log_score_is_negative_loss() {
    for seed in 0..20 {
        let p = model(seed, 3, 2.0);
        let a = audio(seed, 3, 8);
        let h = beam_search_transducer(&p, &a, 3, DEFAULT_MAX_SYMBOLS).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&p, BindMode::Eval);
        let c = g.constant(a.clone());
        let labels = crate::model::prediction_net(&mut g, &mut b, &h.tokens.ids).unwrap();
        let lat = crate::model::joint_lattice(&mut g, &mut b, c, labels).unwrap();
        let lp =
            LatticeLogProbs::new(3, h.tokens.len() + 1, 4, g.value(lat).data().to_vec()).unwrap();
        let nll = transducer_loss(&lp, &h.tokens.ids).unwrap().nll;
        assert!((nll + h.log_score).abs() < 1e-9, "{nll} vs {}", h.log_score);
    }
}

#[test]
fn greedy_path_score_sums_emissions() {
    let p = model(3, 3, 3.0);
    let a = audio(3, 3, 8);
    let h = greedy_transducer(&p, &a, DEFAULT_MAX_SYMBOLS).unwrap();
    assert!(h.path_score <= h.log_score + 1e-12);
    assert!(h.tokens.ids.iter().all(|&i| i < 3));
}

#[test]
fn zero_width_is_rejected() {
    let p = model(0, 3, 1.0);
    assert!(beam_search_transducer(&p, &audio(0, 2, 8), 0, 5).is_err());
}

#[test]
fn dominant_blank_gives_empty_output() {
    let mut p = model(1, 3, 1.0);
    let b = p.get_mut("joint.out.b").unwrap();
    b.data_mut()[3] = 50.0;
    let h = greedy_transducer(&p, &audio(1, 4, 8), 5).unwrap();
    assert!(h.tokens.is_empty());
}

#[test]
fn zero_joint_ties_go_to_the_lowest_label() {
    let mut p = model(2, 3, 1.0);
    for name in ["joint.out.w", "joint.out.b"] {
        p.get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let h = greedy_transducer(&p, &audio(2, 2, 8), 2).unwrap();
    assert_eq!(h.tokens.ids, vec![0, 0, 0, 0]);
}

fn vocabs() -> Vocabs {
    let text: Vec<String> = ["a cat sat", "the cat", "a hat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let lm = build_lm_vocab(&text).unwrap();
    let asr = build_asr_vocab(&text, 12).unwrap();
    Vocabs { lm, asr }
}

fn full_model(v: &Vocabs, seed: u64) -> ModelParams<f64> {
    let cfg = config(v.asr.len(), v.lm.len());
    ModelParams::init(&cfg, &mut SeedStream::new(seed).rng()).unwrap()
}

fn feats(seed: u64, frames: usize) -> Tensor<f64> {
    audio(seed, frames, 3)
}

#[test]
fn refinement_schedule_is_exact() {
    let v = vocabs();
    let mask = v.mask_id().unwrap();
    for seed in 0..10 {
        let p = full_model(&v, seed);
        let enc = encode(&p, &feats(seed, 24)).unwrap();
        for k_total in [1, 2, 3, 5] {
            let out = decode_bertctc(&p, &v, &enc, k_total).unwrap();
            assert_eq!(out.trace.len(), k_total);
            for r in &out.trace {
                let masked = r.masked.iter().filter(|&&m| m).count();
                assert_eq!(masked, mask_count(r.tokens.len(), r.k, k_total).unwrap());
                assert_eq!(r.scores.len(), r.tokens.len());
            }
            assert!(out.trace.last().unwrap().masked.iter().all(|&m| !m));
            assert!(!out.hypothesis.ids.contains(&mask));
            assert_eq!(out.audio.rows(), enc.e.rows());
        }
    }
}

#[test]
fn decoding_is_deterministic_and_in_asr_units() {
    let v = vocabs();
    let p = full_model(&v, 4);
    let f = feats(4, 20);
    let a = decode_bectra(&p, &v, &f, 3, 2, DEFAULT_MAX_SYMBOLS).unwrap();
    let b = decode_bectra(&p, &v, &f, 3, 2, DEFAULT_MAX_SYMBOLS).unwrap();
    assert_eq!(a.hypothesis, b.hypothesis);
    assert_eq!(a.refinement.trace, b.refinement.trace);
    assert_eq!(a.hypothesis.tokens.unit_system, UnitSystem::Asr);
    assert_eq!(a.refinement.hypothesis.unit_system, UnitSystem::Lm);
    let nll = -transducer_log_prob(&p, &a.refinement.audio, &a.hypothesis.tokens.ids).unwrap();
    assert!((nll + a.hypothesis.log_score).abs() < 1e-9);
}

#[test]
fn initial_length_falls_back_on_empty_output() {
    let v = vocabs();
    let mut p = full_model(&v, 5);
    let blank = p.config.asr_vocab;
    p.get_mut("ictc.out.b").unwrap().data_mut()[blank] = 100.0;
    let enc = encode(&p, &feats(5, 18)).unwrap();
    assert_eq!(initial_length(&enc, &v).unwrap(), 9usize.div_ceil(4));
}

#[test]
fn zero_iterations_are_rejected() {
    let v = vocabs();
    let p = full_model(&v, 6);
    let enc = encode(&p, &feats(6, 8)).unwrap();
    assert!(decode_bertctc(&p, &v, &enc, 0).is_err());
}
