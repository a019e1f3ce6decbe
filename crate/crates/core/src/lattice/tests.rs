use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::numerics::gradcheck::{max_rel_error, GradCheck};
use crate::numerics::{softmax_log, Rng, SeedStream};

fn random_frames(rng: &mut Rng, frames: usize, classes: usize) -> FrameLogProbs {
    let logits: Vec<f64> = (0..frames * classes)
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let t = Tensor::matrix(frames, classes, logits).unwrap();
    FrameLogProbs::from_tensor(&softmax_log(&t, 1).unwrap()).unwrap()
}

fn random_lattice(rng: &mut Rng, frames: usize, states: usize, classes: usize) -> LatticeLogProbs {
    let logits: Vec<f64> = (0..frames * states * classes)
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let t = Tensor::new(vec![frames, states, classes], logits).unwrap();
    let lp = softmax_log(&t, 2).unwrap();
    LatticeLogProbs::new(frames, states, classes, lp.into_data()).unwrap()
}

fn uniform_frames(frames: usize, classes: usize) -> FrameLogProbs {
    let v = -(classes as f64).ln();
    FrameLogProbs::new(frames, classes, vec![v; frames * classes]).unwrap()
}

fn path(symbols: &[u32], blank: u32) -> AlignmentPath {
    AlignmentPath {
        symbols: symbols.to_vec(),
        blank,
    }
}

const A: u32 = 0;
const B: u32 = 1;
const E: u32 = 2;

#[test]
fn ctc_collapse_examples() {
    assert_eq!(collapse_ctc(&path(&[A, A, E, B], E)), vec![A, B]);
    assert_eq!(collapse_ctc(&path(&[E, E, E], E)), Vec::<u32>::new());
    assert_eq!(collapse_ctc(&path(&[A, E, A], E)), vec![A, A]);
}

#[test]
fn transducer_collapse_keeps_repeats() {
    assert_eq!(collapse_transducer(&path(&[E, A, E, A], E)), vec![A, A]);
    assert_eq!(collapse_transducer(&path(&[E, E], E)), Vec::<u32>::new());
    assert_eq!(collapse_transducer(&path(&[A, A, B, E], E)), vec![A, A, B]);
}

#[test]
fn ctc_uniform_two_frames() {
    let lp = uniform_frames(2, 3);
    let r = ctc_loss(&lp, &[A]).unwrap();
    assert_eq!(r.status, LossStatus::Ok);
    assert!((r.nll - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn ctc_single_frame_is_single_path() {
    let mut rng = SeedStream::new(1).rng();
    let lp = random_frames(&mut rng, 1, 3);
    let r = ctc_loss(&lp, &[B]).unwrap();
    assert!((r.nll + lp.row(0)[1]).abs() < 1e-12);
}

#[test]
fn ctc_repeat_needs_separating_blank() {
    let lp = uniform_frames(2, 3);
    let r = ctc_loss(&lp, &[A, A]).unwrap();
    assert_eq!(r.status, LossStatus::Infeasible);
    assert!(r.nll.is_infinite() && r.nll > 0.0);
    assert!(r.grad.iter().all(|&g| g == 0.0));
    assert_eq!(
        ctc_loss(&uniform_frames(3, 3), &[A, A]).unwrap().status,
        LossStatus::Ok
    );
}

#[test]
fn ctc_empty_target_is_all_blank() {
    let mut rng = SeedStream::new(2).rng();
    let lp = random_frames(&mut rng, 4, 3);
    let want: f64 = -(0..4).map(|t| lp.row(t)[2]).sum::<f64>();
    assert!((ctc_loss(&lp, &[]).unwrap().nll - want).abs() < 1e-12);
    assert!((ctc_oracle_nll(&lp, &[]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ctc_rejects_blank_in_target() {
    let lp = uniform_frames(3, 3);
    assert!(ctc_loss(&lp, &[E]).is_err());
}

#[test]
fn best_path_examples() {
    let hot = |ids: &[usize]| {
        let mut d = vec![-5.0; ids.len() * 3];
        for (t, &k) in ids.iter().enumerate() {
            d[t * 3 + k] = -0.01;
        }
        FrameLogProbs::new(ids.len(), 3, d).unwrap()
    };
    assert_eq!(ctc_best_path(&hot(&[0, 0, 2, 1])), vec![A, B]);
    assert_eq!(ctc_best_path(&hot(&[2, 2, 2])), Vec::<u32>::new());
    // ties go to the lowest id
    assert_eq!(ctc_best_path(&uniform_frames(2, 3)), vec![A]);
}

#[test]
fn best_path_confidence_is_max_over_its_frames() {
    let d = vec![
        0.6f64.ln(),
        0.3f64.ln(),
        0.1f64.ln(),
        0.9f64.ln(),
        0.05f64.ln(),
        0.05f64.ln(),
        0.1f64.ln(),
        0.1f64.ln(),
        0.8f64.ln(),
        0.2f64.ln(),
        0.7f64.ln(),
        0.1f64.ln(),
    ];
    let lp = FrameLogProbs::new(4, 3, d).unwrap();
    let scored = ctc_best_path_scored(&lp);
    assert_eq!(scored.len(), 2);
    assert_eq!(scored[0].0, A);
    assert!((scored[0].1 - 0.9).abs() < 1e-12);
    assert_eq!(scored[1].0, B);
    assert!((scored[1].1 - 0.7).abs() < 1e-12);
}

#[test]
fn best_path_matches_exhaustive_single_path_maximisation() {
    let mut rng = SeedStream::new(3).rng();
    for _ in 0..200 {
        let t = rng.random_range(1..=5);
        let lp = random_frames(&mut rng, t, 4);
        let best = enumerate_ctc_paths(t, 4)
            .map(|p| {
                let s: f64 = p
                    .symbols
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| lp.row(i)[k as usize])
                    .sum();
                (s, p)
            })
            .fold(None::<(f64, AlignmentPath)>, |acc, (s, p)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, p)),
            })
            .unwrap();
        assert_eq!(ctc_best_path(&lp), collapse_ctc(&best.1));
    }
}

#[test]
fn transducer_examples() {
    let half = 0.5f64.ln();
    let one = LatticeLogProbs::new(1, 2, 2, vec![half; 4]).unwrap();
    assert!((transducer_loss(&one, &[0]).unwrap().nll - 4f64.ln()).abs() < 1e-12);
    let two = LatticeLogProbs::new(2, 2, 2, vec![half; 8]).unwrap();
    assert!((transducer_loss(&two, &[0]).unwrap().nll - 4f64.ln()).abs() < 1e-12);
    assert_eq!(enumerate_transducer_paths(2, &[0], 1).len(), 2);

    let mut rng = SeedStream::new(4).rng();
    let lp = random_lattice(&mut rng, 3, 1, 3);
    let want: f64 = -(0..3).map(|t| lp.cell(t, 0)[2]).sum::<f64>();
    assert!((transducer_loss(&lp, &[]).unwrap().nll - want).abs() < 1e-12);
}

#[test]
fn transducer_rejects_shape_mismatch() {
    let mut rng = SeedStream::new(5).rng();
    let lp = random_lattice(&mut rng, 2, 2, 3);
    assert!(transducer_loss(&lp, &[0, 1]).is_err());
}

#[test]
fn transducer_paths_have_t_blanks_and_m_labels() {
    let target = [0, 1, 0];
    let paths = enumerate_transducer_paths(3, &target, 2);
    // C(T+M-1, M) with the last slot fixed to blank
    assert_eq!(paths.len(), 10);
    for p in &paths {
        assert_eq!(p.symbols.iter().filter(|&&s| s == 2).count(), 3);
        assert_eq!(collapse_transducer(p), target.to_vec());
    }
}

#[test]
fn oracle_guard_is_enforced() {
    let lp = uniform_frames(7, 3);
    assert!(matches!(
        ctc_oracle_nll(&lp, &[0]),
        Err(Error::OracleGuard(_))
    ));
    let lp = uniform_frames(3, 6);
    assert!(matches!(
        enumerate_paths_oracle(OracleLattice::Ctc(&lp), &[0]),
        Err(Error::OracleGuard(_))
    ));
}

#[test]
fn dp_matches_enumeration_on_random_instances() {
    let mut rng = SeedStream::new(6).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(1..=3);
        let n = rng.random_range(0..=3);
        let target: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();

        let lp = random_frames(&mut rng, t, v + 1);
        let dp = ctc_loss(&lp, &target).unwrap();
        let brute = ctc_oracle_nll(&lp, &target).unwrap();
        if dp.status == LossStatus::Infeasible {
            assert!(brute.is_infinite());
        } else {
            worst = worst.max((dp.nll - brute).abs());
        }

        let lp = random_lattice(&mut rng, t, n + 1, v + 1);
        let dp = transducer_loss(&lp, &target).unwrap();
        let brute = transducer_oracle_nll(&lp, &target).unwrap();
        worst = worst.max((dp.nll - brute).abs());
    }
    assert!(worst < 1e-9, "worst gap {worst:e}");
}

#[test]
fn ctc_probabilities_sum_to_one_over_all_targets() {
    let mut rng = SeedStream::new(7).rng();
    for t in 1..=3 {
        let lp = random_frames(&mut rng, t, 3);
        let mut total = 0.0;
        for len in 0..=t {
            for code in 0..2usize.pow(len as u32) {
                let target: Vec<u32> = (0..len).map(|i| ((code >> i) & 1) as u32).collect();
                let r = ctc_loss(&lp, &target).unwrap();
                total += (-r.nll).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "T={t}: {total}");
    }
}

fn ctc_grad_check(frames: usize, classes: usize, target: Vec<u32>, seed: u64) -> f64 {
    let mut rng = SeedStream::new(seed).rng();
    let logits: Vec<f64> = (0..frames * classes)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x = Tensor::matrix(frames, classes, logits).unwrap();
    let probes = GradCheck::default()
        .run(
            &[x],
            |g, v| {
                let lp = g.log_softmax_rows(v[0]);
                Ok(ctc_loss_node(g, lp, &target)?.expect("feasible"))
            },
            Some(100),
            &mut rng,
        )
        .unwrap();
    max_rel_error(&probes)
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    assert!(ctc_grad_check(6, 4, vec![0, 2, 2], 8) < 1e-4);
    assert!(ctc_grad_check(9, 5, vec![3, 1, 0, 1], 9) < 1e-4);
}

#[test]
fn transducer_gradient_matches_finite_differences() {
    let (frames, target) = (5usize, vec![1u32, 0, 1]);
    let (states, classes) = (target.len() + 1, 4);
    let mut rng = SeedStream::new(10).rng();
    let logits: Vec<f64> = (0..frames * states * classes)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x = Tensor::matrix(frames * states, classes, logits).unwrap();
    let probes = GradCheck::default()
        .run(
            &[x],
            |g, v| {
                let lp = g.log_softmax_rows(v[0]);
                Ok(transducer_loss_node(g, lp, frames, &target)?.expect("feasible"))
            },
            Some(100),
            &mut rng,
        )
        .unwrap();
    assert!(max_rel_error(&probes) < 1e-4);
}

#[test]
fn gradients_are_posteriors() {
    // with respect to log-probs, each frame's gradient sums to -1 for CTC
    let mut rng = SeedStream::new(11).rng();
    let lp = random_frames(&mut rng, 6, 4);
    let r = ctc_loss(&lp, &[0, 1]).unwrap();
    for row in r.grad.chunks(4) {
        assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-12);
    }
    assert!(r.nll >= 0.0 && r.grad.iter().all(|g| g.is_finite()));
}

/// Uniformly random member of `B⁻¹(target)` over `frames` frames.
fn sample_ctc_inverse(rng: &mut Rng, target: &[u32], frames: usize, blank: u32) -> AlignmentPath {
    // one segment per target token, blanks required between repeats, the
    // rest of the frames spread as extra repeats or blanks at random gaps
    let mut slots: Vec<(u32, usize)> = Vec::new();
    for (i, &y) in target.iter().enumerate() {
        if i > 0 && target[i - 1] == y {
            slots.push((blank, 1));
        } else {
            slots.push((blank, 0));
        }
        slots.push((y, 1));
    }
    slots.push((blank, 0));
    let used: usize = slots.iter().map(|s| s.1).sum();
    for _ in used..frames {
        let i = rng.random_range(0..slots.len());
        slots[i].1 += 1;
    }
    let symbols = slots
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
        .collect();
    AlignmentPath { symbols, blank }
}

proptest! {
    #[test]
    fn collapse_inverts_alignment_sampling(
        target in prop::collection::vec(0u32..3, 0..6),
        extra in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = SeedStream::new(seed).rng();
        let frames = ctc_min_frames(&target) + extra;
        let p = sample_ctc_inverse(&mut rng, &target, frames, 3);
        prop_assert_eq!(p.symbols.len(), frames);
        prop_assert_eq!(collapse_ctc(&p), target);
    }

    #[test]
    fn transducer_collapse_preserves_label_count(
        labels in prop::collection::vec(0u32..3, 0..5),
        blanks in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = SeedStream::new(seed).rng();
        let mut symbols = labels.clone();
        for _ in 0..blanks {
            let at = rng.random_range(0..=symbols.len());
            symbols.insert(at, 3);
        }
        let p = AlignmentPath { symbols, blank: 3 };
        prop_assert_eq!(collapse_transducer(&p), labels);
    }

    #[test]
    fn lattice_inputs_are_normalised(seed in any::<u64>()) {
        let mut rng = SeedStream::new(seed).rng();
        prop_assert!(random_frames(&mut rng, 3, 4).normalisation_error() < 1e-9);
        prop_assert!(random_lattice(&mut rng, 2, 3, 4).normalisation_error() < 1e-9);
    }
}
