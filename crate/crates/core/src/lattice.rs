//! Alignment lattices: CTC and transducer marginal likelihoods with their
//! gradients, best-path decoding, the two collapsing functions, and
//! exhaustive path enumeration for checking all of the above.
//!
//! Everything here is 64-bit log domain. The blank symbol is always the last
//! class column.

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{log_add, logsumexp, Graph, Scalar, Tensor, Var};

/// `T × (|V|+1)` frame log-probabilities, blank in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogProbs {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl FrameLogProbs {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() != frames * classes {
            return Err(shape_err(format!(
                "frame log-probs {frames}x{classes} from {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            classes,
            data,
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        Self::new(t.rows(), t.cols(), t.to_f64_vec())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> u32 {
        (self.classes - 1) as u32
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn at(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }

    /// Largest `|Σ exp(row) − 1|` over frames.
    pub fn normalisation_error(&self) -> f64 {
        max_mass_error(&self.data, self.classes)
    }
}

fn max_mass_error(data: &[f64], width: usize) -> f64 {
    data.chunks_exact(width)
        .map(|r| (r.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// `T × (M+1) × (|V|+1)` transducer lattice log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeLogProbs {
    frames: usize,
    states: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LatticeLogProbs {
    pub fn new(frames: usize, states: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || states == 0 || data.len() != frames * states * classes {
            return Err(shape_err(format!(
                "lattice {frames}x{states}x{classes} from {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            states,
            classes,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> u32 {
        (self.classes - 1) as u32
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let o = (t * self.states + u) * self.classes;
        &self.data[o..o + self.classes]
    }

    /// Largest `|Σ exp(cell) − 1|` over lattice nodes.
    pub fn normalisation_error(&self) -> f64 {
        max_mass_error(&self.data, self.classes)
    }

    #[inline]
    fn idx(&self, t: usize, u: usize, k: usize) -> usize {
        (t * self.states + u) * self.classes + k
    }

    #[inline]
    fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[self.idx(t, u, k)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossStatus {
    Ok,
    /// No alignment path can produce the target; `nll` is `+inf` and the
    /// gradient is zero.
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeResult {
    pub nll: f64,
    /// `d nll / d log-prob`, same layout as the input.
    pub grad: Vec<f64>,
    pub status: LossStatus,
}

impl LatticeResult {
    fn infeasible(n: usize) -> Self {
        Self {
            nll: f64::INFINITY,
            grad: vec![0.0; n],
            status: LossStatus::Infeasible,
        }
    }
}

/// A frame-level path: CTC form has one symbol per frame, transducer form
/// interleaves `T` blanks with `M` labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AlignmentPath {
    pub symbols: Vec<u32>,
    pub blank: u32,
}

/// `B`: merge runs of equal symbols, then drop blanks.
pub fn collapse_ctc(path: &AlignmentPath) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in &path.symbols {
        if Some(s) != prev && s != path.blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `B′`: drop blanks only; repeated labels stay.
pub fn collapse_transducer(path: &AlignmentPath) -> Vec<u32> {
    path.symbols
        .iter()
        .copied()
        .filter(|&s| s != path.blank)
        .collect()
}

fn check_labels(target: &[u32], blank: u32) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&y| y >= blank) {
        return Err(invalid(format!(
            "target label {bad} is blank or outside {blank} labels"
        )));
    }
    Ok(())
}

/// Minimum number of frames a CTC alignment of `target` needs.
pub fn ctc_min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log of the summed probability of every CTC path collapsing to
/// `target`, by the forward recursion over the blank-interleaved target.
pub fn ctc_loss(lp: &FrameLogProbs, target: &[u32]) -> Result<LatticeResult> {
    let blank = lp.blank();
    check_labels(target, blank)?;
    let (t_len, n) = (lp.frames, target.len());
    if ctc_min_frames(target) > t_len {
        return Ok(LatticeResult::infeasible(lp.data.len()));
    }
    if t_len == 0 {
        return Ok(LatticeResult {
            nll: 0.0,
            grad: Vec::new(),
            status: LossStatus::Ok,
        });
    }
    let s_len = 2 * n + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.at(0, blank as usize);
    if n > 0 {
        alpha[1] = lp.at(0, target[0] as usize);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp.at(t, label(s) as usize);
        }
    }
    let last = (t_len - 1) * s_len;
    let log_z = if n > 0 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_z == ninf {
        return Ok(LatticeResult::infeasible(lp.data.len()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp.at(t_len - 1, blank as usize);
    if n > 0 {
        beta[last + s_len - 2] = lp.at(t_len - 1, target[n - 1] as usize);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp.at(t, label(s) as usize);
        }
    }

    let mut grad = vec![0.0; lp.data.len()];
    for t in 0..t_len {
        for s in 0..s_len {
            let (a, b) = (alpha[t * s_len + s], beta[t * s_len + s]);
            if a == ninf || b == ninf {
                continue;
            }
            let k = label(s) as usize;
            grad[t * lp.classes + k] -= (a + b - lp.at(t, k) - log_z).exp();
        }
    }
    Ok(LatticeResult {
        nll: -log_z,
        grad,
        status: LossStatus::Ok,
    })
}

/// Per-frame argmax (ties to the lowest id), then `B`. Each emitted token
/// carries its confidence: the highest frame probability among the frames
/// that produced it.
pub fn ctc_best_path_scored(lp: &FrameLogProbs) -> Vec<(u32, f64)> {
    let blank = lp.blank();
    let mut out: Vec<(u32, f64)> = Vec::new();
    let mut prev = None;
    for t in 0..lp.frames {
        let row = lp.row(t);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        let best = best as u32;
        let p = row[best as usize].exp();
        if best != blank {
            if Some(best) == prev {
                let last = out.last_mut().expect("repeat follows an emission");
                last.1 = last.1.max(p);
            } else {
                out.push((best, p));
            }
        }
        prev = Some(best);
    }
    out
}

pub fn ctc_best_path(lp: &FrameLogProbs) -> Vec<u32> {
    ctc_best_path_scored(lp)
        .into_iter()
        .map(|(k, _)| k)
        .collect()
}

/// Negative log of the summed probability of every transducer path emitting
/// `target`; each path ends with a blank from the final lattice node.
pub fn transducer_loss(lp: &LatticeLogProbs, target: &[u32]) -> Result<LatticeResult> {
    let blank = lp.blank() as usize;
    check_labels(target, lp.blank())?;
    let m = target.len();
    if lp.states != m + 1 {
        return Err(shape_err(format!(
            "lattice has {} label states for a target of length {m}",
            lp.states
        )));
    }
    if lp.frames == 0 {
        return Err(shape_err("transducer lattice needs at least one frame"));
    }
    let t_len = lp.frames;
    let u_len = m + 1;
    let ninf = f64::NEG_INFINITY;
    let y = |u: usize| target[u] as usize;

    let mut alpha = vec![ninf; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = ninf;
            if t > 0 {
                a = alpha[(t - 1) * u_len + u] + lp.at(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add(a, alpha[t * u_len + u - 1] + lp.at(t, u - 1, y(u - 1)));
            }
            alpha[t * u_len + u] = a;
        }
    }
    let log_z = alpha[t_len * u_len - 1] + lp.at(t_len - 1, m, blank);
    if log_z == ninf {
        return Ok(LatticeResult::infeasible(lp.data.len()));
    }

    let mut beta = vec![ninf; t_len * u_len];
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let b = if t == t_len - 1 && u == m {
                lp.at(t, u, blank)
            } else {
                let mut b = ninf;
                if t + 1 < t_len {
                    b = beta[(t + 1) * u_len + u] + lp.at(t, u, blank);
                }
                if u < m {
                    b = log_add(b, beta[t * u_len + u + 1] + lp.at(t, u, y(u)));
                }
                b
            };
            beta[t * u_len + u] = b;
        }
    }

    let mut grad = vec![0.0; lp.data.len()];
    for t in 0..t_len {
        for u in 0..u_len {
            let a = alpha[t * u_len + u];
            if a == ninf {
                continue;
            }
            let blank_next = if t + 1 < t_len {
                beta[(t + 1) * u_len + u]
            } else if u == m {
                0.0
            } else {
                ninf
            };
            if blank_next > ninf {
                let i = lp.idx(t, u, blank);
                grad[i] = -(a + lp.data[i] + blank_next - log_z).exp();
            }
            if u < m {
                let next = beta[t * u_len + u + 1];
                if next > ninf {
                    let i = lp.idx(t, u, y(u));
                    grad[i] = -(a + lp.data[i] + next - log_z).exp();
                }
            }
        }
    }
    Ok(LatticeResult {
        nll: -log_z,
        grad,
        status: LossStatus::Ok,
    })
}

/// Log-probability of one explicit transducer path through `lp`.
pub fn transducer_path_logprob(
    lp: &LatticeLogProbs,
    path: &AlignmentPath,
    target: &[u32],
) -> Result<f64> {
    let (mut t, mut u) = (0usize, 0usize);
    let mut total = 0.0;
    for (i, &s) in path.symbols.iter().enumerate() {
        if t >= lp.frames || u >= lp.states {
            return Err(invalid("path leaves the lattice"));
        }
        if s == path.blank {
            total += lp.at(t, u, s as usize);
            t += 1;
        } else {
            if u >= target.len() || target[u] != s {
                return Err(invalid(format!(
                    "path symbol {i} does not follow the target"
                )));
            }
            total += lp.at(t, u, s as usize);
            u += 1;
        }
    }
    if t != lp.frames || u != target.len() {
        return Err(invalid("path does not end at the final node"));
    }
    Ok(total)
}

pub const ORACLE_MAX_FRAMES: usize = 6;
pub const ORACLE_MAX_TARGET: usize = 4;
pub const ORACLE_MAX_VOCAB: usize = 4;

fn oracle_guard(frames: usize, target: usize, vocab: usize) -> Result<()> {
    if frames > ORACLE_MAX_FRAMES || target > ORACLE_MAX_TARGET || vocab > ORACLE_MAX_VOCAB {
        return Err(Error::OracleGuard(format!(
            "T={frames}, target length {target}, |V|={vocab} exceeds \
             T<={ORACLE_MAX_FRAMES}, length<={ORACLE_MAX_TARGET}, |V|<={ORACLE_MAX_VOCAB}"
        )));
    }
    Ok(())
}

/// Every CTC path over `classes` symbols of length `frames`.
pub fn enumerate_ctc_paths(frames: usize, classes: usize) -> impl Iterator<Item = AlignmentPath> {
    let total = classes.pow(frames as u32);
    let blank = (classes - 1) as u32;
    (0..total).map(move |mut code| {
        let mut symbols = vec![0u32; frames];
        for s in symbols.iter_mut() {
            *s = (code % classes) as u32;
            code /= classes;
        }
        AlignmentPath { symbols, blank }
    })
}

/// Every transducer path emitting `target` over `frames` frames: all
/// placements of the labels among the first `frames + M - 1` slots, with a
/// blank in the final slot.
pub fn enumerate_transducer_paths(frames: usize, target: &[u32], blank: u32) -> Vec<AlignmentPath> {
    let m = target.len();
    let slots = frames + m;
    let mut out = Vec::new();
    if frames == 0 {
        return out;
    }
    for mask in 0u32..(1 << (slots - 1)) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let mut symbols = Vec::with_capacity(slots);
        let mut next = 0;
        for i in 0..slots - 1 {
            if mask & (1 << i) != 0 {
                symbols.push(target[next]);
                next += 1;
            } else {
                symbols.push(blank);
            }
        }
        symbols.push(blank);
        out.push(AlignmentPath { symbols, blank });
    }
    out
}

/// Exhaustive-enumeration CTC negative log-likelihood.
pub fn ctc_oracle_nll(lp: &FrameLogProbs, target: &[u32]) -> Result<f64> {
    oracle_guard(lp.frames, target.len(), lp.classes - 1)?;
    check_labels(target, lp.blank())?;
    let scores: Vec<f64> = enumerate_ctc_paths(lp.frames, lp.classes)
        .filter(|p| collapse_ctc(p) == target)
        .map(|p| {
            p.symbols
                .iter()
                .enumerate()
                .map(|(t, &s)| lp.at(t, s as usize))
                .sum()
        })
        .collect();
    if scores.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(-logsumexp(&scores)?)
}

/// Exhaustive-enumeration transducer negative log-likelihood.
pub fn transducer_oracle_nll(lp: &LatticeLogProbs, target: &[u32]) -> Result<f64> {
    oracle_guard(lp.frames, target.len(), lp.classes - 1)?;
    check_labels(target, lp.blank())?;
    if lp.states != target.len() + 1 {
        return Err(shape_err("lattice states must be target length + 1"));
    }
    let scores = enumerate_transducer_paths(lp.frames, target, lp.blank())
        .iter()
        .map(|p| transducer_path_logprob(lp, p, target))
        .collect::<Result<Vec<f64>>>()?;
    if scores.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(-logsumexp(&scores)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Ctc,
    Transducer,
}

/// Borrowed lattice of either kind, for [`enumerate_paths_oracle`].
pub enum OracleLattice<'a> {
    Ctc(&'a FrameLogProbs),
    Transducer(&'a LatticeLogProbs),
}

impl OracleLattice<'_> {
    pub fn kind(&self) -> PathKind {
        match self {
            OracleLattice::Ctc(_) => PathKind::Ctc,
            OracleLattice::Transducer(_) => PathKind::Transducer,
        }
    }
}

pub fn enumerate_paths_oracle(lp: OracleLattice<'_>, target: &[u32]) -> Result<f64> {
    match lp {
        OracleLattice::Ctc(lp) => ctc_oracle_nll(lp, target),
        OracleLattice::Transducer(lp) => transducer_oracle_nll(lp, target),
    }
}

/// CTC loss of the frame log-probabilities held in `lp` (a `T × C` node),
/// recorded as a scalar node. Infeasible targets yield `None`.
pub fn ctc_loss_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    lp: Var,
    target: &[u32],
) -> Result<Option<Var>> {
    let frames = FrameLogProbs::from_tensor(g.value(lp))?;
    let res = ctc_loss(&frames, target)?;
    if res.status == LossStatus::Infeasible {
        return Ok(None);
    }
    g.external_scalar(lp, res.nll, res.grad).map(Some)
}

/// Transducer loss of a `(T·U) × C` node laid out frame-major.
pub fn transducer_loss_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    lp: Var,
    frames: usize,
    target: &[u32],
) -> Result<Option<Var>> {
    let v = g.value(lp);
    let states = target.len() + 1;
    if v.rows() != frames * states {
        return Err(shape_err(format!(
            "joint output has {} rows, expected {frames}x{states}",
            v.rows()
        )));
    }
    let lattice = LatticeLogProbs::new(frames, states, v.cols(), v.to_f64_vec())?;
    let res = transducer_loss(&lattice, target)?;
    if res.status == LossStatus::Infeasible {
        return Ok(None);
    }
    g.external_scalar(lp, res.nll, res.grad).map(Some)
}

#[cfg(test)]
mod tests;
