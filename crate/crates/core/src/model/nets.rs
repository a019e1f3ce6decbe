use crate::error::{invalid, shape_err, Result};
use crate::numerics::tensor::sinusoidal_positions;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::vocab::{TokenSequence, UnitSystem};

use super::layers::{block, layer_norm, linear};
use super::Binder;

/// Stacks every `factor` consecutive frames into one row, zero-padding the
/// tail. `T × F` becomes `⌈T/factor⌉ × (factor·F)`.
pub fn subsample<T: Scalar>(feats: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (t, f) = (feats.rows(), feats.cols());
    let out_rows = t.div_ceil(factor);
    let mut data = vec![T::zero(); out_rows * factor * f];
    data[..t * f].copy_from_slice(feats.data());
    Tensor::matrix(out_rows, factor * f, data)
}

pub struct EncoderOutput {
    /// `T′ × D` final encoder states.
    pub e: Var,
    /// Output of the mid-stack layer, input to the intermediate CTC head.
    pub mid: Var,
    pub frames: usize,
}

/// Subsampling, input projection with sinusoidal positions, then the
/// encoder blocks.
pub fn audio_encode<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    feats: &Tensor<T>,
) -> Result<EncoderOutput> {
    let cfg = b.config();
    if feats.rank() != 2 || feats.rows() == 0 {
        return Err(invalid("empty acoustic sequence"));
    }
    if feats.cols() != cfg.feat_dim {
        return Err(shape_err(format!(
            "features have {} dims, model expects {}",
            feats.cols(),
            cfg.feat_dim
        )));
    }
    let stacked = subsample(feats, cfg.subsample)?;
    let frames = stacked.rows();
    let x = g.constant(stacked);
    let x = linear(g, b, "enc.in", x)?;
    let pos = g.constant(sinusoidal_positions(frames, cfg.d_model));
    let mut x = g.add(x, pos)?;
    let mut mid = x;
    for l in 0..cfg.enc_layers {
        x = block(g, b, &format!("enc.{l}"), x)?;
        if l + 1 == cfg.mid_layer() {
            mid = x;
        }
    }
    let e = layer_norm(g, b, "enc.ln", x)?;
    Ok(EncoderOutput { e, mid, frames })
}

/// Frame log-probabilities over ASR units plus blank from the mid-stack
/// encoder states.
pub fn intermediate_ctc_logprobs<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    enc: &EncoderOutput,
) -> Result<Var> {
    let h = layer_norm(g, b, "ictc.ln", enc.mid)?;
    let logits = linear(g, b, "ictc.out", h)?;
    Ok(g.log_softmax_rows(logits))
}

/// Final hidden states of the masked LM for an LM-unit sequence.
pub fn mlm_embed<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    seq: &TokenSequence,
) -> Result<Var> {
    let cfg = b.config();
    if seq.unit_system != UnitSystem::Lm {
        return Err(invalid("masked LM input must be in LM units"));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= cfg.lm_vocab) {
        return Err(invalid(format!(
            "LM id {bad} outside vocabulary of {}",
            cfg.lm_vocab
        )));
    }
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let emb = b.var(g, "mlm.emb")?;
    let x = g.gather(emb, &ids)?;
    let pos = g.constant(sinusoidal_positions(ids.len(), cfg.d_model));
    let mut x = g.add(x, pos)?;
    for l in 0..cfg.mlm_layers {
        x = block(g, b, &format!("mlm.{l}"), x)?;
    }
    layer_norm(g, b, "mlm.ln", x)
}

/// Masked-LM output distribution over LM units for hidden states `h`.
pub fn mlm_logprobs<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    h: Var,
) -> Result<Var> {
    let logits = linear(g, b, "mlm.head", h)?;
    Ok(g.log_softmax_rows(logits))
}

pub struct ConcatOutput {
    /// `T′ × D` audio rows of the concatenation network output.
    pub audio: Var,
    /// `T′ × (|V^b|+1)` frame log-probabilities.
    pub frame_logprobs: Var,
}

/// Self-attention over `[E; H]` with segment embeddings and positions.
pub fn concat_net<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    e: Var,
    h: Var,
) -> Result<ConcatOutput> {
    let cfg = b.config();
    let (ev, hv) = (g.value(e), g.value(h));
    if ev.cols() != cfg.d_model || hv.cols() != cfg.d_model {
        return Err(shape_err(format!(
            "concatenation widths {} and {}, expected {}",
            ev.cols(),
            hv.cols(),
            cfg.d_model
        )));
    }
    let (frames, n) = (ev.rows(), hv.rows());
    let x = g.concat_rows(&[e, h])?;
    let seg_ids: Vec<usize> = (0..frames + n).map(|i| usize::from(i >= frames)).collect();
    let seg_table = b.var(g, "cat.seg")?;
    let seg = g.gather(seg_table, &seg_ids)?;
    let x = g.add(x, seg)?;
    let pos = g.constant(sinusoidal_positions(frames + n, cfg.d_model));
    let mut x = g.add(x, pos)?;
    for l in 0..cfg.concat_layers {
        x = block(g, b, &format!("cat.{l}"), x)?;
    }
    let x = layer_norm(g, b, "cat.ln", x)?;
    let audio = g.slice_rows(x, 0, frames)?;
    let logits = linear(g, b, "cat.head", audio)?;
    let frame_logprobs = g.log_softmax_rows(logits);
    Ok(ConcatOutput {
        audio,
        frame_logprobs,
    })
}

/// LSTM states after the start symbol and each prefix of `labels`:
/// row `u` encodes `labels[..u]`, giving `(M+1) × D`.
pub fn prediction_net<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    labels: &[u32],
) -> Result<Var> {
    let cfg = b.config();
    let d = cfg.d_model;
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= cfg.asr_vocab) {
        return Err(invalid(format!(
            "prediction input {bad} is blank or outside {} ASR units",
            cfg.asr_vocab
        )));
    }
    let mut ids = Vec::with_capacity(labels.len() + 1);
    ids.push(cfg.start_id() as usize);
    ids.extend(labels.iter().map(|&y| y as usize));

    let emb = b.var(g, "pred.emb")?;
    let wx = b.var(g, "pred.wx")?;
    let wh = b.var(g, "pred.wh")?;
    let bias = b.var(g, "pred.b")?;
    let x = g.gather(emb, &ids)?;
    let xw = g.matmul(x, wx)?;
    let xw = g.add_row(xw, bias)?;

    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut states = Vec::with_capacity(ids.len());
    for u in 0..ids.len() {
        let mut gates = g.slice_rows(xw, u, 1)?;
        if let Some(h) = h {
            let hw = g.matmul(h, wh)?;
            gates = g.add(gates, hw)?;
        }
        let i = g.slice_cols(gates, 0, d)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, d, d)?;
        let f = g.sigmoid(f);
        let z = g.slice_cols(gates, 2 * d, d)?;
        let z = g.tanh(z);
        let o = g.slice_cols(gates, 3 * d, d)?;
        let o = g.sigmoid(o);
        let iz = g.mul(i, z)?;
        let c_new = match c {
            Some(c) => {
                let fc = g.mul(f, c)?;
                g.add(fc, iz)?
            }
            None => iz,
        };
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        states.push(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    g.concat_rows(&states)
}

/// Joint network over every `(t, u)` pair, frame-major:
/// `(T′·(M+1)) × (|V^a|+1)` log-probabilities.
pub fn joint_lattice<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    audio: Var,
    pred: Var,
) -> Result<Var> {
    let we = b.var(g, "joint.enc.w")?;
    let a = g.matmul(audio, we)?;
    let p = linear(g, b, "joint.pred", pred)?;
    let z = g.pairwise_add(a, p)?;
    let z = g.tanh(z);
    let logits = linear(g, b, "joint.out", z)?;
    Ok(g.log_softmax_rows(logits))
}
