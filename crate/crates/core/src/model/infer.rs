//! Graph-free single steps of the prediction and joint networks, used by the
//! transducer search where states are extended one symbol at a time.

use crate::error::{invalid, Result};
use crate::numerics::tensor::{log_softmax_rows, matmul, sigmoid};
use crate::numerics::{Scalar, Tensor};

use super::ModelParams;

/// LSTM hidden and cell state, each `1 × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

/// Advances the prediction network by `token`; `None` is the zero state
/// before the start symbol.
pub fn pred_step<T: Scalar>(
    params: &ModelParams<T>,
    state: Option<&PredState<T>>,
    token: u32,
) -> Result<PredState<T>> {
    let d = params.config.d_model;
    if token as usize > params.config.asr_vocab {
        return Err(invalid(format!("prediction token {token} out of range")));
    }
    let x = params.get("pred.emb")?.gather_rows(&[token as usize])?;
    let mut gates =
        matmul(&x, params.get("pred.wx")?, false, false)?.add_row(params.get("pred.b")?)?;
    if let Some(s) = state {
        gates.add_assign(&matmul(&s.h, params.get("pred.wh")?, false, false)?)?;
    }
    let gv = gates.data();
    let mut h = Vec::with_capacity(d);
    let mut c = Vec::with_capacity(d);
    for j in 0..d {
        let i = sigmoid(gv[j]);
        let f = sigmoid(gv[d + j]);
        let z = gv[2 * d + j].tanh();
        let o = sigmoid(gv[3 * d + j]);
        let iz = i * z;
        let cj = match state {
            Some(s) => f * s.c.data()[j] + iz,
            None => iz,
        };
        c.push(cj);
        h.push(o * cj.tanh());
    }
    Ok(PredState {
        h: Tensor::matrix(1, d, h)?,
        c: Tensor::matrix(1, d, c)?,
    })
}

/// State after consuming only the start symbol.
pub fn pred_start<T: Scalar>(params: &ModelParams<T>) -> Result<PredState<T>> {
    pred_step(params, None, params.config.start_id())
}

/// Encoder-side joint projection of all audio rows, `T′ × D`.
pub fn project_audio<T: Scalar>(params: &ModelParams<T>, audio: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(audio, params.get("joint.enc.w")?, false, false)
}

/// Prediction-side joint projection of one state, `1 × D`.
pub fn project_pred<T: Scalar>(params: &ModelParams<T>, state: &PredState<T>) -> Result<Tensor<T>> {
    matmul(&state.h, params.get("joint.pred.w")?, false, false)?
        .add_row(params.get("joint.pred.b")?)
}

/// Joint log-probabilities over ASR units plus blank for one `(t, u)` pair.
pub fn joint_step<T: Scalar>(
    params: &ModelParams<T>,
    audio_proj: &[T],
    pred_proj: &Tensor<T>,
) -> Result<Vec<f64>> {
    let z: Vec<T> = audio_proj
        .iter()
        .zip(pred_proj.data())
        .map(|(&a, &p)| (a + p).tanh())
        .collect();
    let z = Tensor::matrix(1, z.len(), z)?;
    let logits = matmul(&z, params.get("joint.out.w")?, false, false)?
        .add_row(params.get("joint.out.b")?)?;
    Ok(log_softmax_rows(&logits).to_f64_vec())
}
