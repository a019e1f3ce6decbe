//! The networks: audio encoder, frozen masked LM, concatenation network with
//! its frame head, prediction and joint networks, and the intermediate CTC
//! head.
//!
//! Forward passes are built on [`Graph`] through a [`Binder`], which turns
//! parameter names into graph leaves once per graph and decides which of them
//! are trainable. Decoding also uses the step functions in [`infer`], which
//! skip the graph for the per-symbol work of the transducer search.

pub mod infer;
mod layers;
mod nets;
pub mod pretrain;

use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Gradients, Graph, Rng, Scalar, Tensor, Var};

pub use nets::{
    audio_encode, concat_net, intermediate_ctc_logprobs, joint_lattice, mlm_embed, mlm_logprobs,
    prediction_net, subsample, ConcatOutput, EncoderOutput,
};
pub use pretrain::{pretrain_mlm, MlmConfig, MlmReport};

pub const LN_EPS: f64 = 1e-5;

/// Prefix shared by every masked-LM tensor; these are frozen outside of
/// MLM pretraining.
pub const MLM_PREFIX: &str = "mlm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub subsample: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub concat_layers: usize,
    pub mlm_layers: usize,
    /// `|V^a|` including specials, filled in from the ASR vocabulary.
    pub asr_vocab: usize,
    /// `|V^b|` including specials, filled in from the LM vocabulary.
    pub lm_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            subsample: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            enc_layers: 2,
            concat_layers: 2,
            mlm_layers: 2,
            asr_vocab: 0,
            lm_vocab: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feat_dim", self.feat_dim),
            ("subsample", self.subsample),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("enc_layers", self.enc_layers),
            ("asr_vocab", self.asr_vocab),
            ("lm_vocab", self.lm_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Encoder layer whose output feeds the intermediate CTC head (1-based).
    pub fn mid_layer(&self) -> usize {
        self.enc_layers.div_ceil(2)
    }

    /// Frame head width: LM units plus blank.
    pub fn bec_classes(&self) -> usize {
        self.lm_vocab + 1
    }

    /// Transducer and intermediate head width: ASR units plus blank.
    pub fn tra_classes(&self) -> usize {
        self.asr_vocab + 1
    }

    /// Prediction-network start symbol, one past the last ASR unit.
    pub fn start_id(&self) -> u32 {
        self.asr_vocab as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn block_specs(prefix: &str, c: &ModelConfig, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let (d, ff) = (c.d_model, c.ff_dim);
    let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    for (name, shape, init) in [
        ("ln1.g", vec![1, d], Init::Ones),
        ("ln1.b", vec![1, d], Init::Zeros),
        ("attn.qkv.w", vec![d, 3 * d], w(d)),
        ("attn.qkv.b", vec![1, 3 * d], Init::Zeros),
        ("attn.o.w", vec![d, d], w(d)),
        ("attn.o.b", vec![1, d], Init::Zeros),
        ("ln2.g", vec![1, d], Init::Ones),
        ("ln2.b", vec![1, d], Init::Zeros),
        ("ff1.w", vec![d, ff], w(d)),
        ("ff1.b", vec![1, ff], Init::Zeros),
        ("ff2.w", vec![ff, d], w(ff)),
        ("ff2.b", vec![1, d], Init::Zeros),
    ] {
        out.push((format!("{prefix}.{name}"), shape, init));
    }
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut s: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push =
        |name: &str, shape: Vec<usize>, init: Init| s.push((name.to_string(), shape, init));

    let stacked = c.feat_dim * c.subsample;
    push("enc.in.w", vec![stacked, d], w(stacked));
    push("enc.in.b", vec![1, d], Init::Zeros);
    push("enc.ln.g", vec![1, d], Init::Ones);
    push("enc.ln.b", vec![1, d], Init::Zeros);
    push("ictc.ln.g", vec![1, d], Init::Ones);
    push("ictc.ln.b", vec![1, d], Init::Zeros);
    push("ictc.out.w", vec![d, c.tra_classes()], w(d));
    push("ictc.out.b", vec![1, c.tra_classes()], Init::Zeros);

    push("mlm.emb", vec![c.lm_vocab, d], Init::Normal(1.0));
    push("mlm.ln.g", vec![1, d], Init::Ones);
    push("mlm.ln.b", vec![1, d], Init::Zeros);
    push("mlm.head.w", vec![d, c.lm_vocab], w(d));
    push("mlm.head.b", vec![1, c.lm_vocab], Init::Zeros);

    push("cat.seg", vec![2, d], Init::Normal(1.0));
    push("cat.ln.g", vec![1, d], Init::Ones);
    push("cat.ln.b", vec![1, d], Init::Zeros);
    push("cat.head.w", vec![d, c.bec_classes()], w(d));
    push("cat.head.b", vec![1, c.bec_classes()], Init::Zeros);

    push("pred.emb", vec![c.asr_vocab + 1, d], Init::Normal(1.0));
    push("pred.wx", vec![d, 4 * d], w(d));
    push("pred.wh", vec![d, 4 * d], w(d));

    push("joint.enc.w", vec![d, d], w(d));
    push("joint.pred.w", vec![d, d], w(d));
    push("joint.pred.b", vec![1, d], Init::Zeros);
    push("joint.out.w", vec![d, c.tra_classes()], w(d));
    push("joint.out.b", vec![1, c.tra_classes()], Init::Zeros);

    push("pred.b", vec![1, 4 * d], Init::Zeros);

    for l in 0..c.enc_layers {
        block_specs(&format!("enc.{l}"), c, &mut s);
    }
    for l in 0..c.mlm_layers {
        block_specs(&format!("mlm.{l}"), c, &mut s);
    }
    for l in 0..c.concat_layers {
        block_specs(&format!("cat.{l}"), c, &mut s);
    }
    s
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters drawn from `rng` in a fixed name order.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut specs = param_specs(config);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
                    (0..n).map(|_| T::of(dist.sample(rng))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        // gate order i, f, g, o; the forget gate starts open
        let d = config.d_model;
        let b = tensors.get_mut("pred.b").expect("gate bias exists");
        for x in &mut b.data_mut()[d..2 * d] {
            *x = T::one();
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn is_frozen(name: &str) -> bool {
        name.starts_with(MLM_PREFIX)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.tensors
            .keys()
            .filter(|n| Self::is_frozen(n))
            .map(String::as_str)
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.tensors
            .keys()
            .filter(|n| !Self::is_frozen(n))
            .map(String::as_str)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Which parameters a forward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Everything except the masked LM.
    Train,
    /// Only the masked LM.
    PretrainMlm,
    /// Nothing; evaluation and decoding.
    Eval,
}

impl BindMode {
    fn trainable(self, name: &str) -> bool {
        let mlm = name.starts_with(MLM_PREFIX);
        match self {
            BindMode::Train => !mlm,
            BindMode::PretrainMlm => mlm,
            BindMode::Eval => false,
        }
    }
}

/// Maps parameter names to graph leaves, creating each leaf on first use.
pub struct Binder<'p, T: Scalar> {
    params: &'p ModelParams<T>,
    mode: BindMode,
    vars: HashMap<&'p str, Var>,
    overrides: HashMap<String, Var>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p ModelParams<T>, mode: BindMode) -> Self {
        Self {
            params,
            mode,
            vars: HashMap::new(),
            overrides: HashMap::new(),
        }
    }

    /// Uses the given leaves instead of the stored tensors for some names.
    pub fn with_overrides(mut self, overrides: HashMap<String, Var>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph<'p, T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.overrides.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))?;
        let v = if self.mode.trainable(key) {
            g.param(t)
        } else {
            g.frozen(t)
        };
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|t| (name.to_string(), t.clone())))
            .collect()
    }

    /// Bound leaves by name (only the ones created so far).
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, &v)| (*k, v))
    }
}

/// Adds `from` into `into`, name by name.
pub fn add_gradients<T: Scalar>(
    into: &mut BTreeMap<String, Tensor<T>>,
    from: BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&g)?,
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
