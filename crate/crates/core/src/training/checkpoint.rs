use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AdamState, StoredTensor, Tensor, TensorFile};

use super::TrainState;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";
const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// First entry of every checkpoint, stored as JSON bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub dev_loss: Option<f64>,
    /// Number of checkpoints averaged into this one (1 for a plain save).
    pub averaged_from: usize,
    /// Whether Adam moments follow the parameters.
    pub optimizer: bool,
    pub frozen: Vec<String>,
    pub tensors: Vec<String>,
}

impl Manifest {
    fn compatible(&self, other: &Manifest) -> bool {
        self.model == other.model && self.frozen == other.frozen && self.tensors == other.tensors
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, seed: u64, config_hash: &str) -> Self {
        let manifest = Manifest {
            format: FORMAT_VERSION,
            model: params.config.clone(),
            seed,
            config_hash: config_hash.to_string(),
            step: 0,
            epoch: 0,
            dev_loss: None,
            averaged_from: 1,
            optimizer: false,
            frozen: params
                .frozen_names()
                .into_iter()
                .map(String::from)
                .collect(),
            tensors: params.tensors.keys().cloned().collect(),
        };
        Self {
            manifest,
            params,
            adam: None,
        }
    }

    pub fn from_state(
        state: &TrainState,
        seed: u64,
        config_hash: &str,
        dev_loss: Option<f64>,
    ) -> Self {
        let mut c = Self::new(state.params.clone(), seed, config_hash);
        c.manifest.step = state.adam.step;
        c.manifest.epoch = state.epoch;
        c.manifest.dev_loss = dev_loss;
        c.manifest.optimizer = true;
        c.adam = Some(state.adam.clone());
        c
    }

    pub fn into_state(self) -> Result<TrainState> {
        let adam = self
            .adam
            .ok_or_else(|| invalid("checkpoint carries no optimiser state"))?;
        Ok(TrainState {
            params: self.params,
            adam,
            epoch: self.manifest.epoch,
        })
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::default();
        f.push(
            MANIFEST,
            StoredTensor::Bytes(serde_json::to_vec(&self.manifest)?),
        );
        for (name, t) in &self.params.tensors {
            f.push(format!("{PARAM}{name}"), StoredTensor::F32(t.clone()));
        }
        if let Some(adam) = &self.adam {
            for (name, t) in &adam.m {
                f.push(format!("{ADAM_M}{name}"), StoredTensor::F32(t.clone()));
            }
            for (name, t) in &adam.v {
                f.push(format!("{ADAM_V}{name}"), StoredTensor::F32(t.clone()));
            }
        }
        Ok(f)
    }

    pub fn from_file(f: TensorFile) -> Result<Self> {
        let mut entries = f.entries.into_iter();
        let manifest: Manifest = match entries.next() {
            Some((name, StoredTensor::Bytes(b))) if name == MANIFEST => serde_json::from_slice(&b)?,
            _ => {
                return Err(Error::Format(
                    "checkpoint does not start with a manifest".into(),
                ))
            }
        };
        if manifest.format != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not {FORMAT_VERSION}",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in entries {
            let t: Tensor<f32> = match t {
                StoredTensor::F32(t) => t,
                other => other.to_real()?,
            };
            if let Some(n) = name.strip_prefix(PARAM) {
                tensors.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else {
                return Err(Error::Format(format!("unexpected checkpoint entry {name}")));
            }
        }
        let names: Vec<String> = tensors.keys().cloned().collect();
        if names != manifest.tensors {
            return Err(Error::Format(
                "checkpoint tensors disagree with its manifest".into(),
            ));
        }
        let adam = manifest.optimizer.then(|| AdamState {
            step: manifest.step,
            m,
            v,
        });
        let params = ModelParams {
            config: manifest.model.clone(),
            tensors,
        };
        Ok(Self {
            manifest,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file()?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::load(path).map_err(|e| match e {
            Error::MissingArtifact { path, .. } => Error::MissingArtifact {
                path,
                hint: "run `bectra train` first or pass the checkpoint path".into(),
            },
            e => e,
        })?)
    }
}

/// Elementwise mean of the trainable tensors; frozen tensors are copied from
/// the first checkpoint.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let first_path = paths
        .first()
        .ok_or_else(|| invalid("no checkpoints to average"))?;
    let first = Checkpoint::load(first_path)?;
    let mut sums: BTreeMap<String, Vec<f64>> = first
        .params
        .tensors
        .iter()
        .filter(|(n, _)| !ModelParams::<f32>::is_frozen(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|&x| x as f64).collect()))
        .collect();
    for p in &paths[1..] {
        let c = Checkpoint::load(p)?;
        if !c.manifest.compatible(&first.manifest) {
            return Err(invalid(format!(
                "{} does not match the manifest of {}",
                p.display(),
                first_path.display()
            )));
        }
        for (name, acc) in sums.iter_mut() {
            let t = c.params.get(name)?;
            acc.iter_mut()
                .zip(t.data())
                .for_each(|(a, &x)| *a += x as f64);
        }
        if first
            .params
            .frozen_names()
            .iter()
            .any(|n| first.params.get(n).ok() != c.params.get(n).ok())
        {
            log::warn!(
                "{}: frozen tensors differ, keeping the first checkpoint's",
                p.display()
            );
        }
    }
    let n = paths.len() as f64;
    let mut params = first.params.clone();
    for (name, acc) in sums {
        let t = params.get_mut(&name)?;
        t.data_mut()
            .iter_mut()
            .zip(acc)
            .for_each(|(x, a)| *x = (a / n) as f32);
    }
    let mut out = Checkpoint::new(params, first.manifest.seed, &first.manifest.config_hash);
    out.manifest.step = first.manifest.step;
    out.manifest.epoch = first.manifest.epoch;
    out.manifest.averaged_from = paths.len();
    Ok(out)
}
