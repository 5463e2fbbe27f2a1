//! Checkpoints: `tensors.bin` holds every tensor as little-endian f64,
//! back to back; `manifest.json` names each tensor with its shape and element
//! offset. Optimizer moments, when saved, are stored as `optim.m`/`optim.v`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::toy::{TensorSpec, ToyModel, ToyModelConfig};
use crate::error::{Error, Result};
use crate::gatedopt::OptimizerState;

pub const FORMAT: &str = "lscp-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerScalars {
    pub step: u64,
    pub beta1: f64,
    pub beta2_default: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub model: ToyModelConfig,
    pub tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerScalars>,
}

pub fn save(
    dir: impl AsRef<Path>,
    model: &ToyModel,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors: Vec<TensorSpec> = model.tensors().to_vec();
    let mut flat: Vec<f64> = model.params().to_vec();
    let scalars = optimizer.map(|st| {
        for (name, values) in [("optim.m", &st.m), ("optim.v", &st.v)] {
            tensors.push(TensorSpec {
                name: name.into(),
                shape: vec![values.len()],
                offset: flat.len(),
            });
            flat.extend_from_slice(values);
        }
        OptimizerScalars {
            step: st.step,
            beta1: st.beta1,
            beta2_default: st.beta2_default,
            eps: st.eps,
            lr: st.lr,
            weight_decay: st.weight_decay,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        model: *model.config(),
        tensors,
        optimizer: scalars,
    };
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for x in &flat {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    // Write to temporaries first so a failed save never leaves a mixed pair.
    let tmp_bin = dir.join(format!("{TENSORS}.tmp"));
    let tmp_man = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp_bin, &bytes)?;
    fs::write(&tmp_man, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp_bin, dir.join(TENSORS))?;
    fs::rename(&tmp_man, dir.join(MANIFEST))?;
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<(ToyModel, Option<OptimizerState>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let bytes = fs::read(dir.join(TENSORS))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::ShapeMismatch(
            "tensor blob is not a whole number of f64".into(),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = |name: &str| -> Result<&[f64]> {
        let spec = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        flat.get(spec.range())
            .ok_or_else(|| Error::ShapeMismatch(format!("tensor {name} exceeds blob")))
    };

    let probe = ToyModel::new(ToyModelConfig {
        seed: manifest.model.seed,
        ..manifest.model
    })?;
    let mut params = Vec::with_capacity(probe.param_count());
    for spec in probe.tensors() {
        let values = tensor(&spec.name)?;
        if values.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has wrong size",
                spec.name
            )));
        }
        params.extend_from_slice(values);
    }
    let model = ToyModel::from_parts(manifest.model, params)?;
    let optimizer = match &manifest.optimizer {
        Some(s) => Some(OptimizerState {
            m: tensor("optim.m")?.to_vec(),
            v: tensor("optim.v")?.to_vec(),
            step: s.step,
            beta1: s.beta1,
            beta2_default: s.beta2_default,
            active_beta2: s.beta2_default,
            eps: s.eps,
            lr: s.lr,
            weight_decay: s.weight_decay,
        }),
        None => None,
    };
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gatedopt::AdamWConfig;
    use crate::modelhub::Backend;

    #[test]
    fn round_trip_preserves_scores_and_moments() {
        let cfg = ToyModelConfig {
            vocab_size: 256,
            context_length: 16,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            seed: 4,
        };
        let mut model = ToyModel::new(cfg).unwrap();
        let mut st = OptimizerState::new(model.param_count(), AdamWConfig::default()).unwrap();
        let ids = model.encode("hello").unwrap();
        model
            .train_step(&ids, &mut |p, g| st.apply_step(p, g, 0.9))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, Some(&st)).unwrap();
        let (back, back_st) = load(dir.path()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.score("hello").unwrap(), model.score("hello").unwrap());
        let back_st = back_st.unwrap();
        assert_eq!(back_st.m, st.m);
        assert_eq!(back_st.v, st.v);
        assert_eq!(back_st.step, 1);
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let model = ToyModel::new(ToyModelConfig {
            context_length: 4,
            embed_dim: 4,
            n_layers: 1,
            n_heads: 1,
            ..ToyModelConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, None).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"wpe\"", "\"wpx\"");
        fs::write(&path, text).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
