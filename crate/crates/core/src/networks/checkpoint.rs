use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, TensorArchive};
use super::NetworkConfig;
use crate::autograd::Tensor;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "params/";
const AUX_PREFIX: &str = "aux/";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    network: NetworkConfig,
    diffusion: DiffusionConfig,
    init_seed: u64,
    #[serde(default)]
    training: serde_json::Value,
}

/// Network weights plus the configuration needed to rebuild them. `aux`
/// carries extra arrays such as optimizer moments; `training` free-form
/// training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub params: ModelParams,
    pub training: serde_json::Value,
    pub aux: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(network: NetworkConfig, diffusion: DiffusionConfig, params: ModelParams) -> Self {
        Checkpoint { network, diffusion, params, training: serde_json::Value::Null, aux: BTreeMap::new() }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let meta = Meta {
            network: self.network.clone(),
            diffusion: self.diffusion.clone(),
            init_seed: self.params.init_seed(),
            training: self.training.clone(),
        };
        let mut tensors = BTreeMap::new();
        for (k, t) in self.params.iter() {
            tensors.insert(format!("{PARAM_PREFIX}{k}"), t.clone());
        }
        for (k, t) in &self.aux {
            tensors.insert(format!("{AUX_PREFIX}{k}"), t.clone());
        }
        TensorArchive { meta: serde_json::to_value(meta).expect("checkpoint meta serializes"), tensors }
    }

    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        let meta: Meta = serde_json::from_value(archive.meta).map_err(|e| Error::format("meta", e.to_string()))?;
        meta.network.validate()?;
        meta.diffusion.validate()?;
        let mut params = BTreeMap::new();
        let mut aux = BTreeMap::new();
        for (k, t) in archive.tensors {
            if let Some(name) = k.strip_prefix(PARAM_PREFIX) {
                params.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(AUX_PREFIX) {
                aux.insert(name.to_string(), t);
            } else {
                return Err(Error::format("tensors", format!("unexpected entry '{k}'")));
            }
        }
        let params = ModelParams::from_map(params, meta.init_seed);
        let expected = super::init_params(&meta.network, meta.init_seed)?;
        for (k, t) in expected.iter() {
            match params.get(k) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!("checkpoint parameter '{k}' has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::Config(format!("checkpoint lacks parameter '{k}'"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Config("checkpoint holds parameters the network does not use".into()));
        }
        Ok(Checkpoint { network: meta.network, diffusion: meta.diffusion, params, training: meta.training, aux })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_archive(TensorArchive::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::init_params;

    #[test]
    fn round_trip_is_exact() {
        let cfg = NetworkConfig { base_channels: 2, levels: 2, time_embed_dim: 4, ssm_state_dim: 1, revision_channels: 2, classes: 2, ..Default::default() };
        let params = init_params(&cfg, 9).unwrap();
        let mut ck = Checkpoint::new(cfg, DiffusionConfig { steps: 10, ..Default::default() }, params);
        ck.training = serde_json::json!({"step": 3});
        ck.aux.insert("m/x".into(), Tensor::from_vec(&[2], vec![0.1, -1e-300]));
        let bytes = ck.to_archive().to_bytes();
        assert!(bytes.starts_with(b"PCKPT1\n"));
        let back = Checkpoint::from_archive(TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_archive().to_bytes(), bytes);

        let mut cut = bytes.clone();
        cut.pop();
        assert!(TensorArchive::from_bytes(&cut).is_err());
    }

    #[test]
    fn mismatched_network_rejected() {
        let cfg = NetworkConfig { base_channels: 2, levels: 2, time_embed_dim: 4, ssm_state_dim: 1, revision_channels: 2, classes: 2, ..Default::default() };
        let params = init_params(&cfg, 9).unwrap();
        let mut other = cfg.clone();
        other.base_channels = 4;
        let ck = Checkpoint::new(other, DiffusionConfig::default(), params);
        assert!(matches!(Checkpoint::from_archive(ck.to_archive()), Err(Error::Config(_))));
    }
}
