//! Versioned JSON checkpoints. Floats are written by `serde_json` in
//! shortest round-trip form, so equal parameters give identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CbfHyper, CbfNetwork, LearnedCbf, StateNet, TrainSchedule, Variant};
use crate::environment::ObservationModel;
use crate::neural::{Mlp, PointSetEncoder};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    State { widths: Vec<usize>, obs_scale: f64 },
    Cloud { point_widths: Vec<usize>, trunk_widths: Vec<usize>, num_links: usize, position_scale: f64 },
}

/// One dense layer; `weights[j]` feeds output unit `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub block: String,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub dataset_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: Variant,
    pub network: NetworkSpec,
    pub hyper: CbfHyper,
    pub observation: ObservationModel,
    pub layers: Vec<LayerParams>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

fn export(block: &str, mlp: &Mlp) -> Vec<LayerParams> {
    mlp.layers()
        .into_iter()
        .map(|(w, b)| LayerParams {
            block: block.to_string(),
            weights: w.chunks(w.len() / b.len()).map(<[f64]>::to_vec).collect(),
            bias: b.to_vec(),
        })
        .collect()
}

fn import(block: &str, widths: &[usize], layers: &[&LayerParams]) -> Result<Mlp> {
    if layers.len() + 1 != widths.len() {
        return Err(Error::InvalidConfig(format!("{block}: expected {} layers, found {}", widths.len() - 1, layers.len())));
    }
    let mut params = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        if layer.bias.len() != n_out || layer.weights.len() != n_out || layer.weights.iter().any(|r| r.len() != n_in) {
            return Err(Error::InvalidConfig(format!("{block}: layer {l} does not match widths {widths:?}")));
        }
        params.extend(layer.weights.iter().flatten());
        params.extend(&layer.bias);
    }
    Mlp::from_params(widths, params)
}

impl Checkpoint {
    pub fn from_learned(cbf: &LearnedCbf, training: Option<TrainingMeta>) -> Self {
        let (network, layers) = match &cbf.net {
            CbfNetwork::State(s) => (
                NetworkSpec::State { widths: s.mlp.widths().to_vec(), obs_scale: s.obs_scale },
                export("mlp", &s.mlp),
            ),
            CbfNetwork::Cloud(e) => {
                let mut layers = export("point_mlp", &e.point_mlp);
                layers.extend(export("trunk", &e.trunk));
                (
                    NetworkSpec::Cloud {
                        point_widths: e.point_mlp.widths().to_vec(),
                        trunk_widths: e.trunk.widths().to_vec(),
                        num_links: e.num_links,
                        position_scale: e.position_scale,
                    },
                    layers,
                )
            }
        };
        Self {
            version: CHECKPOINT_VERSION,
            variant: cbf.net.variant(),
            network,
            hyper: cbf.hyper.clone(),
            observation: cbf.model.clone(),
            layers,
            training,
        }
    }

    pub fn to_learned(&self) -> Result<LearnedCbf> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", self.version)));
        }
        let block = |name: &str| self.layers.iter().filter(|l| l.block == name).collect::<Vec<_>>();
        let net = match &self.network {
            NetworkSpec::State { widths, obs_scale } => {
                CbfNetwork::State(StateNet { mlp: import("mlp", widths, &block("mlp"))?, obs_scale: *obs_scale })
            }
            NetworkSpec::Cloud { point_widths, trunk_widths, num_links, position_scale } => {
                CbfNetwork::Cloud(PointSetEncoder {
                    point_mlp: import("point_mlp", point_widths, &block("point_mlp"))?,
                    trunk: import("trunk", trunk_widths, &block("trunk"))?,
                    num_links: *num_links,
                    position_scale: *position_scale,
                })
            }
        };
        if net.variant() != self.variant {
            return Err(Error::VariantMismatch);
        }
        Ok(LearnedCbf { net, hyper: self.hyper.clone(), model: self.observation.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
