//! Versioned JSON model documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{LayerSpec, Params};
use crate::nn::network::Network;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct ModelDoc {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Params>,
}

impl From<Network> for ModelDoc {
    fn from(net: Network) -> Self {
        ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            input_shape: net.input_shape().to_vec(),
            num_classes: net.num_classes(),
            layers: net
                .layers()
                .iter()
                .zip(net.params())
                .map(|(spec, params)| LayerDoc { spec: *spec, params: params.clone() })
                .collect(),
        }
    }
}

impl TryFrom<ModelDoc> for Network {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: doc.format_version, expected: MODEL_FORMAT_VERSION });
        }
        let (layers, params) = doc.layers.into_iter().map(|l| (l.spec, l.params)).unzip();
        Network::from_parts(doc.input_shape, layers, params, doc.num_classes)
    }
}

pub fn network_to_json(net: &Network) -> String {
    serde_json::to_string_pretty(net).expect("model serializes")
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    Network::try_from(doc)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, network_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    network_from_json(&text)
}
