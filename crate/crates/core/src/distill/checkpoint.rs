use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{Dense, FeatureMap, FeatureMapPair};
use crate::error::{Error, Result};
use crate::numerics::io::TensorFile;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureManifest {
    block: usize,
    rate: usize,
    heads: usize,
    head_dim: usize,
    degree: usize,
    slice_width: usize,
    /// `[fan_in, fan_out]` of every layer.
    layers: Vec<[usize; 2]>,
}

/// File name used for the φ checkpoint of (block, rate).
pub fn checkpoint_name(block: usize, rate: usize) -> String {
    format!("phi_b{block:03}_r{rate}.bin")
}

pub fn save_feature_checkpoint(path: &Path, pair: &FeatureMapPair, block: usize, rate: usize) -> Result<()> {
    let m = &pair.query[0];
    let manifest = FeatureManifest {
        block,
        rate,
        heads: pair.heads(),
        head_dim: pair.input_dim(),
        degree: m.degree(),
        slice_width: m.slice_width(),
        layers: m.layers().iter().map(|l| [l.fan_in(), l.fan_out()]).collect(),
    };
    let mut file = TensorFile::new(serde_json::to_value(&manifest)?);
    for (role, maps) in [("query", &pair.query), ("key", &pair.key)] {
        for (h, map) in maps.iter().enumerate() {
            for (l, layer) in map.layers().iter().enumerate() {
                file.push(format!("{role}.{h}.{l}.weight"), layer.weight.clone());
                file.push(format!("{role}.{h}.{l}.bias"), layer.bias.clone());
            }
        }
    }
    file.save(path)
}

/// Loads a φ checkpoint, returning `(block, rate, pair)`.
pub fn load_feature_checkpoint(path: &Path) -> Result<(usize, usize, FeatureMapPair)> {
    let file = TensorFile::load(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let manifest: FeatureManifest =
        serde_json::from_value(file.meta.clone()).map_err(|e| bad(format!("manifest: {e}")))?;
    let tensor = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = file.get(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(bad(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t.clone())
    };
    let build = |role: &str| -> Result<Vec<FeatureMap>> {
        (0..manifest.heads)
            .map(|h| {
                let layers = manifest
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, &[fan_in, fan_out])| {
                        Dense::new(
                            tensor(format!("{role}.{h}.{l}.weight"), &[fan_in, fan_out])?,
                            tensor(format!("{role}.{h}.{l}.bias"), &[fan_out])?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                FeatureMap::new(layers, manifest.degree, manifest.slice_width).map_err(|e| bad(e.to_string()))
            })
            .collect()
    };
    let query = build("query")?;
    let key = build("key")?;
    let pair = FeatureMapPair::new(query, key).map_err(|e| bad(e.to_string()))?;
    if pair.input_dim() != manifest.head_dim {
        return Err(bad(format!("input width {} vs manifest {}", pair.input_dim(), manifest.head_dim)));
    }
    Ok((manifest.block, manifest.rate, pair))
}
