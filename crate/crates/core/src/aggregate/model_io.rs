//! Versioned model files.
//!
//! ```text
//! "PMDL" | u32 version | u32 header_len | header_len bytes of JSON
//! | f64 parameters, little-endian, in the order listed in the header
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

use super::gate::{GateModel, GateNormalization};
use super::mlp::MlpModel;

pub const MODEL_MAGIC: &[u8; 4] = b"PMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelHeader {
    Gate {
        n_features: usize,
        n_patches: usize,
        k: usize,
        normalization: GateNormalization,
        /// Parameter blocks in file order.
        blocks: Vec<String>,
        #[serde(default)]
        hyperparams: serde_json::Value,
        seed: Option<u64>,
    },
    Mlp {
        in_dim: usize,
        hidden: usize,
        n_classes: usize,
        bn_momentum: f64,
        bn_eps: f64,
        blocks: Vec<String>,
        #[serde(default)]
        hyperparams: serde_json::Value,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gate(GateModel),
    Mlp(MlpModel),
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMeta {
    pub hyperparams: serde_json::Value,
    pub seed: Option<u64>,
}

const GATE_BLOCKS: [&str; 2] = ["weights", "bias"];
const MLP_BLOCKS: [&str; 8] = [
    "w1",
    "b1",
    "gamma",
    "beta",
    "running_mean",
    "running_var",
    "w2",
    "b2",
];

fn blocks(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_model(model: &Model, meta: &ModelMeta, mut w: impl Write) -> Result<()> {
    let (header, params): (ModelHeader, Vec<&[f64]>) = match model {
        Model::Gate(g) => (
            ModelHeader::Gate {
                n_features: g.n_features,
                n_patches: g.n_patches,
                k: g.k,
                normalization: g.normalization,
                blocks: blocks(&GATE_BLOCKS),
                hyperparams: meta.hyperparams.clone(),
                seed: meta.seed,
            },
            vec![&g.weights, &g.bias],
        ),
        Model::Mlp(m) => (
            ModelHeader::Mlp {
                in_dim: m.in_dim,
                hidden: m.hidden,
                n_classes: m.n_classes,
                bn_momentum: m.bn_momentum,
                bn_eps: m.bn_eps,
                blocks: blocks(&MLP_BLOCKS),
                hyperparams: meta.hyperparams.clone(),
                seed: meta.seed,
            },
            vec![
                &m.w1,
                &m.b1,
                &m.gamma,
                &m.beta,
                &m.running_mean,
                &m.running_var,
                &m.w2,
                &m.b2,
            ],
        ),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MODEL_MAGIC)?;
    binio::write_u32(&mut w, MODEL_VERSION)?;
    binio::write_u32(&mut w, binio::to_u32(json.len(), "model header length")?)?;
    w.write_all(&json)?;
    for p in params {
        binio::write_f64s(&mut w, p)?;
    }
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<(Model, ModelMeta)> {
    binio::expect_magic(&mut r, MODEL_MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let len = binio::read_u32(&mut r)? as usize;
    let header: ModelHeader = serde_json::from_slice(&binio::read_bytes(&mut r, len)?)?;
    let out = match header {
        ModelHeader::Gate {
            n_features,
            n_patches,
            k,
            normalization,
            blocks: names,
            hyperparams,
            seed,
        } => {
            expect_blocks(&names, &GATE_BLOCKS)?;
            let weights = binio::read_f64s(&mut r, n_features * n_patches)?;
            let bias = binio::read_f64s(&mut r, n_patches)?;
            let model = GateModel::new(n_features, n_patches, weights, bias, k, normalization)?;
            (Model::Gate(model), ModelMeta { hyperparams, seed })
        }
        ModelHeader::Mlp {
            in_dim,
            hidden,
            n_classes,
            bn_momentum,
            bn_eps,
            blocks: names,
            hyperparams,
            seed,
        } => {
            expect_blocks(&names, &MLP_BLOCKS)?;
            let mut m = MlpModel::zeros(0, 0, 0);
            m.in_dim = in_dim;
            m.hidden = hidden;
            m.n_classes = n_classes;
            m.bn_momentum = bn_momentum;
            m.bn_eps = bn_eps;
            m.w1 = binio::read_f64s(&mut r, hidden * in_dim)?;
            m.b1 = binio::read_f64s(&mut r, hidden)?;
            m.gamma = binio::read_f64s(&mut r, hidden)?;
            m.beta = binio::read_f64s(&mut r, hidden)?;
            m.running_mean = binio::read_f64s(&mut r, hidden)?;
            m.running_var = binio::read_f64s(&mut r, hidden)?;
            m.w2 = binio::read_f64s(&mut r, n_classes * hidden)?;
            m.b2 = binio::read_f64s(&mut r, n_classes)?;
            m.validate()?;
            (Model::Mlp(m), ModelMeta { hyperparams, seed })
        }
    };
    binio::expect_eof(&mut r)?;
    Ok(out)
}

fn expect_blocks(found: &[String], expected: &[&str]) -> Result<()> {
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Format(format!(
            "unexpected parameter blocks {found:?}"
        )));
    }
    Ok(())
}

pub fn save_model(model: &Model, meta: &ModelMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, meta, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, ModelMeta)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = MlpModel::init(5, 4, 3, &mut rng);
        m.running_var[2] = 0.25;
        let meta = ModelMeta {
            hyperparams: serde_json::json!({"epochs": 3}),
            seed: Some(42),
        };
        let mut buf = Vec::new();
        write_model(&Model::Mlp(m.clone()), &meta, &mut buf).unwrap();
        let (back, back_meta) = read_model(&buf[..]).unwrap();
        assert_eq!(back, Model::Mlp(m));
        assert_eq!(back_meta, meta);
    }

    #[test]
    fn gate_roundtrip_and_truncation() {
        let g = GateModel::new(
            2,
            3,
            vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25],
            vec![0.1, 0.2, 0.3],
            2,
            GateNormalization::Sigmoid,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_model(&Model::Gate(g.clone()), &ModelMeta::default(), &mut buf).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap().0, Model::Gate(g));
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_model(&buf[..]), Err(Error::Format(_))));
    }
}
