//! Binary model checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian u32 format version, a u64 header
//! length, a JSON header (training config, modality roster, tensor
//! directory in canonical parameter order), the raw little-endian f64
//! payload for each tensor, and a trailing SHA-256 over everything before
//! it. Values survive the round trip bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ModalityDecl;
use crate::error::{Error, Result};
use crate::model::{
    AttentionFusion, LinearLayer, ModalityEncoder, ModelArtifacts, ProjectionHead,
};
use crate::quantizer::{CodebookSharing, CodebookStack};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"SEMTOKCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    modalities: Vec<ModalityDecl>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub modalities: Vec<ModalityDecl>,
    pub artifacts: ModelArtifacts,
}

impl Checkpoint {
    /// Structural compatibility against an expected configuration —
    /// quantizer geometry, sharing mode, encoder stack, and head must all
    /// agree before artifacts can substitute for each other.
    pub fn verify_compatible(&self, expected: &TrainConfig) -> Result<()> {
        let stored = &self.config;
        let mismatch = |what: &str, stored: String, wanted: String| {
            Err(Error::Checkpoint(format!(
                "{what} mismatch: checkpoint has {stored}, expected {wanted}"
            )))
        };
        if stored.sharing != expected.sharing {
            return mismatch(
                "codebook sharing mode",
                stored.sharing.to_string(),
                expected.sharing.to_string(),
            );
        }
        if stored.levels != expected.levels {
            return mismatch("level count", stored.levels.to_string(), expected.levels.to_string());
        }
        if stored.codebook_size != expected.codebook_size {
            return mismatch(
                "codebook size",
                stored.codebook_size.to_string(),
                expected.codebook_size.to_string(),
            );
        }
        if stored.embedding_dim != expected.embedding_dim {
            return mismatch(
                "embedding dim",
                stored.embedding_dim.to_string(),
                expected.embedding_dim.to_string(),
            );
        }
        if stored.hidden != expected.hidden {
            return mismatch("hidden widths", format!("{:?}", stored.hidden), format!("{:?}", expected.hidden));
        }
        if stored.projection_head != expected.projection_head
            || stored.projection_output() != expected.projection_output()
        {
            return mismatch(
                "projection head",
                format!("{}/{}", stored.projection_head, stored.projection_output()),
                format!("{}/{}", expected.projection_head, expected.projection_output()),
            );
        }
        Ok(())
    }
}

pub fn save_bytes(config: &TrainConfig, artifacts: &ModelArtifacts) -> Result<Vec<u8>> {
    let modalities: Vec<ModalityDecl> = artifacts
        .encoders
        .iter()
        .map(|e| ModalityDecl { name: e.name.clone(), width: e.input_dim() })
        .collect();
    let params = artifacts.params();
    let header = Header {
        config: config.clone(),
        modalities,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save(path: &Path, config: &TrainConfig, artifacts: &ModelArtifacts) -> Result<()> {
    std::fs::write(path, save_bytes(config, artifacts)?)?;
    Ok(())
}

/// Empty-tensor artifacts with the exact structure the header describes;
/// the payload fills them in.
fn shell(config: &TrainConfig, modalities: &[ModalityDecl]) -> Result<ModelArtifacts> {
    if modalities.is_empty() {
        return Err(Error::Checkpoint("checkpoint declares no modalities".into()));
    }
    let zeros_layer = |i: usize, o: usize| LinearLayer {
        weight: Tensor::zeros(&[i, o]),
        bias: Tensor::zeros(&[o]),
    };
    let encoders = modalities
        .iter()
        .map(|m| {
            let mut dims = vec![m.width];
            dims.extend_from_slice(&config.hidden);
            dims.push(config.embedding_dim);
            ModalityEncoder {
                name: m.name.clone(),
                layers: dims.windows(2).map(|w| zeros_layer(w[0], w[1])).collect(),
            }
        })
        .collect();
    let fusion = AttentionFusion { query: Tensor::zeros(&[config.embedding_dim, 1]) };
    let projection = if config.projection_head {
        ProjectionHead::Mlp {
            l1: zeros_layer(config.embedding_dim, config.embedding_dim),
            l2: zeros_layer(config.embedding_dim, config.projection_output()),
        }
    } else {
        ProjectionHead::Identity
    };
    let book_count = match config.sharing {
        CodebookSharing::Shared => 1,
        CodebookSharing::PerLevel => config.levels,
    };
    let books = (0..book_count)
        .map(|_| Tensor::zeros(&[config.codebook_size, config.embedding_dim]))
        .collect();
    let codebooks = CodebookStack::from_books(
        config.levels,
        config.codebook_size,
        config.embedding_dim,
        config.sharing,
        books,
    )?;
    Ok(ModelArtifacts { encoders, fusion, projection, codebooks })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let preamble = MAGIC.len() + 4 + 8;
    if bytes.len() < preamble + 32 {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, too short to be a checkpoint",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_end = bytes.len() - 32;
    if preamble + header_len > body_end {
        return Err(Error::Checkpoint("truncated checkpoint: header extends past payload".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[preamble..preamble + header_len])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;

    let expected: [u8; 32] = bytes[body_end..].try_into().expect("32 bytes");
    let actual = Sha256::digest(&bytes[..body_end]);
    if actual[..] != expected {
        return Err(Error::Checkpoint(format!(
            "integrity check failed: stored digest {}, computed {}",
            hex::encode(expected),
            hex::encode(actual)
        )));
    }

    let payload_values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload_start = preamble + header_len;
    if body_end - payload_start != payload_values * 8 {
        return Err(Error::Checkpoint(format!(
            "truncated checkpoint: payload holds {} bytes, directory wants {}",
            body_end - payload_start,
            payload_values * 8
        )));
    }

    let mut artifacts = shell(&header.config, &header.modalities)?;
    let mut cursor = payload_start;
    {
        let mut params = artifacts.params_mut();
        if params.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "directory lists {} tensors, structure has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for ((name, tensor), entry) in params.iter_mut().zip(&header.tensors) {
            if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "directory entry `{}` {:?} does not match structural tensor `{}` {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    tensor.shape()
                )));
            }
            for v in tensor.data_mut() {
                *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8 bytes"));
                cursor += 8;
            }
        }
    }
    Ok(Checkpoint { config: header.config, modalities: header.modalities, artifacts })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticModality, SyntheticSpec};
    use crate::trainer;

    fn trained_pair() -> (TrainConfig, ModelArtifacts) {
        let spec = SyntheticSpec {
            branching: vec![2, 2],
            items_per_leaf: 2,
            latent_dim: 4,
            level_scale: 0.4,
            modalities: vec![
                SyntheticModality { name: "text".into(), width: 6, noise: 0.05, informativeness: 1.0 },
                SyntheticModality { name: "spatial".into(), width: 5, noise: 0.05, informativeness: 1.0 },
            ],
            users: 4,
            seq_len: 6,
            branch_affinity: 0.8,
            seed: 3,
        };
        let synth = crate::data::generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            levels: 2,
            codebook_size: 4,
            embedding_dim: 8,
            hidden: vec![10],
            batch_size: 8,
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = trainer::train(&config, &synth.dataset).unwrap();
        (config, out.artifacts)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, artifacts) = trained_pair();
        let bytes = save_bytes(&config, &artifacts).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.artifacts, artifacts);
        assert_eq!(back.config, config);
        assert_eq!(back.modalities.len(), 2);
        // And the re-save is byte-identical.
        assert_eq!(save_bytes(&back.config, &back.artifacts).unwrap(), bytes);
    }

    #[test]
    fn round_trip_through_a_file() {
        let (config, artifacts) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &config, &artifacts).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.artifacts, artifacts);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (config, artifacts) = trained_pair();
        let mut bytes = save_bytes(&config, &artifacts).unwrap();
        bytes[0] ^= 0xff;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let (config, artifacts) = trained_pair();
        let mut bytes = save_bytes(&config, &artifacts).unwrap();
        bytes[8] = 99;
        // Digest covers the version field, so recompute it to isolate the
        // version check.
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_end]);
        bytes[body_end..].copy_from_slice(&digest);
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let (config, artifacts) = trained_pair();
        let bytes = save_bytes(&config, &artifacts).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 40]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        let err = from_bytes(&bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
    }

    #[test]
    fn payload_flip_fails_integrity() {
        let (config, artifacts) = trained_pair();
        let mut bytes = save_bytes(&config, &artifacts).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x01;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("integrity"), "{err}");
    }

    #[test]
    fn sharing_mode_mismatch_is_reported() {
        let (config, artifacts) = trained_pair();
        let bytes = save_bytes(&config, &artifacts).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        let mut expected = config.clone();
        expected.sharing = CodebookSharing::PerLevel;
        let err = loaded.verify_compatible(&expected).unwrap_err();
        assert!(err.to_string().contains("sharing mode"), "{err}");
        loaded.verify_compatible(&config).unwrap();
    }

    #[test]
    fn structural_mismatch_in_directory_is_rejected() {
        let (config, artifacts) = trained_pair();
        let bytes = save_bytes(&config, &artifacts).unwrap();
        // Grow the declared header: claim a different hidden stack so the
        // directory no longer matches the rebuilt shell.
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        header.config.hidden = vec![10, 7];
        let header_json = serde_json::to_vec(&header).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(&bytes[..12]);
        forged.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&header_json);
        forged.extend_from_slice(&bytes[20 + header_len..bytes.len() - 32]);
        let digest = Sha256::digest(&forged);
        forged.extend_from_slice(&digest);
        let err = from_bytes(&forged).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
