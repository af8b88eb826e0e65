//! Versioned JSON envelopes for graphs and plans.
//!
//! Every file carries its kind, a format version, the master seed of the run
//! that produced it, and the SHA-256 of the artifact it was derived from.
//! Tensors inside the payload are base64 little-endian `f64` with explicit
//! shapes. Serialization is deterministic, so `save(load(f))` reproduces `f`
//! byte for byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::PruningPlan;
use crate::zoo::ModelGraph;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a valid artifact: {reason}")]
    Parse { path: String, reason: String },
    #[error("{path}: expected a `{expected}` artifact, found `{found}`")]
    Kind {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { path: String, found: u32 },
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

/// Payload types that can be stored in an envelope.
pub trait Payload: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Payload for ModelGraph {
    const KIND: &'static str = "graph";
}

impl Payload for PruningPlan {
    const KIND: &'static str = "plan";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the input artifact file; `None` for roots of the chain.
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: u32,
    pub provenance: Provenance,
    pub payload: T,
}

impl<T: Payload> Envelope<T> {
    pub fn new(payload: T, provenance: Provenance) -> Self {
        Envelope {
            kind: T::KIND.to_string(),
            version: FORMAT_VERSION,
            provenance,
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("artifact payloads serialize");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            version: u32,
        }
        let parse = |e: serde_json::Error| ArtifactError::Parse {
            path: path.to_string(),
            reason: e.to_string(),
        };
        let header: Header = serde_json::from_slice(bytes).map_err(parse)?;
        if header.kind != T::KIND {
            return Err(ArtifactError::Kind {
                path: path.to_string(),
                expected: T::KIND.to_string(),
                found: header.kind,
            });
        }
        if header.version != FORMAT_VERSION {
            return Err(ArtifactError::Version {
                path: path.to_string(),
                found: header.version,
            });
        }
        serde_json::from_slice(bytes).map_err(parse)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads an envelope and returns it with the hash of the file bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let env = Self::from_bytes(&bytes, &path.display().to_string())?;
        Ok((env, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{plan, BudgetSpec, PlanMode};
    use crate::zoo::{build, ArchConfig, ARCHITECTURES};

    #[test]
    fn graphs_and_plans_round_trip_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        for name in ARCHITECTURES {
            let mut m = build(&ArchConfig::toy_for(name).unwrap(), 3, true).unwrap();
            m.perturb(1, 0.37);
            let env = Envelope::new(
                m,
                Provenance {
                    seed: 3,
                    parent: None,
                },
            );
            let path = dir.path().join(format!("{name}.json"));
            let hash = env.save(&path).unwrap();
            let (back, h2) = Envelope::<ModelGraph>::load(&path).unwrap();
            assert_eq!(hash, h2);
            assert_eq!(back, env);
            assert_eq!(back.to_bytes(), fs::read(&path).unwrap());

            let p = plan(
                &back.payload.gates,
                &BudgetSpec::new(PlanMode::Layerwise, 0.3),
            )
            .unwrap();
            let penv = Envelope::new(
                p,
                Provenance {
                    seed: 3,
                    parent: Some(hash),
                },
            );
            let ppath = dir.path().join(format!("{name}.plan.json"));
            penv.save(&ppath).unwrap();
            let (pback, _) = Envelope::<PruningPlan>::load(&ppath).unwrap();
            assert_eq!(pback.to_bytes(), fs::read(&ppath).unwrap());
        }
    }

    #[test]
    fn wrong_kind_and_version_are_reported() {
        let m = build(&ArchConfig::toy_for("mini_alex").unwrap(), 0, true).unwrap();
        let bytes = Envelope::new(
            m,
            Provenance {
                seed: 0,
                parent: None,
            },
        )
        .to_bytes();
        assert!(matches!(
            Envelope::<PruningPlan>::from_bytes(&bytes, "x"),
            Err(ArtifactError::Kind { .. })
        ));
        let text =
            String::from_utf8(bytes)
                .unwrap()
                .replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            Envelope::<ModelGraph>::from_bytes(text.as_bytes(), "x"),
            Err(ArtifactError::Version { found: 9, .. })
        ));
        assert!(matches!(
            Envelope::<ModelGraph>::from_bytes(b"{", "x"),
            Err(ArtifactError::Parse { .. })
        ));
    }
}
