//! Checkpoint files: one compact JSON header line, a newline, then every
//! network's parameters as little-endian `f32`, in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, NetArch, Network};
use crate::error::{Error, Result};

pub const FORMAT: &str = "mimic-sig-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    /// e.g. `policy`, `actor0`, `critic`.
    pub role: String,
    pub arch: NetArch,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub iteration: u64,
    pub networks: Vec<NetworkRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(seed: u64, iteration: u64, networks: Vec<(String, &Network, Vec<f32>)>) -> Result<Self> {
        let mut records = Vec::new();
        let mut params = Vec::new();
        for (role, net, p) in networks {
            if p.len() != net.n_params() {
                return Err(Error::ShapeMismatch {
                    what: "checkpoint parameters",
                    expected: net.n_params(),
                    actual: p.len(),
                });
            }
            records.push(NetworkRecord {
                role,
                arch: net.arch.clone(),
                layout: net.layout.clone(),
            });
            params.push(p);
        }
        Ok(Self {
            header: CheckpointHeader {
                format: FORMAT.into(),
                version: VERSION,
                seed,
                iteration,
                networks: records,
            },
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header always serializes");
        out.push(b'\n');
        for p in &self.params {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut body = &bytes[nl + 1..];
        let mut params = Vec::new();
        for rec in &header.networks {
            let net = Network::new(rec.arch.clone())?;
            if net.layout != rec.layout {
                return Err(Error::Checkpoint(format!("layout of {} does not match its arch", rec.role)));
            }
            let n = net.n_params() * 4;
            if body.len() < n {
                return Err(Error::Checkpoint(format!("truncated parameters for {}", rec.role)));
            }
            let (head, rest) = body.split_at(n);
            params.push(
                head.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
            body = rest;
        }
        if !body.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn network(&self, role: &str) -> Option<(&NetworkRecord, &[f32])> {
        self.header
            .networks
            .iter()
            .zip(&self.params)
            .find(|(r, _)| r.role == role)
            .map(|(r, p)| (r, p.as_slice()))
    }
}
