//! Certificate persistence. Network weights are stored as base64 blobs of
//! little-endian f64 values so a file reloads to the exact same parameters.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::LinearFeedback;
use crate::certificate::{Certificate, LyapunovNet, PolicyNet};
use crate::error::{Error, Result};
use crate::neural::Mlp;
use crate::synthesis::{CertificateConstants, CouplingGains};
use crate::verification::{VerificationReport, Verdict};

pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a report's JSON encoding.
pub fn report_digest(report: &VerificationReport) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(report)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkBlob {
    pub dims: Vec<usize>,
    pub weights: String,
}

impl NetworkBlob {
    pub fn encode(net: &Mlp) -> Self {
        Self {
            dims: net.dims(),
            weights: B64.encode(net.to_le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<Mlp> {
        let bytes = B64
            .decode(&self.weights)
            .map_err(|e| Error::Format(format!("weight blob is not base64: {e}")))?;
        Mlp::from_le_bytes(&self.dims, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovEntry {
    pub floor: f64,
    pub phi: NetworkBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub nominal: LinearFeedback,
    pub residual: NetworkBlob,
    pub state_dim: usize,
    pub neighbor_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzBounds {
    /// Per Lyapunov class.
    pub v: Vec<f64>,
    /// Per policy class.
    pub policy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileProvenance {
    pub config_hash: String,
    pub seed: u64,
    pub verdict: Option<Verdict>,
    /// SHA-256 of the verification report the verdict came from.
    pub report_digest: Option<String>,
}

impl FileProvenance {
    pub fn unverified(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            verdict: None,
            report_digest: None,
        }
    }

    pub fn from_report(config_hash: String, seed: u64, report: &VerificationReport) -> Result<Self> {
        Ok(Self {
            config_hash,
            seed,
            verdict: Some(report.verdict),
            report_digest: Some(report_digest(report)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub version: u32,
    pub constants: CertificateConstants,
    /// Projected coupling matrix, row-major.
    pub gamma: Vec<f64>,
    /// Unprojected learnable gains, row-major.
    pub gamma_pure: Vec<f64>,
    pub v_classes: Vec<usize>,
    pub policy_classes: Vec<usize>,
    pub v_nets: Vec<LyapunovEntry>,
    pub policies: Vec<PolicyEntry>,
    pub equilibria: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
    pub lipschitz: LipschitzBounds,
    pub provenance: FileProvenance,
}

impl CertificateFile {
    pub fn new(cert: &Certificate, provenance: FileProvenance) -> Self {
        Self {
            version: FORMAT_VERSION,
            constants: cert.constants,
            gamma: cert.gamma.clone(),
            gamma_pure: cert.gains.gamma_pure.clone(),
            v_classes: cert.v_classes.clone(),
            policy_classes: cert.policy_classes.clone(),
            v_nets: cert
                .v_nets
                .iter()
                .map(|v| LyapunovEntry {
                    floor: v.floor,
                    phi: NetworkBlob::encode(&v.phi),
                })
                .collect(),
            policies: cert
                .policies
                .iter()
                .map(|p| PolicyEntry {
                    nominal: p.nominal.clone(),
                    residual: NetworkBlob::encode(&p.residual),
                    state_dim: p.state_dim,
                    neighbor_dims: p.neighbor_dims.clone(),
                })
                .collect(),
            equilibria: cert.equilibria.clone(),
            neighbors: cert.neighbors.clone(),
            lipschitz: LipschitzBounds {
                v: cert.v_lipschitz(),
                policy: cert.policy_lipschitz(),
            },
            provenance,
        }
    }

    /// Rebuilds the certificate and checks every internal invariant,
    /// including that the stored Lipschitz bounds match the weights.
    pub fn certificate(&self) -> Result<Certificate> {
        self.check_header()?;
        let n = self.v_classes.len();
        if self.gamma.len() != n * n || self.gamma_pure.len() != n * n {
            return Err(Error::Format(format!("coupling matrices must be {n} x {n}")));
        }
        if self.policy_classes.len() != n || self.equilibria.len() != n || self.neighbors.len() != n {
            return Err(Error::Format("per-agent fields disagree on the agent count".into()));
        }
        let v_nets = self
            .v_nets
            .iter()
            .map(|v| {
                Ok(LyapunovNet {
                    floor: v.floor,
                    phi: v.phi.decode()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let policies = self
            .policies
            .iter()
            .map(|p| {
                Ok(PolicyNet {
                    nominal: p.nominal.clone(),
                    residual: p.residual.decode()?,
                    state_dim: p.state_dim,
                    neighbor_dims: p.neighbor_dims.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.v_classes.iter().any(|c| *c >= v_nets.len()) || self.policy_classes.iter().any(|c| *c >= policies.len()) {
            return Err(Error::Format("an agent references a missing network".into()));
        }
        let mut mask = vec![false; n * n];
        for (i, row) in self.neighbors.iter().enumerate() {
            mask[i * n + i] = true;
            for &j in row {
                if j >= n || j == i {
                    return Err(Error::Format(format!("agent {i} lists an invalid neighbour {j}")));
                }
                mask[i * n + j] = true;
            }
        }
        let cert = Certificate {
            constants: self.constants,
            gains: CouplingGains {
                n,
                gamma_pure: self.gamma_pure.clone(),
                mask,
                epsilon: self.constants.epsilon,
            },
            gamma: self.gamma.clone(),
            v_classes: self.v_classes.clone(),
            v_nets,
            policy_classes: self.policy_classes.clone(),
            policies,
            equilibria: self.equilibria.clone(),
            neighbors: self.neighbors.clone(),
        };
        let lip = LipschitzBounds {
            v: cert.v_lipschitz(),
            policy: cert.policy_lipschitz(),
        };
        if lip != self.lipschitz {
            return Err(Error::Format(format!(
                "stored Lipschitz bounds {:?} do not match the weights {:?}",
                self.lipschitz, lip
            )));
        }
        Ok(cert)
    }

    fn check_header(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "certificate format version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.provenance.verdict == Some(Verdict::Verified) && self.provenance.report_digest.is_none() {
            return Err(Error::Format("verdict `verified` without a report digest".into()));
        }
        self.constants.validate().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CertificateFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("certificate JSON: {e}")))?;
        file.certificate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
