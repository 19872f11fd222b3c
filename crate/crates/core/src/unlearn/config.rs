use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::permu::PermuMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ga,
    Dpo,
    Npo,
    Tv,
    Whp,
    Uld,
    Rmu,
    Icl,
    Permu,
    PermuS,
    PermuDis,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Ga,
        Method::Dpo,
        Method::Npo,
        Method::Tv,
        Method::Whp,
        Method::Uld,
        Method::Rmu,
        Method::Icl,
        Method::Permu,
        Method::PermuS,
        Method::PermuDis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::Dpo => "dpo",
            Method::Npo => "npo",
            Method::Tv => "tv",
            Method::Whp => "whp",
            Method::Uld => "uld",
            Method::Rmu => "rmu",
            Method::Icl => "icl",
            Method::Permu => "permu",
            Method::PermuS => "permu_s",
            Method::PermuDis => "permu_dis",
        }
    }

    /// Methods that leave the weights alone and act at inference.
    pub fn is_inference_time(self) -> bool {
        matches!(self, Method::Whp | Method::Uld | Method::Icl)
    }

    pub fn permu_mode(self) -> Option<PermuMode> {
        match self {
            Method::Permu => Some(PermuMode::Msm),
            Method::PermuS => Some(PermuMode::Subject),
            Method::PermuDis => Some(PermuMode::Discrete),
            _ => None,
        }
    }
}

/// Retention regulariser added to the unlearning loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reg {
    None,
    Gdr,
    Klr,
}

/// A method with its regulariser, written `name` or `name+gdr` / `name+klr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodSpec {
    pub method: Method,
    pub reg: Reg,
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let (m, r) = match norm.split_once('+') {
            Some((m, r)) => (m.to_string(), Some(r.to_string())),
            None => (norm.clone(), None),
        };
        let method = Method::ALL
            .into_iter()
            .find(|x| x.as_str() == m)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))?;
        let reg = match r.as_deref() {
            None | Some("none") => Reg::None,
            Some("gdr") => Reg::Gdr,
            Some("klr") => Reg::Klr,
            Some(_) => return Err(Error::UnknownMethod(s.to_string())),
        };
        if reg != Reg::None && matches!(method, Method::Tv | Method::Whp | Method::Uld | Method::Icl) {
            return Err(Error::Config(format!(
                "{} does not train on the unlearning objective, so a retain regulariser has nothing to act on",
                method.as_str()
            )));
        }
        Ok(Self { method, reg })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reg {
            Reg::None => write!(f, "{}", self.method.as_str()),
            Reg::Gdr => write!(f, "{}+gdr", self.method.as_str()),
            Reg::Klr => write!(f, "{}+klr", self.method.as_str()),
        }
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: MethodSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight RW of the retain term.
    pub retain_weight: f64,
    /// NPO inverse temperature.
    pub beta: f64,
    pub alpha_whp: f64,
    pub alpha_uld: f64,
    /// Fraction of question tokens perturbed by PERMU.
    pub k: f64,
    /// Noise std as a multiple of the embedding-table std.
    pub p: f64,
    /// Weight of the clean-run distribution subtracted from the corrupted run.
    pub c: f64,
    pub rmu_alpha: f64,
    pub rmu_steer: f64,
    /// Block whose output RMU steers, 1-based; 0 picks `ceil(n_layers / 2)`.
    pub rmu_layer: usize,
    /// Take PERMU targets from the frozen target model instead of the current one.
    pub frozen_targets: bool,
    pub reinforce_epochs: usize,
    pub reinforce_lr: f64,
    pub uld_epochs: usize,
    /// Weight of the ascent term on retain data when training the ULD assistant.
    pub uld_retain_weight: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: MethodSpec {
                method: Method::Permu,
                reg: Reg::Gdr,
            },
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            retain_weight: 1.0,
            beta: 0.1,
            alpha_whp: 1.0,
            alpha_uld: 0.75,
            k: 0.4,
            p: 0.4,
            c: 0.1,
            rmu_alpha: 1.0,
            rmu_steer: 4.0,
            rmu_layer: 0,
            frozen_targets: false,
            reinforce_epochs: 10,
            reinforce_lr: 1e-3,
            uld_epochs: 10,
            uld_retain_weight: 0.2,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn for_method(method: &str) -> Result<Self> {
        Ok(Self {
            method: method.parse()?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.retain_weight >= 0.0) {
            return bad("retain_weight must be non-negative");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return bad("k must be in (0, 1]");
        }
        if !(self.p >= 0.0) {
            return bad("p must be non-negative");
        }
        if !(self.c >= 0.0) {
            return bad("c must be non-negative");
        }
        if !(self.rmu_alpha >= 0.0 && self.rmu_steer >= 0.0) {
            return bad("RMU alpha and steering scale must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    pub fn rmu_layer_for(&self, n_layers: usize) -> usize {
        if self.rmu_layer == 0 {
            n_layers.div_ceil(2)
        } else {
            self.rmu_layer
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        let s: MethodSpec = "NPO+KLR".parse().unwrap();
        assert_eq!(s.to_string(), "npo+klr");
        assert_eq!("permu-s+gdr".parse::<MethodSpec>().unwrap().method, Method::PermuS);
        assert!(matches!("eco".parse::<MethodSpec>(), Err(Error::UnknownMethod(_))));
        assert!("ga+l2".parse::<MethodSpec>().is_err());
        assert!("whp+gdr".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let c: UnlearnConfig = toml::from_str("method = \"ga+gdr\"\nlr = 0.01\n").unwrap();
        assert_eq!(c.method.reg, Reg::Gdr);
        assert_eq!(c.beta, 0.1);
        assert!(toml::from_str::<UnlearnConfig>("lr = 0.1\nlearning_rate = 2").is_err());
        assert_eq!(UnlearnConfig::default().rmu_layer_for(4), 2);
        assert_eq!(UnlearnConfig::default().rmu_layer_for(5), 3);
    }
}
