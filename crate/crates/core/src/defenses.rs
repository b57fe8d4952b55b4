//! Perturbations of the communicated update `θˢ − θᶜ`.
//!
//! A defense acts once on the final delta; the defended client parameters are
//! `θˢ − defend(θˢ − θᶜ)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::ObservedUpdate;
use crate::io::seed::{laplace, standard_normal, SeedStream};
use crate::model::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Gaussian,
    Laplacian,
    Pruning,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Noise scale for the noise defenses, drop probability for pruning.
    #[serde(default)]
    pub strength: f64,
    #[serde(default)]
    pub seed: u64,
    /// Scale the noise strength by the RMS of the update it perturbs.
    #[serde(default)]
    pub relative: bool,
}

impl DefenseConfig {
    pub const NONE: DefenseConfig = DefenseConfig { kind: DefenseKind::None, strength: 0.0, seed: 0, relative: false };

    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let ok = match self.kind {
            DefenseKind::None => true,
            DefenseKind::Gaussian | DefenseKind::Laplacian => s.is_finite() && s >= 0.0,
            DefenseKind::Pruning => (0.0..=1.0).contains(&s),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid strength {s} for {:?} defense", self.kind)))
        }
    }
}

/// Parses `kind` or `kind:strength`, e.g. `gaussian:0.01`. A strength suffix
/// `rms` (`gaussian:0.1rms`) makes it relative to the update's RMS.
impl FromStr for DefenseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, strength, relative) = match s.split_once(':') {
            Some((k, v)) => {
                let (v, relative) = match v.strip_suffix("rms") {
                    Some(v) => (v, true),
                    None => (v, false),
                };
                let v = v.parse().map_err(|_| Error::Config(format!("bad defense strength `{v}`")))?;
                (k, v, relative)
            }
            None => (s, 0.0, false),
        };
        let kind = match kind {
            "none" => DefenseKind::None,
            "gaussian" => DefenseKind::Gaussian,
            "laplacian" => DefenseKind::Laplacian,
            "pruning" => DefenseKind::Pruning,
            other => return Err(Error::Config(format!("unknown defense `{other}`"))),
        };
        if relative && !matches!(kind, DefenseKind::Gaussian | DefenseKind::Laplacian) {
            return Err(Error::Config(format!("only noise defenses take a relative strength, got `{s}`")));
        }
        let cfg = DefenseConfig { kind, strength, seed: 0, relative };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            DefenseKind::None => return f.write_str("none"),
            DefenseKind::Gaussian => "gaussian",
            DefenseKind::Laplacian => "laplacian",
            DefenseKind::Pruning => "pruning",
        };
        let unit = if self.relative { "rms" } else { "" };
        write!(f, "{name}:{}{unit}", self.strength)
    }
}

pub fn apply_defense(update: &[f64], cfg: &DefenseConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if update.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("defense input contains non-finite entries".into()));
    }
    let mut rng = SeedStream::new(cfg.seed).derive("defense").rng();
    let s = if cfg.relative && cfg.kind != DefenseKind::Pruning { cfg.strength * rms(update) } else { cfg.strength };
    Ok(match cfg.kind {
        DefenseKind::None => update.to_vec(),
        DefenseKind::Gaussian => update.iter().map(|v| v + s * standard_normal(&mut rng)).collect(),
        DefenseKind::Laplacian => update.iter().map(|v| v + laplace(&mut rng, s)).collect(),
        DefenseKind::Pruning => update
            .iter()
            .map(|&v| if rng.random::<f64>() < s { 0.0 } else { v })
            .collect(),
    })
}

/// Replaces the observed client parameters by their defended counterpart.
pub fn defend_update(obs: &ObservedUpdate, cfg: &DefenseConfig) -> Result<ObservedUpdate> {
    if cfg.kind == DefenseKind::None {
        return Ok(obs.clone());
    }
    let noisy = apply_defense(&obs.delta(), cfg)?;
    let client: Vec<f64> = obs.server.flatten().iter().zip(noisy).map(|(s, d)| s - d).collect();
    Ok(ObservedUpdate {
        client: Parameters::unflatten(&obs.arch, &client)?,
        ..obs.clone()
    })
}

/// Root mean square of a vector.
pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}
