//! On-disk form of an observed client update: `server.flt`, `client.flt` and
//! a JSON header with the architecture and training configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{load_params, save_params};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::fedavg::ObservedUpdate;
use crate::model::Architecture;

pub const HEADER_FILE: &str = "update.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateHeader {
    pub arch: Architecture,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_examples: usize,
    /// Defense applied before the update left the client, if any.
    #[serde(default = "no_defense")]
    pub defense: DefenseConfig,
}

fn no_defense() -> DefenseConfig {
    DefenseConfig::NONE
}

pub fn save_update(dir: impl AsRef<Path>, obs: &ObservedUpdate, defense: &DefenseConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_params(dir.join("server.flt"), &obs.server)?;
    save_params(dir.join("client.flt"), &obs.client)?;
    let header = UpdateHeader {
        arch: obs.arch.clone(),
        lr: obs.lr,
        batch_size: obs.batch_size,
        epochs: obs.epochs,
        num_examples: obs.num_examples,
        defense: *defense,
    };
    let path = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_update(dir: impl AsRef<Path>) -> Result<(ObservedUpdate, UpdateHeader)> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: UpdateHeader = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.batch_size == 0 || header.epochs == 0 || header.num_examples == 0 {
        return Err(Error::format(&path, "batch size, epochs and example count must be positive"));
    }
    let obs = ObservedUpdate {
        arch: header.arch.clone(),
        server: load_params(dir.join("server.flt"), &header.arch)?,
        client: load_params(dir.join("client.flt"), &header.arch)?,
        lr: header.lr,
        batch_size: header.batch_size,
        epochs: header.epochs,
        num_examples: header.num_examples,
    };
    Ok((obs, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedavg::{observe, ClientOptions, FedAvgConfig};
    use crate::io::generate_synthetic;
    use crate::model::init_params;

    #[test]
    fn roundtrip() {
        let arch = Architecture::mlp([1, 4, 4], 6, 3).unwrap();
        let data = generate_synthetic(&[2, 1, 2], [1, 4, 4], 5).unwrap();
        let cfg = FedAvgConfig { lr: 0.1, batch_size: 2, epochs: 2, partition_seed: 9 };
        let (obs, _) = observe(&data, &arch, &init_params(&arch, 1), &cfg, ClientOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let defense: DefenseConfig = "gaussian:0.5".parse().unwrap();
        save_update(dir.path(), &obs, &defense).unwrap();
        let (back, header) = load_update(dir.path()).unwrap();
        assert_eq!(back.server, obs.server);
        assert_eq!(back.client, obs.client);
        assert_eq!((back.lr, back.batch_size, back.epochs, back.num_examples), (0.1, 2, 2, 5));
        assert_eq!(header.defense, defense);
    }

    #[test]
    fn missing_header_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_update(dir.path()), Err(Error::Io { .. })));
    }
}
