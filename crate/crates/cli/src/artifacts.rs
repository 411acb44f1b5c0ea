//! JSON artifacts: discriminators and occurrence tables, stamped with the
//! seed and a hash of the world they were built for.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pfdiff_core::guidance::{Discriminator, KappaTable};
use pfdiff_core::toyworld::MixtureWorld;

use crate::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

pub fn world_hash(world: &MixtureWorld) -> String {
    hash_json(world)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaArtifact {
    pub seed: u64,
    pub world_hash: String,
    pub table: KappaTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub loss: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArtifact {
    pub seed: u64,
    pub world_hash: String,
    pub conditional: Discriminator,
    pub conditional_heldout: HeldOut,
    pub unconditional: Discriminator,
    pub unconditional_heldout: HeldOut,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn save<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, to_json(value)).map_err(|e| CliError::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), e.line())))
}

/// Refuse artifacts built for a different world.
pub fn check_world(path: &Path, artifact_hash: &str, world: &MixtureWorld) -> CliResult<()> {
    let expected = world_hash(world);
    if artifact_hash == expected {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{} was built for world {artifact_hash} but the config describes world {expected}",
            path.display()
        )))
    }
}
