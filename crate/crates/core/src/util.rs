use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of a value's TOML serialisation.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("configuration types serialise to TOML");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
