//! Provenance header written as the first line of every output file.

use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tool version, resolved seed and configuration hash of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Provenance {
    /// Provenance for a run whose resolved configuration renders as `config`.
    pub fn new(seed: Option<u64>, config: &str) -> Self {
        Self { seed, config_hash: config_hash(config) }
    }

    /// Comment line (without trailing newline) such as `# adr 0.1.0 seed=7 config=ab12...`.
    pub fn header(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!("# adr {VERSION} seed={seed} config={}", self.config_hash)
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_format() {
        let p = Provenance::new(Some(7), "setup=binary");
        let h = p.header();
        assert!(h.starts_with(&format!("# adr {VERSION} seed=7 config=")));
        assert_eq!(p.config_hash.len(), 16);
        assert_eq!(p, Provenance::new(Some(7), "setup=binary"));
        assert_ne!(p.config_hash, config_hash("setup=multi"));
    }
}
