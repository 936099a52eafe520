//! Verifier-integrated theorem proving toolkit.
//!
//! The pieces around a Lean 4 prover model: the `<code>`/`<interpreter>`
//! transcript format, verifier and model gateways, reward computation, the
//! DAPO/GRPO objective arithmetic with feedback masking, the multi-turn
//! rollout loop, cold-start data synthesis and pass@k evaluation.

pub mod eval;
pub mod forge;
pub mod model;
pub mod objective;
pub mod orchestrator;
pub mod pool;
pub mod prompts;
pub mod reward;
pub mod transcript;
pub mod verifier;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of a UTF-8 string.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Read a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    mut w: impl Write,
    items: impl IntoIterator<Item = &'a T>,
) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    #[test]
    fn sha256_known_value() {
        assert_eq!(
            super::sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
