//! Config files, result envelopes and readers for the command-line tools.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chain::ChainSpec;
use crate::error::{Error, Result};
use crate::restorer::{PhiParams, PhiRecord, ORDERING_CONVENTION};

/// Provenance written next to every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub chain: ChainSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub ordering_convention: String,
    pub version: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl Metadata {
    pub fn new(chain: ChainSpec, t: Option<f64>, seed: Option<u64>) -> Self {
        Metadata {
            chain,
            t,
            seed,
            ordering_convention: ORDERING_CONVENTION.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            notes: Vec::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    /// `# key: value` lines for the head of a CSV file.
    pub fn write_comment_block<W: Write>(&self, mut w: W) -> Result<()> {
        let json = serde_json::to_value(self)?;
        if let serde_json::Value::Object(map) = json {
            for (k, v) in map {
                writeln!(w, "# {k}: {v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub metadata: Metadata,
    pub result: T,
}

/// Chain config file: the `ChainSpec` keys plus an optional registration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(flatten)]
    pub chain: ChainSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub registration_time: Option<f64>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_chain_config(path: &Path) -> Result<ChainConfig> {
    let cfg: ChainConfig = read_json(path)?;
    cfg.chain.validate()?;
    Ok(cfg)
}

/// Accepts a bare record array, a `phi-opt` result, or its envelope.
pub fn parse_phi(json: &str) -> Result<PhiParams> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    let records = match &value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(map) => {
            let inner = map.get("result").unwrap_or(&value);
            inner
                .get("phi")
                .cloned()
                .ok_or_else(|| Error::Format("expected a phi record array or an object with a 'phi' field".into()))?
        }
        _ => return Err(Error::Format("expected a phi record array".into())),
    };
    let records: Vec<PhiRecord> = serde_json::from_value(records)?;
    PhiParams::from_records(&records)
}

pub fn read_phi(path: &Path) -> Result<PhiParams> {
    parse_phi(&std::fs::read_to_string(path)?)
}

pub fn phi_json(phi: &PhiParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&phi.to_records())?)
}
