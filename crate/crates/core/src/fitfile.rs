//! Binary fit-result file: a JSON header followed by the draws of every
//! chain stored column by column as little-endian f64.
//!
//! ```text
//! b"DICJMFIT" | u32 version | u64 header length | header JSON | chain blocks
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ChainConfig, ChainDraws, ChainStats, DrawLayout, PosteriorDraws};
use crate::error::{Error, Result};
use crate::outcome::ModelContext;

pub const MAGIC: &[u8; 8] = b"DICJMFIT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub chain: usize,
    pub iterations: Vec<u64>,
    pub stats: ChainStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHeader {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ChainConfig,
    pub context: ModelContext,
    pub layout: DrawLayout,
    pub columns: Vec<String>,
    pub chains: Vec<ChainHeader>,
}

/// A fit read back from disk: the model context and the draws.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub context: ModelContext,
    pub draws: PosteriorDraws,
}

pub fn write_fit(path: &Path, ctx: &ModelContext, draws: &PosteriorDraws) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = FitHeader {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: draws.config.clone(),
        context: ctx.clone(),
        layout: draws.layout.clone(),
        columns: draws.layout.columns(),
        chains: draws
            .chains
            .iter()
            .map(|c| ChainHeader {
                chain: c.chain,
                iterations: c.iterations.clone(),
                stats: c.stats.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&SCHEMA_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    let width = draws.layout.width();
    for c in &draws.chains {
        for col in 0..width {
            for row in c.values.chunks_exact(width) {
                out.write_all(&row[col].to_le_bytes()).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::MalformedFit(format!("{}: truncated", path.display())),
        _ => Error::io(path, e),
    })
}

/// Reads only the header of a fit file.
pub fn read_header(path: &Path) -> Result<FitHeader> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_header_from(&mut r, path)
}

fn read_header_from<R: Read>(r: &mut R, path: &Path) -> Result<FitHeader> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::MalformedFit(format!("{}: not a fit file", path.display())));
    }
    let mut word = [0u8; 4];
    read_exact(r, &mut word, path)?;
    let version = u32::from_le_bytes(word);
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact(r, &mut len, path)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::MalformedFit("header too large".into()))?;
    let mut json = vec![0u8; len];
    read_exact(r, &mut json, path)?;
    let header: FitHeader = serde_json::from_slice(&json)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if header.columns != header.layout.columns() {
        return Err(Error::MalformedFit("column names disagree with the layout".into()));
    }
    Ok(header)
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header_from(&mut r, path)?;
    let width = header.layout.width();
    let mut chains = Vec::with_capacity(header.chains.len());
    let mut word = [0u8; 8];
    for ch in header.chains {
        let rows = ch.iterations.len();
        let mut values = vec![0.0; rows * width];
        for col in 0..width {
            for row in 0..rows {
                read_exact(&mut r, &mut word, path)?;
                values[row * width + col] = f64::from_le_bytes(word);
            }
        }
        chains.push(ChainDraws {
            chain: ch.chain,
            iterations: ch.iterations,
            values,
            stats: ch.stats,
        });
    }
    if r.read(&mut word).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::MalformedFit(format!("{}: trailing bytes", path.display())));
    }
    Ok(FitResult {
        context: header.context,
        draws: PosteriorDraws {
            config: header.config,
            layout: header.layout,
            chains,
        },
    })
}
