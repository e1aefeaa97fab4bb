//! Parameter checkpoints.
//!
//! Layout: one line of JSON header terminated by `\n`, followed by the
//! parameter blocks `token_embed`, `w_q`, `w_g`, `b_g` as row-major
//! little-endian f64 values.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointer::{Matrix, PgParams};

pub const CHECKPOINT_FORMAT: &str = "biaslab-pgparams";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub vocab_size: usize,
    pub d: usize,
    pub d_h: usize,
    pub blocks: Vec<String>,
    /// Token strings of the vocabulary the parameters were trained against.
    pub vocab: Vec<String>,
}

pub fn write<W: Write>(params: &PgParams, seed: u64, vocab: &[String], mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed,
        vocab_size: params.vocab_size(),
        d: params.embed_dim(),
        d_h: params.state_dim(),
        blocks: ["token_embed", "w_q", "w_g", "b_g"]
            .map(String::from)
            .to_vec(),
        vocab: vocab.to_vec(),
    };
    let io = |e| Error::io("<checkpoint>", e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for block in params.blocks() {
        for x in block {
            out.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read<R: BufRead>(mut input: R) -> Result<(CheckpointHeader, PgParams)> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported header {} v{}", header.format, header.version),
        ));
    }
    let (v, d, d_h) = (header.vocab_size, header.d, header.d_h);
    let mut params = PgParams {
        token_embed: Matrix::zeros(v, d),
        w_q: Matrix::zeros(d, d_h),
        w_g: vec![0.0; d_h + d],
        b_g: 0.0,
    };
    let mut buf = [0u8; 8];
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            input.read_exact(&mut buf).map_err(|_| {
                Error::format(
                    "checkpoint",
                    "parameter payload shorter than the header declares",
                )
            })?;
            *x = f64::from_le_bytes(buf);
        }
    }
    if input.read(&mut buf).map_err(io)? != 0 {
        return Err(Error::format(
            "checkpoint",
            "trailing bytes after parameters",
        ));
    }
    Ok((header, params))
}

pub fn save(path: &Path, params: &PgParams, seed: u64, vocab: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(params, seed, vocab, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, PgParams)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut p = PgParams::init(3, 6, 4, 5).unwrap();
        p.b_g = -1.234_567_890_123;
        let vocab: Vec<String> = ["a", "b", "c", "d", "e", "</s>"].map(String::from).to_vec();
        let mut buf = Vec::new();
        write(&p, 3, &vocab, &mut buf).unwrap();
        let (h, q) = read(buf.as_slice()).unwrap();
        assert_eq!(q, p);
        assert_eq!(h.seed, 3);
        assert_eq!(h.vocab, vocab);
        assert_eq!(
            buf.len() - buf.iter().position(|&b| b == b'\n').unwrap() - 1,
            p.num_scalars() * 8
        );
    }

    #[test]
    fn truncated_payload_rejected() {
        let p = PgParams::init(3, 6, 4, 5).unwrap();
        let mut buf = Vec::new();
        write(&p, 3, &[], &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read(buf.as_slice()).is_err());
    }
}
