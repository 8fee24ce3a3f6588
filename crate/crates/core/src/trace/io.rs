//! JSON-Lines trace files.
//!
//! Line 1 is the header
//! `{"format_version":1,"sequence_id":..,"L":..,"E":..,"k":..,"num_prefill_tokens":..,"num_decode_tokens":..}`;
//! every following line is one token record
//! `{"phase":"prefill"|"decode","token_index":..,"layers":[{"true_scores":[..],"predicted_scores":[..]|null},..]}`.
//! Prefill records come first, each phase in token order. Scores are written
//! in the shortest decimal form that parses back to the identical `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_token, ModelShape, Phase, RoutingTrace, TokenLayers, TokenRouting};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    sequence_id: String,
    #[serde(rename = "L")]
    num_layers: usize,
    #[serde(rename = "E")]
    num_experts: usize,
    k: usize,
    num_prefill_tokens: usize,
    num_decode_tokens: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord<L> {
    phase: Phase,
    token_index: usize,
    layers: L,
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other.context(format!("loading {}", path.display())),
    })
}

pub fn save_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_trace(trace, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace<W: Write>(trace: &RoutingTrace, mut out: W) -> Result<()> {
    let shape = trace.shape();
    let header = Header {
        format_version: FORMAT_VERSION,
        sequence_id: trace.sequence_id().to_string(),
        num_layers: shape.num_layers(),
        num_experts: shape.num_experts(),
        k: shape.top_k(),
        num_prefill_tokens: trace.prefill().len(),
        num_decode_tokens: trace.decode().len(),
    };
    write_line(&mut out, &header)?;
    for phase in [Phase::Prefill, Phase::Decode] {
        for (token_index, layers) in trace.tokens(phase).iter().enumerate() {
            let record = TokenRecord {
                phase,
                token_index,
                layers,
            };
            write_line(&mut out, &record)?;
        }
    }
    Ok(())
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
        .map_err(|e| Error::io("<trace writer>", e))
}

pub fn read_trace<R: Read>(reader: R) -> Result<RoutingTrace> {
    let mut lines = BufReader::new(reader).lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header record".into(),
                })
            }
            Some((n, line)) => {
                let line = line.map_err(|e| Error::io("<trace reader>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
        }
    };
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format_version {}", header.format_version),
        });
    }
    let shape = ModelShape::new(header.num_layers, header.num_experts, header.k)?;

    let mut prefill: Vec<TokenLayers> = Vec::with_capacity(header.num_prefill_tokens);
    let mut decode: Vec<TokenLayers> = Vec::with_capacity(header.num_decode_tokens);
    for (n, line) in lines {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io("<trace reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TokenRecord<Vec<TokenRouting>> =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let (bucket, expected) = match record.phase {
            Phase::Prefill => {
                if !decode.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "prefill record after decode records".into(),
                    });
                }
                (&mut prefill, header.num_prefill_tokens)
            }
            Phase::Decode => (&mut decode, header.num_decode_tokens),
        };
        if record.token_index != bucket.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "{} token_index {} out of order, expected {}",
                    record.phase,
                    record.token_index,
                    bucket.len()
                ),
            });
        }
        if bucket.len() == expected {
            return Err(Error::Parse {
                line: line_no,
                message: format!("more {} tokens than the header's {expected}", record.phase),
            });
        }
        validate_token(
            shape,
            record.phase,
            record.token_index,
            &record.layers,
            super::LOAD_SUM_TOLERANCE,
        )?;
        bucket.push(record.layers);
    }
    if prefill.len() != header.num_prefill_tokens || decode.len() != header.num_decode_tokens {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "header announces {}/{} prefill/decode tokens, file has {}/{}",
                header.num_prefill_tokens,
                header.num_decode_tokens,
                prefill.len(),
                decode.len()
            ),
        });
    }
    if prefill.is_empty() {
        return Err(Error::EmptyPhase(Phase::Prefill));
    }
    Ok(RoutingTrace::new_unchecked(
        shape,
        header.sequence_id,
        prefill,
        decode,
    ))
}
