//! Checkpoint format: a UTF-8 header followed by raw little-endian `f64`s.
//!
//! ```text
//! semseg-checkpoint v1
//! layer enc1 3 3 16 0 448
//! ...
//! values 19108
//! <19108 × 8 bytes>
//! ```
//!
//! Each `layer` line is `name kernel c_in c_out offset len`.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{LayerSpan, Layout, ParameterVector};

const MAGIC: &str = "semseg-checkpoint v1";

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParameterVector) -> std::io::Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for s in params.layout().spans() {
        header.push_str(&format!(
            "layer {} {} {} {} {} {}\n",
            s.name, s.kernel, s.c_in, s.c_out, s.offset, s.len
        ));
    }
    header.push_str(&format!("values {}\n", params.len()));
    out.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()
}

/// Parses a checkpoint; `origin` names the source in error messages.
pub fn read_checkpoint<R: BufRead>(mut input: R, origin: &Path) -> Result<ParameterVector> {
    let bad = |reason: String| Error::format(origin, reason);
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = input
            .read_line(line)
            .map_err(|e| Error::io(origin, e))?;
        if n == 0 {
            return Err(Error::format(origin, "unexpected end of header"));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("not a checkpoint (header {:?})", line.trim_end())));
    }
    let mut spans = Vec::new();
    let count = loop {
        next_line(&mut line)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["layer", name, rest @ ..] if rest.len() == 5 => {
                let nums: Vec<usize> = rest
                    .iter()
                    .map(|f| f.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("malformed layer line {:?}", line.trim_end())))?;
                spans.push(LayerSpan {
                    name: name.to_string(),
                    kernel: nums[0],
                    c_in: nums[1],
                    c_out: nums[2],
                    offset: nums[3],
                    len: nums[4],
                });
            }
            ["values", n] => {
                break n
                    .parse::<usize>()
                    .map_err(|_| bad(format!("malformed value count {n:?}")))?
            }
            _ => return Err(bad(format!("unexpected header line {:?}", line.trim_end()))),
        }
    };
    let layout = Layout::from_spans(spans).map_err(|e| bad(e.to_string()))?;
    if layout.len() != count {
        return Err(bad(format!(
            "header declares {count} values but layers cover {}",
            layout.len()
        )));
    }
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(origin, e))?;
    if bytes.len() != count * 8 {
        return Err(bad(format!(
            "expected {} bytes of values, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ParameterVector::from_values(Arc::new(layout), values).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(path: &Path, params: &ParameterVector) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterVector> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file), path)
}
