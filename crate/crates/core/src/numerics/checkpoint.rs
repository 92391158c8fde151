//! Checkpoint files.
//!
//! Layout: a UTF-8 manifest, then the raw parameter data.
//!
//! ```text
//! TDDM-CHECKPOINT 1
//! meta <key> <value>          (zero or more)
//! param <name> <d0>x<d1>... <byte offset>
//! data <total bytes>
//! <raw little-endian f64 values>
//! ```
//!
//! Offsets are relative to the first data byte. Values are stored bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "TDDM-CHECKPOINT 1";

pub fn encode(params: &ParamStore, meta: &[(String, String)]) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in meta {
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (_, name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param {name} {} {offset}\n", dims.join("x")));
        offset += t.numel() * 8;
    }
    header.push_str(&format!("data {offset}\n"));
    let mut out = header.into_bytes();
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Vec<(String, String)>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let next_line = |reader: &mut BufReader<&[u8]>, line: &mut String| -> Result<()> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if n == 0 {
            return Err(Error::Checkpoint("unexpected end of manifest".into()));
        }
        Ok(())
    };
    next_line(&mut reader, &mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("bad magic {:?}", line.trim_end())));
    }
    let mut meta = Vec::new();
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let total = loop {
        next_line(&mut reader, &mut line)?;
        let mut parts = line.trim_end().splitn(2, ' ');
        let tag = parts.next().unwrap_or("");
        let rest = parts.next().unwrap_or("");
        match tag {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            }
            "param" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("malformed param line {rest:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("shape {}: {e}", f[1])))?;
                let offset = f[2].parse().map_err(|e| bad(format!("offset: {e}")))?;
                entries.push((f[0].to_string(), shape, offset));
            }
            "data" => break rest.parse::<usize>().map_err(|e| bad(format!("data size: {e}")))?,
            other => return Err(bad(format!("unknown manifest line {other:?}"))),
        }
    };
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if data.len() != total {
        return Err(bad(format!("expected {total} data bytes, found {}", data.len())));
    }
    let mut store = ParamStore::new();
    for (name, shape, offset) in entries {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > data.len() {
            return Err(bad(format!("parameter {name} exceeds data section")));
        }
        let values = data[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, values)?);
    }
    Ok((store, meta))
}

pub fn save(path: &Path, params: &ParamStore, meta: &[(String, String)]) -> Result<()> {
    let bytes = encode(params, meta);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, Vec<(String, String)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
