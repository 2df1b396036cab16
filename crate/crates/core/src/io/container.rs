//! Native container: a one-line JSON header followed by little-endian f32
//! values in row-major `(m, n, px, py)` order. Round-trips are bit-exact for
//! stacks whose values are f32-representable, which holds for every stack
//! produced by this crate (files and the synthetic generator quantize to f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::ScanStack4D;

pub const MAGIC: &str = "stem4d";
pub const VERSION: u32 = 1;

const MAX_HEADER_BYTES: usize = 4096;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    m: usize,
    n: usize,
    px: usize,
    py: usize,
    dtype: String,
    order: String,
}

pub fn write_stack(stack: &ScanStack4D, path: &Path) -> Result<()> {
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        m: stack.m(),
        n: stack.n(),
        px: stack.px(),
        py: stack.py(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut writer, &header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    writer.write_all(b"\n")?;
    for &v in stack.data() {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<ScanStack4D> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut reader)?;
    let header: Header = serde_json::from_str(&header)
        .map_err(|e| Error::MalformedHeader(format!("invalid header JSON: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            header.magic
        )));
    }
    if header.version != VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.dtype != "f32" {
        return Err(Error::MalformedHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.order != "row-major" {
        return Err(Error::MalformedHeader(format!(
            "unsupported order {:?}",
            header.order
        )));
    }
    let expected = header
        .m
        .checked_mul(header.n)
        .and_then(|v| v.checked_mul(header.px))
        .and_then(|v| v.checked_mul(header.py))
        .ok_or_else(|| Error::MalformedHeader("dimension overflow".into()))?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected} f32 values ({} bytes)", expected * 4),
            actual: format!("{} bytes of payload", payload.len()),
        });
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    ScanStack4D::new(header.m, header.n, header.px, header.py, data, "raw")
}

fn read_header_line(reader: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte)? {
            0 => return Err(Error::MalformedHeader("missing header line".into())),
            _ => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > MAX_HEADER_BYTES {
                    return Err(Error::MalformedHeader("header line too long".into()));
                }
            }
        }
    }
    String::from_utf8(line).map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, header: &str, values: &[f32]) {
        let mut f = File::create(path).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(b"\n").unwrap();
        for v in values {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
    }

    fn header(m: usize, n: usize, px: usize, py: usize) -> String {
        format!(
            "{{\"magic\":\"stem4d\",\"version\":1,\"m\":{m},\"n\":{n},\"px\":{px},\"py\":{py},\
             \"dtype\":\"f32\",\"order\":\"row-major\"}}"
        )
    }

    #[test]
    fn reads_constant_stack() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ones.stem4d");
        write_raw(&path, &header(2, 2, 2, 2), &[1.0; 16]);
        let stack = read_stack(&path).unwrap();
        assert_eq!(stack.data(), &[1.0; 16]);
        assert_eq!(
            (stack.m(), stack.n(), stack.px(), stack.py()),
            (2, 2, 2, 2)
        );
    }

    #[test]
    fn short_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.stem4d");
        write_raw(&path, &header(2, 2, 2, 2), &[1.0; 15]);
        assert!(matches!(
            read_stack(&path).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn negative_value_reports_flat_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.stem4d");
        let mut values = vec![1.0f32; 16];
        values[5] = -0.5;
        write_raw(&path, &header(2, 2, 2, 2), &values);
        match read_stack(&path).unwrap_err() {
            Error::NegativeIntensity { index, value } => {
                assert_eq!(index, 5);
                assert_eq!(value, -0.5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn garbage_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stem4d");
        std::fs::write(&path, b"not json\n\x00\x00").unwrap();
        assert!(matches!(
            read_stack(&path).unwrap_err(),
            Error::MalformedHeader(_)
        ));
        let empty = dir.path().join("empty.stem4d");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(
            read_stack(&empty).unwrap_err(),
            Error::MalformedHeader(_)
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("magic.stem4d");
        let h = header(1, 1, 1, 1).replace("stem4d", "stem5d");
        write_raw(&path, &h, &[1.0]);
        assert!(matches!(
            read_stack(&path).unwrap_err(),
            Error::MalformedHeader(_)
        ));
    }
}
