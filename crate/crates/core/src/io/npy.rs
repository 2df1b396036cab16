//! Minimal npy (version 1.0) reader/writer: C-order little-endian f32/f64
//! arrays only. Files written here load in numpy unchanged and vice versa.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// Reads an npy file, widening f32 payloads to f64. Returns `(shape, data)`.
pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file too short for npy magic".into()))?;
    if magic[..6] != MAGIC {
        return Err(Error::MalformedHeader("bad npy magic".into()));
    }
    if magic[6] != 1 || magic[7] != 0 {
        return Err(Error::MalformedHeader(format!(
            "unsupported npy version {}.{}",
            magic[6], magic[7]
        )));
    }
    let mut len_bytes = [0u8; 2];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::MalformedHeader("truncated npy header length".into()))?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::MalformedHeader("truncated npy header".into()))?;
    let header = String::from_utf8(header)
        .map_err(|_| Error::MalformedHeader("npy header is not UTF-8".into()))?;

    let descr = extract_value(&header, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let item_size = match descr {
        "<f4" => 4,
        "<f8" => 8,
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported npy dtype {other:?} (only <f4 and <f8)"
            )))
        }
    };
    let fortran = extract_value(&header, "fortran_order")?;
    if fortran.trim() != "False" {
        return Err(Error::MalformedHeader(
            "Fortran-order npy arrays are not supported".into(),
        ));
    }
    let shape = parse_shape(&extract_value(&header, "shape")?)?;
    let count: usize = shape.iter().product();

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != count * item_size {
        return Err(Error::ShapeMismatch {
            expected: format!("{count} values ({} bytes)", count * item_size),
            actual: format!("{} bytes of payload", payload.len()),
        });
    }
    let data: Vec<f64> = match item_size {
        4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Ok((shape, data))
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut writer = header_writer(path, shape, "<f4", data.len())?;
    for &v in data {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_f64(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut writer = header_writer(path, shape, "<f8", data.len())?;
    for &v in data {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

fn header_writer(
    path: &Path,
    shape: &[usize],
    descr: &str,
    len: usize,
) -> Result<BufWriter<File>> {
    let count: usize = shape.iter().product();
    if count != len {
        return Err(Error::ShapeMismatch {
            expected: format!("{count} values for shape {shape:?}"),
            actual: format!("{len} values"),
        });
    }
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // Pad so that magic + version + length field + header is 64-byte aligned.
    let unpadded = 10 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat(' ').take(padding));
    dict.push('\n');

    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    Ok(writer)
}

/// Pulls the raw value text for `key` out of the header dict.
fn extract_value(header: &str, key: &str) -> Result<String> {
    let pattern = format!("'{key}':");
    let start = header
        .find(&pattern)
        .ok_or_else(|| Error::MalformedHeader(format!("npy header missing {key:?}")))?
        + pattern.len();
    let rest = &header[start..];
    let value = if key == "shape" {
        let open = rest
            .find('(')
            .ok_or_else(|| Error::MalformedHeader("npy shape is not a tuple".into()))?;
        let close = rest
            .find(')')
            .ok_or_else(|| Error::MalformedHeader("unterminated npy shape tuple".into()))?;
        rest[open..=close].to_string()
    } else {
        let end = rest
            .find(',')
            .ok_or_else(|| Error::MalformedHeader(format!("unterminated {key:?} entry")))?;
        rest[..end].trim().to_string()
    };
    Ok(value)
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    let inner = text.trim().trim_start_matches('(').trim_end_matches(')');
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let dim: usize = part
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad npy shape entry {part:?}")))?;
        shape.push(dim);
    }
    if shape.is_empty() {
        return Err(Error::MalformedHeader("scalar npy arrays unsupported".into()));
    }
    Ok(shape)
}
