//! Named-buffer flat format.
//!
//! ```text
//! u32 LE   buffer count
//! repeated:
//!   u32 LE   name length in bytes
//!   [u8]     UTF-8 name
//!   u32 LE   rows
//!   u32 LE   cols
//!   f64 LE   rows * cols values, row-major
//! u32 LE   CRC-32 (IEEE) of every preceding byte
//! ```

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn encode_named_buffers(buffers: &[(&str, &Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
    for (name, m) in buffers {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: need {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_named_buffers(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "checkpoint shorter than header and checksum".into(),
        ));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
    };
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("buffer name is not UTF-8: {e}")))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("buffer `{name}` size overflows")))?;
        let data = cur
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} buffers",
            body.len() - cur.pos
        )));
    }
    Ok(out)
}
