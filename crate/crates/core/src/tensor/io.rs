//! `tensor v1` serialization: a text header line
//! `tensor v1 <rank> <dim0> <dim1> ...` followed by little-endian `f32` data.
//! Named records prefix each tensor with a `name <name>` line.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let mut header = format!("tensor v1 {}", t.shape().len());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

/// Reads one line including its terminator; `None` at clean end of input.
pub(crate) fn read_line<R: BufRead>(r: &mut R, path: &Path) -> Result<Option<String>> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if n == 0 {
        return Ok(None);
    }
    if !line.ends_with('\n') {
        return Err(Error::format(path, "truncated header line"));
    }
    line.pop();
    Ok(Some(line))
}

pub fn read_tensor<R: BufRead>(r: &mut R, path: &Path) -> Result<Tensor<f32>> {
    let header = read_line(r, path)?.ok_or_else(|| Error::format(path, "missing tensor header"))?;
    read_tensor_body(r, &header, path)
}

fn read_tensor_body<R: Read>(r: &mut R, header: &str, path: &Path) -> Result<Tensor<f32>> {
    let mut parts = header.split(' ');
    if parts.next() != Some("tensor") || parts.next() != Some("v1") {
        return Err(Error::format(path, format!("expected 'tensor v1' header, got '{header}'")));
    }
    let nums: Vec<usize> = parts
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("bad tensor header '{header}': {e}")))?;
    let (&rank, dims) = nums
        .split_first()
        .ok_or_else(|| Error::format(path, "tensor header lacks rank"))?;
    if dims.len() != rank {
        return Err(Error::format(
            path,
            format!("tensor header declares rank {rank} but lists {} dims", dims.len()),
        ));
    }
    let numel: usize = dims.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, format!("tensor data truncated (expected {numel} values)")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    writeln!(w, "name {name}")?;
    write_tensor(w, t)
}

/// Reads `name`/`tensor v1` records until end of input.
pub fn read_named_records<R: BufRead>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    while let Some(line) = read_line(r, path)? {
        let name = line
            .strip_prefix("name ")
            .ok_or_else(|| Error::format(path, format!("expected 'name <id>' record, got '{line}'")))?;
        let t = read_tensor(r, path)?;
        out.push((name.to_string(), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(buf.starts_with(b"tensor v1 2 2 1\n"));
        assert_eq!(buf.len(), 16 + 8);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_data_is_format_error() {
        let mut buf = b"tensor v1 1 4\n".to_vec();
        buf.extend_from_slice(&[0u8; 8]);
        let err = read_tensor(&mut Cursor::new(buf), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn named_records_round_trip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel).map(|i| ((i as u32 ^ seed) as f32).sin()).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_named(&mut buf, "a.b", &t).unwrap();
            write_named(&mut buf, "c", &t).unwrap();
            let recs = read_named_records(&mut Cursor::new(&buf), Path::new("mem")).unwrap();
            prop_assert_eq!(recs.len(), 2);
            prop_assert_eq!(&recs[0].0, "a.b");
            prop_assert_eq!(&recs[1].1, &t);
            let mut again = Vec::new();
            for (n, t) in &recs {
                write_named(&mut again, n, t).unwrap();
            }
            prop_assert_eq!(again, buf);
        }
    }
}
