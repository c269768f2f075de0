//! Versioned little-endian tensor container shared by backbone and adapter
//! checkpoints.
//!
//! Layout: `magic[4] | version u32 | header_len u32 | header (JSON) |
//! n_tensors u32 | tensors…`, each tensor `name_len u32 | name | ndims u32 |
//! dims u32… | values f32…`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const VERSION: u32 = 1;

pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn take(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))?;
        let (_, m) = self.tensors.swap_remove(i);
        if m.shape() != (rows, cols) {
            return Err(Error::ArtifactMismatch {
                what: format!("tensor `{name}` shape"),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        Ok(m)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write<W: Write>(mut w: W, magic: &[u8; 4], header: &str, tensors: &[(&str, &Matrix)]) -> Result<()> {
    w.write_all(magic)?;
    put_u32(&mut w, VERSION as usize)?;
    put_u32(&mut w, header.len())?;
    w.write_all(header.as_bytes())?;
    put_u32(&mut w, tensors.len())?;
    for (name, m) in tensors {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, 2)?;
        put_u32(&mut w, m.rows())?;
        put_u32(&mut w, m.cols())?;
        let mut buf = Vec::with_capacity(m.data().len() * 4);
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<Container> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(
            "checkpoint",
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
        ));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let hlen = get_u32(&mut r)?;
    let mut h = vec![0u8; hlen];
    r.read_exact(&mut h)?;
    let header = String::from_utf8(h).map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
    let n = get_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = get_u32(&mut r)?;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let ndims = get_u32(&mut r)?;
        let dims: Vec<usize> = (0..ndims).map(|_| get_u32(&mut r)).collect::<Result<_>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(Error::format("checkpoint", format!("tensor `{name}` has {ndims} dims"))),
        };
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(Container { header, tensors })
}
