//! Binary dump of named tensors.
//!
//! Layout (little endian):
//! `b"MRLCKPT1"`, `u64` metadata length, metadata bytes (UTF-8),
//! `u64` tensor count, then per tensor: `u32` name length, name bytes,
//! `u64` rows, `u64` cols, `rows * cols` `f64` values in row-major order.
//! Values are stored bit-exact.

use std::io::{Read, Write};

use ndarray::Array2;

use super::NetError;

const MAGIC: &[u8; 8] = b"MRLCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f64>,
}

pub fn write_tensors<W: Write>(mut w: W, meta: &str, tensors: &[NamedTensor]) -> Result<(), NetError> {
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.value.nrows() as u64).to_le_bytes())?;
        w.write_all(&(t.value.ncols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.value.len() * 8);
        for v in t.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<(String, Vec<NamedTensor>), NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Format("not a checkpoint file (bad magic)".into()));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|_| NetError::Format("metadata is not UTF-8".into()))?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NetError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| NetError::Format(e.to_string()))?;
        tensors.push(NamedTensor { name, value });
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_round_trip() {
        let tensors = vec![
            NamedTensor {
                name: "a.w".into(),
                value: array![[0.1, -1e-300], [f64::MAX, 1.0 / 3.0]],
            },
            NamedTensor {
                name: "skeleton.jsmlp.37.0.b".into(),
                value: Array2::zeros((1, 0)),
            },
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, "{\"epoch\":3}", &tensors).unwrap();
        let (meta, back) = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"epoch\":3}");
        assert_eq!(back, tensors);
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(read_tensors(&b"NOTACKPT........"[..]), Err(NetError::Format(_))));
    }
}
