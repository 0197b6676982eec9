//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ACORTCKP"
//! version  1 byte
//! count    u32
//! count × record:
//!   name_len u32, name (UTF-8)
//!   ndim u32, ndim × u64 dims
//!   payload: product(dims) × f64
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Parameter, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACORTCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

/// Writes each parameter once, in the given order, under its own name.
pub fn write_checkpoint<W: Write>(mut out: W, params: &[Parameter]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name().to_string()) {
            return Err(TensorError::Checkpoint(format!("duplicate parameter name {}", p.name())));
        }
    }
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_all(&[CHECKPOINT_VERSION]).map_err(io_err)?;
    out.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for p in params {
        let value = p.value();
        let name = p.name().as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(name).map_err(io_err)?;
        out.write_all(&(value.shape().len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in value.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let mut payload = Vec::with_capacity(value.len() * 8);
        for v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload).map_err(io_err)?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(io_err)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf).map_err(io_err)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads every `(name, tensor)` record.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic header".into()));
    }
    let mut version = [0u8; 1];
    input.read_exact(&mut version).map_err(io_err)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(&mut input)?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut input)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut payload = vec![0u8; len * 8];
        input.read_exact(&mut payload).map_err(io_err)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn save_checkpoint(path: &Path, params: &[Parameter]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    write_checkpoint(&mut out, params)?;
    out.flush().map_err(io_err)
}

/// Loads a checkpoint into `params`, matching records by name. Every
/// parameter must be present with the same shape, and no record may be left
/// over.
pub fn load_checkpoint(path: &Path, params: &[Parameter]) -> Result<()> {
    let file = std::fs::File::open(path).map_err(io_err)?;
    let records = read_checkpoint(std::io::BufReader::new(file))?;
    assign_records(records, params)
}

pub(crate) fn assign_records(records: Vec<(String, Tensor)>, params: &[Parameter]) -> Result<()> {
    let mut by_name: HashMap<String, Tensor> = records.into_iter().collect();
    for p in params {
        let value = by_name
            .remove(p.name())
            .ok_or_else(|| TensorError::Checkpoint(format!("missing record {}", p.name())))?;
        p.set_value(value)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(TensorError::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Parameter> {
        vec![
            Parameter::new("a.weight", Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1]).unwrap()),
            Parameter::new("a.bias", Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap()),
        ]
    }

    #[test]
    fn bit_exact_round_trip() {
        let src = params();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &src).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        assert_eq!(buf[8], CHECKPOINT_VERSION);

        let dst = vec![
            Parameter::new("a.bias", Tensor::zeros(vec![3])),
            Parameter::new("a.weight", Tensor::zeros(vec![2, 3])),
        ];
        assign_records(read_checkpoint(&buf[..]).unwrap(), &dst).unwrap();
        for (s, d) in src.iter().zip(dst.iter().rev()) {
            let (sv, dv) = (s.value(), d.value());
            assert_eq!(sv.shape(), dv.shape());
            assert!(sv.data().iter().zip(dv.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &[dst[1].clone(), dst[0].clone()]).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad.push(0);
        assert!(read_checkpoint(&bad[..]).is_err());

        let wrong_shape = vec![
            Parameter::new("a.weight", Tensor::zeros(vec![3, 2])),
            Parameter::new("a.bias", Tensor::zeros(vec![3])),
        ];
        assert!(assign_records(read_checkpoint(&buf[..]).unwrap(), &wrong_shape).is_err());
        let missing = vec![Parameter::new("a.weight", Tensor::zeros(vec![2, 3]))];
        assert!(assign_records(read_checkpoint(&buf[..]).unwrap(), &missing).is_err());
    }
}
