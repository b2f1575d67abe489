//! Binary serialization of parameter vectors.
//!
//! Format (all little-endian): magic `TRQP`, format version `u32`, layer
//! count `u32`, layer sizes as `u32` each, then the flat `f64` payload.
//! The activation is runtime metadata and is supplied on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{param_count, Activation, ParamVector};

const MAGIC: &[u8; 4] = b"TRQP";
const VERSION: u32 = 1;

pub fn save_params(params: &ParamVector, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.layer_sizes().len() as u32).to_le_bytes())?;
    for &n in params.layer_sizes() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for &v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path, activation: Activation) -> Result<ParamVector> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |what: &str| Error::CorruptFile {
        path: path.display().to_string(),
        what: what.to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let n_layers = u32::from_le_bytes(u32buf) as usize;
    if n_layers < 2 || n_layers > 1024 {
        return Err(corrupt(&format!("implausible layer count {n_layers}")));
    }
    let mut sizes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        r.read_exact(&mut u32buf)?;
        sizes.push(u32::from_le_bytes(u32buf) as usize);
    }
    let count = param_count(&sizes);
    let mut values = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut f64buf)?;
        values.push(f64::from_le_bytes(f64buf));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(corrupt("trailing bytes after payload"));
    }
    ParamVector::from_values(&sizes, activation, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp_init;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.trqp");
        let p = mlp_init(&[3, 16, 2], Activation::Gelu, 99).unwrap();
        save_params(&p, &path).unwrap();
        let q = load_params(&path, Activation::Gelu).unwrap();
        assert_eq!(p.layer_sizes(), q.layer_sizes());
        assert_eq!(p.values(), q.values());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.trqp");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_params(&path, Activation::Gelu),
            Err(Error::CorruptFile { .. })
        ));
    }
}
