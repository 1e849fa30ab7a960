//! Flat named-tensor archive shared by all checkpoints.
//!
//! Layout: magic line `GDTA1`, one JSON header line listing `(name, shape)`
//! in order, then the raw little-endian f64 data for each tensor back to
//! back. Entries are written in sorted-name order so archives are
//! byte-reproducible.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "GDTA1";

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_tensors(tensors: &BTreeMap<String, ArrayD<f64>>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        entries: tensors
            .iter()
            .map(|(name, a)| Entry { name: name.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for a in tensors.values() {
        for v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = String::new();
    read_line(&mut r, &mut magic)?;
    if magic.trim_end() != MAGIC {
        return Err(Error::Archive(format!("bad magic {magic:?} in {path:?}")));
    }
    let mut header_line = String::new();
    read_line(&mut r, &mut header_line)?;
    let header: Header = serde_json::from_str(&header_line)?;
    let mut out = BTreeMap::new();
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Archive(format!("truncated tensor {}", e.name)))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(e.shape.clone(), data)
            .map_err(|err| Error::Archive(format!("tensor {}: {err}", e.name)))?;
        out.insert(e.name, arr);
    }
    Ok(out)
}

fn read_line<R: Read>(r: &mut R, out: &mut String) -> Result<()> {
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            return Ok(());
        }
        out.push(byte[0] as char);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert(
            "a.weight".to_string(),
            Array::linspace(-1.0f64, 1.0, 24).into_shape_with_order(vec![2, 3, 4]).unwrap(),
        );
        m.insert("b.bias".to_string(), Array::from_vec(vec![0.1, -0.2]).into_dyn());
        let path = dir.path().join("t.gda");
        save_tensors(&m, &path).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Array::from_vec(vec![1.0, 2.0, 3.0]).into_dyn());
        let p1 = dir.path().join("1.gda");
        let p2 = dir.path().join("2.gda");
        save_tensors(&m, &p1).unwrap();
        save_tensors(&m, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gda");
        std::fs::write(&path, b"NOPE\n{}\n").unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::Archive(_))));
    }
}
