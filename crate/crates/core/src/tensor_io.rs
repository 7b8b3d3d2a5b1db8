//! Tensor files: each record is a one-line JSON header followed by
//! little-endian f32 values in row-major order.
//!
//! ```text
//! {"shape":[256,256,3],"name":"image","dtype":"f32"}\n<raw bytes>
//! ```
//! A parameter file is a plain concatenation of records.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ValueGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub name: String,
    pub dtype: String,
}

pub fn write_record<W: Write>(out: &mut W, name: &str, grid: &ValueGrid) -> Result<()> {
    let header = TensorHeader {
        shape: grid.shape().to_vec(),
        name: name.to_string(),
        dtype: "f32".into(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of input.
pub fn read_record<R: BufRead>(input: &mut R) -> Result<Option<(String, ValueGrid)>> {
    let mut line = Vec::new();
    if input.read_until(b'\n', &mut line)? == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("truncated tensor header".into()));
    }
    let header: TensorHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::Format(format!("bad tensor header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype '{}'", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("tensor '{}' data is truncated", header.name)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let grid = ValueGrid::from_vec(&header.shape, data)?;
    Ok(Some((header.name, grid)))
}

pub fn write_records<W: Write>(out: &mut W, tensors: &[(String, ValueGrid)]) -> Result<()> {
    for (name, grid) in tensors {
        write_record(out, name, grid)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<(String, ValueGrid)>> {
    let mut reader = BufReader::new(input);
    let mut out = Vec::new();
    while let Some(record) = read_record(&mut reader)? {
        out.push(record);
    }
    Ok(out)
}

pub fn save_tensor(path: &Path, name: &str, grid: &ValueGrid) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_record(&mut file, name, grid)?;
    file.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(String, ValueGrid)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    read_record(&mut reader)?.ok_or_else(|| Error::Format(format!("{} holds no tensor", path.display())))
}

pub fn save_tensors(path: &Path, tensors: &[(String, ValueGrid)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut file, tensors)?;
    file.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, ValueGrid)>> {
    read_records(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let grid = ValueGrid::from_vec(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, "x", &grid).unwrap();
        let header = br#"{"shape":[2],"name":"x","dtype":"f32"}"#;
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf[header.len()], b'\n');
        assert_eq!(&buf[header.len() + 1..], &[0, 0, 128, 63, 0, 0, 0, 191]);
    }

    #[test]
    fn truncated_and_bad_input() {
        let grid = ValueGrid::new(&[3, 3], 1.0).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, "x", &grid).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_records(&buf[..]).is_err());
        assert!(read_records(&b"{\"shape\":[1],\"name\":\"x\",\"dtype\":\"f64\"}\n\0\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_records(&b"not json\n"[..]).is_err());
        assert!(read_records(&b""[..]).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
            name in "[a-z.0-9_]{1,12}",
        ) {
            let n: usize = shape.iter().product();
            let mut rng = crate::tensor::seeded_rng(seed);
            let data: Vec<f64> = (0..n)
                .map(|_| f32::from_bits(rand::Rng::gen::<u32>(&mut rng) & 0xbfff_ffff) as f64)
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let grid = ValueGrid::from_vec(&shape, data).unwrap();
            let tensors = vec![(name.clone(), grid.clone()), ("second".to_string(), grid.clone())];
            let mut buf = Vec::new();
            write_records(&mut buf, &tensors).unwrap();
            let back = read_records(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), grid.shape());
            for (a, b) in back[0].1.data().iter().zip(grid.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
