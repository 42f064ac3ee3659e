//! `.fld` container: one UTF-8 JSON header line terminated by `\n`, then raw
//! little-endian `f64` values (component-major, nodes row-major, axis 0 slowest).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GridField, Rank, TorusGrid};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub n_points: usize,
    pub box_side: f64,
    pub rank: Rank,
    pub components: usize,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
}

impl FieldHeader {
    fn for_field<S: Real>(f: &GridField<S>) -> Self {
        let g = f.grid();
        Self {
            format: "fld".into(),
            version: 1,
            d: g.d,
            n_points: g.n_points,
            box_side: g.box_side,
            rank: f.rank(),
            components: f.n_components(),
            dtype: "f64".into(),
            byte_order: "LE".into(),
            layout: "component-major".into(),
        }
    }
}

pub fn write_field<S: Real>(path: impl AsRef<Path>, field: &GridField<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &FieldHeader::for_field(field))?;
    w.write_all(b"\n")?;
    for v in field.values() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field<S: Real>(path: impl AsRef<Path>) -> Result<GridField<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header terminator".into()));
    }
    let header: FieldHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.format != "fld" || header.dtype != "f64" || header.byte_order != "LE" {
        return Err(Error::Format(format!("unsupported header {header:?}")));
    }
    let grid = TorusGrid::new(header.d, header.n_points, header.box_side)?;
    if header.rank.components(grid.d) != header.components {
        return Err(Error::Format("component count does not match rank".into()));
    }
    let count = grid.nodes() * header.components;
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!("expected {} payload bytes, found {}", count * 8, bytes.len())));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    GridField::from_values(grid, header.rank, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(-1e6f64..1e6, 32), ch in 1usize..3) {
            let grid = TorusGrid::new(1, 16, 2.5).unwrap();
            let rank = Rank::Channels(ch);
            let field = GridField::from_values(grid, rank, vals[..16 * ch].to_vec()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.fld");
            write_field(&path, &field).unwrap();
            let back: GridField<f64> = read_field(&path).unwrap();
            prop_assert_eq!(back, field);
        }
    }

    #[test]
    fn header_is_first_line() {
        let grid = TorusGrid::new(2, 4, 1.0).unwrap();
        let field = GridField::<f64>::zeros(grid, Rank::Matrix);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fld");
        write_field(&path, &field).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["byte_order"], "LE");
        assert_eq!(header["rank"], "matrix");
        assert_eq!(bytes.len() - nl - 1, 16 * 4 * 8);
    }

    #[test]
    fn truncated_payload_rejected() {
        let grid = TorusGrid::new(1, 4, 1.0).unwrap();
        let field = GridField::<f64>::zeros(grid, Rank::Scalar);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fld");
        write_field(&path, &field).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_field::<f64>(&path), Err(Error::Format(_))));
    }
}
