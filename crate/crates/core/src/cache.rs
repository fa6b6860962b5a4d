//! Binary tube cache.
//!
//! Layout (little-endian): the 8 magic bytes `RATUBE01`, a `u8` axis count,
//! per axis `f64` lower, `f64` upper and `u32` point count, then every node
//! value as `f32` in row-major order. Only 4-D and 6-D fields are accepted on
//! read.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use thiserror::Error;

use crate::grid::{Axis, Field, Grid, GridError, Scalar};

pub const MAGIC: &[u8; 8] = b"RATUBE01";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported dimension count {0} (expected 4 or 6)")]
    BadDims(u8),
    #[error("value section holds {actual} bytes, expected {expected}")]
    ValueCount { expected: u64, actual: u64 },
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
    #[error("bad metadata: {0}")]
    Meta(String),
}

pub fn write_field<T: Scalar, W: Write>(field: &Field<T>, mut w: W) -> io::Result<()> {
    let grid = field.grid();
    w.write_all(MAGIC)?;
    w.write_all(&[grid.dims() as u8])?;
    for a in grid.axes() {
        w.write_all(&a.lower.to_le_bytes())?;
        w.write_all(&a.upper.to_le_bytes())?;
        w.write_all(&(a.points as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in field.values().chunks(1 << 14) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn read_field<R: Read>(mut r: R) -> Result<Field<f32>, CacheError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CacheError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let mut dims = [0u8; 1];
    r.read_exact(&mut dims)?;
    let dims = dims[0];
    if dims != 4 && dims != 6 {
        return Err(CacheError::BadDims(dims));
    }
    let mut axes = Vec::with_capacity(dims as usize);
    for _ in 0..dims {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let lower = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let upper = f64::from_le_bytes(b8);
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let points = u32::from_le_bytes(b4) as usize;
        axes.push(Axis {
            lower,
            upper,
            points,
        });
    }
    let grid = Grid::new(axes)?;
    let expected = grid.len() as u64 * 4;
    let short = |actual: u64| CacheError::ValueCount { expected, actual };
    let mut values = Vec::with_capacity(grid.len());
    let mut buf = vec![0u8; 1 << 16];
    let mut remaining = grid.len();
    while remaining > 0 {
        let take = remaining.min(buf.len() / 4);
        let chunk = &mut buf[..take * 4];
        r.read_exact(chunk)
            .map_err(|_| short(4 * (grid.len() - remaining) as u64))?;
        values.extend(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        remaining -= take;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(short(expected + 1));
    }
    Ok(Field::new(grid, values)?)
}

pub fn save(field: &Field<impl Scalar>, path: &Path) -> io::Result<()> {
    write_field(field, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Field<f32>, CacheError> {
    read_field(BufReader::new(File::open(path)?))
}

/// Solve record stored next to a cache file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeMeta {
    pub hash: String,
    pub game: String,
    pub converged: bool,
    pub steps: usize,
    pub time: f64,
    pub dt: f64,
    pub final_rate: f64,
    /// Wall-clock solve time.
    pub seconds: f64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_meta(meta: &TubeMeta, path: &Path) -> io::Result<()> {
    let text = serde_json::to_string_pretty(meta).map_err(io::Error::other)?;
    fs::write(meta_path(path), text + "\n")
}

pub fn load_meta(path: &Path) -> Result<TubeMeta, CacheError> {
    let text = fs::read_to_string(meta_path(path))?;
    serde_json::from_str(&text).map_err(|e| CacheError::Meta(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field4(seed: u64) -> Field<f64> {
        let g = Grid::uniform(4, -1.0, 1.0, 5).unwrap();
        Field::from_fn(g, |x| {
            (seed as f64 * 0.37 + x[0] * 1.3 - x[1] * x[2] + x[3].sin()).cos()
        })
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let f = field4(1);
        let mut bytes = Vec::new();
        write_field(&f, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"RATUBE01");
        assert_eq!(bytes[8], 4);
        assert_eq!(f64::from_le_bytes(bytes[9..17].try_into().unwrap()), -1.0);
        assert_eq!(f64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1.0);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 9 + 4 * 20 + 625 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let f = field4(2);
        let mut bytes = Vec::new();
        write_field(&f, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_field(&bad[..]), Err(CacheError::BadMagic)));

        let mut bad = bytes.clone();
        bad[8] = 3;
        assert!(matches!(read_field(&bad[..]), Err(CacheError::BadDims(3))));

        let short = &bytes[..bytes.len() - 2];
        assert!(matches!(read_field(short), Err(CacheError::ValueCount { .. })));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(read_field(&long[..]), Err(CacheError::ValueCount { .. })));
    }

    #[test]
    fn rejects_two_dimensional() {
        let g = Grid::uniform(2, 0.0, 1.0, 3).unwrap();
        let f = Field::<f64>::constant(g, 1.0).unwrap();
        let mut bytes = Vec::new();
        write_field(&f, &mut bytes).unwrap();
        assert!(matches!(read_field(&bytes[..]), Err(CacheError::BadDims(2))));
    }

    #[test]
    fn meta_sits_next_to_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t11.bin");
        let meta = TubeMeta {
            hash: "ab".repeat(32),
            game: "1v1".into(),
            converged: true,
            steps: 120,
            time: 1.5,
            dt: 0.0125,
            final_rate: 4e-4,
            seconds: 2.5,
        };
        save_meta(&meta, &path).unwrap();
        assert!(dir.path().join("t11.bin.json").exists());
        assert_eq!(load_meta(&path).unwrap(), meta);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_at_f32(seed in 0u64..500) {
            let f: Field<f32> = field4(seed).convert();
            let mut bytes = Vec::new();
            write_field(&f, &mut bytes).unwrap();
            let back = read_field(&bytes[..]).unwrap();
            prop_assert_eq!(back.grid(), f.grid());
            for (a, b) in back.values().iter().zip(f.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
