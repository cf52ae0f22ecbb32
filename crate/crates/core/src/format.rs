//! Little-endian binary files.
//!
//! `SPC1` point clouds: magic, `u32` point count `N`, `u32` feature length
//! `c_in`, then `N` records of `3 + c_in` `f32` values (position first).
//!
//! `SPW1` weights: magic, `u32` heads `h`, head dim `d`, table length `L`,
//! then `W_q`, `W_k`, `W_v`, `W_proj` (row-major `c × c`, `f32`), then the
//! radial `t_r`, `t_theta`, `t_phi` tables and the cubic `t_x`, `t_y`, `t_z`
//! tables, each `L × h × d` `f32`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{AttentionParams, SphereWeights};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::numerics::{DenseMatrix, Real};
use crate::posenc::PosTables;
use crate::Error;

pub const CLOUD_MAGIC: [u8; 4] = *b"SPC1";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"SPW1";

/// Refuse headers implying absurd allocations (16 GiB of floats).
const MAX_FLOATS: u64 = 1 << 32;

fn put_u32(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Size(format!("{what} {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<T: Real>(w: &mut impl Write, values: impl IntoIterator<Item = T>) -> Result<()> {
    for v in values {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn get_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&expected)
        )));
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    if count as u64 > MAX_FLOATS {
        return Err(Error::Size(format!("header declares {count} values")));
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_cloud(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    w.write_all(&CLOUD_MAGIC)?;
    put_u32(w, cloud.len(), "point count")?;
    put_u32(w, cloud.feature_dim(), "feature length")?;
    for (i, p) in cloud.positions().iter().enumerate() {
        put_f32s(w, p.iter().copied())?;
        put_f32s(w, cloud.features().row(i).iter().copied())?;
    }
    Ok(())
}

pub fn read_cloud(r: &mut impl Read) -> Result<PointCloud> {
    get_magic(r, CLOUD_MAGIC)?;
    let n = get_u32(r)?;
    let c = get_u32(r)?;
    let data = get_f32s(r, n.checked_mul(c + 3).ok_or_else(|| Error::Size("header overflows".into()))?)?;
    expect_end(r)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("point cloud contains NaN or infinity".into()));
    }
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * c);
    for rec in data.chunks_exact(c + 3) {
        positions.push([rec[0] as f64, rec[1] as f64, rec[2] as f64]);
        features.extend(rec[3..].iter().map(|&v| v as f64));
    }
    PointCloud::new(positions, DenseMatrix::from_vec(n, c, features)?)
}

pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cloud(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_cloud(&mut BufReader::new(File::open(path)?))
}

pub fn write_weights<T: Real>(w: &mut impl Write, weights: &SphereWeights<T>) -> Result<()> {
    weights.validate()?;
    let p = &weights.params;
    w.write_all(&WEIGHTS_MAGIC)?;
    put_u32(w, p.heads, "head count")?;
    put_u32(w, p.head_dim, "head dim")?;
    put_u32(w, weights.table_len(), "table length")?;
    for (_, m) in p.named_weights() {
        put_f32s(w, m.data().iter().copied())?;
    }
    for tables in [&weights.tables_radial, &weights.tables_cubic] {
        for t in tables.tables() {
            put_f32s(w, t.iter().copied())?;
        }
    }
    Ok(())
}

pub fn read_weights<T: Real>(r: &mut impl Read) -> Result<SphereWeights<T>> {
    get_magic(r, WEIGHTS_MAGIC)?;
    let (h, d, l) = (get_u32(r)?, get_u32(r)?, get_u32(r)?);
    let c = h.checked_mul(d).ok_or_else(|| Error::Size("header overflows".into()))?;
    let mut matrix = || -> Result<DenseMatrix<T>> {
        let v = get_f32s(r, c * c)?;
        DenseMatrix::from_vec(c, c, v.into_iter().map(|x| T::of(x as f64)).collect())
    };
    let (w_q, w_k, w_v, w_proj) = (matrix()?, matrix()?, matrix()?, matrix()?);
    let params = AttentionParams::new(h, d, w_q, w_k, w_v, w_proj)?;
    let table_size = l.checked_mul(c).ok_or_else(|| Error::Size("header overflows".into()))?;
    let mut tables = || -> Result<PosTables<T>> {
        let mut read = || get_f32s(r, table_size).map(|v| v.into_iter().map(|x| T::of(x as f64)).collect::<Vec<T>>());
        PosTables::from_tables(l, h, d, [read()?, read()?, read()?])
    };
    let (tables_radial, tables_cubic) = (tables()?, tables()?);
    expect_end(r)?;
    let weights = SphereWeights { params, tables_radial, tables_cubic };
    weights.validate()?;
    Ok(weights)
}

pub fn save_weights<T: Real>(path: impl AsRef<Path>, weights: &SphereWeights<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<SphereWeights<T>> {
    read_weights(&mut BufReader::new(File::open(path)?))
}
