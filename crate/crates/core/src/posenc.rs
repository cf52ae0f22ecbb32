//! Relative position encoding: discretize a query/key offset into three
//! table indices, look up and sum the embeddings, and form the contextual
//! bias `q·p + k·p` added to attention logits.
//!
//! The radius uses exponential splitting (bin width doubles with every step
//! away from zero); angles and Cartesian offsets use uniform splitting. All
//! indices are shifted by `L/2` and saturate at the table ends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::geometry::SphericalCoord;
use crate::numerics::{dot, DenseMatrix, Real};
use crate::partition::{CubicWindowConfig, RadialWindowConfig};

/// Half-width of the default table initialization interval.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosEncConfig {
    /// Table length `L`; even and at least 4.
    pub table_len: usize,
    /// Width of the first radial bin, metres.
    pub a: f64,
    /// Uniform bin width for relative azimuth, degrees.
    pub interval_theta: f64,
    /// Uniform bin width for relative inclination, degrees.
    pub interval_phi: f64,
    /// Uniform bin widths for the cubic branch's x/y/z offsets, metres.
    pub cubic_interval: [f64; 3],
}

impl PosEncConfig {
    /// Derives bin sizes so the tables exactly span one window: angular and
    /// Cartesian intervals are `window / (L/2)`, and `a = r_max / 2^(L/2 - 1)`
    /// so the last radial bin ends at `r_max`.
    pub fn for_windows(radial: &RadialWindowConfig, cubic: &CubicWindowConfig, table_len: usize) -> Self {
        let half = (table_len / 2).max(1) as f64;
        Self {
            table_len,
            a: radial.r_max / 2f64.powi(table_len as i32 / 2 - 1),
            interval_theta: radial.delta_theta / half,
            interval_phi: radial.delta_phi / half,
            cubic_interval: cubic.side.map(|s| s / half),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.table_len < 4 || !self.table_len.is_multiple_of(2) {
            return Err(config_err!("table length must be even and >= 4, got {}", self.table_len));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.a) {
            return Err(config_err!("starting radial interval must be positive, got {}", self.a));
        }
        if !positive(self.interval_theta) || !positive(self.interval_phi) {
            return Err(config_err!("angular intervals must be positive"));
        }
        if !self.cubic_interval.iter().all(|&v| positive(v)) {
            return Err(config_err!("cubic intervals must be positive"));
        }
        Ok(())
    }

    pub fn radial_indexer(&self) -> PairIndexer {
        PairIndexer {
            table_len: self.table_len,
            splitting: Splitting::Radial {
                a: self.a,
                interval_theta: self.interval_theta,
                interval_phi: self.interval_phi,
            },
        }
    }

    pub fn cubic_indexer(&self) -> PairIndexer {
        PairIndexer { table_len: self.table_len, splitting: Splitting::Cubic { interval: self.cubic_interval } }
    }
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self::for_windows(&RadialWindowConfig::default(), &CubicWindowConfig::default(), 16)
    }
}

/// `ceil(log2(x))` for positive finite `x`, computed from the bit pattern
/// so exact powers of two land on the right side of every bin edge.
pub fn ceil_log2(x: f64) -> i64 {
    if x.is_infinite() {
        return i64::from(f64::MAX_EXP) + 1;
    }
    let bits = x.to_bits();
    let exponent = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exponent == 0 {
        if mantissa == 0 {
            return i64::MIN / 2;
        }
        let width = i64::from(64 - mantissa.leading_zeros());
        let exact = mantissa.is_power_of_two();
        return if exact { width - 1 } else { width } - 1074;
    }
    let e = exponent - 1023;
    if mantissa == 0 {
        e
    } else {
        e + 1
    }
}

#[inline]
fn clamp_index(raw: i64, table_len: usize) -> usize {
    raw.clamp(0, table_len as i64 - 1) as usize
}

/// Exponentially split index of a signed relative radius, in `[0, L)`.
pub fn exp_split_index(r: f64, a: f64, table_len: usize) -> usize {
    let raw = if r > 0.0 {
        ceil_log2(r / a).max(0)
    } else if r < 0.0 {
        -ceil_log2(-r / a).max(0) - 1
    } else {
        0
    };
    clamp_index(raw.saturating_add(table_len as i64 / 2), table_len)
}

/// Uniformly split index `floor(value / interval) + L/2`, in `[0, L)`.
pub fn uniform_split_index(value: f64, interval: f64, table_len: usize) -> usize {
    let bin = (value / interval).floor();
    // `as` saturates, and NaN maps to 0, the zero bin
    clamp_index((bin as i64).saturating_add(table_len as i64 / 2), table_len)
}

/// Wraps an angle difference in degrees to `(-180, 180]`.
///
/// `%` is exact, and so is the single ±360 correction (the operands are
/// within a factor of two), so tiny offsets keep their sign. `rem_euclid`
/// would round `-1e-16` up to `360` and then to `0`.
pub fn wrap_degrees(angle: f64) -> f64 {
    let w = angle % 360.0;
    if w > 180.0 {
        w - 360.0
    } else if w <= -180.0 {
        w + 360.0
    } else {
        w
    }
}

/// Offset of key `j` as seen from query `i` in spherical coordinates.
#[inline]
pub fn relative_spherical(i: &SphericalCoord, j: &SphericalCoord) -> [f64; 3] {
    [i.r - j.r, wrap_degrees(i.theta - j.theta), i.phi - j.phi]
}

#[inline]
pub fn relative_cartesian(i: &[f64; 3], j: &[f64; 3]) -> [f64; 3] {
    [i[0] - j[0], i[1] - j[1], i[2] - j[2]]
}

/// Dense `n × n` table of pairwise relative coordinates (query-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RelCoords {
    n: usize,
    data: Vec<[f64; 3]>,
}

impl RelCoords {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn spherical(coords: &[SphericalCoord]) -> Self {
        Self::from_fn(coords.len(), |i, j| relative_spherical(&coords[i], &coords[j]))
    }

    pub fn cartesian(positions: &[[f64; 3]]) -> Self {
        Self::from_fn(positions.len(), |i, j| relative_cartesian(&positions[i], &positions[j]))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        self.data[i * self.n + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Splitting {
    /// Exponential on radius, uniform on azimuth and inclination.
    Radial { a: f64, interval_theta: f64, interval_phi: f64 },
    /// Uniform on all three Cartesian axes.
    Cubic { interval: [f64; 3] },
}

/// Maps relative coordinates to the three table indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairIndexer {
    pub table_len: usize,
    pub splitting: Splitting,
}

impl PairIndexer {
    #[inline]
    pub fn index(&self, rel: [f64; 3]) -> [usize; 3] {
        let l = self.table_len;
        match self.splitting {
            Splitting::Radial { a, interval_theta, interval_phi } => [
                exp_split_index(rel[0], a, l),
                uniform_split_index(rel[1], interval_theta, l),
                uniform_split_index(rel[2], interval_phi, l),
            ],
            Splitting::Cubic { interval } => [0, 1, 2].map(|ax| uniform_split_index(rel[ax], interval[ax], l)),
        }
    }

    /// Indices for every pair in `rel`, query-major.
    pub fn index_all(&self, rel: &RelCoords) -> Vec<[usize; 3]> {
        rel.data.iter().map(|&r| self.index(r)).collect()
    }
}

/// Three embedding tables of shape `L × h × d`, one per relative axis.
///
/// For the radial branch the axes are `(r, theta, phi)`; for the cubic
/// branch `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosTables<T> {
    table_len: usize,
    heads: usize,
    head_dim: usize,
    tables: [Vec<T>; 3],
}

impl<T: Real> PosTables<T> {
    pub fn zeros(table_len: usize, heads: usize, head_dim: usize) -> Self {
        let len = table_len * heads * head_dim;
        Self { table_len, heads, head_dim, tables: [vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]] }
    }

    pub fn from_tables(table_len: usize, heads: usize, head_dim: usize, tables: [Vec<T>; 3]) -> Result<Self> {
        let len = table_len * heads * head_dim;
        if tables.iter().any(|t| t.len() != len) {
            return Err(shape_err!("each table must hold {table_len}x{heads}x{head_dim} = {len} values"));
        }
        if tables.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("position tables contain NaN or infinity".into()));
        }
        Ok(Self { table_len, heads, head_dim, tables })
    }

    /// Uniform values in `[-scale, scale]`.
    pub fn random(table_len: usize, heads: usize, head_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(table_len, heads, head_dim);
        for table in &mut t.tables {
            for v in table.iter_mut() {
                *v = T::of(rng.random_range(-scale..=scale));
            }
        }
        t
    }

    pub fn table_len(&self) -> usize {
        self.table_len
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn table(&self, axis: usize) -> &[T] {
        &self.tables[axis]
    }

    pub fn table_mut(&mut self, axis: usize) -> &mut [T] {
        &mut self.tables[axis]
    }

    pub fn tables(&self) -> &[Vec<T>; 3] {
        &self.tables
    }

    #[inline]
    fn offset(&self, idx: usize, head: usize) -> usize {
        (idx * self.heads + head) * self.head_dim
    }

    /// The `d`-vector for one table entry and head.
    #[inline]
    pub fn entry(&self, axis: usize, idx: usize, head: usize) -> &[T] {
        let o = self.offset(idx, head);
        &self.tables[axis][o..o + self.head_dim]
    }

    /// Writes `p_k = t_0[i0,k] + t_1[i1,k] + t_2[i2,k]` into `out`. Indices must be in range.
    #[inline]
    pub fn encoding_for_head(&self, idx: [usize; 3], head: usize, out: &mut [T]) {
        let (a, b, c) = (self.entry(0, idx[0], head), self.entry(1, idx[1], head), self.entry(2, idx[2], head));
        for (k, o) in out.iter_mut().enumerate() {
            *o = a[k] + b[k] + c[k];
        }
    }

    /// Adds `grad` into all three entries addressed by `idx` for `head`.
    #[inline]
    pub fn scatter_add(&mut self, idx: [usize; 3], head: usize, grad: &[T]) {
        for (axis, &i) in idx.iter().enumerate() {
            let o = self.offset(i, head);
            for (t, &g) in self.tables[axis][o..o + self.head_dim].iter_mut().zip(grad) {
                *t = *t + g;
            }
        }
    }

    /// Summed encoding `p` for all heads, laid out `h × d`.
    pub fn lookup_pair_encoding(&self, idx: [usize; 3]) -> Result<Vec<T>> {
        if let Some(bad) = idx.iter().find(|&&i| i >= self.table_len) {
            return Err(Error::Index(format!("table index {bad} not below table length {}", self.table_len)));
        }
        let mut p = vec![T::zero(); self.heads * self.head_dim];
        for (head, out) in p.chunks_mut(self.head_dim).enumerate() {
            self.encoding_for_head(idx, head, out);
        }
        Ok(p)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if (self.table_len, self.heads, self.head_dim) != (other.table_len, other.heads, other.head_dim) {
            return Err(shape_err!("position tables differ in shape"));
        }
        for (mine, theirs) in self.tables.iter_mut().zip(&other.tables) {
            for (a, &b) in mine.iter_mut().zip(theirs) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> PosTables<U> {
        PosTables {
            table_len: self.table_len,
            heads: self.heads,
            head_dim: self.head_dim,
            tables: self.tables.clone().map(|t| t.into_iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// Contextual position bias for every head and pair:
/// `bias[k][i][j] = q[i,k]·p[i,j,k] + key[j,k]·p[i,j,k]`.
///
/// `query` and `key` are `n × (h·d)`; `pair_encodings` is `n × n × h × d`.
pub fn position_bias<T: Real>(
    query: &DenseMatrix<T>,
    key: &DenseMatrix<T>,
    heads: usize,
    head_dim: usize,
    pair_encodings: &[T],
) -> Result<Vec<DenseMatrix<T>>> {
    let n = query.rows();
    let c = heads * head_dim;
    if query.cols() != c || key.shape() != (n, c) || pair_encodings.len() != n * n * c {
        return Err(shape_err!(
            "position bias expects q, k of {n}x{c} and {} pair encodings, got {:?}, {:?}, {}",
            n * n * c,
            query.shape(),
            key.shape(),
            pair_encodings.len()
        ));
    }
    Ok((0..heads)
        .map(|h| {
            let cols = h * head_dim..(h + 1) * head_dim;
            DenseMatrix::from_fn(n, n, |i, j| {
                let p = &pair_encodings[(i * n + j) * c..][cols.clone()];
                dot(&query.row(i)[cols.clone()], p) + dot(&key.row(j)[cols.clone()], p)
            })
        })
        .collect())
}
