//! Window assignment and CSR-style bucketing of tokens.
//!
//! Radial windows split space only along azimuth and inclination, so each
//! window is a thin pyramid from the sensor outwards. Cubic windows are the
//! usual axis-aligned boxes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{spherical_coords, SphericalCoord};

/// Integer window key; compared lexicographically.
pub type WindowKey = [i64; 3];

/// Sizes below this are sorted on the calling thread.
const PAR_SORT_THRESHOLD: usize = 1 << 15;

/// Windows larger than this get a bounding-box reach bound instead of the
/// exact pairwise maximum.
pub const EXACT_REACH_LIMIT: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadialWindowConfig {
    /// Azimuth window size, degrees.
    pub delta_theta: f64,
    /// Inclination window size, degrees.
    pub delta_phi: f64,
    /// Radial extent, metres. Tokens beyond it go to a per-sector overflow window.
    pub r_max: f64,
}

impl Default for RadialWindowConfig {
    fn default() -> Self {
        Self { delta_theta: 2.0, delta_phi: 2.0, r_max: 120.0 }
    }
}

impl RadialWindowConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.delta_theta) || self.delta_theta > 360.0 {
            return Err(config_err!("delta_theta must lie in (0, 360], got {}", self.delta_theta));
        }
        if !ok(self.delta_phi) || self.delta_phi > 180.0 {
            return Err(config_err!("delta_phi must lie in (0, 180], got {}", self.delta_phi));
        }
        if !ok(self.r_max) {
            return Err(config_err!("r_max must be positive, got {}", self.r_max));
        }
        Ok(())
    }

    /// Number of distinct azimuth sectors, counting a partial last one.
    pub fn theta_bins(&self) -> i64 {
        (360.0 / self.delta_theta).ceil() as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CubicWindowConfig {
    /// Window side lengths along x, y, z in metres.
    pub side: [f64; 3],
}

impl Default for CubicWindowConfig {
    fn default() -> Self {
        Self { side: [5.0; 3] }
    }
}

impl CubicWindowConfig {
    pub fn uniform(side: f64) -> Self {
        Self { side: [side; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side.iter().all(|&s| s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(config_err!("cubic window sides must be positive, got {:?}", self.side))
        }
    }
}

/// `(floor(theta / Δθ), floor(phi / Δφ))`.
#[inline]
pub fn radial_window_index(s: &SphericalCoord, cfg: &RadialWindowConfig) -> (i64, i64) {
    ((s.theta / cfg.delta_theta).floor() as i64, (s.phi / cfg.delta_phi).floor() as i64)
}

/// Radial window key: the angular sector plus a band flag that is 1 for
/// tokens beyond `r_max`.
#[inline]
pub fn radial_key(s: &SphericalCoord, cfg: &RadialWindowConfig) -> WindowKey {
    let (it, ip) = radial_window_index(s, cfg);
    [it, ip, i64::from(s.r > cfg.r_max)]
}

/// Componentwise `floor(coord / side)`.
#[inline]
pub fn cubic_window_index(p: &[f64; 3], cfg: &CubicWindowConfig) -> WindowKey {
    [0, 1, 2].map(|a| (p[a] / cfg.side[a]).floor() as i64)
}

pub fn radial_keys_from_spherical(coords: &[SphericalCoord], cfg: &RadialWindowConfig) -> Vec<WindowKey> {
    coords.iter().map(|s| radial_key(s, cfg)).collect()
}

pub fn radial_keys(positions: &[[f64; 3]], origin: [f64; 3], cfg: &RadialWindowConfig) -> Vec<WindowKey> {
    radial_keys_from_spherical(&spherical_coords(positions, origin), cfg)
}

pub fn cubic_keys(positions: &[[f64; 3]], cfg: &CubicWindowConfig) -> Vec<WindowKey> {
    positions.iter().map(|p| cubic_window_index(p, cfg)).collect()
}

/// Tokens grouped into non-overlapping windows.
///
/// Window `w` holds `token_ids[offsets[w]..offsets[w + 1]]`, ascending.
/// Windows are ordered by key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WindowPartition {
    offsets: Vec<usize>,
    token_ids: Vec<usize>,
    keys: Vec<WindowKey>,
}

impl WindowPartition {
    pub fn window_count(&self) -> usize {
        self.keys.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn keys(&self) -> &[WindowKey] {
        &self.keys
    }

    pub fn window(&self, w: usize) -> &[usize] {
        &self.token_ids[self.offsets[w]..self.offsets[w + 1]]
    }

    pub fn windows(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        self.offsets.windows(2).map(|o| &self.token_ids[o[0]..o[1]])
    }

    /// For each token, the index of the window that holds it.
    pub fn window_of_tokens(&self) -> Vec<usize> {
        let mut owner = vec![0; self.token_ids.len()];
        for (w, ids) in self.windows().enumerate() {
            for &t in ids {
                owner[t] = w;
            }
        }
        owner
    }

    /// Checks every structural invariant; used by tests and debug assertions.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.token_ids.len();
        if self.offsets.len() != self.keys.len() + 1 {
            return Err("offsets length must be window_count + 1".into());
        }
        if self.offsets[0] != 0 || *self.offsets.last().unwrap() != n {
            return Err("offsets must start at 0 and end at N".into());
        }
        if self.offsets.windows(2).any(|o| o[0] > o[1]) {
            return Err("offsets must be non-decreasing".into());
        }
        if self.keys.windows(2).any(|k| k[0] >= k[1]) {
            return Err("window keys must be strictly ascending".into());
        }
        let mut seen = vec![false; n];
        for ids in self.windows() {
            if ids.windows(2).any(|p| p[0] >= p[1]) {
                return Err("token ids within a window must ascend".into());
            }
            for &t in ids {
                if t >= n || seen[t] {
                    return Err(format!("token {t} missing from or repeated in the permutation"));
                }
                seen[t] = true;
            }
        }
        Ok(())
    }
}

/// Groups token indices by equal key.
pub fn bucket(keys: &[WindowKey]) -> WindowPartition {
    let mut order: Vec<(WindowKey, usize)> = keys.iter().copied().zip(0..).collect();
    // (key, id) pairs are unique, so an unstable sort is still deterministic
    if order.len() >= PAR_SORT_THRESHOLD {
        order.par_sort_unstable();
    } else {
        order.sort_unstable();
    }

    let mut offsets = vec![0];
    let mut window_keys = Vec::new();
    let mut token_ids = Vec::with_capacity(order.len());
    for (i, (key, id)) in order.into_iter().enumerate() {
        if window_keys.last() != Some(&key) {
            if i > 0 {
                offsets.push(i);
            }
            window_keys.push(key);
        }
        token_ids.push(id);
    }
    if !token_ids.is_empty() {
        offsets.push(token_ids.len());
    }
    WindowPartition { offsets, token_ids, keys: window_keys }
}

pub fn radial_partition(positions: &[[f64; 3]], origin: [f64; 3], cfg: &RadialWindowConfig) -> WindowPartition {
    bucket(&radial_keys(positions, origin, cfg))
}

pub fn cubic_partition(positions: &[[f64; 3]], cfg: &CubicWindowConfig) -> WindowPartition {
    bucket(&cubic_keys(positions, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

/// Windows whose token count lies in `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachSummary {
    pub max: f64,
    pub p99: f64,
    /// True when at least one window exceeded [`EXACT_REACH_LIMIT`] and
    /// contributed a bounding-box upper bound instead of an exact value.
    #[serde(rename = "approximate_flag")]
    pub approximate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub window_count: usize,
    pub occupancy: Occupancy,
    /// Occupancy histogram with power-of-two bins `[1,1], [2,3], [4,7], ...`.
    pub histogram: Vec<HistogramBin>,
    pub reach: ReachSummary,
    /// Per-window reach, in partition order.
    #[serde(skip)]
    pub window_reach: Vec<f64>,
}

/// Largest pairwise distance within one window, and whether it is exact.
pub fn window_reach(ids: &[usize], positions: &[[f64; 3]]) -> (f64, bool) {
    if ids.len() > EXACT_REACH_LIMIT {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &t in ids {
            for a in 0..3 {
                lo[a] = lo[a].min(positions[t][a]);
                hi[a] = hi[a].max(positions[t][a]);
            }
        }
        let diag = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
        return (diag, false);
    }
    let mut best = 0.0f64;
    for (i, &a) in ids.iter().enumerate() {
        let pa = positions[a];
        for &b in &ids[i + 1..] {
            let pb = positions[b];
            let d2 = (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2);
            best = best.max(d2);
        }
    }
    (best.sqrt(), true)
}

pub fn partition_stats(partition: &WindowPartition, positions: &[[f64; 3]]) -> PartitionStats {
    let sizes: Vec<usize> = partition.windows().map(<[usize]>::len).collect();
    let reach: Vec<(f64, bool)> =
        partition.offsets.par_windows(2).map(|o| window_reach(&partition.token_ids[o[0]..o[1]], positions)).collect();

    let window_count = sizes.len();
    let occupancy = if window_count == 0 {
        Occupancy { min: 0, mean: 0.0, max: 0 }
    } else {
        Occupancy {
            min: *sizes.iter().min().unwrap(),
            mean: partition.token_count() as f64 / window_count as f64,
            max: *sizes.iter().max().unwrap(),
        }
    };

    let mut histogram: Vec<HistogramBin> = Vec::new();
    for &s in &sizes {
        let bin = (usize::BITS - 1 - s.leading_zeros()) as usize;
        while histogram.len() <= bin {
            let b = histogram.len();
            histogram.push(HistogramBin { lo: 1 << b, hi: (1 << (b + 1)) - 1, windows: 0 });
        }
        histogram[bin].windows += 1;
    }

    let window_reach: Vec<f64> = reach.iter().map(|r| r.0).collect();
    let mut sorted = window_reach.clone();
    sorted.sort_by(f64::total_cmp);
    let p99 = if sorted.is_empty() {
        0.0
    } else {
        // nearest-rank percentile
        let rank = ((0.99 * sorted.len() as f64).ceil() as usize).max(1);
        sorted[rank - 1]
    };

    PartitionStats {
        window_count,
        occupancy,
        histogram,
        reach: ReachSummary {
            max: sorted.last().copied().unwrap_or(0.0),
            p99,
            approximate: reach.iter().any(|r| !r.1),
        },
        window_reach,
    }
}
