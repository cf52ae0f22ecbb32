//! Seeded LiDAR-like scenes and brute-force reference implementations.
//!
//! The scene generator fires `beam_count × azimuth_steps` rays from the
//! origin and keeps each with probability `1 - dropout_prob`, at a uniformly
//! drawn range. Angular density is constant, so spatial density falls off
//! with distance the way a real spinning sensor's does.
//!
//! The oracles here deliberately share no code with the fast paths: they
//! recompute spherical coordinates, window keys and position indices with
//! plain scalar loops and enumerate all `N × N` pairs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadSplit, SphereConfig, SphereWeights};
use crate::error::{config_err, Result};
use crate::geometry::{from_spherical, PointCloud, SphericalCoord};
use crate::numerics::DenseMatrix;
use crate::partition::WindowKey;
use crate::Error;

/// Largest token count [`brute_force_forward`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 4096;

/// Inclination span of the beam fan, in degrees from the zenith.
const PHI_SPAN: (f64, f64) = (60.0, 100.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamSceneConfig {
    pub beam_count: usize,
    pub azimuth_steps: usize,
    pub r_min: f64,
    pub r_max_scene: f64,
    pub dropout_prob: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BeamSceneConfig {
    fn default() -> Self {
        Self {
            beam_count: 32,
            azimuth_steps: 1024,
            r_min: 1.0,
            r_max_scene: 100.0,
            dropout_prob: 0.1,
            feature_dim: 16,
            seed: 7,
        }
    }
}

impl BeamSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min.is_finite()
            && self.r_max_scene.is_finite()
            && self.r_min >= 0.0
            && self.r_min < self.r_max_scene)
        {
            return Err(config_err!(
                "scene range needs 0 <= r_min < r_max_scene, got {}..{}",
                self.r_min,
                self.r_max_scene
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(config_err!("dropout_prob must be in [0, 1), got {}", self.dropout_prob));
        }
        if self.beam_count == 0 || self.azimuth_steps == 0 {
            return Err(config_err!("beam_count and azimuth_steps must be positive"));
        }
        Ok(())
    }

    /// Inclination of beam `b`, at the centre of its slice of the fan.
    pub fn beam_phi(&self, b: usize) -> f64 {
        PHI_SPAN.0 + (PHI_SPAN.1 - PHI_SPAN.0) * (b as f64 + 0.5) / self.beam_count as f64
    }

    /// Azimuth of step `s`. The half-step offset keeps rays off the
    /// integer-degree window edges.
    pub fn step_theta(&self, s: usize) -> f64 {
        360.0 * (s as f64 + 0.5) / self.azimuth_steps as f64
    }
}

/// Generates a scene. Rays are emitted beam-major, then by azimuth.
pub fn generate_scene(cfg: &BeamSceneConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let expected = cfg.beam_count * cfg.azimuth_steps;
    let mut positions = Vec::with_capacity(expected);
    let mut features = Vec::with_capacity(expected * cfg.feature_dim);
    for b in 0..cfg.beam_count {
        let phi = cfg.beam_phi(b);
        for s in 0..cfg.azimuth_steps {
            let keep = rng.random::<f64>() >= cfg.dropout_prob;
            let r = rng.random_range(cfg.r_min..cfg.r_max_scene);
            if !keep {
                continue;
            }
            positions.push(from_spherical(SphericalCoord { r, theta: cfg.step_theta(s), phi }, [0.0; 3]));
            features.extend((0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)));
        }
    }
    let n = positions.len();
    PointCloud::new(positions, DenseMatrix::from_vec(n, cfg.feature_dim, features)?)
}

/// Distance from each `queries[i]` to its nearest other point in `cloud`,
/// by exhaustive search. A query that is itself in the cloud skips its own
/// index.
pub fn nearest_neighbor_distances(cloud: &[[f64; 3]], queries: &[usize]) -> Vec<f64> {
    queries
        .iter()
        .map(|&q| {
            let p = cloud[q];
            cloud
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != q)
                .map(|(_, o)| ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Spherical coordinates via the textbook formulas.
fn naive_spherical(p: &[f64; 3], origin: &[f64; 3]) -> [f64; 3] {
    let (x, y, z) = (p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]);
    let r = (x * x + y * y + z * z).sqrt();
    if r == 0.0 {
        return [0.0; 3];
    }
    let mut theta = y.atan2(x).to_degrees();
    if theta < 0.0 {
        theta += 360.0;
    }
    if theta >= 360.0 {
        theta = 0.0;
    }
    [r, theta, (z / r).clamp(-1.0, 1.0).acos().to_degrees()]
}

pub fn naive_radial_key(p: &[f64; 3], origin: &[f64; 3], delta_theta: f64, delta_phi: f64, r_max: f64) -> WindowKey {
    let [r, theta, phi] = naive_spherical(p, origin);
    [(theta / delta_theta).floor() as i64, (phi / delta_phi).floor() as i64, (r > r_max) as i64]
}

pub fn naive_cubic_key(p: &[f64; 3], side: &[f64; 3]) -> WindowKey {
    [(p[0] / side[0]).floor() as i64, (p[1] / side[1]).floor() as i64, (p[2] / side[2]).floor() as i64]
}

/// Groups token ids by key with a hash map, then orders groups by key.
pub fn naive_grouping(keys: &[WindowKey]) -> Vec<(WindowKey, Vec<usize>)> {
    let mut groups: HashMap<WindowKey, Vec<usize>> = HashMap::new();
    for (id, key) in keys.iter().enumerate() {
        groups.entry(*key).or_default().push(id);
    }
    let mut out: Vec<_> = groups.into_iter().collect();
    out.sort_by_key(|a| a.0);
    out
}

fn clamp_bin(raw: i64, l: usize) -> usize {
    (raw + l as i64 / 2).clamp(0, l as i64 - 1) as usize
}

fn naive_exp_index(r: f64, a: f64, l: usize) -> usize {
    let raw = if r > 0.0 {
        ((r / a).log2().ceil() as i64).max(0)
    } else if r < 0.0 {
        -((-r / a).log2().ceil() as i64).max(0) - 1
    } else {
        0
    };
    clamp_bin(raw, l)
}

fn naive_uniform_index(v: f64, interval: f64, l: usize) -> usize {
    clamp_bin((v / interval).floor() as i64, l)
}

fn naive_wrap(deg: f64) -> f64 {
    let mut d = deg % 360.0;
    if d <= -180.0 {
        d += 360.0;
    }
    if d > 180.0 {
        d -= 360.0;
    }
    d
}

/// Scalar reference for the head-split attention forward pass.
///
/// For each head and each query token it walks every key token, admits the
/// pair only when both share the branch's window key, and accumulates the
/// softmax-weighted values. f64 throughout.
pub fn brute_force_forward(
    positions: &[[f64; 3]],
    features: &DenseMatrix<f64>,
    cfg: &SphereConfig,
    weights: &SphereWeights<f64>,
) -> Result<DenseMatrix<f64>> {
    let n = positions.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::Size(format!("brute force is limited to {BRUTE_FORCE_LIMIT} tokens, got {n}")));
    }
    cfg.validate(weights)?;
    let p = &weights.params;
    let (h, d) = (p.heads, p.head_dim);
    let c = h * d;
    if features.rows() != n || features.cols() != c {
        return Err(Error::Shape(format!("features must be {n}×{c}, got {}×{}", features.rows(), features.cols())));
    }
    let l = cfg.posenc.table_len;
    let scale = if p.scale_logits { 1.0 / (d as f64).sqrt() } else { 1.0 };

    let project = |w: &DenseMatrix<f64>| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..c).map(|j| (0..c).map(|k| features.get(i, k) * w.get(k, j)).sum()).collect()).collect()
    };
    let (q, k, v) = (project(&p.w_q), project(&p.w_k), project(&p.w_v));

    let sph: Vec<[f64; 3]> = positions.iter().map(|x| naive_spherical(x, &cfg.origin)).collect();
    let rk: Vec<WindowKey> = positions
        .iter()
        .map(|x| naive_radial_key(x, &cfg.origin, cfg.radial.delta_theta, cfg.radial.delta_phi, cfg.radial.r_max))
        .collect();
    let ck: Vec<WindowKey> = positions.iter().map(|x| naive_cubic_key(x, &cfg.cubic.side)).collect();
    let pe = &cfg.posenc;

    let mut zhat = vec![vec![0.0; c]; n];
    for head in 0..h {
        let radial = match cfg.head_split {
            HeadSplit::Dynamic => head < h / 2,
            HeadSplit::RadialOnly => true,
            HeadSplit::CubicOnly => false,
        };
        let tables = if radial { &weights.tables_radial } else { &weights.tables_cubic };
        for i in 0..n {
            let mut members = Vec::new();
            let mut logits = Vec::new();
            for j in 0..n {
                let same = if radial { rk[i] == rk[j] } else { ck[i] == ck[j] };
                if !same {
                    continue;
                }
                let idx = if radial {
                    [
                        naive_exp_index(sph[i][0] - sph[j][0], pe.a, l),
                        naive_uniform_index(naive_wrap(sph[i][1] - sph[j][1]), pe.interval_theta, l),
                        naive_uniform_index(sph[i][2] - sph[j][2], pe.interval_phi, l),
                    ]
                } else {
                    [0, 1, 2]
                        .map(|ax| naive_uniform_index(positions[i][ax] - positions[j][ax], pe.cubic_interval[ax], l))
                };
                let mut logit = 0.0;
                for x in 0..d {
                    let col = head * d + x;
                    let mut enc = 0.0;
                    for (axis, &row) in idx.iter().enumerate() {
                        enc += tables.table(axis)[(row * h + head) * d + x];
                    }
                    logit += scale * q[i][col] * k[j][col] + q[i][col] * enc + k[j][col] * enc;
                }
                members.push(j);
                logits.push(logit);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for (&j, w) in members.iter().zip(&e) {
                for x in 0..d {
                    zhat[i][head * d + x] += w / total * v[j][head * d + x];
                }
            }
        }
    }
    let out = DenseMatrix::from_fn(n, c, |i, j| (0..c).map(|k| zhat[i][k] * p.w_proj.get(k, j)).sum());
    out.ensure_finite("brute-force output")?;
    Ok(out)
}
