//! Point clouds, sensor-centred spherical coordinates, range clipping and
//! voxel downsampling.
//!
//! Angles are in degrees: azimuth `theta` in `[0, 360)` measured from +x
//! towards +y, inclination `phi` in `[0, 180]` measured from +z.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{DenseMatrix, Real};

/// A cloud of points, each with a position and a feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: DenseMatrix<f64>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: DenseMatrix<f64>) -> Result<Self> {
        if positions.len() != features.rows() {
            return Err(shape_err!("{} positions but {} feature rows", positions.len(), features.rows()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numeric("point coordinates must be finite".into()));
        }
        Ok(Self { positions, features })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self { positions: Vec::new(), features: DenseMatrix::zeros(0, feature_dim) }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &DenseMatrix<f64> {
        &self.features
    }

    pub fn with_features(&self, features: DenseMatrix<f64>) -> Result<Self> {
        Self::new(self.positions.clone(), features)
    }

    /// Keeps the points selected by `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> Self {
        Self { positions: ids.iter().map(|&i| self.positions[i]).collect(), features: self.features.gather_rows(ids) }
    }

    pub fn into_parts(self) -> (Vec<[f64; 3]>, DenseMatrix<f64>) {
        (self.positions, self.features)
    }
}

/// Spherical coordinates relative to a sensor origin, angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord<T = f64> {
    pub r: T,
    pub theta: T,
    pub phi: T,
}

/// Axis-aligned scene bounds, half-open: `min <= p < max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneRange {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let range = Self { min, max };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.min[a] < self.max[a]) {
            Ok(())
        } else {
            Err(config_err!("scene range min {:?} must be below max {:?}", self.min, self.max))
        }
    }

    #[inline]
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }
}

impl Default for SceneRange {
    /// Large outdoor scene, ±75.2 m horizontally and −2..4 m vertically.
    fn default() -> Self {
        Self { min: [-75.2, -75.2, -2.0], max: [75.2, 75.2, 4.0] }
    }
}

/// Converts a Cartesian point to spherical coordinates about `origin`.
///
/// The sensor location itself (`r == 0`) maps to `theta = phi = 0`.
pub fn to_spherical<T: Real>(p: [T; 3], origin: [T; 3]) -> SphericalCoord<T> {
    let dx = p[0] - origin[0];
    let dy = p[1] - origin[1];
    let dz = p[2] - origin[2];
    let r = (dx * dx + dy * dy + dz * dz).sqrt();
    if r == T::zero() {
        return SphericalCoord { r, theta: T::zero(), phi: T::zero() };
    }
    let full = T::of(360.0);
    let mut theta = dy.atan2(dx).to_degrees();
    if theta < T::zero() {
        theta = theta + full;
    }
    // -tiny + 360 can round up to exactly 360
    if theta >= full {
        theta = T::zero();
    }
    let cos_phi = (dz / r).max(-T::one()).min(T::one());
    let phi = cos_phi.acos().to_degrees();
    SphericalCoord { r, theta, phi }
}

/// Inverse of [`to_spherical`].
pub fn from_spherical<T: Real>(s: SphericalCoord<T>, origin: [T; 3]) -> [T; 3] {
    let (st, ct) = s.theta.to_radians().sin_cos();
    let (sp, cp) = s.phi.to_radians().sin_cos();
    [origin[0] + s.r * sp * ct, origin[1] + s.r * sp * st, origin[2] + s.r * cp]
}

pub fn spherical_coords(positions: &[[f64; 3]], origin: [f64; 3]) -> Vec<SphericalCoord> {
    positions.iter().map(|&p| to_spherical(p, origin)).collect()
}

/// Keeps the points inside `range`, preserving order.
pub fn clip_range(cloud: &PointCloud, range: &SceneRange) -> PointCloud {
    let keep: Vec<usize> =
        cloud.positions.iter().enumerate().filter(|(_, p)| range.contains(p)).map(|(i, _)| i).collect();
    cloud.select(&keep)
}

/// Integer voxel coordinates of `p` on a grid anchored at `range.min`.
#[inline]
pub fn voxel_coords(p: &[f64; 3], voxel_size: f64, range: &SceneRange) -> [i64; 3] {
    [0, 1, 2].map(|a| ((p[a] - range.min[a]) / voxel_size).floor() as i64)
}

/// Averages all points sharing a voxel into one point.
///
/// Output is ordered by voxel index with z slowest and x fastest.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64, range: &SceneRange) -> Result<PointCloud> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(config_err!("voxel size must be positive, got {voxel_size}"));
    }
    let c = cloud.feature_dim();
    let mut groups: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let [x, y, z] = voxel_coords(p, voxel_size, range);
        groups.entry([z, y, x]).or_default().push(i);
    }

    let mut positions = Vec::with_capacity(groups.len());
    let mut features = Vec::with_capacity(groups.len() * c);
    for members in groups.values() {
        let count = members.len() as f64;
        let mut pos = [0.0; 3];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &m in members {
            for a in 0..3 {
                let v = cloud.positions[m][a];
                pos[a] += v;
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        // rounding in the mean must not push it into a neighbouring voxel
        positions.push([0, 1, 2].map(|a| (pos[a] / count).clamp(lo[a], hi[a])));

        let start = features.len();
        features.resize(start + c, 0.0);
        for &m in members {
            for (acc, &v) in features[start..].iter_mut().zip(cloud.features.row(m)) {
                *acc += v;
            }
        }
        for acc in &mut features[start..] {
            *acc /= count;
        }
    }
    let rows = positions.len();
    PointCloud::new(positions, DenseMatrix::from_vec(rows, c, features)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn random_cloud(seed: u64, n: usize, c: usize, extent: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-extent..extent))).collect();
        let features = DenseMatrix::from_fn(n, c, |_, _| rng.random_range(-1.0..1.0));
        PointCloud::new(positions, features).unwrap()
    }

    #[test]
    fn spherical_examples() {
        let s = to_spherical::<f64>([1.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!((s.r, s.theta), (1.0, 0.0));
        assert!((s.phi - 90.0).abs() < 1e-12);

        let s = to_spherical::<f64>([0.0, 0.0, 1.0], [0.0; 3]);
        assert_eq!((s.r, s.theta, s.phi), (1.0, 0.0, 0.0));

        let s = to_spherical::<f64>([0.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!((s.r, s.theta, s.phi), (0.0, 0.0, 0.0));

        let s = to_spherical::<f64>([0.0, -2.0, 0.0], [0.0; 3]);
        assert!((s.theta - 270.0).abs() < 1e-12);

        let s = to_spherical([5.0, 6.0, 7.0], [4.0, 6.0, 7.0]);
        assert_eq!(s.r, 1.0);
    }

    #[test]
    fn theta_stays_below_360() {
        let s = to_spherical([1.0, -1e-300, 0.0], [0.0; 3]);
        assert!(s.theta >= 0.0 && s.theta < 360.0);
        let s = to_spherical([1.0f32, -1e-30, 0.0], [0.0; 3]);
        assert!(s.theta >= 0.0 && s.theta < 360.0);
    }

    #[test]
    fn clip_half_open() {
        let range = SceneRange::new([0.0; 3], [1.0; 3]).unwrap();
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 0.5, 0.5], [0.5, 0.5, 0.999]],
            DenseMatrix::from_fn(4, 1, |i, _| i as f64),
        )
        .unwrap();
        let clipped = clip_range(&cloud, &range);
        assert_eq!(clipped.len(), 3);
        assert_eq!(clipped.features().data(), &[0.0, 1.0, 3.0]);

        let inside = clip_range(&clipped, &range);
        assert_eq!(inside, clipped);
    }

    #[test]
    fn clip_matches_naive_filter() {
        let cloud = random_cloud(3, 1000, 2, 100.0);
        let range = SceneRange::default();
        let clipped = clip_range(&cloud, &range);
        let mut expected = Vec::new();
        for (i, p) in cloud.positions().iter().enumerate() {
            if p[0] >= -75.2 && p[0] < 75.2 && p[1] >= -75.2 && p[1] < 75.2 && p[2] >= -2.0 && p[2] < 4.0 {
                expected.push(i);
            }
        }
        assert_eq!(clipped, cloud.select(&expected));
    }

    #[test]
    fn bad_range_rejected() {
        assert!(SceneRange::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn voxel_mean_of_two() {
        let range = SceneRange::new([0.0; 3], [10.0; 3]).unwrap();
        let cloud = PointCloud::new(
            vec![[0.11, 0.12, 0.13], [0.15, 0.16, 0.17]],
            DenseMatrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap(),
        )
        .unwrap();
        let v = voxelize(&cloud, 0.1, &range).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.features().data(), &[2.0]);
        assert!((v.positions()[0][0] - 0.13).abs() < 1e-12);
    }

    #[test]
    fn voxel_distinct_and_empty() {
        let range = SceneRange::new([0.0; 3], [10.0; 3]).unwrap();
        let cloud =
            PointCloud::new(vec![[1.0, 1.0, 1.0], [5.0, 1.0, 1.0], [1.0, 1.0, 5.0]], DenseMatrix::zeros(3, 2)).unwrap();
        let v = voxelize(&cloud, 0.5, &range).unwrap();
        assert_eq!(v.len(), 3);
        // z-major order: the z=5 point comes last
        assert_eq!(v.positions()[2], [1.0, 1.0, 5.0]);
        assert_eq!(v.positions()[1], [5.0, 1.0, 1.0]);

        let empty = voxelize(&PointCloud::empty(2), 0.5, &range).unwrap();
        assert!(empty.is_empty());
        assert!(voxelize(&cloud, 0.0, &range).is_err());
    }

    #[test]
    fn voxel_matches_hash_grouping() {
        let range = SceneRange::new([-3.0; 3], [3.0; 3]).unwrap();
        let cloud = clip_range(&random_cloud(11, 5000, 3, 3.0), &range);
        let voxel = 0.1;
        let out = voxelize(&cloud, voxel, &range).unwrap();

        let mut groups: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in cloud.positions().iter().enumerate() {
            let k = |a: usize| ((p[a] - range.min[a]) / voxel).floor() as i64;
            groups.entry((k(2), k(1), k(0))).or_default().push(i);
        }
        let mut keys: Vec<_> = groups.keys().copied().collect();
        keys.sort();
        assert_eq!(out.len(), keys.len());
        for (row, key) in keys.iter().enumerate() {
            let members = &groups[key];
            let n = members.len() as f64;
            for a in 0..3 {
                let mean = members.iter().map(|&m| cloud.positions()[m][a]).sum::<f64>() / n;
                assert!((out.positions()[row][a] - mean).abs() < 1e-12);
            }
            for j in 0..3 {
                let mean = members.iter().map(|&m| cloud.features().get(m, j)).sum::<f64>() / n;
                assert!((out.features().get(row, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn voxelize_idempotent() {
        let range = SceneRange::new([-3.0; 3], [3.0; 3]).unwrap();
        let cloud = clip_range(&random_cloud(12, 4000, 2, 3.0), &range);
        let once = voxelize(&cloud, 0.2, &range).unwrap();
        let twice = voxelize(&once, 0.2, &range).unwrap();
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn roundtrip_f64(x in -200.0f64..200.0, y in -200.0f64..200.0, z in -200.0f64..200.0) {
            let p = [x, y, z];
            prop_assume!((x * x + y * y + z * z).sqrt() > 1e-6);
            let back = from_spherical(to_spherical(p, [0.0; 3]), [0.0; 3]);
            for a in 0..3 {
                prop_assert!((back[a] - p[a]).abs() < 1e-9);
            }
        }

        #[test]
        fn roundtrip_f32(r in 0.01f32..200.0, t in 0.0f32..360.0, ph in 0.0f32..180.0) {
            let p = from_spherical(SphericalCoord { r, theta: t, phi: ph }, [0.0f32; 3]);
            let back = from_spherical(to_spherical(p, [0.0; 3]), [0.0; 3]);
            for a in 0..3 {
                // acos loses f32 precision near the poles; the error scales with r
                prop_assert!((back[a] - p[a]).abs() < 1e-4 * r.max(1.0), "{:?} vs {:?}", back, p);
            }
        }

        #[test]
        fn z_rotation_shifts_theta(x in -100.0f64..100.0, y in -100.0f64..100.0, z in -20.0f64..20.0, alpha in 0.0f64..360.0) {
            prop_assume!(x.hypot(y) > 1e-3);
            let s = to_spherical([x, y, z], [0.0; 3]);
            let (sa, ca) = alpha.to_radians().sin_cos();
            let rotated = to_spherical([x * ca - y * sa, x * sa + y * ca, z], [0.0; 3]);
            let mut delta = (rotated.theta - s.theta - alpha).rem_euclid(360.0);
            if delta > 180.0 {
                delta -= 360.0;
            }
            prop_assert!(delta.abs() < 1e-4);
            prop_assert!((rotated.r - s.r).abs() < 1e-9);
            prop_assert!((rotated.phi - s.phi).abs() < 1e-9);
        }
    }
}
