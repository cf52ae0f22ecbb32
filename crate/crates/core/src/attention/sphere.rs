//! Head-split attention: the first half of the heads attend within radial
//! windows, the second half within cubic windows, and the concatenation goes
//! through one shared `W_proj`.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{backward, forward_branches, BranchSpec, CoordSource, ForwardTrace, Gradients, SphereWeights};
use crate::error::{config_err, shape_err, Result};
use crate::geometry::{spherical_coords, SphericalCoord};
use crate::numerics::{DenseMatrix, Real};
use crate::partition::{cubic_partition, radial_partition, CubicWindowConfig, RadialWindowConfig};
use crate::posenc::PosEncConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSplit {
    /// Heads `0..h/2` radial, `h/2..h` cubic. Needs an even head count.
    #[default]
    Dynamic,
    RadialOnly,
    CubicOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereConfig {
    pub radial: RadialWindowConfig,
    pub cubic: CubicWindowConfig,
    pub posenc: PosEncConfig,
    /// Sensor position used as the spherical origin.
    pub origin: [f64; 3],
    pub head_split: HeadSplit,
}

impl Default for SphereConfig {
    fn default() -> Self {
        Self::for_windows(RadialWindowConfig::default(), CubicWindowConfig::default(), 16)
    }
}

impl SphereConfig {
    /// Config whose position-encoding bins are derived from the window sizes.
    pub fn for_windows(radial: RadialWindowConfig, cubic: CubicWindowConfig, table_len: usize) -> Self {
        Self {
            radial,
            cubic,
            posenc: PosEncConfig::for_windows(&radial, &cubic, table_len),
            origin: [0.0; 3],
            head_split: HeadSplit::Dynamic,
        }
    }

    /// Checks window and encoding settings against a head count.
    pub fn validate_heads(&self, heads: usize) -> Result<()> {
        self.radial.validate()?;
        self.cubic.validate()?;
        self.posenc.validate()?;
        if self.head_split == HeadSplit::Dynamic && !heads.is_multiple_of(2) {
            return Err(config_err!("head-split attention needs an even head count, got {heads}"));
        }
        Ok(())
    }

    pub fn validate<T: Real>(&self, weights: &SphereWeights<T>) -> Result<()> {
        self.validate_heads(weights.params.heads)?;
        weights.validate()?;
        if weights.table_len() != self.posenc.table_len {
            return Err(config_err!(
                "weights carry tables of length {}, config expects {}",
                weights.table_len(),
                self.posenc.table_len
            ));
        }
        Ok(())
    }

    /// Heads assigned to the radial and cubic branches.
    pub fn head_ranges(&self, heads: usize) -> (Range<usize>, Range<usize>) {
        match self.head_split {
            HeadSplit::Dynamic => (0..heads / 2, heads / 2..heads),
            HeadSplit::RadialOnly => (0..heads, heads..heads),
            HeadSplit::CubicOnly => (0..0, 0..heads),
        }
    }
}

fn cmp_tokens<T: Real>(a: usize, b: usize, positions: &[[f64; 3]], features: &DenseMatrix<T>) -> Ordering {
    let pa = positions[a].iter();
    let pb = positions[b].iter();
    pa.zip(pb)
        .map(|(x, y)| x.total_cmp(y))
        .chain(features.row(a).iter().zip(features.row(b)).map(|(x, y)| x.as_f64().total_cmp(&y.as_f64())))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Window members ordered by content rather than by id, so reordering the
/// input cannot change floating-point summation order.
fn content_order<T: Real>(ids: &[usize], positions: &[[f64; 3]], features: &DenseMatrix<T>) -> Vec<usize> {
    let mut out = ids.to_vec();
    out.sort_by(|&a, &b| cmp_tokens(a, b, positions, features));
    out
}

fn branches<'a, T: Real>(
    positions: &'a [[f64; 3]],
    spherical: &'a [SphericalCoord],
    features: &DenseMatrix<T>,
    cfg: &SphereConfig,
    weights: &'a SphereWeights<T>,
) -> Result<Vec<BranchSpec<'a, T>>> {
    cfg.validate(weights)?;
    if positions.len() != features.rows() {
        return Err(shape_err!("{} positions but {} feature rows", positions.len(), features.rows()));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(crate::Error::Numeric("token positions must be finite".into()));
    }
    let (radial_heads, cubic_heads) = cfg.head_ranges(weights.params.heads);
    let mut out = Vec::with_capacity(2);
    if !radial_heads.is_empty() {
        let partition = radial_partition(positions, cfg.origin, &cfg.radial);
        out.push(BranchSpec {
            heads: radial_heads,
            windows: partition.windows().map(|w| content_order(w, positions, features)).collect(),
            coords: CoordSource::Spherical(spherical),
            indexer: cfg.posenc.radial_indexer(),
            tables: &weights.tables_radial,
        });
    }
    if !cubic_heads.is_empty() {
        let partition = cubic_partition(positions, &cfg.cubic);
        out.push(BranchSpec {
            heads: cubic_heads,
            windows: partition.windows().map(|w| content_order(w, positions, features)).collect(),
            coords: CoordSource::Cartesian(positions),
            indexer: cfg.posenc.cubic_indexer(),
            tables: &weights.tables_cubic,
        });
    }
    Ok(out)
}

/// Head-split window attention over a whole cloud. Output rows follow input order.
pub fn sphereformer_forward<T: Real>(
    positions: &[[f64; 3]],
    features: &DenseMatrix<T>,
    cfg: &SphereConfig,
    weights: &SphereWeights<T>,
) -> Result<DenseMatrix<T>> {
    let spherical = spherical_coords(positions, cfg.origin);
    let specs = branches(positions, &spherical, features, cfg, weights)?;
    Ok(forward_branches(features, &weights.params, &specs, false)?.z)
}

/// Concatenated head outputs before the final projection.
pub fn sphereformer_pre_projection<T: Real>(
    positions: &[[f64; 3]],
    features: &DenseMatrix<T>,
    cfg: &SphereConfig,
    weights: &SphereWeights<T>,
) -> Result<DenseMatrix<T>> {
    let spherical = spherical_coords(positions, cfg.origin);
    let specs = branches(positions, &spherical, features, cfg, weights)?;
    Ok(forward_branches(features, &weights.params, &specs, false)?.zhat)
}

pub fn sphereformer_forward_traced<T: Real>(
    positions: &[[f64; 3]],
    features: &DenseMatrix<T>,
    cfg: &SphereConfig,
    weights: &SphereWeights<T>,
) -> Result<(DenseMatrix<T>, ForwardTrace<T>)> {
    let spherical = spherical_coords(positions, cfg.origin);
    let specs = branches(positions, &spherical, features, cfg, weights)?;
    let out = forward_branches(features, &weights.params, &specs, true)?;
    Ok((out.z, out.trace.expect("traced forward keeps its trace")))
}

/// Gradients for a traced [`sphereformer_forward_traced`] call. Table
/// gradients come back radial first, then cubic.
pub fn sphereformer_backward<T: Real>(trace: &ForwardTrace<T>, grad_z: &DenseMatrix<T>) -> Result<Gradients<T>> {
    backward(trace, grad_z)
}
