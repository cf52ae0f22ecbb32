//! Finite-difference verification of the analytic backward pass.
//!
//! Each case builds a small random cloud and weights, takes the scalar loss
//! `sum(upstream ⊙ z)`, and compares every analytic gradient entry with a
//! central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    sphereformer_backward, sphereformer_forward, sphereformer_forward_traced, HeadSplit, SphereConfig, SphereWeights,
};
use crate::error::Result;
use crate::geometry::{from_spherical, SphericalCoord};
use crate::numerics::{finite_difference_gradient, DenseMatrix};
use crate::partition::{CubicWindowConfig, RadialWindowConfig};
use crate::posenc::PosTables;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Pass threshold on the per-entry relative error.
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor so entries that are zero on both sides compare as
/// absolute differences.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const PARAM_NAMES: [&str; 11] = [
    "features",
    "w_q",
    "w_k",
    "w_v",
    "w_proj",
    "radial.t_r",
    "radial.t_theta",
    "radial.t_phi",
    "cubic.t_x",
    "cubic.t_y",
    "cubic.t_z",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub table_len: usize,
    pub scale_logits: bool,
    pub head_split: HeadSplit,
}

impl GradCheckCase {
    /// Random dimensions within `n <= 8`, `c <= 16`, `h ∈ {2, 4}`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let heads = if rng.random_bool(0.5) { 2 } else { 4 };
        Self {
            seed,
            tokens: rng.random_range(1..=8),
            heads,
            head_dim: rng.random_range(1..=16 / heads),
            table_len: [4, 8, 16][rng.random_range(0..3)],
            scale_logits: rng.random_bool(0.3),
            head_split: HeadSplit::Dynamic,
        }
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Inputs of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub positions: Vec<[f64; 3]>,
    pub features: DenseMatrix<f64>,
    pub cfg: SphereConfig,
    pub weights: SphereWeights<f64>,
    pub upstream: DenseMatrix<f64>,
}

impl GradCheckInstance {
    /// Tokens scattered through a narrow cone so both branches see windows
    /// with several members, and a few tokens land past `r_max`.
    pub fn build(case: &GradCheckCase) -> Result<Self> {
        let radial = RadialWindowConfig { delta_theta: 3.0, delta_phi: 3.0, r_max: 20.0 };
        let cubic = CubicWindowConfig::uniform(6.0);
        let mut cfg = SphereConfig::for_windows(radial, cubic, case.table_len);
        cfg.head_split = case.head_split;
        cfg.validate_heads(case.heads)?;

        let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
        let positions = (0..case.tokens)
            .map(|_| {
                from_spherical(
                    SphericalCoord {
                        r: rng.random_range(0.5..30.0),
                        theta: rng.random_range(10.0..16.0),
                        phi: rng.random_range(80.0..86.0),
                    },
                    [0.0; 3],
                )
            })
            .collect();
        let c = case.channels();
        let features = DenseMatrix::from_fn(case.tokens, c, |_, _| rng.random_range(-1.0..1.0));
        let mut params = super::AttentionParams::random(case.heads, case.head_dim, 0.5, &mut rng);
        params.scale_logits = case.scale_logits;
        let weights = SphereWeights {
            params,
            tables_radial: PosTables::random(case.table_len, case.heads, case.head_dim, 0.3, &mut rng),
            tables_cubic: PosTables::random(case.table_len, case.heads, case.head_dim, 0.3, &mut rng),
        };
        let upstream = DenseMatrix::from_fn(case.tokens, c, |_, _| rng.random_range(-1.0..1.0));
        Ok(Self { positions, features, cfg, weights, upstream })
    }

    fn flatten(features: &DenseMatrix<f64>, w: &SphereWeights<f64>) -> Vec<f64> {
        let mut x = features.data().to_vec();
        for (_, m) in w.params.named_weights() {
            x.extend_from_slice(m.data());
        }
        for t in [&w.tables_radial, &w.tables_cubic] {
            for table in t.tables() {
                x.extend_from_slice(table);
            }
        }
        x
    }

    fn unflatten(&self, x: &[f64]) -> (DenseMatrix<f64>, SphereWeights<f64>) {
        let mut rest = x;
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        let (n, c) = self.features.shape();
        let features = DenseMatrix::from_vec(n, c, take(n * c)).unwrap();
        let mut w = self.weights.clone();
        for m in [&mut w.params.w_q, &mut w.params.w_k, &mut w.params.w_v, &mut w.params.w_proj] {
            let data = take(c * c);
            m.data_mut().copy_from_slice(&data);
        }
        for t in [&mut w.tables_radial, &mut w.tables_cubic] {
            for axis in 0..3 {
                let data = take(t.table(axis).len());
                t.table_mut(axis).copy_from_slice(&data);
            }
        }
        (features, w)
    }

    /// `sum(upstream ⊙ z)` at the flattened parameter vector `x`.
    pub fn loss(&self, x: &[f64]) -> f64 {
        let (features, w) = self.unflatten(x);
        match sphereformer_forward(&self.positions, &features, &self.cfg, &w) {
            Ok(z) => z.data().iter().zip(self.upstream.data()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    }

    /// Analytic gradient flattened in the same order as the parameters.
    pub fn analytic_gradient(&self) -> Result<(Vec<f64>, f64)> {
        let (_, trace) = sphereformer_forward_traced(&self.positions, &self.features, &self.cfg, &self.weights)?;
        let grads = sphereformer_backward(&trace, &self.upstream)?;
        let (radial_heads, cubic_heads) = self.cfg.head_ranges(self.weights.params.heads);
        let mut tables = grads.tables.into_iter();
        let w = &self.weights;
        let zeros = |t: &PosTables<f64>| PosTables::zeros(t.table_len(), t.heads(), t.head_dim());
        let radial = if radial_heads.is_empty() { zeros(&w.tables_radial) } else { tables.next().unwrap() };
        let cubic = if cubic_heads.is_empty() { zeros(&w.tables_cubic) } else { tables.next().unwrap() };
        let mut params = w.params.clone();
        params.w_q = grads.w_q;
        params.w_k = grads.w_k;
        params.w_v = grads.w_v;
        params.w_proj = grads.w_proj;
        let flat =
            Self::flatten(&grads.features, &SphereWeights { params, tables_radial: radial, tables_cubic: cubic });
        Ok((flat, trace.max_row_sum_error()))
    }

    fn segment_lengths(&self) -> [usize; 11] {
        let (n, c) = self.features.shape();
        let t = self.weights.tables_radial.table(0).len();
        [n * c, c * c, c * c, c * c, c * c, t, t, t, t, t, t]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub case: GradCheckCase,
    pub params: Vec<ParamError>,
    pub max_row_sum_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> &ParamError {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("every report covers at least one parameter")
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < MAX_REL_ERR)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Runs one case. `corrupt` perturbs the analytic `w_k` gradient, a
/// negative control that must make the check fail.
pub fn check_case(case: &GradCheckCase, eps: f64, corrupt: bool) -> Result<GradCheckReport> {
    let inst = GradCheckInstance::build(case)?;
    let (mut analytic, max_row_sum_err) = inst.analytic_gradient()?;
    if corrupt {
        let offset = inst.segment_lengths()[..2].iter().sum::<usize>();
        analytic[offset] += 1e-2;
    }
    let x = GradCheckInstance::flatten(&inst.features, &inst.weights);
    let numeric = finite_difference_gradient(|p| inst.loss(p), &x, eps)?;

    let mut params = Vec::with_capacity(PARAM_NAMES.len());
    let mut start = 0;
    for (name, len) in PARAM_NAMES.iter().zip(inst.segment_lengths()) {
        let range = start..start + len;
        let max_rel_err = analytic[range.clone()]
            .iter()
            .zip(&numeric[range])
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        params.push(ParamError { name: name.to_string(), entries: len, max_rel_err });
        start += len;
    }
    Ok(GradCheckReport { case: *case, params, max_row_sum_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let case = GradCheckCase::random(3);
        let inst = GradCheckInstance::build(&case).unwrap();
        let x = GradCheckInstance::flatten(&inst.features, &inst.weights);
        assert_eq!(x.len(), inst.segment_lengths().iter().sum::<usize>());
        let (f, w) = inst.unflatten(&x);
        assert_eq!(f, inst.features);
        assert_eq!(w, inst.weights);
    }

    #[test]
    fn random_cases_stay_in_bounds() {
        for seed in 0..200 {
            let c = GradCheckCase::random(seed);
            assert!(c.tokens >= 1 && c.tokens <= 8);
            assert!(c.heads == 2 || c.heads == 4);
            assert!(c.channels() <= 16);
        }
    }

    #[test]
    fn default_case_passes() {
        let case = GradCheckCase {
            seed: 0,
            tokens: 8,
            heads: 4,
            head_dim: 4,
            table_len: 16,
            scale_logits: false,
            head_split: HeadSplit::Dynamic,
        };
        let report = check_case(&case, DEFAULT_EPS, false).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_row_sum_err < 1e-6);
    }

    #[test]
    fn single_branch_cases_pass() {
        for split in [HeadSplit::RadialOnly, HeadSplit::CubicOnly] {
            let case = GradCheckCase { head_split: split, heads: 3, ..GradCheckCase::random(11) };
            let report = check_case(&case, DEFAULT_EPS, false).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn corruption_is_caught() {
        let case = GradCheckCase::random(5);
        let report = check_case(&case, DEFAULT_EPS, true).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().name, "w_k");
    }

    #[test]
    fn odd_heads_rejected_before_work() {
        let case = GradCheckCase { heads: 3, head_dim: 2, ..GradCheckCase::random(1) };
        assert!(matches!(check_case(&case, DEFAULT_EPS, false), Err(crate::Error::Config(_))));
    }
}
