//! Multi-head window self-attention with contextual relative position bias.
//!
//! Per head `k` and window, logits are `q_k·k_kᵀ + pos_bias_k` where
//! `pos_bias[i][j] = q_i·p_ij + k_j·p_ij` and `p_ij` is the sum of three
//! table rows picked by the discretized offset between tokens `i` and `j`.
//! Heads are concatenated and projected by `W_proj`.
//!
//! The same kernel drives the single-window API ([`window_attention_forward`])
//! and the head-split radial/cubic module in [`sphere`]. Backward is exact and
//! exists for verification; nothing here trains.

use std::ops::Range;

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::geometry::SphericalCoord;
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place, DenseMatrix, Real};
use crate::posenc::{relative_cartesian, relative_spherical, PairIndexer, PosTables, RelCoords, INIT_SCALE};

pub mod gradcheck;
pub mod sphere;

pub use sphere::{
    sphereformer_backward, sphereformer_forward, sphereformer_forward_traced, sphereformer_pre_projection, HeadSplit,
    SphereConfig,
};

/// Projection weights and head layout. All matrices are `c × c` with `c = heads · head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: DenseMatrix<T>,
    pub w_k: DenseMatrix<T>,
    pub w_v: DenseMatrix<T>,
    pub w_proj: DenseMatrix<T>,
    /// Multiply `q·kᵀ` by `1/sqrt(head_dim)`. Off by default.
    pub scale_logits: bool,
}

impl<T: Real> AttentionParams<T> {
    pub fn new(
        heads: usize,
        head_dim: usize,
        w_q: DenseMatrix<T>,
        w_k: DenseMatrix<T>,
        w_v: DenseMatrix<T>,
        w_proj: DenseMatrix<T>,
    ) -> Result<Self> {
        let params = Self { heads, head_dim, w_q, w_k, w_v, w_proj, scale_logits: false };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        let c = heads * head_dim;
        Self {
            heads,
            head_dim,
            w_q: DenseMatrix::zeros(c, c),
            w_k: DenseMatrix::zeros(c, c),
            w_v: DenseMatrix::zeros(c, c),
            w_proj: DenseMatrix::zeros(c, c),
            scale_logits: false,
        }
    }

    /// Uniform weights in `[-scale, scale]`.
    pub fn random(heads: usize, head_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let c = heads * head_dim;
        let mut draw = || DenseMatrix::from_fn(c, c, |_, _| T::of(rng.random_range(-scale..=scale)));
        let (w_q, w_k, w_v, w_proj) = (draw(), draw(), draw(), draw());
        Self { heads, head_dim, w_q, w_k, w_v, w_proj, scale_logits: false }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(config_err!("heads and head_dim must be positive"));
        }
        let c = self.channels();
        for (name, w) in self.named_weights() {
            if w.shape() != (c, c) {
                return Err(shape_err!("{name} is {:?}, expected {c}x{c}", w.shape()));
            }
            w.ensure_finite(name)?;
        }
        Ok(())
    }

    pub fn named_weights(&self) -> [(&'static str, &DenseMatrix<T>); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_proj", &self.w_proj)]
    }

    pub fn logit_scale(&self) -> T {
        if self.scale_logits {
            T::one() / T::of(self.head_dim as f64).sqrt()
        } else {
            T::one()
        }
    }

    pub fn cast<U: Real>(&self) -> AttentionParams<U> {
        AttentionParams {
            heads: self.heads,
            head_dim: self.head_dim,
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_proj: self.w_proj.cast(),
            scale_logits: self.scale_logits,
        }
    }
}

/// Projected features. Head `k` of token `i` is row `i`, columns `k·d..(k+1)·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: DenseMatrix<T>,
    pub k: DenseMatrix<T>,
    pub v: DenseMatrix<T>,
}

impl<T: Real> Qkv<T> {
    /// Head slice of one token.
    #[inline]
    pub fn head(m: &DenseMatrix<T>, token: usize, head: usize, head_dim: usize) -> &[T] {
        &m.row(token)[head * head_dim..(head + 1) * head_dim]
    }
}

pub fn project_qkv<T: Real>(features: &DenseMatrix<T>, params: &AttentionParams<T>) -> Result<Qkv<T>> {
    params.validate()?;
    if features.cols() != params.channels() {
        return Err(shape_err!("features have {} channels, params expect {}", features.cols(), params.channels()));
    }
    Ok(Qkv { q: matmul(features, &params.w_q)?, k: matmul(features, &params.w_k)?, v: matmul(features, &params.w_v)? })
}

/// Where a branch gets pairwise offsets from.
#[derive(Clone, Copy)]
pub(crate) enum CoordSource<'a> {
    Spherical(&'a [SphericalCoord]),
    Cartesian(&'a [[f64; 3]]),
    Given(&'a RelCoords),
}

impl CoordSource<'_> {
    #[inline]
    fn relative(&self, i: usize, j: usize) -> [f64; 3] {
        match self {
            Self::Spherical(s) => relative_spherical(&s[i], &s[j]),
            Self::Cartesian(p) => relative_cartesian(&p[i], &p[j]),
            Self::Given(rel) => rel.get(i, j),
        }
    }
}

/// One group of heads attending within one set of windows.
pub(crate) struct BranchSpec<'a, T> {
    pub heads: Range<usize>,
    /// Token lists in the order attention is evaluated.
    pub windows: Vec<Vec<usize>>,
    pub coords: CoordSource<'a>,
    pub indexer: PairIndexer,
    pub tables: &'a PosTables<T>,
}

/// Cached state of one window needed by backward.
#[derive(Clone, Debug)]
pub struct WindowCache<T> {
    tokens: Vec<usize>,
    pair_idx: Vec<[usize; 3]>,
    /// `heads × n × n` attention probabilities.
    probs: Vec<T>,
}

impl<T> WindowCache<T> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

#[derive(Clone, Debug)]
pub struct BranchTrace<T> {
    heads: Range<usize>,
    tables: PosTables<T>,
    windows: Vec<WindowCache<T>>,
}

impl<T> BranchTrace<T> {
    pub fn heads(&self) -> Range<usize> {
        self.heads.clone()
    }

    pub fn windows(&self) -> &[WindowCache<T>] {
        &self.windows
    }
}

/// Everything backward needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    params: AttentionParams<T>,
    features: DenseMatrix<T>,
    qkv: Qkv<T>,
    zhat: DenseMatrix<T>,
    branches: Vec<BranchTrace<T>>,
}

impl<T: Real> ForwardTrace<T> {
    /// Concatenated head outputs before `W_proj`.
    pub fn pre_projection(&self) -> &DenseMatrix<T> {
        &self.zhat
    }

    pub fn qkv(&self) -> &Qkv<T> {
        &self.qkv
    }

    pub fn branches(&self) -> &[BranchTrace<T>] {
        &self.branches
    }

    /// Every attention probability row, over all branches, windows and heads.
    pub fn probability_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.branches.iter().flat_map(|b| {
            b.windows.iter().flat_map(|w| {
                let n = w.tokens.len();
                w.probs.chunks(n.max(1))
            })
        })
    }

    /// Largest deviation of any probability row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.probability_rows().map(|row| (row.iter().map(|p| p.as_f64()).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Gradients of a scalar loss with respect to every input of a forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub features: DenseMatrix<T>,
    pub w_q: DenseMatrix<T>,
    pub w_k: DenseMatrix<T>,
    pub w_v: DenseMatrix<T>,
    pub w_proj: DenseMatrix<T>,
    /// One entry per branch, in branch order (radial before cubic).
    pub tables: Vec<PosTables<T>>,
}

/// Per-window forward result: pair indices, head outputs, probabilities.
type WindowResult<T> = (Vec<[usize; 3]>, Vec<T>, Vec<T>);

/// Attention for one window; returns `n × (heads·d)` outputs and the probabilities.
fn window_forward<T: Real>(
    qkv: &Qkv<T>,
    tokens: &[usize],
    pair_idx: &[[usize; 3]],
    heads: Range<usize>,
    head_dim: usize,
    tables: &PosTables<T>,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let n = tokens.len();
    let hn = heads.len();
    let d = head_dim;
    let mut out = vec![T::zero(); n * hn * d];
    let mut probs = vec![T::zero(); hn * n * n];
    let mut p = vec![T::zero(); d];
    for (hi, head) in heads.enumerate() {
        for a in 0..n {
            let qa = Qkv::head(&qkv.q, tokens[a], head, d);
            let row = &mut probs[(hi * n + a) * n..(hi * n + a + 1) * n];
            for (b, logit) in row.iter_mut().enumerate() {
                let kb = Qkv::head(&qkv.k, tokens[b], head, d);
                tables.encoding_for_head(pair_idx[a * n + b], head, &mut p);
                *logit = scale * dot(qa, kb) + dot(qa, &p) + dot(kb, &p);
            }
            softmax_in_place(row);
            let o = &mut out[(a * hn + hi) * d..(a * hn + hi + 1) * d];
            for (b, &w) in row.iter().enumerate() {
                let vb = Qkv::head(&qkv.v, tokens[b], head, d);
                for (ox, &vx) in o.iter_mut().zip(vb) {
                    *ox = *ox + w * vx;
                }
            }
        }
    }
    (out, probs)
}

struct GradAccum<'a, T> {
    q: &'a mut DenseMatrix<T>,
    k: &'a mut DenseMatrix<T>,
    v: &'a mut DenseMatrix<T>,
    tables: &'a mut PosTables<T>,
}

#[allow(clippy::too_many_arguments)]
fn window_backward<T: Real>(
    qkv: &Qkv<T>,
    cache: &WindowCache<T>,
    heads: Range<usize>,
    head_dim: usize,
    tables: &PosTables<T>,
    scale: T,
    grad_zhat: &DenseMatrix<T>,
    acc: &mut GradAccum<'_, T>,
) {
    let tokens = &cache.tokens;
    let n = tokens.len();
    let d = head_dim;
    let mut p = vec![T::zero(); d];
    let mut dp = vec![T::zero(); d];
    let mut da = vec![T::zero(); n];
    for (hi, head) in heads.enumerate() {
        let cols = head * d..(head + 1) * d;
        for a in 0..n {
            let ta = tokens[a];
            let dz = &grad_zhat.row(ta)[cols.clone()];
            let row = &cache.probs[(hi * n + a) * n..(hi * n + a + 1) * n];
            for (b, slot) in da.iter_mut().enumerate() {
                *slot = dot(dz, Qkv::head(&qkv.v, tokens[b], head, d));
            }
            let mean = row.iter().zip(&da).fold(T::zero(), |s, (&w, &g)| s + w * g);
            let qa = Qkv::head(&qkv.q, ta, head, d);
            for b in 0..n {
                let tb = tokens[b];
                let w = row[b];
                for (g, &z) in acc.v.row_mut(tb)[cols.clone()].iter_mut().zip(dz) {
                    *g = *g + w * z;
                }
                let ds = w * (da[b] - mean);
                if ds == T::zero() {
                    continue;
                }
                let kb = Qkv::head(&qkv.k, tb, head, d);
                let idx = cache.pair_idx[a * n + b];
                tables.encoding_for_head(idx, head, &mut p);
                let gq = &mut acc.q.row_mut(ta)[cols.clone()];
                for x in 0..d {
                    gq[x] = gq[x] + ds * (scale * kb[x] + p[x]);
                }
                let gk = &mut acc.k.row_mut(tb)[cols.clone()];
                for x in 0..d {
                    gk[x] = gk[x] + ds * (scale * qa[x] + p[x]);
                }
                for x in 0..d {
                    dp[x] = ds * (qa[x] + kb[x]);
                }
                acc.tables.scatter_add(idx, head, &dp);
            }
        }
    }
}

fn check_tables<T: Real>(tables: &PosTables<T>, params: &AttentionParams<T>, table_len: usize) -> Result<()> {
    if tables.heads() != params.heads || tables.head_dim() != params.head_dim || tables.table_len() != table_len {
        return Err(shape_err!(
            "position tables are {}x{}x{}, expected {}x{}x{}",
            tables.table_len(),
            tables.heads(),
            tables.head_dim(),
            table_len,
            params.heads,
            params.head_dim
        ));
    }
    Ok(())
}

pub(crate) struct ForwardOutput<T> {
    pub z: DenseMatrix<T>,
    pub zhat: DenseMatrix<T>,
    pub trace: Option<ForwardTrace<T>>,
}

/// Shared forward driver: project once, run each branch over its windows,
/// scatter head outputs back by token id, then project.
pub(crate) fn forward_branches<T: Real>(
    features: &DenseMatrix<T>,
    params: &AttentionParams<T>,
    branches: &[BranchSpec<'_, T>],
    traced: bool,
) -> Result<ForwardOutput<T>> {
    use rayon::prelude::*;

    features.ensure_finite("input features")?;
    let qkv = project_qkv(features, params)?;
    let n_tokens = features.rows();
    let d = params.head_dim;
    let scale = params.logit_scale();
    let mut zhat = DenseMatrix::zeros(n_tokens, params.channels());
    let mut traces = Vec::new();

    for branch in branches {
        check_tables(branch.tables, params, branch.indexer.table_len)?;
        if branch.heads.end > params.heads {
            return Err(shape_err!("branch heads {:?} exceed head count {}", branch.heads, params.heads));
        }
        let results: Vec<WindowResult<T>> = branch
            .windows
            .par_iter()
            .map(|tokens| {
                let n = tokens.len();
                let mut pair_idx = Vec::with_capacity(n * n);
                for &ti in tokens {
                    for &tj in tokens {
                        pair_idx.push(branch.indexer.index(branch.coords.relative(ti, tj)));
                    }
                }
                let (out, probs) =
                    window_forward(&qkv, tokens, &pair_idx, branch.heads.clone(), d, branch.tables, scale);
                (pair_idx, out, probs)
            })
            .collect();

        let width = branch.heads.len() * d;
        let cols = branch.heads.start * d..branch.heads.end * d;
        let mut caches = Vec::with_capacity(if traced { results.len() } else { 0 });
        for (tokens, (pair_idx, out, probs)) in branch.windows.iter().zip(results) {
            for (a, &t) in tokens.iter().enumerate() {
                zhat.row_mut(t)[cols.clone()].copy_from_slice(&out[a * width..(a + 1) * width]);
            }
            if traced {
                caches.push(WindowCache { tokens: tokens.clone(), pair_idx, probs });
            }
        }
        if traced {
            traces.push(BranchTrace { heads: branch.heads.clone(), tables: branch.tables.clone(), windows: caches });
        }
    }

    let z = matmul(&zhat, &params.w_proj)?;
    z.ensure_finite("attention output")?;
    let trace = traced.then(|| ForwardTrace {
        params: params.clone(),
        features: features.clone(),
        qkv,
        zhat: zhat.clone(),
        branches: traces,
    });
    Ok(ForwardOutput { z, zhat, trace })
}

/// Exact gradients of `sum(grad_z ⊙ z)` for the forward call that produced `trace`.
pub fn backward<T: Real>(trace: &ForwardTrace<T>, grad_z: &DenseMatrix<T>) -> Result<Gradients<T>> {
    let params = &trace.params;
    if grad_z.shape() != trace.zhat.shape() {
        return Err(shape_err!("output gradient is {:?}, forward produced {:?}", grad_z.shape(), trace.zhat.shape()));
    }
    grad_z.ensure_finite("output gradient")?;
    let (n, c) = trace.zhat.shape();
    let scale = params.logit_scale();

    let w_proj = matmul_tn(&trace.zhat, grad_z)?;
    let grad_zhat = matmul_nt(grad_z, &params.w_proj)?;

    let mut gq = DenseMatrix::zeros(n, c);
    let mut gk = DenseMatrix::zeros(n, c);
    let mut gv = DenseMatrix::zeros(n, c);
    let mut table_grads = Vec::with_capacity(trace.branches.len());
    for branch in &trace.branches {
        let t = &branch.tables;
        let mut gt = PosTables::zeros(t.table_len(), t.heads(), t.head_dim());
        let mut acc = GradAccum { q: &mut gq, k: &mut gk, v: &mut gv, tables: &mut gt };
        for cache in &branch.windows {
            window_backward(&trace.qkv, cache, branch.heads.clone(), params.head_dim, t, scale, &grad_zhat, &mut acc);
        }
        table_grads.push(gt);
    }

    let mut features = matmul_nt(&gq, &params.w_q)?;
    features.add_assign(&matmul_nt(&gk, &params.w_k)?)?;
    features.add_assign(&matmul_nt(&gv, &params.w_v)?)?;
    Ok(Gradients {
        features,
        w_q: matmul_tn(&trace.features, &gq)?,
        w_k: matmul_tn(&trace.features, &gk)?,
        w_v: matmul_tn(&trace.features, &gv)?,
        w_proj,
        tables: table_grads,
    })
}

/// Full multi-head attention over a single window of `n` tokens.
///
/// `rel` holds the offset of token `j` as seen from token `i`; `indexer`
/// turns each offset into table indices.
pub fn window_attention_forward<T: Real>(
    features: &DenseMatrix<T>,
    params: &AttentionParams<T>,
    tables: &PosTables<T>,
    rel: &RelCoords,
    indexer: &PairIndexer,
) -> Result<(DenseMatrix<T>, ForwardTrace<T>)> {
    let n = features.rows();
    if n == 0 {
        return Err(shape_err!("a window needs at least one token"));
    }
    if rel.len() != n {
        return Err(shape_err!("{} relative coordinates for {n} tokens", rel.len()));
    }
    let branch = BranchSpec {
        heads: 0..params.heads,
        windows: vec![(0..n).collect()],
        coords: CoordSource::Given(rel),
        indexer: *indexer,
        tables,
    };
    let out = forward_branches(features, params, &[branch], true)?;
    Ok((out.z, out.trace.expect("traced forward keeps its trace")))
}

pub fn window_attention_backward<T: Real>(trace: &ForwardTrace<T>, grad_z: &DenseMatrix<T>) -> Result<Gradients<T>> {
    backward(trace, grad_z)
}

/// Projection weights plus the radial and cubic position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereWeights<T> {
    pub params: AttentionParams<T>,
    pub tables_radial: PosTables<T>,
    pub tables_cubic: PosTables<T>,
}

impl<T: Real> SphereWeights<T> {
    /// Weights uniform in `±1/sqrt(c)`, tables uniform in `±0.02`.
    pub fn random(heads: usize, head_dim: usize, table_len: usize, rng: &mut impl Rng) -> Self {
        let c = (heads * head_dim).max(1) as f64;
        Self {
            params: AttentionParams::random(heads, head_dim, 1.0 / c.sqrt(), rng),
            tables_radial: PosTables::random(table_len, heads, head_dim, INIT_SCALE, rng),
            tables_cubic: PosTables::random(table_len, heads, head_dim, INIT_SCALE, rng),
        }
    }

    pub fn zeros(heads: usize, head_dim: usize, table_len: usize) -> Self {
        Self {
            params: AttentionParams::zeros(heads, head_dim),
            tables_radial: PosTables::zeros(table_len, heads, head_dim),
            tables_cubic: PosTables::zeros(table_len, heads, head_dim),
        }
    }

    pub fn table_len(&self) -> usize {
        self.tables_radial.table_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let l = self.tables_radial.table_len();
        check_tables(&self.tables_radial, &self.params, l)?;
        check_tables(&self.tables_cubic, &self.params, l)
    }

    pub fn cast<U: Real>(&self) -> SphereWeights<U> {
        SphereWeights {
            params: self.params.cast(),
            tables_radial: self.tables_radial.cast(),
            tables_cubic: self.tables_cubic.cast(),
        }
    }
}
