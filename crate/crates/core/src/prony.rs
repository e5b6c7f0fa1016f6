//! Hankel regression blocks, the centralized least-squares oracle, and the
//! conversion from characteristic-polynomial coefficients to modes.
//!
//! Sign convention: a block solves `H x ≈ c` with `x = -a`, where `a` holds the
//! coefficients of the monic polynomial `z^2n + a_1 z^(2n-1) + ... + a_2n`.
//! The consensus loop works directly on `x`.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalgen::{Mode, RingdownSignal};

/// Coefficients `a_1..a_2n` of the monic characteristic polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharPolyCoeffs {
    pub a: Vec<f64>,
}

impl CharPolyCoeffs {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polynomial coefficient".into()));
        }
        Ok(Self { a })
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Coefficients from a regression solution `x = -a`.
    pub fn from_regression(x: &DVector<f64>) -> Result<Self> {
        Self::new(x.iter().map(|v| -v).collect())
    }

    /// Regression vector `x = -a`.
    pub fn regression(&self) -> DVector<f64> {
        DVector::from_iterator(self.a.len(), self.a.iter().map(|v| -v))
    }

    /// Expands `prod (z - r)` into monomial coefficients, dropping the leading 1.
    /// Imaginary parts are discarded, so `roots` must be closed under conjugation.
    pub fn from_roots(roots: &[Complex<f64>]) -> Self {
        let mut poly = vec![Complex::new(1.0, 0.0)];
        for r in roots {
            let mut next = vec![Complex::new(0.0, 0.0); poly.len() + 1];
            for (j, c) in poly.iter().enumerate() {
                next[j] += c;
                next[j + 1] -= c * r;
            }
            poly = next;
        }
        Self { a: poly[1..].iter().map(|c| c.re).collect() }
    }

    /// Polynomial whose roots are `exp(lambda T)` for every mode and its conjugate.
    pub fn from_modes(modes: &[Mode], sample_period: f64) -> Self {
        let mut roots = Vec::with_capacity(2 * modes.len());
        for m in modes {
            let z = (m.lambda() * sample_period).exp();
            roots.push(z);
            roots.push(z.conj());
        }
        Self::from_roots(&roots)
    }
}

/// One area's regression pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlock {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub area_id: usize,
}

impl HankelBlock {
    pub fn order(&self) -> usize {
        self.h.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Residual norm `||H x - c||`.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        (&self.h * x - &self.c).norm()
    }
}

/// Largest window usable with `m` samples and `n` pairs.
pub fn default_window(m: usize, n: usize) -> usize {
    m.saturating_sub(2 * n + 1)
}

/// Single-channel block: row `r` is `[y(2n-1+r), ..., y(r)]`, target `y(2n+r)`.
pub fn build_hankel(signal: &RingdownSignal, channel: usize, n: usize, ell: usize) -> Result<HankelBlock> {
    if channel >= signal.channels() {
        return Err(Error::InvalidArgument(format!("channel {channel} out of range")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let m = signal.len();
    let order = 2 * n;
    if m == 0 || order + ell > m - 1 {
        return Err(Error::Window { lhs: order + ell, limit: m.saturating_sub(1), m });
    }
    let y = signal.samples.row(channel);
    let h = DMatrix::from_fn(ell + 1, order, |r, j| y[order - 1 + r - j]);
    let c = DVector::from_fn(ell + 1, |r, _| y[order + r]);
    Ok(HankelBlock { h, c, area_id: channel })
}

/// Vertical concatenation in the given order; the result takes the first block's id.
pub fn stack_blocks(blocks: &[HankelBlock]) -> Result<HankelBlock> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no blocks to stack".into()))?;
    let cols = first.order();
    if let Some(b) = blocks.iter().find(|b| b.order() != cols) {
        return Err(Error::Dimension(format!(
            "block {} has {} columns, expected {cols}",
            b.area_id,
            b.order()
        )));
    }
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut h = DMatrix::zeros(rows, cols);
    let mut c = DVector::zeros(rows);
    let mut at = 0;
    for b in blocks {
        h.rows_mut(at, b.rows()).copy_from(&b.h);
        c.rows_mut(at, b.rows()).copy_from(&b.c);
        at += b.rows();
    }
    Ok(HankelBlock { h, c, area_id: first.area_id })
}

/// Stacked block over a set of channels, labelled with `area_id`.
pub fn build_area_block(
    signal: &RingdownSignal,
    channels: &[usize],
    n: usize,
    ell: usize,
    area_id: usize,
) -> Result<HankelBlock> {
    let per_channel = channels
        .iter()
        .map(|&ch| build_hankel(signal, ch, n, ell))
        .collect::<Result<Vec<_>>>()?;
    let mut block = stack_blocks(&per_channel)?;
    block.area_id = area_id;
    Ok(block)
}

/// Minimizer `x` of `½||H x - c||² + ½ ridge ||x||²` by SVD.
///
/// With `ridge = 0` and rank-deficient `H` this is the minimum-norm solution.
pub fn solve_regression(block: &HankelBlock, ridge: f64) -> Result<DVector<f64>> {
    if block.rows() == 0 || block.order() == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    if block.h.iter().chain(block.c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("block entry".into()));
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::InvalidArgument(format!("ridge = {ridge}")));
    }
    let cols = block.order();
    let (h, c) = if ridge > 0.0 {
        let rows = block.rows();
        let mut h = DMatrix::zeros(rows + cols, cols);
        h.rows_mut(0, rows).copy_from(&block.h);
        h.rows_mut(rows, cols).fill_diagonal(ridge.sqrt());
        let mut c = DVector::zeros(rows + cols);
        c.rows_mut(0, rows).copy_from(&block.c);
        (h, c)
    } else {
        (block.h.clone(), block.c.clone())
    };
    let size = h.nrows().max(cols) as f64;
    let svd = h.svd(true, true);
    let eps = svd.singular_values.max() * f64::EPSILON * size;
    svd.solve(&c, eps).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn centralized_ls(block: &HankelBlock, ridge: f64) -> Result<CharPolyCoeffs> {
    CharPolyCoeffs::from_regression(&solve_regression(block, ridge)?)
}

fn eval_poly(a: &[f64], z: Complex<f64>) -> (Complex<f64>, Complex<f64>) {
    let mut p = Complex::new(1.0, 0.0);
    let mut dp = Complex::new(0.0, 0.0);
    for &c in a {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// All roots of the monic polynomial from companion-matrix eigenvalues,
/// refined by a few guarded Newton steps and sorted by descending magnitude,
/// then ascending phase.
pub fn char_poly_roots(coeffs: &CharPolyCoeffs) -> Result<Vec<Complex<f64>>> {
    let a = &coeffs.a;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polynomial coefficient".into()));
    }
    let m = a.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut companion = DMatrix::zeros(m, m);
    for j in 0..m {
        companion[(0, j)] = -a[j];
    }
    for i in 1..m {
        companion[(i, i - 1)] = 1.0;
    }
    let mut roots: Vec<Complex<f64>> = companion.complex_eigenvalues().iter().copied().collect();
    for z in roots.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = eval_poly(a, *z);
            if p.norm() == 0.0 || dp.norm() == 0.0 {
                break;
            }
            let cand = *z - p / dp;
            if eval_poly(a, cand).0.norm() < p.norm() {
                *z = cand;
            } else {
                break;
            }
        }
    }
    roots.sort_by(|x, y| y.norm().total_cmp(&x.norm()).then(x.arg().total_cmp(&y.arg())));
    Ok(roots)
}

/// Maps z-plane roots to modes via the principal logarithm.
///
/// Roots with positive imaginary part give one mode each; their conjugates are
/// absorbed. Real roots give `omega = 0`, except negative reals which land at
/// the Nyquist frequency `pi/T`.
pub fn to_continuous_modes(roots: &[Complex<f64>], sample_period: f64) -> Result<Vec<Mode>> {
    if !sample_period.is_finite() || sample_period <= 0.0 {
        return Err(Error::InvalidArgument(format!("sample_period = {sample_period}")));
    }
    let mut modes = Vec::new();
    for z in roots {
        if z.re == 0.0 && z.im == 0.0 {
            return Err(Error::DegenerateRoot);
        }
        if z.im < 0.0 {
            continue;
        }
        let lambda = z.ln() / sample_period;
        modes.push(Mode::new(-lambda.re, lambda.im.abs()));
    }
    Ok(modes)
}

/// Recovers modes from regression coefficients in one call.
pub fn modes_from_coeffs(coeffs: &CharPolyCoeffs, sample_period: f64) -> Result<Vec<Mode>> {
    to_continuous_modes(&char_poly_roots(coeffs)?, sample_period)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePair {
    pub truth: Mode,
    pub estimate: Mode,
    pub sigma_error: f64,
    pub omega_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub pairs: Vec<ModePair>,
    /// Largest of all `|dσ|` and `|dΩ|` over matched pairs.
    pub max_error: f64,
    pub spurious: Vec<Mode>,
    pub unmatched_truth: Vec<Mode>,
}

/// Greedy nearest-neighbour matching in the (σ, Ω) plane.
pub fn compare_modes(estimated: &[Mode], truth: &[Mode]) -> ModeComparison {
    let mut candidates = Vec::with_capacity(estimated.len() * truth.len());
    for (ti, t) in truth.iter().enumerate() {
        for (ei, e) in estimated.iter().enumerate() {
            candidates.push(((t.sigma - e.sigma).hypot(t.omega - e.omega), ti, ei));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut truth_used = vec![false; truth.len()];
    let mut est_used = vec![false; estimated.len()];
    let mut matched = Vec::new();
    for (d, ti, ei) in candidates {
        if !d.is_nan() && !truth_used[ti] && !est_used[ei] {
            truth_used[ti] = true;
            est_used[ei] = true;
            matched.push((ti, ei));
        }
    }
    matched.sort();
    let pairs: Vec<ModePair> = matched
        .into_iter()
        .map(|(ti, ei)| ModePair {
            truth: truth[ti],
            estimate: estimated[ei],
            sigma_error: (truth[ti].sigma - estimated[ei].sigma).abs(),
            omega_error: (truth[ti].omega - estimated[ei].omega).abs(),
        })
        .collect();
    let max_error = pairs
        .iter()
        .map(|p| p.sigma_error.max(p.omega_error))
        .fold(0.0, f64::max);
    ModeComparison {
        pairs,
        max_error,
        spurious: estimated.iter().zip(&est_used).filter(|(_, u)| !**u).map(|(m, _)| *m).collect(),
        unmatched_truth: truth.iter().zip(&truth_used).filter(|(_, u)| !**u).map(|(m, _)| *m).collect(),
    }
}
