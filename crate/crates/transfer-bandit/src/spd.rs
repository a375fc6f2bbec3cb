//! Dense SPD linear algebra shared by every other module: elliptic norms,
//! rank-one updates, log-determinants, parallel sums, generalized eigenvalues,
//! and waterfilling.
//!
//! Matrices are small (d up to ~100) and dense, with condition numbers up to
//! ~1e12; both bounds are working assumptions of this crate, not enforced
//! limits. Every `SpdMatrix` carries a Cholesky factor computed at
//! construction, so quadratic forms and solves never form an explicit
//! inverse: `M^{-1} x` is always two triangular solves against the cached
//! factor.

use crate::error::{Error, Result};

/// Symmetry tolerance accepted at construction: `|M[i][j] - M[j][i]|` must be
/// at most `SYMMETRY_TOL * max(1, |M[i][j]|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Factor-fidelity tolerance: the cached factor reproduces the entries to
/// `||L L^T - M||_max <= REFACTOR_TOL`.
pub const REFACTOR_TOL: f64 = 1e-9;

/// A real vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    entries: Vec<f64>,
}

impl Vector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("vector must have positive dimension".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("vector entries must be finite".into()));
        }
        Ok(Vector { entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Vector {
            entries: vec![0.0; dim],
        }
    }

    /// Standard basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut entries = vec![0.0; dim];
        entries[i] = 1.0;
        Vector { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.entries, &other.entries)
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector {
            entries: self.entries.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Fixture text format: first line the dimension, second line the entries.
    pub fn to_text(&self) -> String {
        let row: Vec<String> = self.entries.iter().map(|v| format!("{v:.16e}")).collect();
        format!("{}\n{}\n", self.dim(), row.join(" "))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let dim: usize = lines
            .next()
            .ok_or_else(|| Error::Input("empty vector text".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Input(format!("bad vector dimension line: {e}")))?;
        let entries = parse_row(
            lines
                .next()
                .ok_or_else(|| Error::Input("missing vector entries".into()))?,
            dim,
        )?;
        Vector::new(entries)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn parse_row(line: &str, dim: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Input(format!("bad number `{tok}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if row.len() != dim {
        return Err(Error::Input(format!(
            "expected {dim} entries per row, found {}",
            row.len()
        )));
    }
    Ok(row)
}

/// A symmetric positive-definite matrix with a cached lower-triangular
/// Cholesky factor. Immutable after construction; updates return new values.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    dim: usize,
    /// Row-major dense entries, kept exactly symmetric.
    entries: Vec<f64>,
    /// Lower-triangular Cholesky factor `L` with `L L^T = entries`
    /// (possibly after a one-shot diagonal jitter; see `factorize`).
    factor: Vec<f64>,
    log_det: f64,
}

impl SpdMatrix {
    /// Builds from row-major entries, checking symmetry within [`SYMMETRY_TOL`]
    /// and factorizing. Storage is symmetrized exactly (averaged) so later
    /// arithmetic cannot drift.
    pub fn from_entries(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("matrix must have positive dimension".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "expected {} entries for a {dim}x{dim} matrix, found {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("matrix entries must be finite".into()));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = entries[i * dim + j];
                let b = entries[j * dim + i];
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(Error::Input(format!(
                        "matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Self::from_symmetrized(dim, entries)
    }

    /// Builds after forcing exact symmetry by averaging off-diagonal pairs.
    /// Used internally where roundoff may have broken symmetry slightly
    /// (e.g. products); the public constructor checks the tolerance first.
    pub(crate) fn from_symmetrized(dim: usize, mut entries: Vec<f64>) -> Result<Self> {
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (entries[i * dim + j] + entries[j * dim + i]);
                entries[i * dim + j] = avg;
                entries[j * dim + i] = avg;
            }
        }
        let factor = factorize(dim, &entries)?;
        let log_det = 2.0 * (0..dim).map(|i| factor[i * dim + i].ln()).sum::<f64>();
        Ok(SpdMatrix {
            dim,
            entries,
            factor,
            log_det,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim]).expect("identity is SPD")
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let dim = values.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, &v) in values.iter().enumerate() {
            entries[i * dim + i] = v;
        }
        Self::from_entries(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// The cached lower-triangular factor.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    /// `log det M`, read off the cached factor.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..d {
            out[i] = dot(&self.entries[i * d..(i + 1) * d], x);
        }
        out
    }

    /// Solves `M y = x` via two triangular solves against the factor.
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        let y = self.solve_lower(x);
        self.solve_lower_t(&y)
    }

    /// Solves `L y = x` (forward substitution).
    pub fn solve_lower(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i];
            for j in 0..i {
                s -= self.factor[i * d + j] * y[j];
            }
            y[i] = s / self.factor[i * d + i];
        }
        y
    }

    /// Solves `L^T y = x` (back substitution).
    pub fn solve_lower_t(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut y = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = x[i];
            for j in (i + 1)..d {
                s -= self.factor[j * d + i] * y[j];
            }
            y[i] = s / self.factor[i * d + i];
        }
        y
    }

    /// `sqrt(x^T M x)`, evaluated as `||L^T x||_2` so it is nonnegative by
    /// construction.
    pub fn elliptic_norm(&self, x: &Vector) -> Result<f64> {
        self.check_dim(x)?;
        let d = self.dim;
        let mut sq = 0.0;
        for i in 0..d {
            // (L^T x)_i = sum_{j >= i} L[j][i] x[j]
            let mut s = 0.0;
            for j in i..d {
                s += self.factor[j * d + i] * x.as_slice()[j];
            }
            sq += s * s;
        }
        Ok(sq.sqrt())
    }

    /// `sqrt(x^T M^{-1} x)`, evaluated as `||L^{-1} x||_2` via one forward
    /// solve; never forms the inverse.
    pub fn inv_norm(&self, x: &Vector) -> Result<f64> {
        self.check_dim(x)?;
        let y = self.solve_lower(x.as_slice());
        Ok(dot(&y, &y).sqrt())
    }

    /// Returns `M + x x^T`, refactorized.
    pub fn rank_one_update(&self, x: &Vector) -> Result<SpdMatrix> {
        self.check_dim(x)?;
        let d = self.dim;
        let mut entries = self.entries.clone();
        let xs = x.as_slice();
        for i in 0..d {
            for j in i..d {
                let v = xs[i] * xs[j];
                entries[i * d + j] += v;
                if j != i {
                    entries[j * d + i] += v;
                }
            }
        }
        Self::from_symmetrized(d, entries)
    }

    /// Returns `M + S` for a raw symmetric accumulator `S` (row-major, must be
    /// the same dimension). The result must be SPD.
    pub fn add_sym(&self, sym: &[f64]) -> Result<SpdMatrix> {
        if sym.len() != self.dim * self.dim {
            return Err(Error::Dimension(
                "symmetric addend has wrong dimension".into(),
            ));
        }
        let entries: Vec<f64> = self.entries.iter().zip(sym).map(|(a, b)| a + b).collect();
        Self::from_symmetrized(self.dim, entries)
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "vector dim {} vs matrix dim {}",
                x.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Fixture text format: first line the dimension, then `d` rows of `d`
    /// space-separated decimals printed with 17 significant digits, which
    /// round-trips f64 exactly.
    pub fn to_text(&self) -> String {
        let d = self.dim;
        let mut out = format!("{d}\n");
        for i in 0..d {
            let row: Vec<String> = (0..d)
                .map(|j| format!("{:.16e}", self.entries[i * d + j]))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let dim: usize = lines
            .next()
            .ok_or_else(|| Error::Input("empty matrix text".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Input(format!("bad matrix dimension line: {e}")))?;
        let mut entries = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            let line = lines
                .next()
                .ok_or_else(|| Error::Input("matrix text has too few rows".into()))?;
            entries.extend(parse_row(line, dim)?);
        }
        Self::from_entries(dim, entries)
    }
}

/// Cholesky with a one-shot jitter retry: accumulated rank-one sums can lose
/// positive definiteness at float precision, so a failed factorization is
/// retried once with `1e-10 * trace / d` added to the diagonal before raising
/// a numerical error.
fn factorize(dim: usize, entries: &[f64]) -> Result<Vec<f64>> {
    if let Some(f) = try_cholesky(dim, entries) {
        return Ok(f);
    }
    let trace: f64 = (0..dim).map(|i| entries[i * dim + i]).sum();
    let jitter = 1e-10 * trace / dim as f64;
    let mut bumped = entries.to_vec();
    for i in 0..dim {
        bumped[i * dim + i] += jitter;
    }
    try_cholesky(dim, &bumped)
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

fn try_cholesky(dim: usize, m: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut s = m[j * dim + j];
        for k in 0..j {
            s -= l[j * dim + k] * l[j * dim + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        let ljj = s.sqrt();
        l[j * dim + j] = ljj;
        for i in (j + 1)..dim {
            let mut v = m[i * dim + j];
            for k in 0..j {
                v -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = v / ljj;
        }
    }
    Some(l)
}

/// `sqrt(x^T M x)`.
pub fn elliptic_norm(x: &Vector, m: &SpdMatrix) -> Result<f64> {
    m.elliptic_norm(x)
}

/// `sqrt(x^T M^{-1} x)` via triangular solves.
pub fn inv_norm(x: &Vector, m: &SpdMatrix) -> Result<f64> {
    m.inv_norm(x)
}

/// `M + x x^T`.
pub fn rank_one_update(m: &SpdMatrix, x: &Vector) -> Result<SpdMatrix> {
    m.rank_one_update(x)
}

/// `log det M`.
pub fn log_det(m: &SpdMatrix) -> f64 {
    m.log_det()
}

/// The parallel sum `(A^{-1} + B^{-1})^{-1}`, computed as `B (A+B)^{-1} A`
/// and then symmetrized. The result is dominated by both `A` and `B` in
/// Loewner order.
pub fn parallel_sum(a: &SpdMatrix, b: &SpdMatrix) -> Result<SpdMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "parallel_sum dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let sum = a.add_sym(b.entries())?;
    // X = (A+B)^{-1} A, column by column.
    let mut x = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = a.entry(i, j);
        }
        let solved = sum.solve(&col);
        for i in 0..d {
            x[i * d + j] = solved[i];
        }
    }
    // M = B X.
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += b.entry(i, k) * x[k * d + j];
            }
            m[i * d + j] = s;
        }
    }
    SpdMatrix::from_symmetrized(d, m)
}

/// Largest generalized eigenvalue `lambda_max(G^{1/2} M^{-1} G^{1/2})`,
/// computed via a symmetric eigen-solve of `L_G^T M^{-1} L_G` where `L_G` is
/// the cached factor of `G` (congruent to the target pencil, so the spectrum
/// matches without forming `G^{1/2}`).
pub fn gen_eig_max(g: &SpdMatrix, m: &SpdMatrix) -> Result<f64> {
    if g.dim() != m.dim() {
        return Err(Error::Dimension(format!(
            "gen_eig_max dims {} vs {}",
            g.dim(),
            m.dim()
        )));
    }
    let d = g.dim();
    // Y = M^{-1} L_G, column by column.
    let mut y = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = g.factor()[i * d + j];
        }
        let solved = m.solve(&col);
        for i in 0..d {
            y[i * d + j] = solved[i];
        }
    }
    // C = L_G^T Y, symmetrized.
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += g.factor()[k * d + i] * y[k * d + j];
            }
            c[i * d + j] = s;
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (c[i * d + j] + c[j * d + i]);
            c[i * d + j] = avg;
            c[j * d + i] = avg;
        }
    }
    let eigs = sym_eigenvalues(d, &c)?;
    Ok(*eigs.last().expect("nonempty spectrum"))
}

/// Eigenvalues of a dense symmetric matrix (ascending), via cyclic Jacobi
/// rotations. Adequate for the dimensions this crate targets (d <= ~100).
pub fn sym_eigenvalues(dim: usize, entries: &[f64]) -> Result<Vec<f64>> {
    if entries.len() != dim * dim {
        return Err(Error::Dimension("sym_eigenvalues entry count".into()));
    }
    let mut a = entries.to_vec();
    let scale: f64 = a
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    for _sweep in 0..200 {
        let mut off = 0.0_f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                off = off.max(a[i * dim + j].abs());
            }
        }
        if off <= tol {
            let mut eigs: Vec<f64> = (0..dim).map(|i| a[i * dim + i]).collect();
            eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(eigs);
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::Numerical(
        "Jacobi eigen-solve did not converge".into(),
    ))
}

/// Waterfilling information gain: the maximum of
/// `sum_j log(1 + a_j / g_j)` over `a_j >= 0`, `sum_j a_j <= B`, where `g_j`
/// are the eigenvalues of `G`.
///
/// The water level `tau` solving `sum_j (tau - g_j)_+ = B` is found exactly on
/// the active segment of the sorted spectrum (the constraint is piecewise
/// linear in `tau`, so no iterative root-find is needed), and
/// `Phi_G(B) = sum_{j: g_j < tau} log(tau / g_j)` with `Phi_G(0) = 0`.
pub fn waterfill_phi(g: &SpdMatrix, budget: f64) -> Result<f64> {
    if budget < 0.0 {
        return Err(Error::Input("waterfill budget must be >= 0".into()));
    }
    if budget == 0.0 {
        return Ok(0.0);
    }
    let eigs = sym_eigenvalues(g.dim(), g.entries())?;
    if eigs[0] <= 0.0 {
        return Err(Error::Numerical(
            "waterfill requires a positive spectrum".into(),
        ));
    }
    let d = eigs.len();
    let mut prefix = 0.0;
    for k in 1..=d {
        prefix += eigs[k - 1];
        let tau = (budget + prefix) / k as f64;
        if k == d || tau <= eigs[k] {
            let phi = eigs[..k]
                .iter()
                .filter(|&&gj| gj < tau)
                .map(|&gj| (tau / gj).ln())
                .sum();
            return Ok(phi);
        }
    }
    unreachable!("waterfill segment scan always terminates at k = d");
}
