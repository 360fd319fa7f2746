//! Spline bases, penalty matrices, identifiability constraints, and design
//! matrix assembly for additive model specifications.
//!
//! Smooth terms use cubic regression splines: natural cubic spline
//! interpolation through knots placed at equally spaced quantiles of the
//! covariate, with the integrated squared second derivative as penalty.
//! Each smooth block is centred (sum-to-zero constraint absorbed by an
//! orthogonal reparameterisation) so the intercept stays identifiable.

use crate::data::{DataError, Table};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("smooth rank must be at least 3, got {0}")]
    RankTooSmall(usize),
    #[error("covariate '{var}' has {distinct} distinct values, need at least rank {rank}")]
    TooFewDistinct { var: String, distinct: usize, rank: usize },
    #[error("duplicate smooth term on covariate '{0}'")]
    DuplicateSmooth(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("design matrix is rank deficient: numeric rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("factor '{var}' has unseen level '{level}' in prediction data")]
    UnseenLevel { var: String, level: String },
    #[error("factor '{var}' needs at least 2 levels, found {found}")]
    DegenerateFactor { var: String, found: usize },
    #[error("model has no columns (empty spec without intercept)")]
    EmptyDesign,
}

fn default_true() -> bool {
    true
}

/// One term of a model specification, as parsed from the JSON grammar
/// `{"type":"smooth","var":"x","k":30}` / `{"type":"linear",...}` /
/// `{"type":"factor",...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TermSpec {
    Smooth { var: String, k: usize },
    Linear { var: String },
    Factor { var: String },
}

/// Declared additive structure: response, intercept flag, and terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    /// Optional simpler spec for the conditional-variance model used by the
    /// loss-bandwidth procedure. Same term grammar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_terms: Option<Vec<TermSpec>>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        let mut seen = Vec::new();
        for t in &self.terms {
            if let TermSpec::Smooth { var, k } = t {
                if *k < 3 {
                    return Err(BasisError::RankTooSmall(*k));
                }
                if seen.contains(var) {
                    return Err(BasisError::DuplicateSmooth(var.clone()));
                }
                seen.push(var.clone());
            }
        }
        Ok(())
    }

    /// The specification with the same response but the variance terms as its
    /// main terms (intercept-only when none are declared).
    pub fn variance_spec(&self) -> ModelSpec {
        ModelSpec {
            response: self.response.clone(),
            intercept: true,
            terms: self.variance_terms.clone().unwrap_or_default(),
            variance_terms: None,
        }
    }
}

/// Serialise a dense matrix as `{rows, cols, data}` with row-major data.
pub mod matrix_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct MatrixJson {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let mj = MatrixJson::deserialize(d)?;
        if mj.data.len() != mj.rows * mj.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(DMatrix::from_row_slice(mj.rows, mj.cols, &mj.data))
    }
}

/// A cubic regression spline basis before identifiability constraints:
/// `rank` knots, the map from knot heights to interior second derivatives,
/// and the integrated-squared-second-derivative penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrBasis {
    pub knots: Vec<f64>,
    /// Full `rank x rank` map beta -> f'' at the knots (zero first/last rows:
    /// natural boundary conditions).
    #[serde(with = "matrix_serde")]
    pub f2: DMatrix<f64>,
    /// Unconstrained `rank x rank` penalty; null space is {constant, linear}.
    #[serde(with = "matrix_serde")]
    pub penalty: DMatrix<f64>,
}

/// Equally spaced quantile knots (type-7 interpolation), falling back to
/// distinct-value indexing when ties would collapse adjacent knots.
fn quantile_knots(x: &[f64], rank: usize, var: &str) -> Result<Vec<f64>, BasisError> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut knots: Vec<f64> = (0..rank)
        .map(|i| {
            let pos = i as f64 / (rank - 1) as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < n {
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            } else {
                sorted[n - 1]
            }
        })
        .collect();
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        let mut uniq = sorted.clone();
        uniq.dedup();
        if uniq.len() < rank {
            return Err(BasisError::TooFewDistinct {
                var: var.to_string(),
                distinct: uniq.len(),
                rank,
            });
        }
        knots = (0..rank)
            .map(|i| uniq[(i as f64 / (rank - 1) as f64 * (uniq.len() - 1) as f64).round() as usize])
            .collect();
    }
    Ok(knots)
}

/// Build a cubic regression spline basis of the given rank with knots at
/// equally spaced quantiles of `x_values`.
pub fn build_cr_basis(x_values: &[f64], rank: usize) -> Result<CrBasis, BasisError> {
    build_cr_basis_named(x_values, rank, "<anonymous>")
}

fn build_cr_basis_named(x_values: &[f64], rank: usize, var: &str) -> Result<CrBasis, BasisError> {
    if rank < 3 {
        return Err(BasisError::RankTooSmall(rank));
    }
    let mut uniq = x_values.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    if uniq.len() < rank {
        return Err(BasisError::TooFewDistinct {
            var: var.to_string(),
            distinct: uniq.len(),
            rank,
        });
    }
    let knots = quantile_knots(x_values, rank, var)?;
    let r = rank;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();

    // Natural cubic spline machinery (banded B and D with F = B^-1 D):
    // beta -> interior second derivatives, penalty = D' B^-1 D.
    let mut d_mat = DMatrix::<f64>::zeros(r - 2, r);
    let mut b_mat = DMatrix::<f64>::zeros(r - 2, r - 2);
    for i in 0..r - 2 {
        d_mat[(i, i)] = 1.0 / h[i];
        d_mat[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d_mat[(i, i + 2)] = 1.0 / h[i + 1];
        b_mat[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < r - 2 {
            b_mat[(i, i + 1)] = h[i + 1] / 6.0;
            b_mat[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let b_inv_d = b_mat
        .clone()
        .cholesky()
        .expect("tridiagonal B is positive definite")
        .solve(&d_mat);
    let mut penalty = d_mat.transpose() * &b_inv_d;
    let sym = (&penalty + penalty.transpose()) * 0.5;
    penalty = sym;

    let mut f2 = DMatrix::<f64>::zeros(r, r);
    f2.rows_mut(1, r - 2).copy_from(&b_inv_d);
    Ok(CrBasis { knots, f2, penalty })
}

impl CrBasis {
    pub fn rank(&self) -> usize {
        self.knots.len()
    }

    /// Basis row at `x`; linear extension beyond the boundary knots.
    /// Returns the row and whether `x` required extrapolation.
    pub fn eval_row(&self, x: f64) -> (DVector<f64>, bool) {
        let r = self.rank();
        let k = &self.knots;
        let mut row = DVector::<f64>::zeros(r);
        if x < k[0] {
            let (b0, db0) = self.boundary_row_left();
            row = b0 + db0 * (x - k[0]);
            return (row, true);
        }
        if x > k[r - 1] {
            let (b1, db1) = self.boundary_row_right();
            row = b1 + db1 * (x - k[r - 1]);
            return (row, true);
        }
        // Interval index j with k[j] <= x <= k[j+1].
        let j = match k.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(idx) => idx.min(r - 2),
            Err(idx) => idx - 1,
        };
        let h = k[j + 1] - k[j];
        let dl = k[j + 1] - x;
        let dr = x - k[j];
        let wl = dl / h;
        let wr = dr / h;
        let sl = (dl * dl * dl / h - h * dl) / 6.0;
        let sr = (dr * dr * dr / h - h * dr) / 6.0;
        row[j] += wl;
        row[j + 1] += wr;
        for c in 0..r {
            row[c] += sl * self.f2[(j, c)] + sr * self.f2[(j + 1, c)];
        }
        (row, false)
    }

    /// Value and derivative rows at the left boundary knot.
    fn boundary_row_left(&self) -> (DVector<f64>, DVector<f64>) {
        let r = self.rank();
        let h = self.knots[1] - self.knots[0];
        let mut val = DVector::<f64>::zeros(r);
        val[0] = 1.0;
        let mut der = DVector::<f64>::zeros(r);
        der[0] = -1.0 / h;
        der[1] = 1.0 / h;
        for c in 0..r {
            der[c] += -h / 3.0 * self.f2[(0, c)] - h / 6.0 * self.f2[(1, c)];
        }
        (val, der)
    }

    fn boundary_row_right(&self) -> (DVector<f64>, DVector<f64>) {
        let r = self.rank();
        let h = self.knots[r - 1] - self.knots[r - 2];
        let mut val = DVector::<f64>::zeros(r);
        val[r - 1] = 1.0;
        let mut der = DVector::<f64>::zeros(r);
        der[r - 2] = -1.0 / h;
        der[r - 1] = 1.0 / h;
        for c in 0..r {
            der[c] += h / 6.0 * self.f2[(r - 2, c)] + h / 3.0 * self.f2[(r - 1, c)];
        }
        (val, der)
    }
}

/// A realised smooth term: the basis plus the absorbed sum-to-zero
/// constraint and the transformed (rank-1 x rank-1) penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub var: String,
    pub rank: usize,
    pub basis: CrBasis,
    /// Orthonormal null-space basis of the sum-to-zero constraint,
    /// `rank x (rank-1)`; the constrained block is `B Z`.
    #[serde(with = "matrix_serde")]
    pub constraint: DMatrix<f64>,
    /// Constrained penalty `Z' S Z`, positive semidefinite.
    #[serde(with = "matrix_serde")]
    pub penalty: DMatrix<f64>,
}

/// A realised design column group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "term")]
pub enum RealizedTerm {
    Intercept,
    Linear { var: String },
    Factor { var: String, levels: Vec<String> },
    Smooth(SmoothTerm),
}

impl RealizedTerm {
    pub fn label(&self) -> String {
        match self {
            RealizedTerm::Intercept => "(intercept)".to_string(),
            RealizedTerm::Linear { var } => format!("linear({var})"),
            RealizedTerm::Factor { var, .. } => format!("factor({var})"),
            RealizedTerm::Smooth(s) => format!("s({})", s.var),
        }
    }

    fn n_cols(&self) -> usize {
        match self {
            RealizedTerm::Intercept => 1,
            RealizedTerm::Linear { .. } => 1,
            RealizedTerm::Factor { levels, .. } => levels.len() - 1,
            RealizedTerm::Smooth(s) => s.rank - 1,
        }
    }
}

/// The assembled design: `n x d` matrix, zero-padded `d x d` penalty per
/// smooth, a term -> column-range map, and the realised terms needed to
/// rebuild rows for new data.
#[derive(Debug, Clone)]
pub struct DesignArtifacts {
    pub x: DMatrix<f64>,
    pub penalties: Vec<DMatrix<f64>>,
    pub col_map: Vec<(String, std::ops::Range<usize>)>,
    pub terms: Vec<RealizedTerm>,
    pub response: String,
    pub warnings: Vec<String>,
}

/// Orthonormal basis of the null space of `c'` via one Householder
/// reflection, giving the sum-to-zero reparameterisation.
fn constraint_nullspace(c: &DVector<f64>) -> DMatrix<f64> {
    let r = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    v[0] += c[0].signum() * norm;
    let vtv = v.dot(&v);
    // H = I - 2 v v' / v'v ; columns 1..r span the null space of c'.
    let mut z = DMatrix::<f64>::zeros(r, r - 1);
    for j in 1..r {
        for i in 0..r {
            let e = if i == j { 1.0 } else { 0.0 };
            z[(i, j - 1)] = e - 2.0 * v[i] * v[j] / vtv;
        }
    }
    z
}

fn realize_term(spec: &TermSpec, data: &Table) -> Result<RealizedTerm, BasisError> {
    match spec {
        TermSpec::Linear { var } => {
            data.numeric(var)?;
            Ok(RealizedTerm::Linear { var: var.clone() })
        }
        TermSpec::Factor { var } => {
            let values = data.text(var)?;
            let mut levels = values.clone();
            levels.sort();
            levels.dedup();
            if levels.len() < 2 {
                return Err(BasisError::DegenerateFactor { var: var.clone(), found: levels.len() });
            }
            Ok(RealizedTerm::Factor { var: var.clone(), levels })
        }
        TermSpec::Smooth { var, k } => {
            let x = data.numeric(var)?;
            let basis = build_cr_basis_named(x, *k, var)?;
            let n = x.len();
            // Column sums of the unconstrained block define the constraint.
            let mut colsum = DVector::<f64>::zeros(*k);
            for &xi in x {
                let (row, _) = basis.eval_row(xi);
                colsum += row;
            }
            let _ = n;
            let z = constraint_nullspace(&colsum);
            let pen = z.transpose() * &basis.penalty * &z;
            let pen = (&pen + pen.transpose()) * 0.5;
            Ok(RealizedTerm::Smooth(SmoothTerm {
                var: var.clone(),
                rank: *k,
                basis,
                constraint: z,
                penalty: pen,
            }))
        }
    }
}

/// Evaluate the columns of one realised term on a data table. Returns the
/// block and the number of rows that required smooth extrapolation.
fn eval_term(term: &RealizedTerm, data: &Table) -> Result<(DMatrix<f64>, usize), BasisError> {
    let n = data.n_rows();
    match term {
        RealizedTerm::Intercept => Ok((DMatrix::from_element(n, 1, 1.0), 0)),
        RealizedTerm::Linear { var } => {
            let x = data.numeric(var)?;
            Ok((DMatrix::from_iterator(n, 1, x.iter().copied()), 0))
        }
        RealizedTerm::Factor { var, levels } => {
            let values = data.text(var)?;
            let mut block = DMatrix::<f64>::zeros(n, levels.len() - 1);
            for (i, v) in values.iter().enumerate() {
                match levels.iter().position(|l| l == v) {
                    Some(0) => {}
                    Some(j) => block[(i, j - 1)] = 1.0,
                    None => {
                        return Err(BasisError::UnseenLevel {
                            var: var.clone(),
                            level: v.clone(),
                        })
                    }
                }
            }
            Ok((block, 0))
        }
        RealizedTerm::Smooth(s) => {
            let x = data.numeric(&s.var)?;
            let mut raw = DMatrix::<f64>::zeros(n, s.rank);
            let mut extrapolated = 0usize;
            for (i, &xi) in x.iter().enumerate() {
                let (row, extra) = s.basis.eval_row(xi);
                if extra {
                    extrapolated += 1;
                }
                raw.row_mut(i).copy_from(&row.transpose());
            }
            Ok((raw * &s.constraint, extrapolated))
        }
    }
}

/// Build the design matrix and penalties for a model specification.
pub fn assemble_design(spec: &ModelSpec, data: &Table) -> Result<DesignArtifacts, BasisError> {
    spec.validate()?;
    let n = data.n_rows();
    let mut terms = Vec::new();
    if spec.intercept {
        terms.push(RealizedTerm::Intercept);
    }
    for t in &spec.terms {
        terms.push(realize_term(t, data)?);
    }
    if terms.is_empty() {
        return Err(BasisError::EmptyDesign);
    }

    let d: usize = terms.iter().map(|t| t.n_cols()).sum();
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut col_map = Vec::new();
    let mut penalties = Vec::new();
    let mut offset = 0usize;
    for term in &terms {
        let (block, _) = eval_term(term, data)?;
        let w = block.ncols();
        x.columns_mut(offset, w).copy_from(&block);
        col_map.push((term.label(), offset..offset + w));
        if let RealizedTerm::Smooth(s) = term {
            let mut full = DMatrix::<f64>::zeros(d, d);
            full.view_mut((offset, offset), (w, w)).copy_from(&s.penalty);
            penalties.push(full);
        }
        offset += w;
    }

    let mut warnings = Vec::new();
    if n < d {
        warnings.push(format!("n = {n} < d = {d}: design has more columns than rows"));
    }

    // Full column rank after constraint absorption, by pivoted QR.
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let rmax = (0..d.min(n)).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    let tol = d as f64 * f64::EPSILON * rmax;
    let rank = (0..d.min(n)).filter(|&i| r[(i, i)].abs() > tol).count();
    if rank < d {
        return Err(BasisError::RankDeficient { rank, cols: d });
    }

    Ok(DesignArtifacts {
        x,
        penalties,
        col_map,
        terms,
        response: spec.response.clone(),
        warnings,
    })
}

/// Design rows for new data from realised terms alone, using stored knots
/// and constraint transforms. Returns the matrix and the count of rows that
/// needed smooth extrapolation.
pub fn rebuild_design(
    terms: &[RealizedTerm],
    new_data: &Table,
) -> Result<(DMatrix<f64>, usize), BasisError> {
    let n = new_data.n_rows();
    let d: usize = terms.iter().map(|t| t.n_cols()).sum();
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut offset = 0usize;
    let mut extrapolated = 0usize;
    for term in terms {
        let (block, extra) = eval_term(term, new_data)?;
        extrapolated += extra;
        x.columns_mut(offset, block.ncols()).copy_from(&block);
        offset += block.ncols();
    }
    Ok((x, extrapolated))
}

impl DesignArtifacts {
    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    /// Design rows for new data using the stored knots and constraint
    /// transforms. Returns the matrix and the count of extrapolated entries.
    pub fn predict_design(&self, new_data: &Table) -> Result<(DMatrix<f64>, usize), BasisError> {
        rebuild_design(&self.terms, new_data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn uniform_x(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn penalty_null_space_is_constant_plus_linear() {
        let basis = build_cr_basis(&uniform_x(50), 3).unwrap();
        let eig = basis.penalty.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let zeros = eig.eigenvalues.iter().filter(|&&v| v.abs() < 1e-10 * max).count();
        assert_eq!(zeros, 2);

        let basis = build_cr_basis(&uniform_x(100), 12).unwrap();
        let ones = DVector::from_element(12, 1.0);
        let lin = DVector::from_iterator(12, basis.knots.iter().copied());
        assert!((&basis.penalty * &ones).amax() < 1e-10);
        assert!((&basis.penalty * &lin).amax() < 1e-9);
    }

    #[test]
    fn linear_functions_reproduce_exactly() {
        let x = uniform_x(40);
        let basis = build_cr_basis(&x, 8).unwrap();
        let beta = DVector::from_iterator(8, basis.knots.iter().map(|&k| 2.0 - 3.0 * k));
        // Zero penalty on the line.
        assert!(beta.dot(&(&basis.penalty * &beta)).abs() < 1e-10);
        // Exact linear reproduction, including extrapolation.
        for &xi in &[0.0, 0.13, 0.5, 0.77, 1.0, -0.4, 1.6] {
            let (row, _) = basis.eval_row(xi);
            assert_relative_eq!(row.dot(&beta), 2.0 - 3.0 * xi, epsilon = 1e-10);
        }
    }

    #[test]
    fn basis_interpolates_at_knots() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let basis = build_cr_basis(&x, 9).unwrap();
        for (j, &kj) in basis.knots.iter().enumerate() {
            let (row, extra) = basis.eval_row(kj);
            assert!(!extra);
            for c in 0..9 {
                let expect = if c == j { 1.0 } else { 0.0 };
                assert_relative_eq!(row[c], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn penalty_matches_integrated_squared_second_derivative() {
        let x = uniform_x(200);
        let basis = build_cr_basis(&x, 10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let beta = DVector::from_iterator(10, (0..10).map(|_| rng.gen_range(-1.0..1.0)));
        let quad_form = beta.dot(&(&basis.penalty * &beta));

        // f'' is piecewise linear between knots (natural: zero at the ends);
        // Simpson is exact for its square on each interval.
        let d2 = &basis.f2 * &beta;
        let mut integral = 0.0;
        for j in 0..9 {
            let (a, b) = (basis.knots[j], basis.knots[j + 1]);
            let (fa, fb) = (d2[j], d2[j + 1]);
            let fm = 0.5 * (fa + fb);
            integral += (b - a) / 6.0 * (fa * fa + 4.0 * fm * fm + fb * fb);
        }
        assert_relative_eq!(quad_form, integral, max_relative = 1e-6);
    }

    #[test]
    fn basis_errors() {
        assert!(matches!(build_cr_basis(&uniform_x(30), 2), Err(BasisError::RankTooSmall(2))));
        let few = vec![1.0, 1.0, 2.0, 2.0, 3.0];
        assert!(matches!(
            build_cr_basis(&few, 5),
            Err(BasisError::TooFewDistinct { .. })
        ));
    }

    fn toy_table(n: usize) -> Table {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let mut t = Table::new();
        t.push_numeric("y", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        t.push_numeric("x", (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
        t.push_numeric("v", (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        t.push_text(
            "dow",
            (0..n).map(|i| ["mon", "tue", "wed"][i % 3].to_string()).collect(),
        );
        t
    }

    #[test]
    fn intercept_only_design() {
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![],
            variance_terms: None,
        };
        let art = assemble_design(&spec, &toy_table(20)).unwrap();
        assert_eq!(art.x.ncols(), 1);
        assert!(art.x.iter().all(|&v| v == 1.0));
        assert!(art.penalties.is_empty());
    }

    #[test]
    fn smooth_block_dimensions_and_centering() {
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![TermSpec::Smooth { var: "x".into(), k: 7 }],
            variance_terms: None,
        };
        let art = assemble_design(&spec, &toy_table(60)).unwrap();
        // One constraint removes one dimension: d = 1 + (7 - 1).
        assert_eq!(art.x.ncols(), 1 + 6);
        let block = art.x.columns(1, 6);
        for j in 0..6 {
            let mean: f64 = block.column(j).iter().sum::<f64>() / 60.0;
            assert!(mean.abs() < 1e-10, "column mean {mean}");
        }
        // Post-constraint penalty null space contains the linear direction only.
        let eig = art.terms.iter().find_map(|t| match t {
            RealizedTerm::Smooth(s) => Some(s.penalty.clone().symmetric_eigen()),
            _ => None,
        });
        let eig = eig.unwrap();
        let max = eig.eigenvalues.amax();
        let zeros = eig.eigenvalues.iter().filter(|&&v| v.abs() < 1e-10 * max).count();
        assert_eq!(zeros, 1);
    }

    #[test]
    fn design_composition_and_factor_encoding() {
        let data = toy_table(30);
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![
                TermSpec::Smooth { var: "x".into(), k: 5 },
                TermSpec::Linear { var: "v".into() },
                TermSpec::Factor { var: "dow".into() },
            ],
            variance_terms: None,
        };
        let art = assemble_design(&spec, &data).unwrap();
        assert_eq!(art.x.ncols(), 1 + 4 + 1 + 2);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let beta = DVector::from_iterator(art.x.ncols(), (0..art.x.ncols()).map(|_| rng.gen_range(-1.0..1.0)));
        // X beta equals the sum of per-term evaluations.
        let full = &art.x * &beta;
        let mut summed = DVector::<f64>::zeros(30);
        for (_, range) in &art.col_map {
            let cols = art.x.columns(range.start, range.len());
            let b = beta.rows(range.start, range.len());
            summed += cols * b;
        }
        assert!((full - summed).amax() < 1e-12);
    }

    #[test]
    fn predict_is_bitwise_train_and_deterministic() {
        let data = toy_table(40);
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![
                TermSpec::Smooth { var: "x".into(), k: 6 },
                TermSpec::Factor { var: "dow".into() },
            ],
            variance_terms: None,
        };
        let a1 = assemble_design(&spec, &data).unwrap();
        let a2 = assemble_design(&spec, &data).unwrap();
        assert!(a1.x.iter().zip(a2.x.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));

        let (xp, extra) = a1.predict_design(&data).unwrap();
        assert_eq!(extra, 0);
        assert!(a1.x.iter().zip(xp.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn predict_errors_and_extrapolation_flag() {
        let data = toy_table(25);
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![
                TermSpec::Smooth { var: "x".into(), k: 5 },
                TermSpec::Factor { var: "dow".into() },
            ],
            variance_terms: None,
        };
        let art = assemble_design(&spec, &data).unwrap();

        let mut out_of_range = Table::new();
        out_of_range.push_numeric("x", vec![99.0]);
        out_of_range.push_text("dow", vec!["mon".into()]);
        let (_, extra) = art.predict_design(&out_of_range).unwrap();
        assert_eq!(extra, 1);

        let mut unseen = Table::new();
        unseen.push_numeric("x", vec![0.5]);
        unseen.push_text("dow", vec!["sun".into()]);
        assert!(matches!(
            art.predict_design(&unseen),
            Err(BasisError::UnseenLevel { .. })
        ));
    }

    #[test]
    fn interval_width_matches_monte_carlo() {
        // sqrt(x' V x) against the sd of x' beta draws for beta ~ N(beta_hat, V).
        let data = toy_table(50);
        let spec = ModelSpec {
            response: "y".into(),
            intercept: true,
            terms: vec![TermSpec::Smooth { var: "x".into(), k: 5 }],
            variance_terms: None,
        };
        let art = assemble_design(&spec, &data).unwrap();
        let d = art.x.ncols();
        // A synthetic positive definite V.
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5));
        let v = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let chol = v.clone().cholesky().unwrap();
        let l = chol.l();

        let row = art.x.row(7).transpose();
        let analytic = (row.dot(&(&v * &row))).sqrt();
        let n_draws = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n_draws {
            let zs = DVector::from_iterator(d, (0..d).map(|_| {
                // Box-Muller on two uniforms.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            }));
            let draw = row.dot(&(&l * zs));
            sum += draw;
            sumsq += draw * draw;
        }
        let mean = sum / n_draws as f64;
        let sd = (sumsq / n_draws as f64 - mean * mean).sqrt();
        assert!((sd - analytic).abs() / analytic < 0.02, "sd {sd} vs analytic {analytic}");
    }
}
