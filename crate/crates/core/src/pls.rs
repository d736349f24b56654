//! Partial least squares regression by NIPALS, plus the recursive
//! block-augmentation update used to absorb one observation at a time.
//!
//! No centering or scaling is applied; an intercept is expected to be
//! supplied by the caller as a constant factor.
//!
//! Convention: weight vectors `w` have unit norm and score vectors `t` are
//! normalized to unit length, so the loadings `p = Eᵀt` and inner scalars
//! `b = ‖Fᵀt‖` carry the scale of the data. Under this convention
//! `XᵀX = P·Pᵀ` and `XᵀY = P·diag(b)·Qᵀ` once the X residual is exhausted,
//! which is what lets the stacked block `[Pᵀ; x]`, `[diag(b)·Qᵀ; y]` stand in
//! for the full history.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frobenius-norm tolerance on the X residual used when none is configured.
pub const DEFAULT_EPSILON: f64 = 1e-8;
/// Cap on inner power iterations per component.
pub const MAX_INNER_ITERATIONS: usize = 500;
/// Convergence tolerance on the change of the weight vector.
pub const INNER_TOLERANCE: f64 = 1e-12;
/// Relative singular-value cutoff for the component cap.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Maximum normalized inner product allowed between two score vectors.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlsError {
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("data block has no rows")]
    EmptyBlock,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("NIPALS inner iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("PᵀW is numerically singular")]
    SingularReconstruction,
    #[error("epsilon must be finite and nonnegative, got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Paired predictor/response block. Rows are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl DataBlock {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self, PlsError> {
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return Err(PlsError::EmptyBlock);
        }
        if x.nrows() != y.nrows() {
            return Err(PlsError::DimensionMismatch {
                expected: x.nrows(),
                actual: y.nrows(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PlsError::NonFiniteInput("X"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PlsError::NonFiniteInput("Y"));
        }
        Ok(Self { x, y })
    }

    /// Builds a block from row slices of predictors and a scalar response.
    pub fn from_rows(rows: &[Vec<f64>], y: &[f64]) -> Result<Self, PlsError> {
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(PlsError::EmptyBlock);
        }
        let n_cols = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(PlsError::DimensionMismatch {
                expected: n_cols,
                actual: bad.len(),
            });
        }
        if y.len() != n_rows {
            return Err(PlsError::DimensionMismatch {
                expected: n_rows,
                actual: y.len(),
            });
        }
        let x = DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]);
        let y = DMatrix::from_column_slice(n_rows, 1, y);
        Self::new(x, y)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }
}

/// One latent component `(w, p, b, q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub b: f64,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    n_factors: usize,
    n_responses: usize,
    components: Vec<Component>,
    epsilon: f64,
    samples_absorbed: u64,
}

impl PlsModel {
    /// A model that has seen no data.
    pub fn cold(n_factors: usize, epsilon: f64) -> Self {
        Self {
            n_factors,
            n_responses: 1,
            components: Vec::new(),
            epsilon,
            samples_absorbed: 0,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn samples_absorbed(&self) -> u64 {
        self.samples_absorbed
    }

    /// Structural checks for models that did not come out of `nipals_fit`,
    /// e.g. ones read back from a checkpoint.
    pub fn validate(&self) -> Result<(), PlsError> {
        if self.n_factors == 0 || self.n_responses == 0 {
            return Err(PlsError::InvalidModel("zero-sized model".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(PlsError::InvalidEpsilon(self.epsilon));
        }
        if self.components.len() > self.n_factors {
            return Err(PlsError::InvalidModel(format!(
                "{} components exceed {} factors",
                self.components.len(),
                self.n_factors
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.w.len() != self.n_factors
                || c.p.len() != self.n_factors
                || c.q.len() != self.n_responses
            {
                return Err(PlsError::InvalidModel(format!("component {i} has wrong shape")));
            }
            let finite = c.w.iter().chain(&c.p).chain(&c.q).all(|v| v.is_finite());
            if !finite || !c.b.is_finite() {
                return Err(PlsError::NonFiniteInput("model component"));
            }
            let w_norm = c.w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (w_norm - 1.0).abs() > 1e-9 {
                return Err(PlsError::InvalidModel(format!(
                    "component {i} weight norm {w_norm} is not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Regression coefficients for a single response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub beta: Vec<f64>,
}

impl CoefficientVector {
    pub fn ones(n: usize) -> Self {
        Self { beta: vec![1.0; n] }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

/// Result of a fit along with the transient quantities needed to check it.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub model: PlsModel,
    /// Unit-length score vectors, one per component.
    pub scores: Vec<DVector<f64>>,
    /// `‖E‖_F` before the first component and after each extracted component.
    pub residual_norms: Vec<f64>,
}

fn check_epsilon(epsilon: f64) -> Result<(), PlsError> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(PlsError::InvalidEpsilon(epsilon))
    }
}

/// Fits a PLS model, extracting components until the X residual drops to
/// `epsilon` or the numerical rank of X is reached.
pub fn nipals_fit(block: &DataBlock, epsilon: f64) -> Result<PlsModel, PlsError> {
    nipals_fit_traced(block, epsilon).map(|trace| trace.model)
}

pub fn nipals_fit_traced(block: &DataBlock, epsilon: f64) -> Result<FitTrace, PlsError> {
    check_epsilon(epsilon)?;
    let n_factors = block.x.ncols();
    let n_responses = block.y.ncols();
    let rank = numerical_rank(&block.x, RANK_TOLERANCE);

    let mut e = block.x.clone();
    let mut f = block.y.clone();
    let mut components = Vec::with_capacity(rank);
    let mut scores: Vec<DVector<f64>> = Vec::with_capacity(rank);
    let mut residual_norms = vec![e.norm()];

    while components.len() < rank {
        let e_norm = e.norm();
        if e_norm <= epsilon {
            break;
        }
        let w = extract_weight(&e, &f)?;
        let t_raw = &e * &w;
        let t_norm = t_raw.norm();
        if t_norm == 0.0 {
            break;
        }
        let t = t_raw / t_norm;
        let lost_orthogonality = scores
            .iter()
            .any(|s| s.dot(&t).abs() > ORTHOGONALITY_TOLERANCE);
        if lost_orthogonality {
            log::debug!(
                "stopping at {} components: score orthogonality lost",
                components.len()
            );
            break;
        }

        let p = e.tr_mul(&t);
        let q_raw = f.tr_mul(&t);
        let b = q_raw.norm();
        let q = if b > 0.0 {
            &q_raw / b
        } else {
            let mut unit = DVector::zeros(n_responses);
            unit[0] = 1.0;
            unit
        };

        e -= &t * p.transpose();
        f -= &t * q_raw.transpose();

        components.push(Component {
            w: w.iter().copied().collect(),
            p: p.iter().copied().collect(),
            b,
            q: q.iter().copied().collect(),
        });
        scores.push(t);
        residual_norms.push(e.norm());
    }

    let model = PlsModel {
        n_factors,
        n_responses,
        components,
        epsilon,
        samples_absorbed: block.n_rows() as u64,
    };
    Ok(FitTrace {
        model,
        scores,
        residual_norms,
    })
}

/// Inner NIPALS loop for one component. Falls back to the largest residual
/// row of X when the responses carry no covariance with it, so that the
/// loadings keep spanning the row space of X.
fn extract_weight(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DVector<f64>, PlsError> {
    let start = (0..f.ncols())
        .max_by(|&a, &b| f.column(a).norm().total_cmp(&f.column(b).norm()))
        .unwrap_or(0);
    let mut u: DVector<f64> = f.column(start).into_owned();
    let floor = 1e-14 * e.norm() * f.norm();
    let mut previous: Option<DVector<f64>> = None;

    for _ in 0..MAX_INNER_ITERATIONS {
        let mut w = e.tr_mul(&u);
        let w_norm = w.norm();
        if w_norm <= floor || w_norm == 0.0 {
            return Ok(dominant_row(e));
        }
        w /= w_norm;
        if let Some(prev) = &previous {
            if (&w - prev).norm() <= INNER_TOLERANCE {
                return Ok(w);
            }
        }
        let t = e * &w;
        let t_norm = t.norm();
        if t_norm == 0.0 {
            return Ok(w);
        }
        let q = f.tr_mul(&(t / t_norm));
        let q_norm = q.norm();
        if q_norm == 0.0 {
            return Ok(w);
        }
        u = f * (q / q_norm);
        previous = Some(w);
    }
    Err(PlsError::NoConvergence(MAX_INNER_ITERATIONS))
}

fn dominant_row(e: &DMatrix<f64>) -> DVector<f64> {
    let best = (0..e.nrows())
        .max_by(|&a, &b| e.row(a).norm().total_cmp(&e.row(b).norm()))
        .unwrap_or(0);
    let row = e.row(best).transpose();
    let norm = row.norm();
    row / norm
}

/// Coefficient matrix `W·(PᵀW)⁻¹·diag(b)·Qᵀ`, factors by responses.
pub fn coefficient_matrix(model: &PlsModel) -> Result<DMatrix<f64>, PlsError> {
    let k = model.components.len();
    let n = model.n_factors;
    let m = model.n_responses;
    if k == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let w = DMatrix::from_fn(n, k, |i, j| model.components[j].w[i]);
    let p = DMatrix::from_fn(n, k, |i, j| model.components[j].p[i]);
    let bq = DMatrix::from_fn(k, m, |i, j| model.components[i].b * model.components[i].q[j]);

    // PᵀW is upper triangular because each later weight lies in the
    // deflated row space.
    let ptw = p.tr_mul(&w);
    let max_diag = ptw.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min_diag = ptw.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max_diag <= 0.0 || min_diag <= 1e-12 * max_diag {
        return Err(PlsError::SingularReconstruction);
    }
    let z = ptw
        .solve_upper_triangular(&bq)
        .ok_or(PlsError::SingularReconstruction)?;
    Ok(w * z)
}

/// Coefficients for the first (usually only) response.
pub fn extract_coefficients(model: &PlsModel) -> Result<CoefficientVector, PlsError> {
    let beta = coefficient_matrix(model)?;
    Ok(CoefficientVector {
        beta: beta.column(0).iter().copied().collect(),
    })
}

pub fn predict(model: &PlsModel, x: &[f64]) -> Result<f64, PlsError> {
    if x.len() != model.n_factors {
        return Err(PlsError::DimensionMismatch {
            expected: model.n_factors,
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PlsError::NonFiniteInput("x"));
    }
    Ok(extract_coefficients(model)?.dot(x))
}

/// Stacks the model's loadings on top of the new observation: `[Pᵀ; x]`
/// and `[diag(b)·Qᵀ; y]`.
pub fn augment(model: &PlsModel, x_new: &[f64], y_new: f64) -> Result<DataBlock, PlsError> {
    if x_new.len() != model.n_factors {
        return Err(PlsError::DimensionMismatch {
            expected: model.n_factors,
            actual: x_new.len(),
        });
    }
    if model.n_responses != 1 {
        return Err(PlsError::DimensionMismatch {
            expected: model.n_responses,
            actual: 1,
        });
    }
    if x_new.iter().any(|v| !v.is_finite()) || !y_new.is_finite() {
        return Err(PlsError::NonFiniteInput("new sample"));
    }
    let k = model.components.len();
    let x = DMatrix::from_fn(k + 1, model.n_factors, |i, j| {
        if i < k {
            model.components[i].p[j]
        } else {
            x_new[j]
        }
    });
    let y = DMatrix::from_fn(k + 1, 1, |i, _| {
        if i < k {
            model.components[i].b * model.components[i].q[0]
        } else {
            y_new
        }
    });
    DataBlock::new(x, y)
}

/// Absorbs one observation by refitting on the augmented block.
pub fn rpls_update(
    model: &PlsModel,
    x_new: &[f64],
    y_new: f64,
    epsilon: f64,
) -> Result<PlsModel, PlsError> {
    let block = augment(model, x_new, y_new)?;
    let mut updated = nipals_fit(&block, epsilon)?;
    updated.samples_absorbed = model.samples_absorbed + 1;
    Ok(updated)
}

/// Number of singular values above `tol` times the largest one.
pub fn numerical_rank(x: &DMatrix<f64>, tol: f64) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let singular = x.clone().svd(false, false).singular_values;
    let largest = singular.iter().fold(0.0_f64, |a, v| a.max(*v));
    if largest == 0.0 {
        return 0;
    }
    singular.iter().filter(|s| **s > tol * largest).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_factor_proportional() {
        let block = DataBlock::from_rows(&[vec![1.0], vec![2.0]], &[2.0, 4.0]).unwrap();
        let model = nipals_fit(&block, 1e-10).unwrap();
        assert_eq!(model.samples_absorbed(), 2);
        let beta = extract_coefficients(&model).unwrap();
        assert!((beta.beta[0] - 2.0).abs() < 1e-12);
        assert!((predict(&model, &[2.0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_response_gives_zero_coefficients() {
        let block = DataBlock::from_rows(
            &[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]],
            &[0.0, 0.0, 0.0],
        )
        .unwrap();
        let model = nipals_fit(&block, 1e-10).unwrap();
        let beta = extract_coefficients(&model).unwrap();
        assert!(beta.beta.iter().all(|b| *b == 0.0));
        assert_eq!(predict(&model, &[4.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn cold_model_has_zero_coefficients() {
        let model = PlsModel::cold(3, DEFAULT_EPSILON);
        assert_eq!(extract_coefficients(&model).unwrap().beta, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_blocks() {
        assert_eq!(DataBlock::from_rows(&[], &[]), Err(PlsError::EmptyBlock));
        assert!(matches!(
            DataBlock::from_rows(&[vec![f64::NAN]], &[1.0]),
            Err(PlsError::NonFiniteInput(_))
        ));
        assert!(matches!(
            DataBlock::from_rows(&[vec![1.0]], &[f64::INFINITY]),
            Err(PlsError::NonFiniteInput(_))
        ));
        assert!(matches!(
            DataBlock::from_rows(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 2.0]),
            Err(PlsError::DimensionMismatch { .. })
        ));
        let block = DataBlock::from_rows(&[vec![1.0]], &[1.0]).unwrap();
        assert_eq!(nipals_fit(&block, -1.0), Err(PlsError::InvalidEpsilon(-1.0)));
    }

    #[test]
    fn predict_checks_dimension() {
        let model = PlsModel::cold(2, DEFAULT_EPSILON);
        assert_eq!(
            predict(&model, &[1.0]),
            Err(PlsError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&DMatrix::identity(3, 3), 1e-10), 3);
        let dup = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 2.0, 3.0, 3.0, 1.0, 0.0, 0.0, 5.0]);
        assert_eq!(numerical_rank(&dup, 1e-10), 2);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(0, 0), 1e-10), 0);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(2, 2), 1e-10), 0);
    }

    #[test]
    fn augmented_shape_follows_component_count() {
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0, 2.0, 1.0],
            vec![0.0, 1.0, 0.0, -1.0, 3.0],
            vec![0.0, 0.0, 1.0, 0.5, -2.0],
        ];
        let model = nipals_fit(&DataBlock::from_rows(&rows, &[1.0, 2.0, 3.0]).unwrap(), 1e-10)
            .unwrap();
        assert_eq!(model.components().len(), 3);
        let block = augment(&model, &[1.0, 1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(block.x().shape(), (4, 5));
        assert_eq!(block.y().shape(), (4, 1));
    }

    #[test]
    fn update_on_cold_model_matches_single_fit() {
        let cold = PlsModel::cold(2, DEFAULT_EPSILON);
        let updated = rpls_update(&cold, &[1.0, 2.0], 3.0, 1e-10).unwrap();
        let direct = nipals_fit(&DataBlock::from_rows(&[vec![1.0, 2.0]], &[3.0]).unwrap(), 1e-10)
            .unwrap();
        assert_eq!(updated.components(), direct.components());
        assert_eq!(updated.samples_absorbed(), 1);
    }

    #[test]
    fn multi_response_fit_reconstructs() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let beta = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, 0.5]);
        let y = &x * &beta;
        let model = nipals_fit(&DataBlock::new(x, y).unwrap(), 1e-12).unwrap();
        let fitted = coefficient_matrix(&model).unwrap();
        assert!((fitted - beta).abs().max() < 1e-9);
        model.validate().unwrap();
    }
}
