//! The misclassification model for one covariate cell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{JointPmf, Support};
use crate::error::{Error, Result};

/// Column-stochastic tolerance used when a model is built.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Dense matrix in JSON: explicit dimensions plus row-major entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Data(format!(
                "matrix declares {}x{} but holds {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub(crate) mod matrix_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        MatrixJson::deserialize(d)?.to_matrix().map_err(serde::de::Error::custom)
    }
}

pub(crate) mod vector_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Distributions of the three measures given the latent state, and the
/// latent distribution itself.
///
/// Column `j` of each matrix is a distribution conditional on latent state
/// `j`; rows index the observed category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationModel {
    #[serde(with = "matrix_serde")]
    pub m_x_given_xstar: DMatrix<f64>,
    /// `P(Y = 1 | x*)` per latent state.
    #[serde(with = "vector_serde")]
    pub f_y_given_xstar: DVector<f64>,
    #[serde(with = "matrix_serde")]
    pub m_z_given_xstar: DMatrix<f64>,
    #[serde(with = "vector_serde")]
    pub f_xstar: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_cell: Option<usize>,
}

impl MisclassificationModel {
    pub fn new(
        m_x_given_xstar: DMatrix<f64>,
        f_y_given_xstar: DVector<f64>,
        m_z_given_xstar: DMatrix<f64>,
        f_xstar: DVector<f64>,
    ) -> Result<Self> {
        Self::with_tolerance(m_x_given_xstar, f_y_given_xstar, m_z_given_xstar, f_xstar, STOCHASTIC_TOL)
    }

    /// Like [`MisclassificationModel::new`] with a custom tolerance on
    /// column sums, for rounded published values.
    pub fn with_tolerance(
        m_x_given_xstar: DMatrix<f64>,
        f_y_given_xstar: DVector<f64>,
        m_z_given_xstar: DMatrix<f64>,
        f_xstar: DVector<f64>,
        tol: f64,
    ) -> Result<Self> {
        let model = MisclassificationModel {
            m_x_given_xstar,
            f_y_given_xstar,
            m_z_given_xstar,
            f_xstar,
            w_cell: None,
        };
        model.validate(tol)?;
        Ok(model)
    }

    pub fn with_cell(mut self, cell: Option<usize>) -> Self {
        self.w_cell = cell;
        self
    }

    /// Checks shapes, ranges and column sums.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let s = self.s_x();
        if self.m_x_given_xstar.ncols() != s
            || self.f_y_given_xstar.len() != s
            || self.m_z_given_xstar.ncols() != s
            || self.f_xstar.len() != s
        {
            return Err(Error::Domain("model components disagree on the latent support".into()));
        }
        let in_unit = |v: f64| (-tol..=1.0 + tol).contains(&v);
        for (name, m) in [("M_X|X*", &self.m_x_given_xstar), ("M_Z|X*", &self.m_z_given_xstar)] {
            if !m.iter().all(|&v| in_unit(v)) {
                return Err(Error::Domain(format!("{name} has entries outside [0, 1]")));
            }
            for (j, col) in m.column_iter().enumerate() {
                let sum: f64 = col.sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Domain(format!("{name} column {} sums to {sum}", j + 1)));
                }
            }
        }
        if !self.f_y_given_xstar.iter().all(|&v| in_unit(v)) {
            return Err(Error::Domain("f_Y|X* has entries outside [0, 1]".into()));
        }
        if !self.f_xstar.iter().all(|&v| in_unit(v)) || (self.f_xstar.sum() - 1.0).abs() > tol {
            return Err(Error::Domain("f_X* is not a probability vector".into()));
        }
        Ok(())
    }

    /// Number of latent states, equal to the reported support.
    pub fn s_x(&self) -> usize {
        self.m_x_given_xstar.nrows()
    }

    pub fn s_z(&self) -> usize {
        self.m_z_given_xstar.nrows()
    }

    pub fn support(&self) -> Support {
        Support::new(self.s_x(), 2, self.s_z())
    }

    /// `P(Y = y | x*)` for `y` in `{0, 1}`.
    #[inline]
    pub fn p_y(&self, y: usize, xstar: usize) -> f64 {
        let p1 = self.f_y_given_xstar[xstar];
        if y == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// Mixture probability of one zero-based (x, y, z) cell.
    pub fn cell_probability(&self, x: usize, y: usize, z: usize) -> f64 {
        (0..self.s_x())
            .map(|k| {
                self.m_x_given_xstar[(x, k)]
                    * self.p_y(y, k)
                    * self.m_z_given_xstar[(z, k)]
                    * self.f_xstar[k]
            })
            .sum()
    }

    /// Observable joint distribution implied by the model.
    pub fn population_pmf(&self) -> JointPmf {
        let support = self.support();
        let weights = (0..support.cells())
            .map(|idx| {
                let (x, y, z) = support.triple(idx);
                self.cell_probability(x, y, z)
            })
            .collect();
        JointPmf::from_weights(weights, support).expect("model probabilities are nonnegative")
    }

    /// Reported-outcome marginal `M_X|X* f_X*`.
    pub fn marginal_x(&self) -> DVector<f64> {
        &self.m_x_given_xstar * &self.f_xstar
    }

    /// ORD check: the probability of reporting the top category strictly
    /// increases with the latent state, by more than `tol` at each step.
    pub fn ord_satisfied(&self, tol: f64) -> bool {
        let last = self.s_x() - 1;
        (1..self.s_x()).all(|j| {
            self.m_x_given_xstar[(last, j)] - self.m_x_given_xstar[(last, j - 1)] > tol
        })
    }

    /// Probability that the report differs from the latent state.
    pub fn misclassification_rate(&self) -> f64 {
        1.0 - (0..self.s_x()).map(|k| self.m_x_given_xstar[(k, k)] * self.f_xstar[k]).sum::<f64>()
    }

    /// Largest absolute difference over all four components.
    pub fn max_abs_diff(&self, other: &MisclassificationModel) -> f64 {
        let m = crate::linalg::max_abs_diff(&self.m_x_given_xstar, &other.m_x_given_xstar)
            .max(crate::linalg::max_abs_diff(&self.m_z_given_xstar, &other.m_z_given_xstar));
        let v = (&self.f_y_given_xstar - &other.f_y_given_xstar)
            .amax()
            .max((&self.f_xstar - &other.f_xstar).amax());
        m.max(v)
    }

    /// Relabels latent states: new state `j` is old state `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> MisclassificationModel {
        let s = self.s_x();
        let mx = DMatrix::from_fn(self.s_x(), s, |i, j| self.m_x_given_xstar[(i, perm[j])]);
        let mz = DMatrix::from_fn(self.s_z(), s, |i, j| self.m_z_given_xstar[(i, perm[j])]);
        let fy = DVector::from_fn(s, |j, _| self.f_y_given_xstar[perm[j]]);
        let fs = DVector::from_fn(s, |j, _| self.f_xstar[perm[j]]);
        MisclassificationModel {
            m_x_given_xstar: mx,
            f_y_given_xstar: fy,
            m_z_given_xstar: mz,
            f_xstar: fs,
            w_cell: self.w_cell,
        }
    }

    /// Flat parameter listing in a fixed order, used for bootstrap
    /// summaries: `M_X|X*` row-major, `f_Y|X*`, `M_Z|X*` row-major, `f_X*`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = MatrixJson::from(&self.m_x_given_xstar).data;
        out.extend(self.f_y_given_xstar.iter());
        out.extend(MatrixJson::from(&self.m_z_given_xstar).data);
        out.extend(self.f_xstar.iter());
        out
    }

    /// Names matching [`MisclassificationModel::flatten`], with one-based
    /// categories.
    pub fn parameter_names(&self) -> Vec<String> {
        let s = self.s_x();
        let mut names = Vec::new();
        for i in 0..s {
            for j in 0..s {
                names.push(format!("M_X|X*[{},{}]", i + 1, j + 1));
            }
        }
        names.extend((0..s).map(|j| format!("f_Y|X*[{}]", j + 1)));
        for i in 0..self.s_z() {
            for j in 0..s {
                names.push(format!("M_Z|X*[{},{}]", i + 1, j + 1));
            }
        }
        names.extend((0..s).map(|j| format!("f_X*[{}]", j + 1)));
        names
    }
}

/// Column order that sorts latent states by the probability of reporting
/// the top category, then by the next row up on ties.
pub fn ord_order(m_x: &DMatrix<f64>, tie_tol: f64) -> Vec<usize> {
    let rows = m_x.nrows();
    let mut order: Vec<usize> = (0..m_x.ncols()).collect();
    order.sort_by(|&a, &b| {
        for r in (0..rows).rev() {
            let (va, vb) = (m_x[(r, a)], m_x[(r, b)]);
            if (va - vb).abs() > tie_tol {
                return va.total_cmp(&vb);
            }
        }
        a.cmp(&b)
    });
    order
}

/// Published latent-distribution fixture for the baseline group (single
/// men, income below median, no degree, no long-standing illness); entries
/// are rounded to four decimals.
pub mod fixture {
    use super::*;

    pub fn baseline_m_x_given_xstar() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[0.2395, 0.0617, 0.0720, 0.6915, 0.4945, 0.1460, 0.0691, 0.4437, 0.7819],
        )
    }

    pub fn baseline_f_xstar() -> DVector<f64> {
        DVector::from_vec(vec![0.1254, 0.4195, 0.4551])
    }

    /// Standard errors of [`baseline_f_xstar`].
    pub fn baseline_f_xstar_se() -> DVector<f64> {
        DVector::from_vec(vec![0.0347, 0.0516, 0.0459])
    }

    pub fn baseline_f_x() -> DVector<f64> {
        DVector::from_vec(vec![0.0887, 0.3606, 0.5507])
    }
}
