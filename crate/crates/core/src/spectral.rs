//! Closed-form identification by eigendecomposition.
//!
//! With `M_XZ` the joint matrix of (x, z) and `M_XyZ` its restriction to
//! `Y = y`, conditional independence of the three measures given the latent
//! state gives
//!
//! ```text
//! M_XyZ = M_X|X* D_y|X* D_X* M_Z|X*'      M_XZ = M_X|X* D_X* M_Z|X*'
//! M_XyZ M_XZ^-1 = M_X|X* D_y|X* M_X|X*^-1
//! ```
//!
//! so the eigenvectors of the observable left-hand side are the columns of
//! `M_X|X*` and its eigenvalues are `P(Y = y | x*)`. The latent labels are
//! fixed by sorting columns on the last row of `M_X|X*`.
//!
//! At population scale this recovers the model to machine precision. On
//! sampled pmfs the result is diagnostic-grade: eigenvalues may turn complex
//! and entries negative, which is reported rather than projected away.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::JointPmf;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ord_order, MisclassificationModel};

/// Tolerances for the spectral route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    /// Gate on imaginary parts, eigenvalue separation and negative entries.
    pub tol: f64,
    /// `M_XZ` is full rank iff `s_min > rank_tol * s_max`.
    pub rank_tol: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { tol: 1e-8, rank_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationDiagnostics {
    pub rank_ok: bool,
    pub min_singular_value: f64,
    pub max_singular_value: f64,
    pub condition_number: f64,
    /// Smallest pairwise distance between eigenvalues.
    pub eigenvalue_gap: f64,
    /// Largest imaginary part among the eigenvalues.
    pub complex_discarded: f64,
    pub ord_satisfied: bool,
    /// Total mass of slightly negative entries set to zero.
    pub clipped_mass: f64,
    /// Largest deviation of `M^-1 (M_X0Z M_XZ^-1) M` from `diag(1 - f_Y|X*)`.
    pub y0_max_deviation: f64,
}

/// Observable matrices, indexed `[x][z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableMatrices {
    pub m_xz: DMatrix<f64>,
    /// One matrix per value of `y`.
    pub m_xyz: Vec<DMatrix<f64>>,
}

pub fn build_matrices(pmf: &JointPmf) -> Result<ObservableMatrices> {
    let s = pmf.support();
    if s.s_x != s.s_z {
        return Err(Error::Config(format!(
            "x has {} categories and z has {}; coarsen one of them so the supports match",
            s.s_x, s.s_z
        )));
    }
    let m_xyz: Vec<DMatrix<f64>> = (0..s.s_y)
        .map(|y| DMatrix::from_fn(s.s_x, s.s_z, |x, z| pmf.get(x, y, z)))
        .collect();
    let m_xz = m_xyz.iter().fold(DMatrix::zeros(s.s_x, s.s_z), |acc, m| acc + m);
    Ok(ObservableMatrices { m_xz, m_xyz })
}

/// Fragment of the diagnostics produced by the rank gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCheck {
    pub rank_ok: bool,
    pub min_singular_value: f64,
    pub max_singular_value: f64,
}

pub fn check_rank(m_xz: &DMatrix<f64>, tol: f64) -> RankCheck {
    let sv = linalg::singular_values(m_xz);
    let max = sv[0];
    let min = *sv.last().unwrap();
    RankCheck { rank_ok: min > tol * max, min_singular_value: min, max_singular_value: max }
}

/// Sets entries in `[-tol, 0)` to zero, fails on anything more negative,
/// then rescales to unit sum. Returns the clipped mass.
fn clip_column(v: &mut [f64], tol: f64, what: &str) -> Result<f64> {
    let mut clipped = 0.0;
    for e in v.iter_mut() {
        if *e < -tol {
            return Err(Error::Identification(format!(
                "{what} has a negative entry {e:.3e} beyond tolerance {tol:e}"
            )));
        }
        if *e < 0.0 {
            clipped += -*e;
            *e = 0.0;
        }
    }
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|e| *e /= sum);
    Ok(clipped)
}

/// Recovers the misclassification model from an observable pmf.
pub fn eigendecompose_identify(
    pmf: &JointPmf,
    opts: &SpectralOptions,
) -> Result<(MisclassificationModel, IdentificationDiagnostics)> {
    let support = pmf.support();
    if support.s_y != 2 {
        return Err(Error::Config("the auxiliary y must be binary".into()));
    }
    let mats = build_matrices(pmf)?;
    let s = support.s_x;
    let tol = opts.tol;

    let rank = check_rank(&mats.m_xz, opts.rank_tol);
    if !rank.rank_ok {
        return Err(Error::Identification(format!(
            "M_XZ fails the full-rank check: smallest singular value {:.3e}, largest {:.3e}",
            rank.min_singular_value, rank.max_singular_value
        )));
    }
    let inv = linalg::inverse(&mats.m_xz)
        .ok_or_else(|| Error::Identification("M_XZ is numerically singular".into()))?;
    let a = &mats.m_xyz[1] * &inv;

    let eig = linalg::eigenvalues(&a);
    let complex_discarded = eig.iter().fold(0.0f64, |m, &(_, im)| m.max(im.abs()));
    if complex_discarded > tol {
        return Err(Error::Identification(format!(
            "eigenvalues are complex (imaginary part {complex_discarded:.3e}); \
             the sample is too noisy for spectral identification"
        )));
    }
    let lambdas: Vec<f64> = eig.iter().map(|&(re, _)| re).collect();
    let mut gap = f64::INFINITY;
    for i in 0..s {
        for j in i + 1..s {
            gap = gap.min((lambdas[i] - lambdas[j]).abs());
        }
    }
    if gap < tol {
        return Err(Error::Identification(format!(
            "eigenvalues are not distinct (gap {gap:.3e}); P(Y=1|x*) must differ across latent states"
        )));
    }

    let mut clipped_mass = 0.0;
    let mut columns = Vec::with_capacity(s);
    for (k, &lambda) in lambdas.iter().enumerate() {
        let v = linalg::eigenvector(&a, lambda);
        let sum = v.sum();
        if sum.abs() < f64::EPSILON.sqrt() {
            return Err(Error::Identification(format!(
                "eigenvector {} cannot be normalized to a distribution",
                k + 1
            )));
        }
        let mut col: Vec<f64> = v.iter().map(|e| e / sum).collect();
        clipped_mass += clip_column(&mut col, tol, "an eigenvector of M_XyZ M_XZ^-1")?;
        columns.push(col);
    }
    let unordered = DMatrix::from_fn(s, s, |i, j| columns[j][i]);
    let order = ord_order(&unordered, tol);
    let m_x = DMatrix::from_fn(s, s, |i, j| unordered[(i, order[j])]);

    let mut f_y: Vec<f64> = order.iter().map(|&k| lambdas[k]).collect();
    for v in f_y.iter_mut() {
        if *v < -tol || *v > 1.0 + tol {
            return Err(Error::Identification(format!(
                "eigenvalue {v:.4} is not a probability"
            )));
        }
        let c = v.clamp(0.0, 1.0);
        clipped_mass += (c - *v).abs();
        *v = c;
    }

    let f_x = DVector::from_vec(pmf.marginal_x());
    let mut f_xstar: Vec<f64> = linalg::solve(&m_x, &f_x)
        .ok_or_else(|| Error::Identification("recovered M_X|X* is singular".into()))?
        .iter()
        .copied()
        .collect();
    clipped_mass += clip_column(&mut f_xstar, tol, "f_X*")?;
    if let Some(k) = f_xstar.iter().position(|&p| p <= tol) {
        return Err(Error::Identification(format!("latent state {} has no mass", k + 1)));
    }

    // M_Z|X*' = D_X*^-1 M_X|X*^-1 M_XZ
    let m_x_inv = linalg::inverse(&m_x)
        .ok_or_else(|| Error::Identification("recovered M_X|X* is singular".into()))?;
    let dz = &m_x_inv * &mats.m_xz;
    let mut m_z = DMatrix::zeros(support.s_z, s);
    for k in 0..s {
        let mut col: Vec<f64> = (0..support.s_z).map(|z| dz[(k, z)] / f_xstar[k]).collect();
        clipped_mass += clip_column(&mut col, tol, "M_Z|X*")?;
        for (z, v) in col.into_iter().enumerate() {
            m_z[(z, k)] = v;
        }
    }

    let a0 = &mats.m_xyz[0] * &inv;
    let d0 = &m_x_inv * a0 * &m_x;
    let expect0 = DMatrix::from_diagonal(&DVector::from_iterator(s, f_y.iter().map(|p| 1.0 - p)));
    let y0_max_deviation = linalg::max_abs_diff(&d0, &expect0);

    let model = MisclassificationModel::new(
        m_x,
        DVector::from_vec(f_y),
        m_z,
        DVector::from_vec(f_xstar),
    )?;
    let diagnostics = IdentificationDiagnostics {
        rank_ok: true,
        min_singular_value: rank.min_singular_value,
        max_singular_value: rank.max_singular_value,
        condition_number: linalg::condition_number(&mats.m_xz),
        eigenvalue_gap: gap,
        complex_discarded,
        ord_satisfied: model.ord_satisfied(tol),
        clipped_mass,
        y0_max_deviation,
    };
    Ok((model, diagnostics))
}
