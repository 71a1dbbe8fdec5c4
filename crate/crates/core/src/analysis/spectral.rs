//! Dense spectral checks on desk-scale graphs.
//!
//! With `L = I − D^{-1/2} A D^{-1/2}` and masks `F`, `B` of train-labeled
//! fraud / benign nodes, the unlabeled-blended partition transform
//!
//! ```text
//! F X W_fr + B X W_be + (I − F − B) X (α W_fr + (1 − α) W_be)
//! ```
//!
//! equals `K X W_fr + (I − K) X W_be` with `K = F + α (I − F − B)`, and the
//! normalized-adjacency PMP aggregate is `(I − L) K X W_fr + (I − L)(I − K) X W_be`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{RelationSel, RelationalGraph, FRAUD};

/// Largest node count accepted by the dense routines by default.
pub const DENSE_CAP: usize = 2000;

fn dense_adjacency(graph: &RelationalGraph, sel: RelationSel, cap: usize) -> Result<DMatrix<f64>> {
    let n = graph.num_nodes();
    if n > cap {
        return Err(Error::CapExceeded { size: n, cap });
    }
    let g = match sel {
        RelationSel::Relation(r) => graph.single_relation(r)?,
        RelationSel::Union => graph.union(),
    };
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in g.neighbors(0, i) {
            a[(i, j)] = 1.0;
        }
    }
    Ok(a)
}

/// `D^{-1/2} A D^{-1/2}`; a degree-0 node has a zero row and column.
pub fn normalized_adjacency(
    graph: &RelationalGraph,
    sel: RelationSel,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let mut a = dense_adjacency(graph, sel, cap)?;
    let n = a.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(a)
}

/// `I − D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(
    graph: &RelationalGraph,
    sel: RelationSel,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let a = normalized_adjacency(graph, sel, cap)?;
    Ok(DMatrix::identity(a.nrows(), a.ncols()) - a)
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending; column `k` of
/// `U` belongs to eigenvalue `k`.
pub fn eigendecompose(l: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !l.is_square() {
        return Err(Error::shape("eigendecompose", "matrix is not square"));
    }
    let asym = (l - l.transpose()).amax();
    if asym > 1e-12 {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max |L - Lᵀ| = {asym:e})"
        )));
    }
    let n = l.nrows();
    let eig = SymmetricEigen::try_new(l.clone(), f64::EPSILON, 10_000 + 100 * n)
        .ok_or_else(|| Error::Convergence("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vectors, values))
}

/// `‖U Λ Uᵀ − L‖_F`.
pub fn reconstruction_error(l: &DMatrix<f64>, u: &DMatrix<f64>, values: &DVector<f64>) -> f64 {
    let rebuilt = u * DMatrix::from_diagonal(values) * u.transpose();
    (rebuilt - l).norm()
}

/// `max |UᵀU − I|`.
pub fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
    (u.transpose() * u - DMatrix::identity(u.ncols(), u.ncols())).amax()
}

/// Diagonals of the train-fraud mask `F` and the train-benign mask `B`.
pub fn mask_matrices(labels: &[u8], train_mask: &[bool]) -> Result<(DVector<f64>, DVector<f64>)> {
    if labels.len() != train_mask.len() {
        return Err(Error::invalid(format!(
            "{} labels for a mask of {} nodes",
            labels.len(),
            train_mask.len()
        )));
    }
    let f = labels
        .iter()
        .zip(train_mask)
        .map(|(&l, &t)| if t && l == FRAUD { 1.0 } else { 0.0 });
    let b = labels
        .iter()
        .zip(train_mask)
        .map(|(&l, &t)| if t && l != FRAUD { 1.0 } else { 0.0 });
    Ok((
        DVector::from_iterator(labels.len(), f),
        DVector::from_iterator(labels.len(), b),
    ))
}

/// Diagonal of `K = F + α (I − F − B)`: 1 on train fraud, 0 on train benign,
/// `α` elsewhere.
pub fn k_matrix(f: &DVector<f64>, b: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} not in [0,1]")));
    }
    if f.len() != b.len() {
        return Err(Error::shape("k_matrix", "mask lengths differ"));
    }
    Ok(DVector::from_iterator(
        f.len(),
        f.iter()
            .zip(b.iter())
            .map(|(&fv, &bv)| fv + alpha * (1.0 - fv - bv)),
    ))
}

fn scale_rows(diag: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, &s) in diag.iter().enumerate() {
        out.row_mut(i).scale_mut(s);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterResponse {
    pub node: usize,
    pub lambda: f64,
    pub g_fr: f64,
    pub g_be: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    pub reconstruction_error: f64,
    pub orthonormality_error: f64,
    /// Masked-transformation form vs the K-matrix form.
    pub mask_identity_error: f64,
    /// K-matrix form vs a node-by-node loop over the three label cases.
    pub mask_loop_error: f64,
    pub filter_responses: Vec<FilterResponse>,
    /// `(I − L) K X W_fr + (I − L)(I − K) X W_be` vs a normalized-adjacency
    /// weighted partition aggregation.
    pub spatial_identity_error: f64,
    pub alpha: f64,
}

/// Evaluates the masked/K-matrix identity, the spatial aggregation identity
/// and the casewise filter responses `g_fr(j) = (1 − λ_j) K_jj`,
/// `g_be(j) = (1 − λ_j)(1 − K_jj)`.
#[allow(clippy::too_many_arguments)]
pub fn spatial_spectral_check(
    graph: &RelationalGraph,
    sel: RelationSel,
    labels: &[u8],
    train_mask: &[bool],
    x: &DMatrix<f64>,
    w_fr: &DMatrix<f64>,
    w_be: &DMatrix<f64>,
    alpha: f64,
    cap: usize,
) -> Result<SpectralReport> {
    let n = graph.num_nodes();
    if x.nrows() != n || w_fr.nrows() != x.ncols() || w_fr.shape() != w_be.shape() {
        return Err(Error::shape(
            "spatial_spectral_check",
            format!(
                "X {:?}, W_fr {:?}, W_be {:?} for {n} nodes",
                x.shape(),
                w_fr.shape(),
                w_be.shape()
            ),
        ));
    }
    let a_hat = normalized_adjacency(graph, sel, cap)?;
    let l = DMatrix::identity(n, n) - &a_hat;
    let (u, values) = eigendecompose(&l)?;
    let (f, b) = mask_matrices(labels, train_mask)?;
    let k = k_matrix(&f, &b, alpha)?;
    let one_minus_k = k.map(|v| 1.0 - v);

    let xw_fr = x * w_fr;
    let xw_be = x * w_be;
    let w_un = w_fr * alpha + w_be * (1.0 - alpha);
    let unl = DVector::from_iterator(n, f.iter().zip(b.iter()).map(|(a, c)| 1.0 - a - c));
    let masked = scale_rows(&f, &xw_fr) + scale_rows(&b, &xw_be) + scale_rows(&unl, &(x * &w_un));
    let k_form = scale_rows(&k, &xw_fr) + scale_rows(&one_minus_k, &xw_be);
    let mask_identity_error = (&masked - &k_form).amax();

    let mut looped = DMatrix::zeros(n, w_fr.ncols());
    for j in 0..n {
        let w = if f[j] == 1.0 {
            w_fr
        } else if b[j] == 1.0 {
            w_be
        } else {
            &w_un
        };
        looped.set_row(j, &(x.row(j) * w));
    }
    let mask_loop_error = (&looped - &k_form).amax();

    let spectral_side = &a_hat * &k_form;
    let mut spatial = DMatrix::zeros(n, w_fr.ncols());
    for i in 0..n {
        let mut acc = nalgebra::RowDVector::zeros(w_fr.ncols());
        for j in 0..n {
            if a_hat[(i, j)] != 0.0 {
                acc += looped.row(j) * a_hat[(i, j)];
            }
        }
        spatial.set_row(i, &acc);
    }
    let spatial_identity_error = (&spectral_side - &spatial).amax();

    let filter_responses = (0..n)
        .map(|j| FilterResponse {
            node: j,
            lambda: values[j],
            g_fr: (1.0 - values[j]) * k[j],
            g_be: (1.0 - values[j]) * (1.0 - k[j]),
        })
        .collect();

    Ok(SpectralReport {
        eigenvalues: values.iter().copied().collect(),
        reconstruction_error: reconstruction_error(&l, &u, &values),
        orthonormality_error: orthonormality_error(&u),
        mask_identity_error,
        mask_loop_error,
        filter_responses,
        spatial_identity_error,
        alpha,
    })
}

/// `node_index,lambda,g_fr,g_be` rows.
pub fn spectral_csv(report: &SpectralReport, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("node_index,lambda,g_fr,g_be\n");
    for r in &report.filter_responses {
        out.push_str(&format!("{},{},{},{}\n", r.node, r.lambda, r.g_fr, r.g_be));
    }
    out
}
