//! Preconditioned conjugate gradients with a modified incomplete Cholesky
//! preconditioner (Jacobi fallback on factorization breakdown).

use crate::par::Parallelism;
use crate::sar::sparse::CsrMatrix;

/// Modified IC(0) factor: dropped fill-in is folded into the diagonal so the
/// factor preserves row sums of the original matrix.
pub struct IcFactor {
    /// Lower triangle including diagonal, CSR.
    lower: CsrMatrix,
    /// Its transpose (upper triangle), CSR, for the backward solve.
    upper: CsrMatrix,
}

pub enum Preconditioner {
    Identity,
    Jacobi { inv_diag: Vec<f64> },
    ModifiedIncompleteCholesky(IcFactor),
}

impl Preconditioner {
    /// Modified IC(0) of `a` when it succeeds, Jacobi otherwise.
    pub fn for_matrix(a: &CsrMatrix) -> Preconditioner {
        match mic0(a) {
            Some(f) => Preconditioner::ModifiedIncompleteCholesky(f),
            None => Preconditioner::jacobi(a),
        }
    }

    pub fn jacobi(a: &CsrMatrix) -> Preconditioner {
        let inv_diag = a
            .diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        Preconditioner::Jacobi { inv_diag }
    }

    pub fn is_ic(&self) -> bool {
        matches!(self, Preconditioner::ModifiedIncompleteCholesky(_))
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Identity => r.to_vec(),
            Preconditioner::Jacobi { inv_diag } => {
                r.iter().zip(inv_diag).map(|(x, d)| x * d).collect()
            }
            Preconditioner::ModifiedIncompleteCholesky(f) => {
                let n = r.len();
                // Forward solve L y = r.
                let mut y = vec![0.0f64; n];
                for i in 0..n {
                    let (cols, vals) = f.lower.row(i);
                    let mut s = r[i];
                    let mut diag = 1.0;
                    for (&j, &v) in cols.iter().zip(vals) {
                        if j < i {
                            s -= v * y[j];
                        } else {
                            diag = v;
                        }
                    }
                    y[i] = s / diag;
                }
                // Backward solve L^T z = y; rows of upper are columns of L.
                let mut z = vec![0.0f64; n];
                for i in (0..n).rev() {
                    let (cols, vals) = f.upper.row(i);
                    let mut s = y[i];
                    let mut diag = 1.0;
                    for (&j, &v) in cols.iter().zip(vals) {
                        if j > i {
                            s -= v * z[j];
                        } else if j == i {
                            diag = v;
                        }
                    }
                    z[i] = s / diag;
                }
                z
            }
        }
    }
}

/// Right-looking MIC(0) on the fixed pattern of symmetric `a`. Updates that
/// would land outside the pattern are subtracted from both affected
/// diagonals instead. Returns `None` on a non-positive pivot.
fn mic0(a: &CsrMatrix) -> Option<IcFactor> {
    let n = a.n();
    let mut work = a.clone();
    for k in 0..n {
        let pkk = work.pos(k, k)?;
        let akk = work.vals()[pkk];
        if akk <= 0.0 || !akk.is_finite() {
            return None;
        }
        let lkk = akk.sqrt();
        work.vals_mut()[pkk] = lkk;

        // Column k below the diagonal, via symmetry from row k.
        let neigh: Vec<(usize, f64)> = {
            let (cols, vals) = work.row(k);
            cols.iter()
                .zip(vals)
                .filter(|(&j, _)| j > k)
                .map(|(&j, &v)| (j, v / lkk))
                .collect()
        };
        for &(i, lik) in &neigh {
            let p = work.pos(i, k).expect("symmetric pattern");
            work.vals_mut()[p] = lik;
            let p = work.pos(k, i).expect("symmetric pattern");
            work.vals_mut()[p] = lik;
        }
        for (ai, &(i, lik)) in neigh.iter().enumerate() {
            for &(j, ljk) in neigh.iter().skip(ai) {
                let upd = lik * ljk;
                if let Some(p) = work.pos(i, j) {
                    work.vals_mut()[p] -= upd;
                    if i != j {
                        let q = work.pos(j, i).expect("symmetric pattern");
                        work.vals_mut()[q] -= upd;
                    }
                } else {
                    let pi = work.pos(i, i).expect("diagonal present");
                    work.vals_mut()[pi] -= upd;
                    let pj = work.pos(j, j).expect("diagonal present");
                    work.vals_mut()[pj] -= upd;
                }
            }
        }
    }

    // Extract L and L^T.
    let mut lower_t = Vec::new();
    let mut upper_t = Vec::new();
    for i in 0..n {
        let (cols, vals) = work.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if j <= i {
                lower_t.push((i, j, v));
                upper_t.push((j, i, v));
            }
        }
    }
    Some(IcFactor {
        lower: CsrMatrix::from_triplets(n, &lower_t),
        upper: CsrMatrix::from_triplets(n, &upper_t),
    })
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    pub iters: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves SPD `a x = b` to relative residual `tol`. Reductions are
/// sequential so results do not depend on the worker count; only the
/// matrix-vector products parallelize.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    pre: &Preconditioner,
    tol: f64,
    max_iters: usize,
    mode: Parallelism,
) -> SolveOutcome {
    let n = a.n();
    assert_eq!(b.len(), n);
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return SolveOutcome {
            x: vec![0.0; n],
            iters: 0,
            rel_residual: 0.0,
            converged: true,
        };
    }

    let mut x = vec![0.0f64; n];
    let mut r = b.to_vec();
    let mut z = pre.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iters = 0;

    while iters < max_iters {
        let ap = a.matvec(&p, mode);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iters += 1;
        if norm(&r) / bnorm <= tol {
            // Recurrence residual can drift; accept on the true residual.
            let true_r: Vec<f64> = a
                .matvec(&x, mode)
                .iter()
                .zip(b)
                .map(|(ax, bi)| bi - ax)
                .collect();
            let rel = norm(&true_r) / bnorm;
            if rel <= tol {
                return SolveOutcome {
                    x,
                    iters,
                    rel_residual: rel,
                    converged: true,
                };
            }
            r = true_r;
        }
        z = pre.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_new;
    }

    let true_r: Vec<f64> = a
        .matvec(&x, mode)
        .iter()
        .zip(b)
        .map(|(ax, bi)| bi - ax)
        .collect();
    let rel = norm(&true_r) / bnorm;
    SolveOutcome {
        converged: rel <= tol,
        x,
        iters,
        rel_residual: rel,
    }
}
