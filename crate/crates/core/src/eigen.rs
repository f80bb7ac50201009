//! Smallest eigenpairs of the symmetric-definite pencil `A x = λ M x`.
//!
//! The sparse path runs shift-invert Lanczos at zero shift in the
//! `M`-inner product with full reorthogonalization. `A⁻¹` is supplied as a
//! closure so that the open-circuit operator (a Schur complement) never has to
//! be formed. A dense path based on a Cholesky reduction serves small models
//! and the test oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Eigenvalues in ascending order with `M`-orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// relative residual `‖A⁻¹M x − θ x‖_M / θ` (θ = 1/λ) required for every pair
    pub tol: f64,
    pub seed: u64,
    /// hard cap on the Krylov dimension
    pub max_dim: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            seed: 0x5eed_1a2c,
            max_dim: 600,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Computes the `n` smallest eigenpairs of `A x = λ M x`.
///
/// `solve(b)` must return `A⁻¹ b`, `apply(x)` must return `A x`. `A` and `M`
/// are assumed symmetric positive definite.
pub fn lanczos_smallest<S, F>(
    m: &CsrMatrix,
    n: usize,
    solve: S,
    apply: F,
    opts: &LanczosOptions,
) -> Result<EigenPairs>
where
    S: Fn(&[f64]) -> Vec<f64>,
    F: Fn(&[f64]) -> Vec<f64>,
{
    let dim = m.nrows();
    assert!(n >= 1 && n <= dim, "requested {n} eigenpairs of a {dim}-dimensional pencil");
    let cap = opts.max_dim.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // basis vectors v_j and their images M v_j
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut mbasis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();

    let random_start = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    };

    // M-orthogonalize `w` against the basis twice and return its M-norm
    let orthogonalize = |w: &mut Vec<f64>, basis: &[Vec<f64>], mbasis: &[Vec<f64>]| -> f64 {
        for _ in 0..2 {
            for (v, mv) in basis.iter().zip(mbasis) {
                let c = dot(w, mv);
                axpy(w, -c, v);
            }
        }
        let mw = m.mul_vec(w);
        dot(w, &mw).max(0.0).sqrt()
    };

    let mut w = random_start(&mut rng);
    let mut wnorm = orthogonalize(&mut w, &basis, &mbasis);
    let mut next_check = (2 * n + 10).min(cap);

    loop {
        // extend the basis up to next_check vectors
        while basis.len() < next_check {
            let scale_ref = norm(&w).max(1e-300);
            if wnorm <= 1e-10 * scale_ref || !wnorm.is_finite() {
                // invariant subspace found; restart with a fresh direction
                w = random_start(&mut rng);
                wnorm = orthogonalize(&mut w, &basis, &mbasis);
                if basis.len() > 0 {
                    beta.push(0.0);
                }
            } else if basis.len() > 0 {
                beta.push(wnorm);
            }
            let v: Vec<f64> = w.iter().map(|x| x / wnorm).collect();
            let mv = m.mul_vec(&v);
            let mut next = solve(&mv);
            let a = dot(&next, &mv);
            axpy(&mut next, -a, &v);
            if let (Some(prev), Some(b)) = (basis.last(), beta.last()) {
                axpy(&mut next, -b, prev);
            }
            alpha.push(a);
            basis.push(v);
            mbasis.push(mv);
            w = next;
            wnorm = orthogonalize(&mut w, &basis, &mbasis);
        }

        let k = basis.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        // largest θ of A⁻¹M correspond to smallest λ
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let take = n.min(k);
        let mut values = Vec::with_capacity(take);
        let mut vectors = Vec::with_capacity(take);
        let mut worst = 0.0f64;
        let mut worst_mode = 0;
        for (mode, &idx) in order.iter().take(take).enumerate() {
            let theta = eig.eigenvalues[idx];
            let s = eig.eigenvectors.column(idx);
            // ‖A⁻¹M x − θ x‖_M = β_k |s_k| for an M-orthonormal basis
            let res = (wnorm * s[k - 1]).abs() / theta.abs().max(1e-300);
            if !(res <= worst) {
                worst = res;
                worst_mode = mode;
            }
            let mut x = vec![0.0; dim];
            for (j, v) in basis.iter().enumerate() {
                axpy(&mut x, s[j], v);
            }
            let lambda = if theta > 0.0 { 1.0 / theta } else { f64::INFINITY };
            let mx = m.mul_vec(&x);
            // renormalize against roundoff
            let nm = dot(&x, &mx).sqrt();
            x.iter_mut().for_each(|v| *v /= nm);
            values.push(lambda);
            vectors.push(x);
        }

        if take == n && worst <= opts.tol {
            if log::log_enabled!(log::Level::Trace) {
                for (l, x) in values.iter().zip(&vectors) {
                    let ax = apply(x);
                    let mx = m.mul_vec(x);
                    let r: Vec<f64> = ax.iter().zip(&mx).map(|(a, b)| a - l * b).collect();
                    log::trace!("eigenvalue {l:.9e}: residual {:.3e}", norm(&r) / norm(&ax).max(1e-300));
                }
            }
            let mut pairs: Vec<(f64, Vec<f64>)> = values.into_iter().zip(vectors).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (values, vectors) = pairs.into_iter().unzip();
            return Ok(EigenPairs { values, vectors });
        }
        if k >= cap {
            return Err(Error::EigenNoConvergence {
                mode: worst_mode,
                residual: worst,
            });
        }
        next_check = (k + k / 2 + 4).min(cap);
    }
}

/// Dense solve of `A x = λ M x` returning the `n` smallest pairs.
pub fn dense_smallest(a: &DMatrix<f64>, m: &DMatrix<f64>, n: usize) -> Result<EigenPairs> {
    let dim = a.nrows();
    let chol = m.clone().cholesky().ok_or_else(|| Error::Singular {
        context: "dense mass matrix".into(),
        pivot: 0,
        value: 0.0,
    })?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular {
            context: "dense Cholesky factor".into(),
            pivot: 0,
            value: 0.0,
        })?;
    let mut c = &linv * a * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lt_inv = linv.transpose();
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for &idx in order.iter().take(n) {
        values.push(eig.eigenvalues[idx]);
        let z: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let x = &lt_inv * z;
        vectors.push(x.iter().copied().collect());
    }
    Ok(EigenPairs { values, vectors })
}

/// Modal assurance criterion between two vectors in the `M` inner product.
pub fn mac(m: &CsrMatrix, a: &[f64], b: &[f64]) -> f64 {
    let ab = m.bilinear(a, b);
    ab * ab / (m.bilinear(a, a) * m.bilinear(b, b))
}
