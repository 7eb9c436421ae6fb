//! Small dense eigenvalue routines.
//!
//! Eigenvalues come from Householder reduction to upper Hessenberg form
//! followed by the Francis double-shift QR iteration; eigenvectors from
//! inverse iteration on the shifted complex matrix.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Result, StcError};

/// Reduce `a` to upper Hessenberg form by Householder similarity transforms.
pub fn hessenberg(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut h = a.clone();
    for k in 0..n.saturating_sub(2) {
        let mut v = DVector::from_iterator(n - k - 1, (k + 1..n).map(|i| h[(i, k)]));
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm == 0.0 {
            continue;
        }
        v /= vnorm;
        // H <- (I - 2 v v') H on rows k+1..n
        for j in 0..n {
            let dot: f64 = (0..v.len()).map(|r| v[r] * h[(k + 1 + r, j)]).sum();
            for r in 0..v.len() {
                h[(k + 1 + r, j)] -= 2.0 * v[r] * dot;
            }
        }
        // H <- H (I - 2 v v') on columns k+1..n
        for i in 0..n {
            let dot: f64 = (0..v.len()).map(|c| h[(i, k + 1 + c)] * v[c]).sum();
            for c in 0..v.len() {
                h[(i, k + 1 + c)] -= 2.0 * dot * v[c];
            }
        }
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
    }
    h
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of a real square matrix.
///
/// Fails if the QR iteration has not converged after `100 n^2` sweeps.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(StcError::InvalidParameter(
            "eigenvalues of a non-square matrix".into(),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(StcError::Numerical("matrix has non-finite entries".into()));
    }
    let n = m.nrows();
    let mut a = hessenberg(m);
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let limit = 100 * n * n;
    let mut total = 0usize;

    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[(i, j)].abs();
        }
    }

    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        let mut l;
        loop {
            let nu = nn as usize;
            // locate a negligible subdiagonal element
            l = nu;
            while l >= 1 {
                let mut s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() + s == s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let x = a[(nu, nu)];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
            } else {
                let y = a[(nu - 1, nu - 1)];
                let w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
                if l == nu - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let z = q.abs().sqrt();
                    let x = x + t;
                    if q >= 0.0 {
                        let z = p + sign(z, p);
                        wr[nu - 1] = x + z;
                        wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                } else {
                    total += 1;
                    if total > limit {
                        return Err(StcError::Numerical(format!(
                            "QR iteration did not converge after {limit} sweeps"
                        )));
                    }
                    let (mut x, mut y, mut w) = (x, y, w);
                    if its == 10 || its == 20 {
                        // exceptional shift
                        t += x;
                        for i in 0..=nu {
                            a[(i, i)] -= x;
                        }
                        let s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    francis_step(&mut a, l, nu, x, y, w);
                }
            }
            if !(nn >= 1 && (l as isize) < nn - 1) {
                break;
            }
        }
    }
    Ok(wr
        .into_iter()
        .zip(wi)
        .map(|(r, i)| Complex64::new(r, i))
        .collect())
}

fn francis_step(a: &mut DMatrix<f64>, l: usize, nn: usize, x: f64, y: f64, w: f64) {
    let (mut p, mut q, mut r);
    let mut m = nn - 2;
    loop {
        let z = a[(m, m)];
        let rr = x - z;
        let s = y - z;
        p = (rr * s - w) / a[(m + 1, m)] + a[(m, m + 1)];
        q = a[(m + 1, m + 1)] - z - rr - s;
        r = a[(m + 2, m + 1)];
        let s = p.abs() + q.abs() + r.abs();
        p /= s;
        q /= s;
        r /= s;
        if m == l {
            break;
        }
        let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
        let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
        if u + v == v {
            break;
        }
        m -= 1;
    }
    for i in m + 2..=nn {
        a[(i, i - 2)] = 0.0;
        if i != m + 2 {
            a[(i, i - 3)] = 0.0;
        }
    }
    let mut x = 0.0;
    for k in m..nn {
        if k != m {
            p = a[(k, k - 1)];
            q = a[(k + 1, k - 1)];
            r = if k != nn - 1 { a[(k + 2, k - 1)] } else { 0.0 };
            x = p.abs() + q.abs() + r.abs();
            if x != 0.0 {
                p /= x;
                q /= x;
                r /= x;
            }
        }
        let s = sign((p * p + q * q + r * r).sqrt(), p);
        if s == 0.0 {
            continue;
        }
        if k == m {
            if l != m {
                a[(k, k - 1)] = -a[(k, k - 1)];
            }
        } else {
            a[(k, k - 1)] = -s * x;
        }
        p += s;
        let xk = p / s;
        let yk = q / s;
        let zk = r / s;
        q /= p;
        r /= p;
        for j in k..=nn {
            let mut pp = a[(k, j)] + q * a[(k + 1, j)];
            if k != nn - 1 {
                pp += r * a[(k + 2, j)];
                a[(k + 2, j)] -= pp * zk;
            }
            a[(k + 1, j)] -= pp * yk;
            a[(k, j)] -= pp * xk;
        }
        let mmin = if nn < k + 3 { nn } else { k + 3 };
        for i in l..=mmin {
            let mut pp = xk * a[(i, k)] + yk * a[(i, k + 1)];
            if k != nn - 1 {
                pp += zk * a[(i, k + 2)];
                a[(i, k + 2)] -= pp * r;
            }
            a[(i, k + 1)] -= pp * q;
            a[(i, k)] -= pp;
        }
    }
}

/// Largest real part among the eigenvalues (spectral abscissa).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Unit-norm eigenvectors for the given eigenvalues, as columns.
///
/// Returns `None` if a shifted system cannot be solved.
pub fn eigenvectors(m: &DMatrix<f64>, eigs: &[Complex64]) -> Option<DMatrix<Complex64>> {
    let n = m.nrows();
    let scale = m.norm().max(1.0);
    let mut vecs = DMatrix::<Complex64>::zeros(n, eigs.len());
    for (col, &lam) in eigs.iter().enumerate() {
        let shift = lam + Complex64::new(1e-10 * scale, 0.0);
        let shifted = DMatrix::<Complex64>::from_fn(n, n, |r, c| {
            let diag = if r == c {
                shift
            } else {
                Complex64::new(0.0, 0.0)
            };
            Complex64::new(m[(r, c)], 0.0) - diag
        });
        let lu = shifted.lu();
        let mut v = DVector::<Complex64>::from_fn(n, |i, _| {
            Complex64::new(1.0 + 0.1 * i as f64, 0.05 * (i % 3) as f64)
        });
        for _ in 0..3 {
            let next = lu.solve(&v)?;
            let norm = next.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return None;
            }
            v = next / Complex64::new(norm, 0.0);
        }
        vecs.set_column(col, &v);
    }
    Some(vecs)
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number(v: &DMatrix<Complex64>) -> f64 {
    let sv = v.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Spectral norm of a real matrix.
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Solve the Lyapunov equation `M X + X M' + W = 0` through its Kronecker
/// form `(I (x) M + M (x) I) vec(X) = -vec(W)`.
pub fn lyapunov(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let op = id.kronecker(m) + m.kronecker(&id);
    let rhs = DVector::from_iterator(n * n, w.iter().map(|v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| StcError::Numerical("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Henrici departure from normality `sqrt(|M|_F^2 - sum |lambda|^2)`: the
/// Frobenius norm of the strictly upper part of any Schur form of `M`.
pub fn departure_from_normality(m: &DMatrix<f64>, eigs: &[Complex64]) -> f64 {
    let fro2 = m.norm_squared();
    let spec2: f64 = eigs.iter().map(|e| e.norm_sqr()).sum();
    (fro2 - spec2).max(0.0).sqrt()
}
