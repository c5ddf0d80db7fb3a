//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations are applied to the columns of `M` (or of `Mᵀ` when `M` is
//! wide) so that the working set always has `min(rows, cols)` columns.
//! Right vectors are accumulated from the same rotations.

use super::{frobenius_norm, DenseTensor};
use crate::error::{Error, Result};

/// Relative off-diagonal threshold: a column pair is treated as orthogonal
/// once `|<a, b>| <= JACOBI_TOL * |a| * |b|`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Top-`k` singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `p x k`, orthonormal columns.
    pub u: DenseTensor,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `k x q`, orthonormal rows.
    pub vt: DenseTensor,
    /// Sum of squares of the singular values that were dropped.
    pub discarded_energy: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u * diag(sigma) * vt`
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let (p, k) = self.u.shape2()?;
        let mut us = self.u.clone();
        for i in 0..p {
            for j in 0..k {
                us.data_mut()[i * k + j] *= self.sigma[j];
            }
        }
        super::matmul(&us, &self.vt)
    }

    /// `diag(sigma) * vt`
    pub fn sigma_vt(&self) -> Result<DenseTensor> {
        let (k, q) = self.vt.shape2()?;
        let mut out = self.vt.clone();
        for i in 0..k {
            for x in &mut out.data_mut()[i * q..(i + 1) * q] {
                *x *= self.sigma[i];
            }
        }
        Ok(out)
    }
}

struct Columns {
    len: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(i < j);
        let (lo, hi) = self.data.split_at_mut(j * self.len);
        (&mut lo[i * self.len..(i + 1) * self.len], &mut hi[..self.len])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Orthogonalizes the columns of `work` in place, accumulating rotations into `v`.
fn jacobi_sweeps(work: &mut Columns, v: &mut Columns, n: usize, zero_floor: f64) -> Result<()> {
    let mut norms: Vec<f64> = (0..n).map(|j| dot(work.col(j), work.col(j))).collect();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (a, b) = (norms[i], norms[j]);
                if a <= zero_floor || b <= zero_floor {
                    continue;
                }
                let d = dot(work.col(i), work.col(j));
                if d == 0.0 || d.abs() <= JACOBI_TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * d);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wi, wj) = work.pair_mut(i, j);
                rotate(wi, wj, c, s);
                let (vi, vj) = v.pair_mut(i, j);
                rotate(vi, vj, c, s);
                norms[i] = a - t * d;
                norms[j] = b + t * d;
            }
        }
        if !rotated {
            return Ok(());
        }
        for (j, nrm) in norms.iter_mut().enumerate() {
            *nrm = dot(work.col(j), work.col(j));
        }
    }
    Err(Error::DidNotConverge {
        sweeps: JACOBI_MAX_SWEEPS,
    })
}

/// Replaces the flagged vectors by unit vectors orthogonal to every other vector in `vecs`.
fn complete_orthonormal(vecs: &mut [Vec<f64>], deficient: &[bool]) {
    let len = vecs.first().map_or(0, Vec::len);
    let mut candidate = 0usize;
    for j in 0..vecs.len() {
        if !deficient[j] {
            continue;
        }
        loop {
            assert!(candidate < len, "cannot complete orthonormal basis");
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (o, other) in vecs.iter().enumerate() {
                    if o == j || (deficient[o] && o > j) {
                        continue;
                    }
                    let proj = dot(&e, other);
                    for (x, y) in e.iter_mut().zip(other) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 0.5 {
                for x in &mut e {
                    *x /= nrm;
                }
                vecs[j] = e;
                break;
            }
        }
    }
}

/// Top-`keep` singular triplets of a 2-d tensor.
///
/// Singular values come back sorted descending. Each left vector is signed so
/// that its first non-negligible entry is positive.
pub fn svd_truncated(m: &DenseTensor, keep: usize) -> Result<SvdResult> {
    let (p, q) = m.shape2()?;
    if keep == 0 || keep > p.min(q) {
        return Err(Error::ShapeMismatch(format!(
            "svd keep={keep} outside 1..={} for [{p}, {q}]",
            p.min(q)
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let transposed = p < q;
    let (len, n) = if transposed { (q, p) } else { (p, q) };

    // column-major working copy of M (or Mᵀ)
    let mut work = Columns {
        len,
        data: vec![0.0; len * n],
    };
    for i in 0..p {
        for j in 0..q {
            let x = m.data()[i * q + j];
            if transposed {
                work.data[i * len + j] = x;
            } else {
                work.data[j * len + i] = x;
            }
        }
    }
    let mut v = Columns {
        len: n,
        data: vec![0.0; n * n],
    };
    for j in 0..n {
        v.data[j * n + j] = 1.0;
    }

    let norm_m = frobenius_norm(m);
    let zero_floor = (f64::EPSILON * 1e-3 * norm_m).powi(2).max(f64::MIN_POSITIVE);
    jacobi_sweeps(&mut work, &mut v, n, zero_floor)?;

    let sigma_all: Vec<f64> = (0..n).map(|j| dot(work.col(j), work.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma_all[b].total_cmp(&sigma_all[a]));

    let kept = &order[..keep];
    let discarded_energy: f64 = order[keep..].iter().map(|&j| sigma_all[j].powi(2)).sum();
    let sigma: Vec<f64> = kept.iter().map(|&j| sigma_all[j]).collect();

    // work-side unit vectors; tiny columns are numerically zero and get completed
    let mut work_vecs: Vec<Vec<f64>> = Vec::with_capacity(keep);
    let mut deficient = Vec::with_capacity(keep);
    for &j in kept {
        let s = sigma_all[j];
        if s * s <= zero_floor {
            work_vecs.push(vec![0.0; len]);
            deficient.push(true);
        } else {
            work_vecs.push(work.col(j).iter().map(|x| x / s).collect());
            deficient.push(false);
        }
    }
    if deficient.iter().any(|&d| d) {
        complete_orthonormal(&mut work_vecs, &deficient);
    }
    let rot_vecs: Vec<Vec<f64>> = kept.iter().map(|&j| v.col(j).to_vec()).collect();

    // left vectors of M live in `work` unless M was transposed
    let (mut left, mut right) = if transposed {
        (rot_vecs, work_vecs)
    } else {
        (work_vecs, rot_vecs)
    };
    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        if let Some(&first) = l.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                l.iter_mut().for_each(|x| *x = -*x);
                r.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let u = DenseTensor::from_fn(&[p, keep], |k| left[k % keep][k / keep])?;
    let vt = DenseTensor::new(vec![keep, q], right.concat())?;
    Ok(SvdResult {
        u,
        sigma,
        vt,
        discarded_energy,
    })
}
