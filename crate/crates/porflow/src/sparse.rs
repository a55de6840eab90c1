//! Minimal sparse linear algebra: triplet assembly, CSR storage, a
//! right-looking sparse LU with partial pivoting for the direct path, and
//! BiCGSTAB with Jacobi preconditioning for large systems.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("matrix is {n}x{n} but vector has length {len}")]
    SizeMismatch { n: usize, len: usize },
    #[error("singular pivot at elimination step {step}: |{value:e}|")]
    SingularPivot { step: usize, value: f64 },
    #[error("iterative solver breakdown at iteration {iteration} (residual {residual:e})")]
    Breakdown { iteration: usize, residual: f64 },
    #[error("iterative solver stagnated after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("direct solve residual {residual:e} exceeds tolerance (backward error {backward:e})")]
    ResidualCheckFailed { residual: f64, backward: f64 },
}

/// Accumulates (row, col, value) entries; duplicates sum on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn to_csr(&self) -> Csr {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut cur_row = 0usize;
        let mut row_start = 0usize;
        for &(r, c, v) in &entries {
            while cur_row < r {
                row_ptr[cur_row + 1] = cols.len();
                cur_row += 1;
                row_start = cols.len();
            }
            if cols.len() > row_start && *cols.last().unwrap() == c {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
            }
        }
        while cur_row < self.n {
            row_ptr[cur_row + 1] = cols.len();
            cur_row += 1;
        }
        Csr {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

/// Compressed sparse row matrix (square).
#[derive(Debug, Clone)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
    }

    pub fn infinity_norm(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Writes the matrix as `row col value` triplets for debugging.
    pub fn write_triplets(&self, out: &mut impl Write) -> io::Result<()> {
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(out, "{} {} {:.16e}", r, c, v)?;
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                m[r][*c] = *v;
            }
        }
        m
    }
}

/// LU factorization with partial pivoting; rows are kept as sorted
/// (column, value) vectors so fill-in stays local for banded systems.
#[derive(Debug)]
pub struct SparseLu {
    n: usize,
    /// perm[k] = original row placed at elimination position k.
    perm: Vec<usize>,
    lower: Vec<Vec<(usize, f64)>>,
    upper: Vec<Vec<(usize, f64)>>,
}

fn row_value(row: &[(usize, f64)], col: usize) -> Option<f64> {
    row.binary_search_by_key(&col, |e| e.0)
        .ok()
        .map(|i| row[i].1)
}

impl SparseLu {
    pub fn factor(a: &Csr) -> Result<Self, LinearError> {
        let n = a.n;
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|r| {
                let (cols, vals) = a.row(r);
                cols.iter().copied().zip(vals.iter().copied()).collect()
            })
            .collect();
        let mut lower: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut scratch: Vec<(usize, f64)> = Vec::new();

        for k in 0..n {
            // partial pivoting on column k
            let mut best = k;
            let mut best_abs = row_value(&rows[k], k).map_or(0.0, f64::abs);
            for i in (k + 1)..n {
                if let Some(v) = row_value(&rows[i], k) {
                    if v.abs() > best_abs {
                        best_abs = v.abs();
                        best = i;
                    }
                }
            }
            if best_abs < f64::MIN_POSITIVE {
                return Err(LinearError::SingularPivot {
                    step: k,
                    value: best_abs,
                });
            }
            if best != k {
                rows.swap(k, best);
                lower.swap(k, best);
                perm.swap(k, best);
            }
            let pivot = row_value(&rows[k], k).unwrap();
            for i in (k + 1)..n {
                let Some(v_ik) = row_value(&rows[i], k) else {
                    continue;
                };
                let m = v_ik / pivot;
                lower[i].push((k, m));
                // rows[i] <- rows[i] - m * rows[k], restricted to cols > k
                scratch.clear();
                let (ri, rk) = (&rows[i], &rows[k]);
                let mut p = ri.iter().filter(|e| e.0 > k).peekable();
                let mut q = rk.iter().filter(|e| e.0 > k).peekable();
                loop {
                    match (p.peek(), q.peek()) {
                        (Some(&&(ci, vi)), Some(&&(ck, vk))) => {
                            if ci < ck {
                                scratch.push((ci, vi));
                                p.next();
                            } else if ci > ck {
                                scratch.push((ck, -m * vk));
                                q.next();
                            } else {
                                scratch.push((ci, vi - m * vk));
                                p.next();
                                q.next();
                            }
                        }
                        (Some(&&e), None) => {
                            scratch.push(e);
                            p.next();
                        }
                        (None, Some(&&(ck, vk))) => {
                            scratch.push((ck, -m * vk));
                            q.next();
                        }
                        (None, None) => break,
                    }
                }
                rows[i].clear();
                rows[i].extend_from_slice(&scratch);
            }
        }
        Ok(Self {
            n,
            perm,
            lower,
            upper: rows,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinearError> {
        if b.len() != self.n {
            return Err(LinearError::SizeMismatch {
                n: self.n,
                len: b.len(),
            });
        }
        // forward substitution with the permuted right-hand side
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut v = b[self.perm[i]];
            for &(k, m) in &self.lower[i] {
                v -= m * y[k];
            }
            y[i] = v;
        }
        // back substitution
        let mut x = vec![0.0; self.n];
        for i in (0..self.n).rev() {
            let row = &self.upper[i];
            let mut v = y[i];
            let mut diag = 0.0;
            for &(c, u) in row {
                if c == i {
                    diag = u;
                } else {
                    v -= u * x[c];
                }
            }
            x[i] = v / diag;
        }
        Ok(x)
    }
}

/// BiCGSTAB with Jacobi preconditioning. Returns the solution and the
/// iteration count.
pub fn bicgstab(
    a: &Csr,
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize), LinearError> {
    let n = a.n;
    if b.len() != n {
        return Err(LinearError::SizeMismatch { n, len: b.len() });
    }
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d.abs() > f64::MIN_POSITIVE {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut residual = norm2(&r);
    for it in 1..=max_iters {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-290 {
            return Err(LinearError::Breakdown {
                iteration: it,
                residual,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat: Vec<f64> = (0..n).map(|i| p[i] * inv_diag[i]).collect();
        a.matvec(&phat, &mut v);
        let denom = dot(&r0, &v);
        if denom.abs() < 1e-290 {
            return Err(LinearError::Breakdown {
                iteration: it,
                residual,
            });
        }
        alpha = rho / denom;
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm2(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok((x, it));
        }
        let shat: Vec<f64> = (0..n).map(|i| s[i] * inv_diag[i]).collect();
        a.matvec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-290 {
            return Err(LinearError::Breakdown {
                iteration: it,
                residual,
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        residual = norm2(&r);
        if residual <= tol * bnorm {
            return Ok((x, it));
        }
    }
    Err(LinearError::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
