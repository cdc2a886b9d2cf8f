//! Nodal network of a crossbar and a preconditioned conjugate-gradient solve.
//!
//! Word-line nodes are numbered row by row and bit-line nodes column by
//! column, so every wire chain occupies a contiguous index range. The
//! tridiagonal part of the nodal matrix then contains each line's chain
//! exactly, and it is used as the preconditioner (one Thomas solve).

use super::CrossbarConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Terminal {
    Node(usize),
    /// Word-line driver `i`, held at the applied input voltage.
    Driver(usize),
    Ground,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Resistor {
    pub a: Terminal,
    pub b: Terminal,
    pub g: f64,
}

/// How the current of one column is read out.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Sense {
    /// Current through a branch from `node` to ground.
    Branch { node: usize, g: f64 },
    /// The bit line is grounded directly; sum the cell currents.
    Cells,
}

#[derive(Debug, Clone)]
pub(crate) struct Topology {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_unknowns: usize,
    pub resistors: Vec<Resistor>,
    /// Cell `i * n_cols + j`: (word-line side, bit-line side) terminals of the device.
    pub cells: Vec<(Terminal, Terminal)>,
    pub sense: Vec<Sense>,
}

impl Topology {
    pub fn new(cfg: &CrossbarConfig) -> Self {
        let (nr, nc) = (cfg.n_rows, cfg.n_cols);
        let mut resistors = Vec::new();
        let mut next = 0usize;

        // Word lines.
        let wl: Vec<Vec<Terminal>> = if cfg.r_wire > 0.0 {
            let base = next;
            next += nr * nc;
            (0..nr)
                .map(|i| {
                    let row: Vec<_> = (0..nc).map(|j| Terminal::Node(base + i * nc + j)).collect();
                    resistors.push(Resistor {
                        a: Terminal::Driver(i),
                        b: row[0],
                        g: 1.0 / (cfg.r_source + cfg.r_wire),
                    });
                    for j in 1..nc {
                        resistors.push(Resistor {
                            a: row[j - 1],
                            b: row[j],
                            g: 1.0 / cfg.r_wire,
                        });
                    }
                    row
                })
                .collect()
        } else if cfg.r_source > 0.0 {
            let base = next;
            next += nr;
            (0..nr)
                .map(|i| {
                    let node = Terminal::Node(base + i);
                    resistors.push(Resistor {
                        a: Terminal::Driver(i),
                        b: node,
                        g: 1.0 / cfg.r_source,
                    });
                    vec![node; nc]
                })
                .collect()
        } else {
            (0..nr).map(|i| vec![Terminal::Driver(i); nc]).collect()
        };

        // Bit lines.
        let mut sense = Vec::with_capacity(nc);
        let bl: Vec<Vec<Terminal>> = if cfg.r_wire > 0.0 {
            let base = next;
            next += nr * nc;
            (0..nc)
                .map(|j| {
                    let col: Vec<_> = (0..nr).map(|i| Terminal::Node(base + j * nr + i)).collect();
                    for i in 1..nr {
                        resistors.push(Resistor {
                            a: col[i - 1],
                            b: col[i],
                            g: 1.0 / cfg.r_wire,
                        });
                    }
                    let g = 1.0 / (cfg.r_wire + cfg.r_sink);
                    resistors.push(Resistor {
                        a: col[nr - 1],
                        b: Terminal::Ground,
                        g,
                    });
                    let Terminal::Node(node) = col[nr - 1] else {
                        unreachable!()
                    };
                    sense.push(Sense::Branch { node, g });
                    col
                })
                .collect()
        } else if cfg.r_sink > 0.0 {
            let base = next;
            next += nc;
            (0..nc)
                .map(|j| {
                    let g = 1.0 / cfg.r_sink;
                    resistors.push(Resistor {
                        a: Terminal::Node(base + j),
                        b: Terminal::Ground,
                        g,
                    });
                    sense.push(Sense::Branch { node: base + j, g });
                    vec![Terminal::Node(base + j); nr]
                })
                .collect()
        } else {
            sense.resize(nc, Sense::Cells);
            (0..nc).map(|_| vec![Terminal::Ground; nr]).collect()
        };

        let mut cells = Vec::with_capacity(nr * nc);
        for i in 0..nr {
            for j in 0..nc {
                let top = if cfg.r_access > 0.0 {
                    let m = Terminal::Node(next);
                    next += 1;
                    resistors.push(Resistor {
                        a: wl[i][j],
                        b: m,
                        g: 1.0 / cfg.r_access,
                    });
                    m
                } else {
                    wl[i][j]
                };
                cells.push((top, bl[j][i]));
            }
        }

        Self {
            n_rows: nr,
            n_cols: nc,
            n_unknowns: next,
            resistors,
            cells,
            sense,
        }
    }

    #[inline]
    pub fn voltage(term: Terminal, x: &[f64], v: &[f64]) -> f64 {
        match term {
            Terminal::Node(k) => x[k],
            Terminal::Driver(i) => v[i],
            Terminal::Ground => 0.0,
        }
    }

    /// Assemble the nodal matrix with cell branches of conductance `cell_g`.
    /// The right-hand side holds injections from drivers at voltages `v`.
    pub fn assemble(&self, cell_g: &[f64], v: &[f64]) -> System {
        let n = self.n_unknowns;
        let mut sys = System {
            diag: vec![0.0; n],
            edges: Vec::with_capacity(self.resistors.len() + self.cells.len()),
            rhs: vec![0.0; n],
        };
        for r in &self.resistors {
            sys.stamp(r.a, r.b, r.g, v);
        }
        for (&(a, b), &g) in self.cells.iter().zip(cell_g) {
            sys.stamp(a, b, g, v);
        }
        sys
    }
}

/// Symmetric nodal matrix in edge form: `A = diag - sum_edges g (e_a e_b^T + e_b e_a^T)`.
#[derive(Debug, Clone)]
pub(crate) struct System {
    pub diag: Vec<f64>,
    pub edges: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
}

impl System {
    fn stamp(&mut self, a: Terminal, b: Terminal, g: f64, v: &[f64]) {
        use Terminal::*;
        match (a, b) {
            (Node(p), Node(q)) => {
                self.diag[p] += g;
                self.diag[q] += g;
                self.edges.push((p, q, g));
            }
            (Node(p), other) | (other, Node(p)) => {
                self.diag[p] += g;
                if let Driver(i) = other {
                    self.rhs[p] += g * v[i];
                }
            }
            _ => {}
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, d), xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi = d * xi;
        }
        for &(a, b, g) in &self.edges {
            y[a] -= g * x[b];
            y[b] -= g * x[a];
        }
    }

    /// Thomas factorization of the tridiagonal part of the matrix.
    pub fn tridiagonal_preconditioner(&self) -> Tridiagonal {
        let n = self.len();
        let mut off = vec![0.0; n.saturating_sub(1)];
        for &(a, b, g) in &self.edges {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if hi == lo + 1 {
                off[lo] -= g;
            }
        }
        Tridiagonal::factor(&self.diag, &off)
    }
}

/// LU factors of a symmetric tridiagonal matrix (no pivoting; the nodal
/// matrix is diagonally dominant).
#[derive(Debug, Clone)]
pub(crate) struct Tridiagonal {
    off: Vec<f64>,
    /// Modified super-diagonal `c'_k`.
    c: Vec<f64>,
    /// Pivots.
    piv: Vec<f64>,
}

impl Tridiagonal {
    fn factor(diag: &[f64], off: &[f64]) -> Self {
        let n = diag.len();
        let mut c = vec![0.0; n.saturating_sub(1)];
        let mut piv = vec![0.0; n];
        for k in 0..n {
            let mut p = diag[k];
            if k > 0 {
                p -= off[k - 1] * c[k - 1];
            }
            piv[k] = p;
            if k + 1 < n {
                c[k] = off[k] / p;
            }
        }
        Self {
            off: off.to_vec(),
            c,
            piv,
        }
    }

    pub fn solve(&self, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        if n == 0 {
            return;
        }
        z[0] = r[0] / self.piv[0];
        for k in 1..n {
            z[k] = (r[k] - self.off[k - 1] * z[k - 1]) / self.piv[k];
        }
        for k in (0..n - 1).rev() {
            z[k] -= self.c[k] * z[k + 1];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve `A x = b` by preconditioned CG starting from the given `x`, until
/// the true residual norm is at most `tol_abs`. Returns (iterations, residual norm).
pub(crate) fn pcg(sys: &System, b: &[f64], x: &mut [f64], tol_abs: f64, max_iter: usize) -> Result<(usize, f64)> {
    let n = sys.len();
    let pre = sys.tridiagonal_preconditioner();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut total = 0usize;

    // The recursive residual drifts from the true one; restart a few times.
    for _ in 0..4 {
        sys.matvec(x, &mut ap);
        for k in 0..n {
            r[k] = b[k] - ap[k];
        }
        let mut rnorm = norm(&r);
        if rnorm <= tol_abs {
            return Ok((total, rnorm));
        }
        pre.solve(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while total < max_iter {
            total += 1;
            sys.matvec(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap.is_nan() || pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            rnorm = norm(&r);
            if rnorm <= 0.5 * tol_abs {
                break;
            }
            pre.solve(&r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        if total >= max_iter {
            break;
        }
    }
    sys.matvec(x, &mut ap);
    let resid: f64 = b.iter().zip(&ap).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
    if resid <= tol_abs {
        Ok((total, resid))
    } else {
        Err(Error::NonConvergence {
            iterations: total,
            residual: resid / norm(b).max(f64::MIN_POSITIVE),
        })
    }
}
