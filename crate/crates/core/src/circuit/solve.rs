use ndarray::{Array2, ArrayView2};

use super::network::{norm, pcg, Sense, Terminal, Topology};
use super::{CrossbarConfig, CrossbarState, DeviceModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative KCL residual for linear solves.
    pub linear_tol: f64,
    /// Relative KCL residual for the Newton iteration.
    pub newton_tol: f64,
    pub max_newton_iterations: usize,
    /// Step halvings tried when a Newton step does not reduce the residual.
    pub max_halvings: usize,
    pub max_cg_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            linear_tol: 1e-12,
            newton_tol: 1e-11,
            max_newton_iterations: 100,
            max_halvings: 20,
            max_cg_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// Column currents, amperes.
    pub i_out: Vec<f64>,
    /// Unknown node voltages (word-line, bit-line, then access-internal nodes).
    pub node_voltages: Vec<f64>,
    pub iterations: usize,
    /// Relative KCL residual at the returned state.
    pub residual: f64,
}

fn check_inputs(cfg: &CrossbarConfig, dim: (usize, usize), v: &[f64]) -> Result<()> {
    cfg.validate()?;
    if dim != (cfg.n_rows, cfg.n_cols) {
        return Err(Error::Dimension(format!(
            "conductance matrix is {dim:?}, crossbar is {}x{}",
            cfg.n_rows, cfg.n_cols
        )));
    }
    if v.len() != cfg.n_rows {
        return Err(Error::Dimension(format!(
            "voltage vector has {} entries, crossbar has {} rows",
            v.len(),
            cfg.n_rows
        )));
    }
    let hi = cfg.v_supply * (1.0 + 1e-9);
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0 && **x <= hi)) {
        return Err(Error::Range(format!(
            "input voltage {bad} outside [0, {}]",
            cfg.v_supply
        )));
    }
    Ok(())
}

fn column_currents(topo: &Topology, x: &[f64], v: &[f64], cell_current: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    topo.sense
        .iter()
        .enumerate()
        .map(|(j, s)| match *s {
            Sense::Branch { node, g } => x[node] * g,
            Sense::Cells => (0..topo.n_rows)
                .map(|i| {
                    let k = i * topo.n_cols + j;
                    let (a, b) = topo.cells[k];
                    cell_current(k, Topology::voltage(a, x, v) - Topology::voltage(b, x, v))
                })
                .sum(),
        })
        .collect()
}

fn linear_core(topo: &Topology, cell_g: &[f64], v: &[f64], opts: &SolverOptions) -> Result<SolveResult> {
    let sys = topo.assemble(cell_g, v);
    let scale = norm(&sys.rhs);
    let mut x = vec![0.0; topo.n_unknowns];
    let (iterations, resid) = if scale > 0.0 {
        pcg(&sys, &sys.rhs, &mut x, opts.linear_tol * scale, opts.max_cg_iterations)?
    } else {
        (0, 0.0)
    };
    let i_out = column_currents(topo, &x, v, |k, dv| cell_g[k] * dv);
    Ok(SolveResult {
        i_out,
        node_voltages: x,
        iterations,
        residual: if scale > 0.0 { resid / scale } else { 0.0 },
    })
}

/// Nodal analysis with linear cells of conductance `g` (siemens).
pub fn solve_linear(cfg: &CrossbarConfig, g: ArrayView2<f64>, v: &[f64]) -> Result<SolveResult> {
    solve_linear_with(cfg, g, v, &SolverOptions::default())
}

pub fn solve_linear_with(
    cfg: &CrossbarConfig,
    g: ArrayView2<f64>,
    v: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    check_inputs(cfg, g.dim(), v)?;
    let topo = Topology::new(cfg);
    let cell_g: Vec<f64> = g.iter().copied().collect();
    linear_core(&topo, &cell_g, v, opts)
}

/// Column currents per unit volt on each row: `I = M v` for the linear
/// network with cells `g`. Shape `(n_cols, n_rows)`.
pub fn linear_transfer_matrix(cfg: &CrossbarConfig, g: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(cfg, g.dim(), &vec![0.0; cfg.n_rows])?;
    let topo = Topology::new(cfg);
    let cell_g: Vec<f64> = g.iter().copied().collect();
    let opts = SolverOptions::default();
    let mut m = Array2::zeros((cfg.n_cols, cfg.n_rows));
    let mut v = vec![0.0; cfg.n_rows];
    for i in 0..cfg.n_rows {
        v[i] = 1.0;
        let res = linear_core(&topo, &cell_g, &v, &opts)?;
        for (j, c) in res.i_out.iter().enumerate() {
            m[(j, i)] = *c;
        }
        v[i] = 0.0;
    }
    Ok(m)
}

/// KCL residual: net current leaving every unknown node.
fn residual(topo: &Topology, device: &DeviceModel, gaps: &[f64], x: &[f64], v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|f| *f = 0.0);
    let mut push = |a: Terminal, b: Terminal, i: f64| {
        if let Terminal::Node(p) = a {
            out[p] += i;
        }
        if let Terminal::Node(q) = b {
            out[q] -= i;
        }
    };
    for r in &topo.resistors {
        let dv = Topology::voltage(r.a, x, v) - Topology::voltage(r.b, x, v);
        push(r.a, r.b, r.g * dv);
    }
    for (&(a, b), &d) in topo.cells.iter().zip(gaps) {
        let dv = Topology::voltage(a, x, v) - Topology::voltage(b, x, v);
        push(a, b, device.current(d, dv));
    }
}

/// Newton-Raphson solve with the sinh device model in every cell.
pub fn solve_nonlinear(cfg: &CrossbarConfig, state: &CrossbarState, v: &[f64]) -> Result<SolveResult> {
    solve_nonlinear_with(cfg, state, v, &SolverOptions::default())
}

pub fn solve_nonlinear_with(
    cfg: &CrossbarConfig,
    state: &CrossbarState,
    v: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    check_inputs(cfg, state.gaps.dim(), v)?;
    let device = cfg.device;
    let topo = Topology::new(cfg);
    let gaps: Vec<f64> = state.gaps.iter().copied().collect();
    let n = topo.n_unknowns;

    let small_signal: Vec<f64> = gaps.iter().map(|&d| device.small_signal_conductance(d)).collect();
    let mut x = linear_core(&topo, &small_signal, v, opts)?.node_voltages;

    let mut f = vec![0.0; n];
    residual(&topo, &device, &gaps, &vec![0.0; n], v, &mut f);
    let scale = norm(&f);
    let device_current = |k: usize, dv: f64| device.current(gaps[k], dv);
    if scale == 0.0 {
        let x = vec![0.0; n];
        let i_out = column_currents(&topo, &x, v, device_current);
        return Ok(SolveResult {
            i_out,
            node_voltages: x,
            iterations: 0,
            residual: 0.0,
        });
    }

    residual(&topo, &device, &gaps, &x, v, &mut f);
    let mut fnorm = norm(&f);
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut f_trial = vec![0.0; n];
    let mut jac_g = vec![0.0; gaps.len()];
    while fnorm / scale > opts.newton_tol {
        if iterations >= opts.max_newton_iterations {
            return Err(Error::NonConvergence {
                iterations,
                residual: fnorm / scale,
            });
        }
        iterations += 1;

        for (k, &(a, b)) in topo.cells.iter().enumerate() {
            let dv = Topology::voltage(a, &x, v) - Topology::voltage(b, &x, v);
            jac_g[k] = device.differential_conductance(gaps[k], dv);
        }
        let jac = topo.assemble(&jac_g, v);
        let rhs: Vec<f64> = f.iter().map(|r| -r).collect();
        let mut dx = vec![0.0; n];
        pcg(&jac, &rhs, &mut dx, 1e-10 * fnorm, opts.max_cg_iterations)?;

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            for k in 0..n {
                trial[k] = x[k] + alpha * dx[k];
            }
            residual(&topo, &device, &gaps, &trial, v, &mut f_trial);
            let tn = norm(&f_trial);
            if tn < fnorm {
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut f, &mut f_trial);
                fnorm = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations,
                residual: fnorm / scale,
            });
        }
    }

    let i_out = column_currents(&topo, &x, v, device_current);
    Ok(SolveResult {
        i_out,
        node_voltages: x,
        iterations,
        residual: fnorm / scale,
    })
}
