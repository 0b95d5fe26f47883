//! Mean-return-time phase.
//!
//! The mean return time `T` solves `L†T = −1` with reflecting radial
//! boundaries and a jump of `T̄` across a cut. Writing
//! `T = (T̄/2π)(S − α) + c` turns the jump into a periodic problem
//! `L†S = L†[α] − 2π/T̄` whose Fredholm condition is the flux formula for
//! `T̄`. The phase is `Θ = (2π/T̄)(T₀ − T) mod 2π`.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{wrap_angle, AnnulusGrid, ScalarField};
use crate::linalg::SparseLu;
use crate::model::State;
use crate::operator::SparseOperator;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MrtOptions {
    /// Angle of the cut across which `T` jumps.
    pub cut: f64,
    /// Reference constant `T₀`; `None` puts `Θ = 0` at the anchor node.
    pub t0: Option<f64>,
    /// Largest accepted relative Fredholm residual `|T̄ κ₂ / 2π − 1|`.
    pub compat_tol: f64,
}

impl Default for MrtOptions {
    fn default() -> Self {
        Self {
            cut: 0.0,
            t0: None,
            compat_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MrtSolution {
    /// Mean return time, decreasing counterclockwise from the cut.
    pub t_field: ScalarField,
    /// MRT phase in `[0, 2π)`.
    pub theta_field: ScalarField,
    pub tbar: f64,
    pub t0: f64,
    /// The constant `L†_h Θ` of the discrete solution, `2π/T̄` in the
    /// continuum.
    pub rate: f64,
    /// `T̄·rate/2π − 1`.
    pub compat_residual: f64,
    pub cut: f64,
}

/// Solves `A x + c·1 = b`, `wᵀx = 0` for a conservative operator `A` whose
/// null space is spanned by constants. Returns `(x, c)`.
///
/// One row is pinned so the factorisation stays sparse: with `A'` the
/// pinned matrix, `x = y₁ − c y₂ + const` where `A'y₁ = b`, `A'y₂ = 1`
/// off the pinned row, and `c` restores the pinned equation.
pub(crate) fn solve_bordered(op: &SparseOperator, weights: &[f64], rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = op.len();
    let pin = n / 2;
    let lu = SparseLu::factor_pinned(n, &op.triplets(0.0), pin)?;
    let mut b = rhs.to_vec();
    b[pin] = 0.0;
    let y1 = lu.solve(&b);
    let mut ones = vec![1.0; n];
    ones[pin] = 0.0;
    let y2 = lu.solve(&ones);
    if y1.iter().chain(&y2).any(|v| !v.is_finite()) {
        return Err(Error::Solver("periodic system is singular".into()));
    }
    let row = |y: &[f64]| op.row(pin).map(|(c, a)| a * (y[c] - y[pin])).sum::<f64>() + op.excess[pin] * y[pin];
    let denom = 1.0 - row(&y2);
    if !(denom.abs() > 1e-300) {
        return Err(Error::Solver("periodic system is singular".into()));
    }
    let c = (rhs[pin] - row(&y1)) / denom;
    let mut x: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - c * b).collect();
    let wsum: f64 = weights.iter().sum();
    let shift = x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / wsum;
    for v in x.iter_mut() {
        *v -= shift;
    }
    Ok((x, c))
}

pub fn solve_mrt(backward: &SparseOperator, grid: &AnnulusGrid, tbar: f64, opts: &MrtOptions) -> Result<MrtSolution> {
    if backward.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    if !(tbar > 0.0) || !tbar.is_finite() {
        return Err(Error::ParameterDomain(format!("mean period must be positive, got {tbar}")));
    }
    let n = grid.len();
    let alpha: Vec<f64> = (0..n).map(|k| grid.alpha(grid.indices(k).0)).collect();
    let l_alpha = backward.apply_angular(&alpha);
    let (s2, rate) = solve_bordered(backward, &grid.weights(), &l_alpha)?;
    let compat_residual = tbar * rate / TAU - 1.0;
    if !(compat_residual.abs() <= opts.compat_tol) {
        return Err(Error::Incompatible {
            residual: compat_residual,
            tolerance: opts.compat_tol,
        });
    }

    let anchor = grid.anchor();
    let a_cut = |a: f64| (a - opts.cut).rem_euclid(TAU);
    let t: Vec<f64> = (0..n)
        .map(|k| tbar / TAU * (TAU - a_cut(alpha[k]) + s2[k] - s2[anchor]))
        .collect();
    let t0 = opts.t0.unwrap_or(t[anchor]);
    let theta: Vec<f64> = t.iter().map(|tk| (TAU / tbar * (t0 - tk)).rem_euclid(TAU)).collect();
    Ok(MrtSolution {
        t_field: ScalarField::new(*grid, "T", "time", t),
        theta_field: ScalarField::new(*grid, "Theta", "rad", theta),
        tbar,
        t0,
        rate,
        compat_residual,
        cut: opts.cut,
    })
}

impl MrtSolution {
    /// Jump of `T` across the cut, averaged over β rows: the limit from the
    /// counterclockwise side minus the limit from the clockwise side, each
    /// extrapolated linearly to the cut.
    pub fn jump(&self) -> f64 {
        let g = &self.t_field.grid;
        let t = &self.t_field.values;
        let ha = g.h_alpha();
        let mut acc = 0.0;
        for j in 0..g.n_beta {
            // Nodes on either side of the cut with their distance to it.
            let mut before = (f64::INFINITY, 0usize);
            let mut after = (f64::INFINITY, 0usize);
            for i in 0..g.n_alpha {
                let d = wrap_angle(g.alpha(i) - self.cut);
                if d >= 0.0 && d < after.0 {
                    after = (d, i);
                }
                if d < 0.0 && -d < before.0 {
                    before = (-d, i);
                }
            }
            let at = |i: usize| t[g.index(i % g.n_alpha, j)];
            let ia = after.1;
            let ib = before.1;
            // Linear extrapolation from each side.
            let slope_a = (at(ia + 1) - at(ia)) / ha;
            let slope_b = (at(ib) - at(ib + g.n_alpha - 1)) / ha;
            let right = at(ia) - slope_a * after.0;
            let left = at(ib) + slope_b * before.0;
            acc += right - left;
        }
        acc / g.n_beta as f64
    }

    /// Winding number of Θ along the β row nearest the middle.
    pub fn winding_number(&self) -> i64 {
        winding(&self.theta_field)
    }
}

pub(crate) fn winding(field: &ScalarField) -> i64 {
    let g = &field.grid;
    let j = (g.n_beta - 1) / 2;
    let total: f64 = (0..g.n_alpha)
        .map(|i| wrap_angle(field.value((i + 1) % g.n_alpha, j) - field.value(i, j)))
        .sum();
    (total / TAU).round() as i64
}

/// Level curve of an angle-valued field, as polylines in the plane.
/// Crossings of the `level ± π` branch are ignored, so the 0/2π
/// identification never produces spurious contours.
pub fn isochron_extract(field: &ScalarField, level: f64) -> Result<Vec<Vec<State>>> {
    let g = &field.grid;
    let (na, nb) = (g.n_alpha, g.n_beta);
    let d: Vec<f64> = field.values.iter().map(|v| wrap_angle(v - level)).collect();

    // Edge ids: horizontal edge (i,j)-(i+1,j) is 2k, vertical (i,j)-(i,j+1) is 2k+1.
    let crossing = |a: usize, b: usize| -> Option<f64> {
        let (da, db) = (d[a], d[b]);
        if (da - db).abs() >= std::f64::consts::PI {
            return None;
        }
        // Nodes exactly on the level count as positive.
        if (da < 0.0) != (db < 0.0) {
            return Some(da / (da - db));
        }
        None
    };
    let point = |i: usize, j: usize, horizontal: bool, t: f64| -> State {
        let a = g.alpha(i) + if horizontal { t * g.h_alpha() } else { 0.0 };
        let b = g.beta(j) + if horizontal { 0.0 } else { t * g.h_beta() };
        g.to_cartesian(a, b)
    };

    let mut points: std::collections::HashMap<usize, State> = std::collections::HashMap::new();
    let mut adj: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for j in 0..nb - 1 {
        for i in 0..na {
            let ip = (i + 1) % na;
            let k00 = g.index(i, j);
            let k10 = g.index(ip, j);
            let k01 = g.index(i, j + 1);
            let k11 = g.index(ip, j + 1);
            let edges = [
                (2 * k00, k00, k10, i, j, true),
                (2 * k01, k01, k11, i, j + 1, true),
                (2 * k00 + 1, k00, k01, i, j, false),
                (2 * k10 + 1, k10, k11, ip, j, false),
            ];
            let mut hits = Vec::new();
            for (id, a, b, ii, jj, hz) in edges {
                if let Some(t) = crossing(a, b) {
                    points.entry(id).or_insert_with(|| point(ii, jj, hz, t));
                    hits.push(id);
                }
            }
            hits.dedup();
            let pairs: Vec<(usize, usize)> = match hits.len() {
                2 => vec![(hits[0], hits[1])],
                4 => {
                    // Saddle cell: decide by the centre value.
                    let centre = 0.25 * (d[k00] + d[k10] + d[k01] + d[k11]);
                    if (centre < 0.0) == (d[k00] < 0.0) {
                        vec![(hits[0], hits[3]), (hits[1], hits[2])]
                    } else {
                        vec![(hits[0], hits[2]), (hits[1], hits[3])]
                    }
                }
                _ => vec![],
            };
            for (a, b) in pairs {
                adj.entry(a).or_default().push(b);
                adj.entry(b).or_default().push(a);
            }
        }
    }

    // Walk chains: open ones from endpoints first, then closed loops.
    let mut visited = std::collections::HashSet::new();
    let mut lines = Vec::new();
    let mut starts: Vec<usize> = adj.iter().filter(|(_, v)| v.len() == 1).map(|(k, _)| *k).collect();
    starts.sort_unstable();
    let mut rest: Vec<usize> = adj.keys().copied().collect();
    rest.sort_unstable();
    for s in starts.into_iter().chain(rest) {
        if visited.contains(&s) {
            continue;
        }
        let mut line = vec![points[&s]];
        visited.insert(s);
        let mut cur = s;
        loop {
            let next = adj[&cur].iter().copied().find(|n| !visited.contains(n));
            match next {
                Some(nx) => {
                    visited.insert(nx);
                    line.push(points[&nx]);
                    cur = nx;
                }
                None => {
                    if adj[&cur].contains(&s) && line.len() > 2 {
                        line.push(points[&s]);
                    }
                    break;
                }
            }
        }
        if line.len() >= 2 {
            lines.push(line);
        }
    }
    if lines.is_empty() {
        return Err(Error::Degenerate(format!(
            "level {level:.4} does not intersect the annulus; the phase field is corrupted"
        )));
    }
    Ok(lines)
}

/// Writes polylines as `level,vertex_index,x,y`; the vertex index restarts
/// at 0 for each polyline.
pub fn write_isochrons_csv<W: Write>(out: W, isochrons: &[(f64, Vec<Vec<State>>)]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "level,vertex_index,x,y")?;
    for (level, lines) in isochrons {
        for line in lines {
            for (v, p) in line.iter().enumerate() {
                writeln!(out, "{level:.17e},{v},{:.17e},{:.17e}", p[0], p[1])?;
            }
        }
    }
    out.flush()
}

/// One point per radius where the angle field crosses `level` upward in
/// the counterclockwise direction.
pub fn level_points_on_circles(field: &ScalarField, level: f64, radii: &[f64]) -> Result<Vec<State>> {
    let g = &field.grid;
    let c = g.center();
    let n = 8 * g.n_alpha;
    radii
        .iter()
        .map(|&r| {
            if !(g.r_in..=g.r_out).contains(&r) {
                return Err(Error::OutOfCoverage { x: c[0] + r, y: c[1] });
            }
            let at = |a: f64| c + State::new(r * a.cos(), r * a.sin());
            let d = |a: f64| wrap_angle(field.interpolate_angle(&at(a)) - level);
            for k in 0..n {
                let (mut a0, mut a1) = (TAU * k as f64 / n as f64, TAU * (k + 1) as f64 / n as f64);
                let (d0, d1) = (d(a0), d(a1));
                if d0 < 0.0 && d1 >= 0.0 && d1 - d0 < PI {
                    for _ in 0..60 {
                        let m = 0.5 * (a0 + a1);
                        if d(m) < 0.0 {
                            a0 = m;
                        } else {
                            a1 = m;
                        }
                    }
                    return Ok(at(0.5 * (a0 + a1)));
                }
            }
            Err(Error::Degenerate(format!("level {level} does not cross the circle r = {r}")))
        })
        .collect()
}
