//! Independent verification harness.
//!
//! Everything in this module deliberately avoids the production solve
//! paths: the enumeration oracle assembles fixed-binary QPs densely from
//! the raw problem data and solves them with the dense solver, the
//! projected-gradient oracle iterates first-order steps, and the finite
//! difference helper needs only function evaluations. Tests and the
//! `selftest` subcommand compare production results against these.

use nalgebra::{DMatrix, DVector};

use crate::miqp::{BinaryAssignment, LaneChange, MiqpWeights};
use crate::model::{
    discretize_dynamics, lateral_accel_bounds, region_halfspaces, ModelParams, PlannerParams,
    Region,
};
use crate::qp::{solve_qp_with, IpmSettings, QpProblem, QpStatus};

/// Projected gradient descent on a box-constrained QP; independent
/// first-order reference for the interior-point solver.
pub fn projected_gradient_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let n = g.len();
    // power iteration for the Lipschitz constant
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lmax = 1.0;
    for _ in 0..100 {
        let hv = h * &v;
        let norm = hv.norm();
        if norm < 1e-18 {
            break;
        }
        lmax = norm;
        v = hv / norm;
    }
    let step = 1.0 / (1.05 * lmax + 1e-9);

    let clamp = |x: &mut DVector<f64>| {
        for j in 0..n {
            x[j] = x[j].clamp(lb[j], ub[j]);
        }
    };
    let mut x = DVector::zeros(n);
    clamp(&mut x);
    for _ in 0..max_iter {
        let grad = h * &x + g;
        let mut next = &x - step * grad;
        clamp(&mut next);
        let delta = (&next - &x).amax();
        x = next;
        if delta < 1e-13 {
            break;
        }
    }
    let obj = 0.5 * (x.transpose() * h * &x)[(0, 0)] + g.dot(&x);
    (x, obj)
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = xs[j];
        let hj = h * (1.0 + orig.abs());
        xs[j] = orig + hj;
        let fp = f(&xs);
        xs[j] = orig - hj;
        let fm = f(&xs);
        xs[j] = orig;
        grad.push((fp - fm) / (2.0 * hj));
    }
    grad
}

/// All lane assignments for a horizon of `n` steps, in a fixed order.
fn lane_assignments(n: usize) -> Vec<Vec<LaneChange>> {
    let mut out: Vec<Vec<LaneChange>> = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * 3);
        for prefix in &out {
            for l in LaneChange::ALL {
                let mut p = prefix.clone();
                p.push(l);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Loose but sound reachability box used only to skip provably infeasible
/// region choices during enumeration (assumes `v_s >= 0`).
fn reach_box(pi: &PlannerParams, m: &ModelParams, step: usize) -> ((f64, f64), (f64, f64)) {
    let v_max = m.ub_x[2].max(pi.x0.v_s);
    let s_hi = pi.x0.s + step as f64 * m.t_d * v_max;
    let s_lo = if m.lb_x[2] >= 0.0 {
        pi.x0.s
    } else {
        f64::NEG_INFINITY
    };
    let (lat_lo, lat_hi) = m.road_bounds(pi.n_lanes);
    (
        (s_lo, s_hi),
        (lat_lo.min(pi.x0.n), lat_hi.max(pi.x0.n)),
    )
}

fn region_possible(pi: &PlannerParams, m: &ModelParams, step: usize, obs: usize, k: Region) -> bool {
    let d = &pi.obstacles[obs].bounds[step];
    let ((s_lo, s_hi), (n_lo, n_hi)) = reach_box(pi, m, step);
    region_halfspaces(d, k).iter().all(|(a, b)| {
        let inf = a[0] * if a[0] > 0.0 { s_lo } else { s_hi }
            + a[1] * if a[1] > 0.0 { n_lo } else { n_hi };
        inf <= *b + 1e-9
    })
}

/// Dense fixed-binary QP assembled directly from the problem data:
/// variables `[X, U, Sigma]`, dynamics equalities, hard constraint rows and
/// the chosen-region rows with margins. Returns `None` when infeasible.
pub fn solve_fixed_assignment_dense(
    pi: &PlannerParams,
    w: &MiqpWeights,
    m: &ModelParams,
    assignment: &BinaryAssignment,
) -> Option<f64> {
    let n = m.horizon;
    let n_obs = pi.obstacles.len();
    let nx = 4 * (n + 1);
    let nu = 2 * n;
    let nsg = (n + 1) * n_obs;
    let nvar = nx + nu + nsg;
    let xo = |i: usize, c: usize| 4 * i + c;
    let uo = |i: usize, c: usize| nx + 2 * i + c;
    let so = |i: usize, j: usize| nx + nu + i * n_obs + j;

    // lateral reference from the lane decisions
    let mut n_ref = vec![pi.lane0_ref; n + 1];
    for i in 0..n {
        n_ref[i + 1] = n_ref[i]
            + match assignment.lane[i] {
                LaneChange::Keep => 0.0,
                LaneChange::Up => m.d_lane,
                LaneChange::Down => -m.d_lane,
            };
    }
    let lane_changes = assignment
        .lane
        .iter()
        .filter(|l| !matches!(l, LaneChange::Keep))
        .count() as f64;

    let q = DMatrix::from_fn(4, 4, |r, c| w.q[r][c]);
    let r_mat = DMatrix::from_fn(2, 2, |r, c| w.r[r][c]);

    let mut h = DMatrix::zeros(nvar, nvar);
    let mut g = DVector::zeros(nvar);
    for i in 0..=n {
        let x_ref = DVector::from_vec(vec![
            pi.x0.s + i as f64 * m.t_d * pi.v_ref,
            n_ref[i],
            pi.v_ref,
            0.0,
        ]);
        let lin = -2.0 * (&q * &x_ref);
        for a in 0..4 {
            g[xo(i, a)] += lin[a];
            for b in 0..4 {
                h[(xo(i, a), xo(i, b))] += 2.0 * q[(a, b)];
            }
        }
        g[xo(i, 1)] += w.w_rght;
        for j in 0..n_obs {
            h[(so(i, j), so(i, j))] += 2.0 * w.w_dst;
        }
    }
    for i in 0..n {
        for a in 0..2 {
            for b in 0..2 {
                h[(uo(i, a), uo(i, b))] += 2.0 * r_mat[(a, b)];
            }
        }
    }

    // equalities: x0 and dynamics
    let (a_d, b_d) = discretize_dynamics(m.t_d);
    let me = 4 + 4 * n;
    let mut a_eq = DMatrix::zeros(me, nvar);
    let mut b_eq = DVector::zeros(me);
    let x0v = [pi.x0.s, pi.x0.n, pi.x0.v_s, pi.x0.v_n];
    for c in 0..4 {
        a_eq[(c, xo(0, c))] = 1.0;
        b_eq[c] = x0v[c];
    }
    for i in 0..n {
        for r in 0..4 {
            let row = 4 + 4 * i + r;
            a_eq[(row, xo(i + 1, r))] = 1.0;
            for c in 0..4 {
                a_eq[(row, xo(i, c))] = -a_d[(r, c)];
            }
            for c in 0..2 {
                a_eq[(row, uo(i, c))] = -b_d[(r, c)];
            }
        }
    }

    // bounds
    let mut lb = DVector::from_element(nvar, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nvar, f64::INFINITY);
    let (lat_lo, lat_hi) = m.road_bounds(pi.n_lanes);
    let (an_lo_raw, an_hi_raw) = lateral_accel_bounds(m.a_fric, m.kappa_max, pi.x0.v_s);
    for i in 1..=n {
        lb[xo(i, 0)] = m.lb_x[0];
        ub[xo(i, 0)] = m.ub_x[0];
        lb[xo(i, 1)] = lat_lo;
        ub[xo(i, 1)] = lat_hi;
        lb[xo(i, 2)] = m.lb_x[2];
        ub[xo(i, 2)] = m.ub_x[2];
        lb[xo(i, 3)] = m.lb_x[3];
        ub[xo(i, 3)] = m.ub_x[3];
    }
    for i in 0..n {
        lb[uo(i, 0)] = m.lb_u[0];
        ub[uo(i, 0)] = m.ub_u[0];
        lb[uo(i, 1)] = an_lo_raw.max(m.lb_u[1]);
        ub[uo(i, 1)] = an_hi_raw.min(m.ub_u[1]);
    }
    for i in 0..=n {
        for j in 0..n_obs {
            lb[so(i, j)] = 0.0;
            ub[so(i, j)] = 1.0;
        }
    }

    // inequality rows: velocity ratio and chosen-region rows
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut his: Vec<f64> = Vec::new();
    for i in 1..=n {
        let mut r1 = DVector::zeros(nvar);
        r1[xo(i, 3)] = 1.0;
        r1[xo(i, 2)] = -m.alpha_hi;
        rows.push(r1);
        his.push(0.0);
        let mut r2 = DVector::zeros(nvar);
        r2[xo(i, 3)] = -1.0;
        r2[xo(i, 2)] = m.alpha_lo;
        rows.push(r2);
        his.push(0.0);
    }
    for i in 0..=n {
        for j in 0..n_obs {
            let k = assignment.regions[i][j];
            let sb = w.sigma_bar[k.index()];
            for (a, b) in region_halfspaces(&pi.obstacles[j].bounds[i], k) {
                let mut row = DVector::zeros(nvar);
                row[xo(i, 0)] = a[0];
                row[xo(i, 1)] = a[1];
                row[so(i, j)] = -sb;
                rows.push(row);
                his.push(b - sb);
            }
        }
    }

    let mut p = QpProblem::new(h, g);
    p.a_eq = a_eq;
    p.b_eq = b_eq;
    p.a_in = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    p.ub_in = DVector::from_vec(his);
    p.lb_in = DVector::from_element(p.a_in.nrows(), f64::NEG_INFINITY);
    p.lb = lb;
    p.ub = ub;

    let settings = IpmSettings {
        gap_tol: 1e-12,
        max_iter: 150,
        ..IpmSettings::default()
    };
    let sol = solve_qp_with(&p, None, &settings).ok()?;
    if sol.status != QpStatus::Optimal {
        return None;
    }

    // constant cost parts: x reference offsets and lane-change penalties
    let mut offset = w.w_lc * lane_changes;
    for i in 0..=n {
        let x_ref = DVector::from_vec(vec![
            pi.x0.s + i as f64 * m.t_d * pi.v_ref,
            n_ref[i],
            pi.v_ref,
            0.0,
        ]);
        offset += (x_ref.transpose() * &q * &x_ref)[(0, 0)];
    }
    Some(sol.objective + offset)
}

/// Result of the exhaustive search.
#[derive(Debug, Clone)]
pub struct EnumerationResult {
    pub objective: f64,
    pub assignment: BinaryAssignment,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Brute-force global optimum: every lane assignment crossed with every
/// region assignment, each solved as a dense fixed-binary QP.
///
/// Two sound prunings keep tiny instances fast without affecting the
/// optimum: region choices that no reachable point can satisfy are
/// skipped, and whole lane blocks are cut once their obstacle-free
/// tracking bound exceeds the best value found.
pub fn enumerate_miqp(
    pi: &PlannerParams,
    w: &MiqpWeights,
    m: &ModelParams,
) -> Option<EnumerationResult> {
    let n = m.horizon;
    let n_obs = pi.obstacles.len();

    // per-(step, obstacle) feasible region candidates
    let mut candidates: Vec<Vec<Vec<Region>>> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut row = Vec::with_capacity(n_obs);
        for j in 0..n_obs {
            let regs: Vec<Region> = Region::ALL
                .into_iter()
                .filter(|&k| region_possible(pi, m, i, j, k))
                .collect();
            if regs.is_empty() {
                return None;
            }
            row.push(regs);
        }
        candidates.push(row);
    }
    let groups: Vec<(usize, usize)> = (0..=n)
        .flat_map(|i| (0..n_obs).map(move |j| (i, j)))
        .collect();

    // obstacle-free tracking bound per lane block
    let empty = PlannerParams {
        obstacles: vec![],
        ..pi.clone()
    };
    let mut blocks: Vec<(f64, Vec<LaneChange>)> = Vec::new();
    for lane in lane_assignments(n) {
        let a = BinaryAssignment {
            lane: lane.clone(),
            regions: vec![vec![]; n + 1],
        };
        match solve_fixed_assignment_dense(&empty, w, m, &a) {
            Some(bound) => blocks.push((bound, lane)),
            None => continue,
        }
    }
    blocks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut best: Option<(f64, BinaryAssignment)> = None;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    for (bound, lane) in blocks {
        if let Some((obj, _)) = &best {
            if bound >= *obj - 1e-12 {
                skipped += 1;
                continue;
            }
        }
        // enumerate region assignments over the candidate sets
        let mut idx = vec![0usize; groups.len()];
        loop {
            let mut regions = vec![vec![Region::Front; n_obs]; n + 1];
            for (gi, (i, j)) in groups.iter().enumerate() {
                regions[*i][*j] = candidates[*i][*j][idx[gi]];
            }
            let a = BinaryAssignment {
                lane: lane.clone(),
                regions,
            };
            evaluated += 1;
            if let Some(obj) = solve_fixed_assignment_dense(pi, w, m, &a) {
                match &best {
                    Some((b, _)) if *b <= obj => {}
                    _ => best = Some((obj, a)),
                }
            }
            // advance the mixed-radix counter
            let mut carry = true;
            for (gi, (i, j)) in groups.iter().enumerate() {
                if !carry {
                    break;
                }
                idx[gi] += 1;
                if idx[gi] < candidates[*i][*j].len() {
                    carry = false;
                } else {
                    idx[gi] = 0;
                }
            }
            if carry {
                break;
            }
        }
    }

    best.map(|(objective, assignment)| EnumerationResult {
        objective,
        assignment,
        evaluated,
        skipped,
    })
}
