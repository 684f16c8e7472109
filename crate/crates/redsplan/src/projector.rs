//! Feasibility projector: projects a candidate trajectory onto the
//! exterior of smooth ellipsoidal obstacle sets.
//!
//! The obstacle rectangles are over-approximated by ellipses through their
//! corners; the exterior constraints are concave, so linearizing them at
//! the current iterate gives an inner (conservative) convex approximation.
//! A Gauss-Newton SQP with full steps and an exact L1 slack penalty solves
//! the resulting sequence of QPs. Slack values are re-evaluated against
//! the true ellipse constraints after every step, which makes the
//! certificate independent of the subproblem solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{discretize_dynamics, Control, EgoState, ModelParams, ObstacleBounds};
use crate::qp::ocp::{OcpDynamics, OcpQp, OcpStage};
use crate::qp::{ocp::solve_ocp_qp_with, IpmSettings, QpError, QpStatus};

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("degenerate obstacle rectangle: extents {0} x {1}")]
    DegenerateRectangle(f64, f64),
    #[error("reference length mismatch: {states} states / {controls} controls for horizon {horizon}")]
    ReferenceLength {
        states: usize,
        controls: usize,
        horizon: usize,
    },
    #[error("ellipse track length {got}, expected {expected}")]
    TrackLength { got: usize, expected: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Axis-aligned ellipse with center `t` and semi-axes `axes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseObstacle {
    pub center: [f64; 2],
    pub axes: [f64; 2],
}

/// Ellipse through the corners of the rectangle: center at the rectangle
/// center, semi-axes `extent / sqrt(2)` per axis.
pub fn ellipse_params(d: &ObstacleBounds) -> Result<EllipseObstacle, ProjectorError> {
    let len = d.s_f - d.s_b;
    let wid = d.n_l - d.n_r;
    if len <= 0.0 || wid <= 0.0 {
        return Err(ProjectorError::DegenerateRectangle(len, wid));
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    Ok(EllipseObstacle {
        center: [0.5 * (d.s_f + d.s_b), 0.5 * (d.n_l + d.n_r)],
        axes: [len * inv_sqrt2, wid * inv_sqrt2],
    })
}

/// Squared scaled distance `g(p) = |Y^-1 (p - t)|^2` and its gradient;
/// `g >= 1` is the collision-free exterior.
pub fn ellipse_residual(p: [f64; 2], e: &EllipseObstacle) -> (f64, [f64; 2]) {
    let dx = (p[0] - e.center[0]) / e.axes[0];
    let dy = (p[1] - e.center[1]) / e.axes[1];
    let g = dx * dx + dy * dy;
    let grad = [2.0 * dx / e.axes[0], 2.0 * dy / e.axes[1]];
    (g, grad)
}

/// Supporting half-space of the linearized exterior constraint at `p_lin`:
/// returns `(a, b)` meaning `a . p >= b - xi`. Convexity of `g` makes any
/// point satisfying the linearization with zero slack satisfy the true
/// constraint.
pub fn linearize_ellipse(p_lin: [f64; 2], e: &EllipseObstacle) -> ([f64; 2], f64) {
    let mut p = p_lin;
    if (p[0] - e.center[0]).abs() < 1e-12 && (p[1] - e.center[1]).abs() < 1e-12 {
        // zero gradient at the center: nudge forward before linearizing
        p[0] += 1e-6;
    }
    let (g, grad) = ellipse_residual(p, e);
    let b = 1.0 - g + grad[0] * p[0] + grad[1] * p[1];
    (grad, b)
}

/// Projector weights and iteration limits.
#[derive(Debug, Clone)]
pub struct FpSettings {
    /// Tracking weight on the state diagonal.
    pub q: [f64; 4],
    /// Tracking weight on the control diagonal.
    pub r: [f64; 2],
    /// L1 slack weight.
    pub w_h: f64,
    pub max_iter: usize,
    pub step_tol: f64,
    /// Certification threshold on the true slacks.
    pub cert_tol: f64,
}

impl Default for FpSettings {
    fn default() -> Self {
        Self {
            q: [1.0; 4],
            r: [1.0; 2],
            w_h: 1.0e6,
            max_iter: 10,
            step_tol: 1e-6,
            cert_tol: 1e-8,
        }
    }
}

/// Projection result with per-iteration cost bookkeeping.
#[derive(Debug, Clone)]
pub struct FpSolution {
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    /// True slacks `max(0, 1 - g)` per step and obstacle.
    pub xi: Vec<Vec<f64>>,
    pub tracking_cost: f64,
    pub slack_cost: f64,
    pub certified: bool,
    /// `(tracking, slack)` cost after each iteration, starting with the
    /// initial point.
    pub iterates: Vec<(f64, f64)>,
    pub iterations: usize,
}

fn true_slacks(states: &[EgoState], ellipses: &[Vec<EllipseObstacle>]) -> Vec<Vec<f64>> {
    states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            ellipses[i]
                .iter()
                .map(|e| {
                    let (g, _) = ellipse_residual(x.position(), e);
                    (1.0 - g).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn tracking_cost(
    states: &[EgoState],
    controls: &[Control],
    ref_x: &[EgoState],
    ref_u: &[Control],
    s: &FpSettings,
) -> f64 {
    let mut j = 0.0;
    for (x, r) in states.iter().zip(ref_x) {
        let d = [x.s - r.s, x.n - r.n, x.v_s - r.v_s, x.v_n - r.v_n];
        for k in 0..4 {
            j += s.q[k] * d[k] * d[k];
        }
    }
    for (u, r) in controls.iter().zip(ref_u) {
        let d = [u.a_s - r.a_s, u.a_n - r.a_n];
        for k in 0..2 {
            j += s.r[k] * d[k] * d[k];
        }
    }
    j
}

fn slack_cost(xi: &[Vec<f64>], w_h: f64) -> f64 {
    w_h * xi.iter().flat_map(|r| r.iter()).sum::<f64>()
}

/// Projects the reference onto the collision-free set. `ellipses[i]` holds
/// the obstacles at step `i` (may be empty).
pub fn sqp_project(
    ref_x: &[EgoState],
    ref_u: &[Control],
    ellipses: &[Vec<EllipseObstacle>],
    m: &ModelParams,
    settings: &FpSettings,
) -> Result<FpSolution, ProjectorError> {
    let n = m.horizon;
    if ref_x.len() != n + 1 || ref_u.len() != n {
        return Err(ProjectorError::ReferenceLength {
            states: ref_x.len(),
            controls: ref_u.len(),
            horizon: n,
        });
    }
    if ellipses.len() != n + 1 {
        return Err(ProjectorError::TrackLength {
            got: ellipses.len(),
            expected: n + 1,
        });
    }

    let mut states: Vec<EgoState> = ref_x.to_vec();
    let mut controls: Vec<Control> = ref_u.to_vec();
    let mut xi = true_slacks(&states, ellipses);
    let mut iterates = vec![(
        tracking_cost(&states, &controls, ref_x, ref_u, settings),
        slack_cost(&xi, settings.w_h),
    )];

    let qp_settings = IpmSettings {
        gap_tol: 1e-11,
        ..IpmSettings::default()
    };

    let mut iterations = 0;
    for _ in 0..settings.max_iter {
        iterations += 1;
        let qp = build_subproblem(&states, ref_x, ref_u, ellipses, m, settings);
        let sol = solve_ocp_qp_with(&qp, None, &qp_settings);
        let sol = match sol {
            Ok(s) if s.status != QpStatus::Infeasible => s,
            // subproblem failure: return the current iterate uncertified
            _ => break,
        };
        if std::env::var_os("REDSPLAN_FP_TRACE").is_some() {
            eprintln!("fp iter {iterations}: qp status {:?} iters {} obj {:.4e}", sol.status, sol.iterations, sol.objective);
        }

        let mut step: f64 = 0.0;
        let mut new_states = Vec::with_capacity(n + 1);
        let mut new_controls = Vec::with_capacity(n);
        for i in 0..=n {
            let wv = &sol.w[i];
            let x = EgoState::new(wv[0], wv[1], wv[2], wv[3]);
            step = step
                .max((x.s - states[i].s).abs())
                .max((x.n - states[i].n).abs())
                .max((x.v_s - states[i].v_s).abs())
                .max((x.v_n - states[i].v_n).abs());
            new_states.push(x);
            if i < n {
                let u = Control::new(sol.v[i][0], sol.v[i][1]);
                step = step
                    .max((u.a_s - controls[i].a_s).abs())
                    .max((u.a_n - controls[i].a_n).abs());
                new_controls.push(u);
            }
        }
        // full step, accepted only while the true merit does not increase
        // (at the exact subproblem optimum it cannot; a rise means the
        // iteration is at its precision floor and the current point stands)
        let new_xi = true_slacks(&new_states, ellipses);
        let (cur_tr, cur_sl) = *iterates.last().unwrap();
        let new_tr = tracking_cost(&new_states, &new_controls, ref_x, ref_u, settings);
        let new_sl = slack_cost(&new_xi, settings.w_h);
        if new_tr + new_sl > cur_tr + cur_sl {
            break;
        }
        states = new_states;
        controls = new_controls;
        xi = new_xi;
        iterates.push((new_tr, new_sl));
        if step < settings.step_tol {
            break;
        }
    }

    let max_xi = xi
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |acc, &v| acc.max(v));
    let (tracking, slack) = *iterates.last().unwrap();
    Ok(FpSolution {
        states,
        controls,
        xi,
        tracking_cost: tracking,
        slack_cost: slack,
        certified: max_xi <= settings.cert_tol,
        iterates,
        iterations,
    })
}

/// One Gauss-Newton subproblem: tracking cost, hard constraint rows and
/// the ellipse constraints linearized at the current iterate.
fn build_subproblem(
    lin_states: &[EgoState],
    ref_x: &[EgoState],
    ref_u: &[Control],
    ellipses: &[Vec<EllipseObstacle>],
    m: &ModelParams,
    settings: &FpSettings,
) -> OcpQp {
    let n = m.horizon;
    // the minimizer is invariant to a uniform cost scaling; normalizing by
    // the penalty weight keeps the QP well conditioned
    let scale = 1.0 / settings.w_h.max(1.0);
    let (a_mat, b_mat) = discretize_dynamics(m.t_d);
    let nw = 4;
    let mut stages = Vec::with_capacity(n + 1);
    let mut dynamics = Vec::with_capacity(n);
    let mut cost_offset = 0.0;

    // lateral bounds from the widest road the model allows; the reference
    // already respects the instance's actual road
    let (lat_lo, lat_hi) = m.road_bounds(m.n_lanes_max);
    let (an_lo_raw, an_hi_raw) = crate::model::lateral_accel_bounds(m.a_fric, m.kappa_max, ref_x[0].v_s);

    for i in 0..=n {
        let n_ell = ellipses[i].len();
        let nv = if i < n { 2 + n_ell } else { n_ell };
        let mut st = OcpStage::new(nw, nv);

        // tracking cost on the state
        let r = ref_x[i];
        let rv = [r.s, r.n, r.v_s, r.v_n];
        for k in 0..4 {
            st.q_ww[(k, k)] = 2.0 * scale * settings.q[k];
            st.q_w[k] = -2.0 * scale * settings.q[k] * rv[k];
            cost_offset += scale * settings.q[k] * rv[k] * rv[k];
        }
        if i < n {
            let ru = [ref_u[i].a_s, ref_u[i].a_n];
            for k in 0..2 {
                st.q_vv[(k, k)] = 2.0 * scale * settings.r[k];
                st.q_v[k] = -2.0 * scale * settings.r[k] * ru[k];
                cost_offset += scale * settings.r[k] * ru[k] * ru[k];
            }
            st.v_lo[0] = m.lb_u[0];
            st.v_hi[0] = m.ub_u[0];
            st.v_lo[1] = an_lo_raw.max(m.lb_u[1]);
            st.v_hi[1] = an_hi_raw.min(m.ub_u[1]);
        }
        let xi_off = if i < n { 2 } else { 0 };
        for k in 0..n_ell {
            st.q_v[xi_off + k] = scale * settings.w_h;
            st.v_lo[xi_off + k] = 0.0;
        }

        // rows: state box, velocity ratio, linearized ellipse exteriors
        let mut rows_w: Vec<[f64; 4]> = Vec::new();
        let mut rows_v: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        if i > 0 {
            for (idx, (l, h)) in [
                (m.lb_x[0], m.ub_x[0]),
                (lat_lo.min(ref_x[i].n), lat_hi.max(ref_x[i].n)),
                (m.lb_x[2], m.ub_x[2]),
                (m.lb_x[3], m.ub_x[3]),
            ]
            .into_iter()
            .enumerate()
            {
                if !l.is_finite() && !h.is_finite() {
                    continue;
                }
                let mut row = [0.0; 4];
                row[idx] = 1.0;
                rows_w.push(row);
                rows_v.push(vec![]);
                lo.push(l);
                hi.push(h);
            }
            rows_w.push([0.0, 0.0, -m.alpha_hi, 1.0]);
            rows_v.push(vec![]);
            lo.push(f64::NEG_INFINITY);
            hi.push(0.0);
            rows_w.push([0.0, 0.0, -m.alpha_lo, 1.0]);
            rows_v.push(vec![]);
            lo.push(0.0);
            hi.push(f64::INFINITY);
        }
        for (k, e) in ellipses[i].iter().enumerate() {
            let (a, b) = linearize_ellipse(lin_states[i].position(), e);
            // a . p + xi >= b
            rows_w.push([a[0], a[1], 0.0, 0.0]);
            rows_v.push(vec![(xi_off + k, 1.0)]);
            lo.push(b);
            hi.push(f64::INFINITY);
        }

        let mr = rows_w.len();
        st.c_w = DMatrix::from_fn(mr, nw, |r, c| rows_w[r][c]);
        st.c_v = DMatrix::zeros(mr, nv);
        for (r, cols) in rows_v.iter().enumerate() {
            for (c, v) in cols {
                st.c_v[(r, *c)] = *v;
            }
        }
        st.lo = DVector::from_vec(lo);
        st.hi = DVector::from_vec(hi);

        if i < n {
            let mut e = DMatrix::zeros(nw, nw);
            for r in 0..4 {
                for c in 0..4 {
                    e[(r, c)] = a_mat[(r, c)];
                }
            }
            let mut f = DMatrix::zeros(nw, nv);
            for r in 0..4 {
                f[(r, 0)] = b_mat[(r, 0)];
                f[(r, 1)] = b_mat[(r, 1)];
            }
            dynamics.push(OcpDynamics {
                e,
                f,
                c: DVector::zeros(nw),
            });
        }
        stages.push(st);
    }

    OcpQp {
        nw,
        w0: DVector::from_vec(vec![ref_x[0].s, ref_x[0].n, ref_x[0].v_s, ref_x[0].v_n]),
        stages,
        dynamics,
        cost_offset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn ellipse_parameter_examples() {
        let e = ellipse_params(&ObstacleBounds::new(10.0, 0.0, 2.0, -2.0)).unwrap();
        assert_eq!(e.center, [5.0, 0.0]);
        assert!((e.axes[0] - 10.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((e.axes[1] - 4.0 / 2f64.sqrt()).abs() < 1e-12);

        let sym = ellipse_params(&ObstacleBounds::new(3.0, -3.0, 1.5, -1.5)).unwrap();
        assert_eq!(sym.center, [0.0, 0.0]);

        let unit = ellipse_params(&ObstacleBounds::new(0.5, -0.5, 0.5, -0.5)).unwrap();
        assert!((unit.axes[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((unit.axes[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        assert!(ellipse_params(&ObstacleBounds::new(1.0, 1.0, 2.0, -2.0)).is_err());
    }

    #[test]
    fn residual_center_axis_and_gradient() {
        let e = EllipseObstacle {
            center: [3.0, -1.0],
            axes: [4.0, 2.0],
        };
        let (g0, gr0) = ellipse_residual(e.center, &e);
        assert_eq!(g0, 0.0);
        assert_eq!(gr0, [0.0, 0.0]);

        // semi-axis endpoint has unit residual
        let (g1, _) = ellipse_residual([e.center[0] + e.axes[0], e.center[1]], &e);
        assert!((g1 - 1.0).abs() < 1e-12);

        // gradient against central differences
        let mut rng = substream(1, "fd", 0);
        for _ in 0..50 {
            let p = [rng.gen_range(-10.0..10.0), rng.gen_range(-6.0..6.0)];
            let (_, grad) = ellipse_residual(p, &e);
            let h = 1e-6;
            for k in 0..2 {
                let mut pp = p;
                pp[k] += h;
                let (gp, _) = ellipse_residual(pp, &e);
                pp[k] -= 2.0 * h;
                let (gm, _) = ellipse_residual(pp, &e);
                let fd = (gp - gm) / (2.0 * h);
                let rel = (grad[k] - fd).abs() / (1.0 + fd.abs());
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }

    /// Monte-Carlo inner-approximation property of the linearization.
    #[test]
    fn linearization_is_inner_approximation() {
        let e = EllipseObstacle {
            center: [1.0, 0.5],
            axes: [5.0, 2.0],
        };
        let mut rng = substream(2, "lin", 0);
        let mut accepted = 0;
        for _ in 0..200 {
            let p_lin = [rng.gen_range(-12.0..14.0), rng.gen_range(-6.0..7.0)];
            let (a, b) = linearize_ellipse(p_lin, &e);
            for _ in 0..100 {
                let p = [rng.gen_range(-12.0..14.0), rng.gen_range(-6.0..7.0)];
                if a[0] * p[0] + a[1] * p[1] >= b {
                    let (g, _) = ellipse_residual(p, &e);
                    assert!(g >= 1.0 - 1e-9, "g {g} at {p:?}");
                    accepted += 1;
                }
            }
        }
        assert!(accepted > 1000);
    }

    #[test]
    fn far_linearization_point_satisfied_strictly() {
        let e = EllipseObstacle {
            center: [0.0, 0.0],
            axes: [2.0, 1.0],
        };
        let p = [40.0, 3.0];
        let (a, b) = linearize_ellipse(p, &e);
        assert!(a[0] * p[0] + a[1] * p[1] > b + 1.0);
    }

    fn straight_reference(m: &ModelParams, v: f64, n_lat: f64) -> (Vec<EgoState>, Vec<Control>) {
        let n = m.horizon;
        let states = (0..=n)
            .map(|i| EgoState::new(i as f64 * m.t_d * v, n_lat, v, 0.0))
            .collect();
        (states, vec![Control::new(0.0, 0.0); n])
    }

    #[test]
    fn feasible_reference_is_fixed_point() {
        let m = ModelParams {
            horizon: 12,
            ..ModelParams::default()
        };
        let (rx, ru) = straight_reference(&m, 10.0, 0.0);
        // obstacle far to the left: reference already feasible
        let e = EllipseObstacle {
            center: [60.0, 30.0],
            axes: [8.0, 3.0],
        };
        let ellipses = vec![vec![e]; 13];
        let sol = sqp_project(&rx, &ru, &ellipses, &m, &FpSettings::default()).unwrap();
        assert!(sol.certified);
        assert_eq!(sol.iterations, 1);
        assert!(sol.tracking_cost < 1e-9);
        for (x, r) in sol.states.iter().zip(&rx) {
            assert!((x.s - r.s).abs() < 1e-6 && (x.n - r.n).abs() < 1e-6);
        }
    }

    #[test]
    fn projects_around_static_obstacle() {
        let m = ModelParams {
            horizon: 16,
            ..ModelParams::default()
        };
        let (rx, ru) = straight_reference(&m, 12.0, 0.0);
        // static obstacle on the path with enough time to steer around
        let e = ellipse_params(&ObstacleBounds::new(40.0, 30.0, 2.5, -2.5)).unwrap();
        let ellipses = vec![vec![e]; 17];
        let sol = sqp_project(&rx, &ru, &ellipses, &m, &FpSettings::default()).unwrap();
        assert!(sol.certified, "slack cost {}", sol.slack_cost);
        // independent geometric re-check
        for x in &sol.states {
            let (g, _) = ellipse_residual(x.position(), &e);
            assert!(g >= 1.0 - 1e-8, "g {g}");
        }
        assert!(sol.tracking_cost > 0.0);
    }

    /// A dynamically unavoidable obstacle ends uncertified but honest: the
    /// slack-cost bound still holds at every iterate.
    #[test]
    fn unavoidable_obstacle_reports_uncertified() {
        let m = ModelParams {
            horizon: 16,
            ..ModelParams::default()
        };
        let (rx, ru) = straight_reference(&m, 12.0, 0.0);
        let e = ellipse_params(&ObstacleBounds::new(20.0, 10.0, 2.5, -2.5)).unwrap();
        let ellipses = vec![vec![e]; 17];
        let sol = sqp_project(&rx, &ru, &ellipses, &m, &FpSettings::default()).unwrap();
        assert!(!sol.certified);
        let j0 = sol.iterates[0].1;
        for (k, (tr, sl)) in sol.iterates.iter().enumerate().skip(1) {
            assert!(sl + tr <= j0 + 1e-8 * (1.0 + j0), "iterate {k}");
        }
    }

    #[test]
    fn zero_weight_keeps_reference() {
        let m = ModelParams {
            horizon: 10,
            ..ModelParams::default()
        };
        let (rx, ru) = straight_reference(&m, 12.0, 0.0);
        let e = ellipse_params(&ObstacleBounds::new(16.0, 8.0, 2.5, -2.5)).unwrap();
        let ellipses = vec![vec![e]; 11];
        let settings = FpSettings {
            w_h: 0.0,
            ..FpSettings::default()
        };
        let sol = sqp_project(&rx, &ru, &ellipses, &m, &settings).unwrap();
        assert!(!sol.certified);
        for (x, r) in sol.states.iter().zip(&rx) {
            assert!((x.s - r.s).abs() < 1e-6 && (x.n - r.n).abs() < 1e-6);
        }
    }

    /// Slack-cost decrease bound and feasibility retention.
    #[test]
    fn slack_decrease_and_retention() {
        let m = ModelParams {
            horizon: 16,
            ..ModelParams::default()
        };
        let (rx, ru) = straight_reference(&m, 12.0, 0.0);
        let e = ellipse_params(&ObstacleBounds::new(36.0, 26.0, 2.5, -2.5)).unwrap();
        let ellipses = vec![vec![e]; 17];
        let sol = sqp_project(&rx, &ru, &ellipses, &m, &FpSettings::default()).unwrap();
        let j_slack_0 = sol.iterates[0].1;
        assert!(j_slack_0 > 0.0, "reference must start infeasible");
        let tol = 1e-8 * (1.0 + j_slack_0);
        let mut reached_zero = false;
        let mut merit_prev = f64::INFINITY;
        for (k, (tr, sl)) in sol.iterates.iter().enumerate() {
            if k > 0 {
                assert!(
                    sl + tr <= j_slack_0 + tol,
                    "iterate {k}: {sl} + {tr} > {j_slack_0}"
                );
            }
            let merit = tr + sl;
            assert!(merit <= merit_prev + tol, "merit rose at {k}");
            merit_prev = merit;
            if *sl == 0.0 {
                reached_zero = true;
            } else {
                assert!(!reached_zero, "slack reappeared after reaching zero");
            }
        }
        assert!(reached_zero);
    }
}
