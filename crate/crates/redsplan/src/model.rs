//! Point-mass vehicle model in road-aligned (curvilinear) coordinates,
//! obstacle geometry and the hard constraint set shared by every solver.
//!
//! The longitudinal axis `s` runs along the road, the lateral axis `n`
//! across it. Lane centers sit at `k * d_lane` with the rightmost lane at
//! `n = 0`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NX: usize = 4;
pub const NU: usize = 2;

/// Vehicle body dimensions of a medium passenger car [m].
pub const VEHICLE_LENGTH: f64 = 5.39;
pub const VEHICLE_WIDTH: f64 = 2.07;

pub type StateMat = SMatrix<f64, NX, NX>;
pub type InputMat = SMatrix<f64, NX, NU>;
pub type StateVec = SVector<f64, NX>;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("trajectory length mismatch: expected {expected} states and {expected_u} controls, got {got_x}/{got_u}")]
    LengthMismatch {
        expected: usize,
        expected_u: usize,
        got_x: usize,
        got_u: usize,
    },
    #[error("degenerate obstacle rectangle: s_f={s_f}, s_b={s_b}, n_l={n_l}, n_r={n_r}")]
    DegenerateRectangle { s_f: f64, s_b: f64, n_l: f64, n_r: f64 },
}

/// Ego vehicle state `[s, n, v_s, v_n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Longitudinal position [m].
    pub s: f64,
    /// Lateral position [m].
    pub n: f64,
    /// Longitudinal velocity [m/s].
    pub v_s: f64,
    /// Lateral velocity [m/s].
    pub v_n: f64,
}

impl EgoState {
    pub fn new(s: f64, n: f64, v_s: f64, v_n: f64) -> Self {
        Self { s, n, v_s, v_n }
    }

    pub fn to_vector(self) -> StateVec {
        StateVec::new(self.s, self.n, self.v_s, self.v_n)
    }

    pub fn from_vector(v: &StateVec) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.s, self.n]
    }
}

/// Acceleration control `[a_s, a_n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// Longitudinal acceleration [m/s²].
    pub a_s: f64,
    /// Lateral acceleration [m/s²].
    pub a_n: f64,
}

impl Control {
    pub fn new(a_s: f64, a_n: f64) -> Self {
        Self { a_s, a_n }
    }
}

/// Fixed parameters of the prediction model and the hard constraint set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    /// Discretization time [s].
    pub t_d: f64,
    /// Number of prediction steps.
    pub horizon: usize,
    /// Friction acceleration limit [m/s²].
    pub a_fric: f64,
    /// Maximum absolute road curvature [1/m].
    pub kappa_max: f64,
    /// Lower bound of the lateral/longitudinal velocity ratio.
    pub alpha_lo: f64,
    /// Upper bound of the lateral/longitudinal velocity ratio.
    pub alpha_hi: f64,
    /// Control lower bounds `[a_s, a_n]`.
    pub lb_u: [f64; 2],
    /// Control upper bounds `[a_s, a_n]`.
    pub ub_u: [f64; 2],
    /// State lower bounds `[s, n, v_s, v_n]`; lateral entries are replaced
    /// per instance by the road geometry.
    pub lb_x: [f64; 4],
    /// State upper bounds.
    pub ub_x: [f64; 4],
    /// Safety distance to the road boundary [m].
    pub d_bnd: f64,
    /// Lane width [m].
    pub d_lane: f64,
    /// Maximum supported number of lanes.
    pub n_lanes_max: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            t_d: 0.2,
            horizon: 20,
            a_fric: 5.0,
            kappa_max: 0.0,
            alpha_lo: -0.3,
            alpha_hi: 0.3,
            lb_u: [-10.0, -5.0],
            ub_u: [3.0, 5.0],
            lb_x: [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, -5.0],
            ub_x: [f64::INFINITY, f64::INFINITY, 30.0, 5.0],
            d_bnd: 0.5,
            d_lane: 3.5,
            n_lanes_max: 3,
        }
    }
}

impl ModelParams {
    /// Lateral center of lane `k` (rightmost lane is `k = 0`).
    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.d_lane
    }

    /// Drivable lateral interval for a road with `n_lanes` lanes, already
    /// shrunk by the boundary safety distance.
    pub fn road_bounds(&self, n_lanes: usize) -> (f64, f64) {
        let lo = -0.5 * self.d_lane + self.d_bnd;
        let hi = (n_lanes as f64 - 0.5) * self.d_lane - self.d_bnd;
        (lo, hi)
    }

    /// Nearest lane index for a lateral position.
    pub fn nearest_lane(&self, n: f64, n_lanes: usize) -> usize {
        let k = (n / self.d_lane).round();
        (k.max(0.0) as usize).min(n_lanes.saturating_sub(1))
    }
}

/// Rectangular outer approximation of an obstacle in road coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBounds {
    /// Front longitudinal bound [m].
    pub s_f: f64,
    /// Back longitudinal bound [m].
    pub s_b: f64,
    /// Left lateral bound [m].
    pub n_l: f64,
    /// Right lateral bound [m].
    pub n_r: f64,
}

impl ObstacleBounds {
    pub fn new(s_f: f64, s_b: f64, n_l: f64, n_r: f64) -> Self {
        Self { s_f, s_b, n_l, n_r }
    }

    pub fn is_valid(&self) -> bool {
        self.s_f > self.s_b && self.n_l > self.n_r
    }

    /// True if the point lies strictly inside the rectangle.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.s_b && p[0] < self.s_f && p[1] > self.n_r && p[1] < self.n_l
    }
}

/// Predicted obstacle bounds along the planning horizon plus the
/// lane-aligned velocity used to generate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTrack {
    /// One entry per step, length `horizon + 1`.
    pub bounds: Vec<ObstacleBounds>,
    /// Lane-aligned velocity [m/s].
    pub v_obs: f64,
}

/// Parameters of one planning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub x0: EgoState,
    /// Desired longitudinal speed [m/s].
    pub v_ref: f64,
    /// Number of lanes of the current road segment.
    pub n_lanes: usize,
    pub obstacles: Vec<ObstacleTrack>,
    /// Lateral center of the initially desired lane [m].
    pub lane0_ref: f64,
}

/// Collision-free region around an obstacle rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Front,
    Back,
    Left,
    Right,
}

impl Region {
    /// Deterministic region order used everywhere (branching, tie-breaks,
    /// class indices).
    pub const ALL: [Region; 4] = [Region::Front, Region::Back, Region::Left, Region::Right];

    pub fn index(self) -> usize {
        match self {
            Region::Front => 0,
            Region::Back => 1,
            Region::Left => 2,
            Region::Right => 3,
        }
    }

    pub fn from_index(k: usize) -> Option<Region> {
        Region::ALL.get(k).copied()
    }
}

/// Zero-order-hold discretization of the double integrator.
///
/// Positions integrate `v*t_d + a*t_d²/2`, velocities `a*t_d`.
pub fn discretize_dynamics(t_d: f64) -> (StateMat, InputMat) {
    let mut a = StateMat::identity();
    a[(0, 2)] = t_d;
    a[(1, 3)] = t_d;
    let mut b = InputMat::zeros();
    let h = 0.5 * t_d * t_d;
    b[(0, 0)] = h;
    b[(1, 1)] = h;
    b[(2, 0)] = t_d;
    b[(3, 1)] = t_d;
    (a, b)
}

/// Lateral acceleration bounds shifted by the centrifugal term
/// `kappa_max * v_s0²` evaluated at the initial speed.
pub fn lateral_accel_bounds(a_fric: f64, kappa_max: f64, v_s0: f64) -> (f64, f64) {
    let shift = kappa_max * v_s0 * v_s0;
    (-a_fric + shift, a_fric + shift)
}

/// Half-space description `a·p <= b` of one collision-free region.
///
/// Front/back regions use a single row, the left/right strips three rows
/// (lateral separation plus the longitudinal extent of the rectangle, with
/// closed overlap at the corners).
pub fn region_halfspaces(d: &ObstacleBounds, region: Region) -> Vec<([f64; 2], f64)> {
    match region {
        // s >= s_f
        Region::Front => vec![([-1.0, 0.0], -d.s_f)],
        // s <= s_b
        Region::Back => vec![([1.0, 0.0], d.s_b)],
        // n >= n_l, s <= s_f, s >= s_b
        Region::Left => vec![
            ([0.0, -1.0], -d.n_l),
            ([1.0, 0.0], d.s_f),
            ([-1.0, 0.0], -d.s_b),
        ],
        // n <= n_r, s <= s_f, s >= s_b
        Region::Right => vec![
            ([0.0, 1.0], d.n_r),
            ([1.0, 0.0], d.s_f),
            ([-1.0, 0.0], -d.s_b),
        ],
    }
}

/// True if the point satisfies every row of the region's half-space system,
/// optionally tightened by a margin on each row.
pub fn region_satisfied(d: &ObstacleBounds, region: Region, p: [f64; 2], margin: f64) -> bool {
    region_halfspaces(d, region)
        .iter()
        .all(|(a, b)| a[0] * p[0] + a[1] * p[1] <= b - margin + 1e-12)
}

/// Worst violations of the hard constraint set over a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViolationReport {
    /// Max violation of the control box.
    pub control: f64,
    /// Max violation of the state box.
    pub state: f64,
    /// Max violation of the velocity-ratio constraints.
    pub velocity_ratio: f64,
}

impl ViolationReport {
    pub fn max(&self) -> f64 {
        self.control.max(self.state).max(self.velocity_ratio)
    }
}

/// Evaluates the hard linear inequality constraints (control bounds, state
/// bounds and the velocity-ratio coupling) along a trajectory.
pub fn check_hard_constraints(
    states: &[EgoState],
    controls: &[Control],
    params: &ModelParams,
) -> Result<ViolationReport, ModelError> {
    let n = params.horizon;
    if states.len() != n + 1 || controls.len() != n {
        return Err(ModelError::LengthMismatch {
            expected: n + 1,
            expected_u: n,
            got_x: states.len(),
            got_u: controls.len(),
        });
    }
    let mut rep = ViolationReport::default();
    for u in controls {
        let uv = [u.a_s, u.a_n];
        for k in 0..NU {
            rep.control = rep
                .control
                .max(params.lb_u[k] - uv[k])
                .max(uv[k] - params.ub_u[k]);
        }
    }
    for x in states {
        let xv = [x.s, x.n, x.v_s, x.v_n];
        for k in 0..NX {
            let lo = params.lb_x[k];
            let hi = params.ub_x[k];
            if lo.is_finite() {
                rep.state = rep.state.max(lo - xv[k]);
            }
            if hi.is_finite() {
                rep.state = rep.state.max(xv[k] - hi);
            }
        }
        rep.velocity_ratio = rep
            .velocity_ratio
            .max(x.v_n - params.alpha_hi * x.v_s)
            .max(params.alpha_lo * x.v_s - x.v_n);
    }
    Ok(rep)
}

/// Rectangular outer approximation of a vehicle at `(s, n)`: the body
/// rectangle inflated by the ego half-dimensions plus the safety distance,
/// so the ego can be treated as a point.
pub fn outer_bounds(center_s: f64, center_n: f64, params: &ModelParams) -> ObstacleBounds {
    let half_len = VEHICLE_LENGTH + params.d_bnd;
    let half_wid = VEHICLE_WIDTH + params.d_bnd;
    ObstacleBounds {
        s_f: center_s + half_len,
        s_b: center_s - half_len,
        n_l: center_n + half_wid,
        n_r: center_n - half_wid,
    }
}

/// Constant-velocity propagation of obstacle bounds over the horizon.
/// Longitudinal bounds shift by `i * t_d * v_obs`, lateral bounds stay.
pub fn predict_obstacle_bounds(
    initial: &ObstacleBounds,
    v_obs: f64,
    params: &ModelParams,
) -> ObstacleTrack {
    let mut bounds = Vec::with_capacity(params.horizon + 1);
    for i in 0..=params.horizon {
        let shift = i as f64 * params.t_d * v_obs;
        bounds.push(ObstacleBounds {
            s_f: initial.s_f + shift,
            s_b: initial.s_b + shift,
            n_l: initial.n_l,
            n_r: initial.n_r,
        });
    }
    ObstacleTrack { bounds, v_obs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dynamics_zero_step_is_identity() {
        let (a, b) = discretize_dynamics(0.0);
        assert_eq!(a, StateMat::identity());
        assert_eq!(b, InputMat::zeros());
    }

    #[test]
    fn dynamics_coefficients() {
        let (a, b) = discretize_dynamics(0.2);
        assert_eq!(a[(0, 2)], 0.2);
        assert_eq!(a[(1, 3)], 0.2);
        assert!((b[(0, 0)] - 0.02).abs() < 1e-15);
        assert!((b[(2, 0)] - 0.2).abs() < 1e-15);

        let (a, b) = discretize_dynamics(1.0);
        assert_eq!(a[(0, 2)], 1.0);
        assert_eq!(b[(0, 0)], 0.5);
        assert_eq!(b[(2, 0)], 1.0);
    }

    /// Multi-step simulation against the closed-form double integrator.
    #[test]
    fn dynamics_match_closed_form() {
        let t_d = 0.1;
        let (a, b) = discretize_dynamics(t_d);
        let u = SVector::<f64, 2>::new(1.3, -0.4);
        let mut x = StateVec::new(2.0, -1.0, 5.0, 0.5);
        let x0 = x;
        let steps = 37;
        for _ in 0..steps {
            x = a * x + b * u;
        }
        let t = steps as f64 * t_d;
        let expect = StateVec::new(
            x0[0] + x0[2] * t + 0.5 * u[0] * t * t,
            x0[1] + x0[3] * t + 0.5 * u[1] * t * t,
            x0[2] + u[0] * t,
            x0[3] + u[1] * t,
        );
        assert!((x - expect).amax() < 1e-12, "residual {}", (x - expect).amax());
    }

    #[test]
    fn lateral_bounds_examples() {
        assert_eq!(lateral_accel_bounds(5.0, 0.0, 20.0), (-5.0, 5.0));
        let (lo, hi) = lateral_accel_bounds(5.0, 0.01, 10.0);
        assert!((lo + 4.0).abs() < 1e-12 && (hi - 6.0).abs() < 1e-12);
        assert_eq!(lateral_accel_bounds(3.0, 0.0, 0.0), (-3.0, 3.0));
    }

    #[test]
    fn region_rows_front_and_left() {
        let d = ObstacleBounds::new(20.0, 10.0, 5.0, 1.0);
        let f = region_halfspaces(&d, Region::Front);
        assert_eq!(f, vec![([-1.0, 0.0], -20.0)]);
        let l = region_halfspaces(&d, Region::Left);
        assert_eq!(l.len(), 3);
        // n >= 5, s <= 20, s >= 10
        assert!(region_satisfied(&d, Region::Left, [15.0, 6.0], 0.0));
        assert!(!region_satisfied(&d, Region::Left, [15.0, 4.0], 0.0));
        assert!(!region_satisfied(&d, Region::Left, [25.0, 6.0], 0.0));
    }

    /// A point is outside the rectangle iff at least one region system holds.
    #[test]
    fn exterior_cover_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s_b = rng.gen_range(-50.0..50.0);
            let s_f = s_b + rng.gen_range(0.1..40.0);
            let n_r = rng.gen_range(-10.0..10.0);
            let n_l = n_r + rng.gen_range(0.1..8.0);
            let d = ObstacleBounds::new(s_f, s_b, n_l, n_r);
            for _ in 0..5000 {
                let p = [rng.gen_range(-80.0..80.0), rng.gen_range(-20.0..20.0)];
                let outside = !d.contains(p);
                let covered = Region::ALL
                    .iter()
                    .any(|&k| region_satisfied(&d, k, p, 0.0));
                assert_eq!(outside, covered, "p={p:?} d={d:?}");
            }
        }
    }

    #[test]
    fn interior_point_violates_every_region() {
        let d = ObstacleBounds::new(20.0, 10.0, 5.0, 1.0);
        let p = [15.0, 3.0];
        for k in Region::ALL {
            assert!(!region_satisfied(&d, k, p, 0.0));
        }
    }

    #[test]
    fn hard_constraints_report() {
        let m = ModelParams {
            horizon: 2,
            ..ModelParams::default()
        };
        let x0 = EgoState::new(0.0, 0.0, 0.0, 0.0);
        let ok = check_hard_constraints(&[x0; 3], &[Control::new(0.0, 0.0); 2], &m).unwrap();
        assert_eq!(ok.max(), 0.0);

        // velocity ratio: v_n = 0.4 v_s with alpha_hi = 0.3 violates by 0.1 v_s
        let x = EgoState::new(0.0, 0.0, 10.0, 4.0);
        let rep = check_hard_constraints(&[x, x0, x0], &[Control::new(0.0, 0.0); 2], &m).unwrap();
        assert!((rep.velocity_ratio - 1.0).abs() < 1e-12);

        // a_s = 4 with ub 3 violates by 1
        let rep =
            check_hard_constraints(&[x0; 3], &[Control::new(4.0, 0.0), Control::new(0.0, 0.0)], &m)
                .unwrap();
        assert!((rep.control - 1.0).abs() < 1e-12);

        assert!(check_hard_constraints(&[x0; 2], &[Control::new(0.0, 0.0); 2], &m).is_err());
    }

    #[test]
    fn obstacle_prediction() {
        let m = ModelParams {
            horizon: 5,
            ..ModelParams::default()
        };
        let d0 = ObstacleBounds::new(10.0, 5.0, 2.0, -2.0);
        let still = predict_obstacle_bounds(&d0, 0.0, &m);
        assert_eq!(still.bounds.len(), 6);
        assert!(still.bounds.iter().all(|b| *b == d0));

        let moving = predict_obstacle_bounds(&d0, 10.0, &m);
        assert!((moving.bounds[5].s_f - 20.0).abs() < 1e-12);
        assert!((moving.bounds[5].s_b - 15.0).abs() < 1e-12);
        assert_eq!(moving.bounds[5].n_l, 2.0);

        let back = predict_obstacle_bounds(&d0, -3.0, &m);
        for w in back.bounds.windows(2) {
            assert!(w[1].s_f < w[0].s_f);
        }
    }
}
