//! The expert planner: a parametric mixed-integer QP over lane-change and
//! obstacle-region binaries, solved exactly by branch-and-bound.
//!
//! `MiqpInstance` holds the symbolic problem: tracking references, road
//! bounds, per-step reachability boxes, the per-instance big-M constant and
//! the presolve classification of every (step, obstacle) region group.
//! Node relaxations and fixed-binary QPs are assembled on demand in the
//! stage-structured form of [`crate::qp::ocp`].

pub mod bnb;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    discretize_dynamics, lateral_accel_bounds, region_halfspaces, Control, EgoState, ModelParams,
    PlannerParams, Region,
};
use crate::qp::ocp::{OcpDynamics, OcpQp, OcpSolution, OcpStage};
use crate::qp::{QpError, QpStatus};

pub use bnb::{solve_bnb, BnbOptions, MiqpSolution, MiqpStatus};

#[derive(Debug, Error)]
pub enum MiqpError {
    #[error("obstacle {index} track has {got} bound entries, expected {expected}")]
    TrackLength {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("branching requested on an integral node")]
    IntegralNode,
    #[error("solution binaries are not integral (max deviation {0:.3e})")]
    NonIntegral(f64),
    #[error("assignment shape mismatch: {0}")]
    AssignmentShape(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Weights of the expert cost plus the collision formulation constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiqpWeights {
    /// State tracking weight (4x4, PSD).
    pub q: [[f64; 4]; 4],
    /// Control tracking weight (2x2, PSD).
    pub r: [[f64; 2]; 2],
    /// Lane-change penalty.
    pub w_lc: f64,
    /// Right-lane preference (linear in the lateral position).
    pub w_rght: f64,
    /// Slack penalty.
    pub w_dst: f64,
    /// Safety margins per region (f, b, l, r) [m].
    pub sigma_bar: [f64; 4],
    /// Big-M override; `None` computes the tightest valid constant per
    /// instance from the reachability boxes.
    pub big_m: Option<f64>,
}

impl Default for MiqpWeights {
    fn default() -> Self {
        Self {
            q: diag4([0.0, 14.0, 10.0, 1.0]),
            r: diag2([4.0, 0.5]),
            w_lc: 3.0e3,
            w_rght: 3.0,
            // large enough that the soft relaxation never prefers slack
            // violation when the fixed binaries admit a collision-free
            // trajectory: beyond-margin slack then reliably signals a wrong
            // prediction
            w_dst: 1.0e4,
            sigma_bar: [0.5, 12.0, 0.5, 0.5],
            big_m: None,
        }
    }
}

fn diag4(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (i, v) in d.into_iter().enumerate() {
        m[i][i] = v;
    }
    m
}

fn diag2(d: [f64; 2]) -> [[f64; 2]; 2] {
    let mut m = [[0.0; 2]; 2];
    for (i, v) in d.into_iter().enumerate() {
        m[i][i] = v;
    }
    m
}

/// Per-step lane-change decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaneChange {
    Keep,
    Up,
    Down,
}

impl LaneChange {
    pub const ALL: [LaneChange; 3] = [LaneChange::Keep, LaneChange::Up, LaneChange::Down];

    /// Class index used by the networks: 0 = keep, 1 = up, 2 = down.
    pub fn class(self) -> usize {
        match self {
            LaneChange::Keep => 0,
            LaneChange::Up => 1,
            LaneChange::Down => 2,
        }
    }

    pub fn from_class(c: usize) -> Option<Self> {
        LaneChange::ALL.get(c).copied()
    }

    pub fn lambda_pair(self) -> [u8; 2] {
        match self {
            LaneChange::Keep => [0, 0],
            LaneChange::Up => [1, 0],
            LaneChange::Down => [0, 1],
        }
    }
}

/// One complete assignment of the binary variables: a lane decision per
/// step and a one-hot region choice per (step, obstacle). Storing the
/// choices as enums keeps the one-hot and pair invariants by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryAssignment {
    /// Length N.
    pub lane: Vec<LaneChange>,
    /// `regions[i][j]`: region of obstacle j at step i; (N+1) rows.
    pub regions: Vec<Vec<Region>>,
}

impl BinaryAssignment {
    pub fn check_shape(&self, n: usize, n_obs: usize) -> Result<(), MiqpError> {
        if self.lane.len() != n {
            return Err(MiqpError::AssignmentShape(format!(
                "lane length {} != {n}",
                self.lane.len()
            )));
        }
        if self.regions.len() != n + 1 || self.regions.iter().any(|r| r.len() != n_obs) {
            return Err(MiqpError::AssignmentShape(format!(
                "regions shape {}x{:?} != {}x{n_obs}",
                self.regions.len(),
                self.regions.first().map(|r| r.len()),
                n + 1
            )));
        }
        Ok(())
    }

    /// Dense lambda matrix (N x 2) for reports.
    pub fn lambda_matrix(&self) -> Vec<[u8; 2]> {
        self.lane.iter().map(|l| l.lambda_pair()).collect()
    }

    /// Dense one-hot gamma tensor ((N+1) x n_obs x 4) for reports.
    pub fn gamma_matrix(&self) -> Vec<Vec<[u8; 4]>> {
        self.regions
            .iter()
            .map(|row| {
                row.iter()
                    .map(|r| {
                        let mut g = [0u8; 4];
                        g[r.index()] = 1;
                        g
                    })
                    .collect()
            })
            .collect()
    }

    /// Fraction of groups (lane steps + region groups) on which the two
    /// assignments agree.
    pub fn agreement(&self, other: &BinaryAssignment) -> f64 {
        let mut total = 0usize;
        let mut same = 0usize;
        for (a, b) in self.lane.iter().zip(&other.lane) {
            total += 1;
            same += (a == b) as usize;
        }
        for (ra, rb) in self.regions.iter().zip(&other.regions) {
            for (a, b) in ra.iter().zip(rb) {
                total += 1;
                same += (a == b) as usize;
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Presolve classification of one (step, obstacle) group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupState {
    /// Some region contains the whole reachability box at full margin:
    /// the group is fixed there with zero slack and drops out of the QP.
    Covered(Region),
    /// Regions that intersect the reachability box; branching picks one.
    Contested(Vec<Region>),
}

/// Fully built parametric instance.
#[derive(Debug, Clone)]
pub struct MiqpInstance {
    pub model: ModelParams,
    pub weights: MiqpWeights,
    pub params: PlannerParams,
    pub n_obs: usize,
    /// Longitudinal reference positions per step.
    pub s_ref: Vec<f64>,
    /// Road lateral bounds for this lane count.
    pub lat_lo: f64,
    pub lat_hi: f64,
    /// Effective lateral acceleration bounds.
    pub an_lo: f64,
    pub an_hi: f64,
    /// Reachability boxes per step.
    pub s_box: Vec<(f64, f64)>,
    pub v_box: Vec<(f64, f64)>,
    pub n_box: Vec<(f64, f64)>,
    /// Instance big-M constant.
    pub big_m: f64,
    /// `groups[i][j]` for step i, obstacle j.
    pub groups: Vec<Vec<GroupState>>,
    /// True when some group has no reachable region at all.
    pub infeasible_root: bool,
}

/// Assembles the parametric instance: references, reachability boxes,
/// big-M and the presolve group classification.
pub fn build_miqp(
    pi: &PlannerParams,
    w: &MiqpWeights,
    m: &ModelParams,
) -> Result<MiqpInstance, MiqpError> {
    let n = m.horizon;
    let n_obs = pi.obstacles.len();
    for (j, t) in pi.obstacles.iter().enumerate() {
        if t.bounds.len() != n + 1 {
            return Err(MiqpError::TrackLength {
                index: j,
                got: t.bounds.len(),
                expected: n + 1,
            });
        }
    }

    let (lat_lo, lat_hi) = m.road_bounds(pi.n_lanes);
    let (an_lo_raw, an_hi_raw) = lateral_accel_bounds(m.a_fric, m.kappa_max, pi.x0.v_s);
    let an_lo = an_lo_raw.max(m.lb_u[1]);
    let an_hi = an_hi_raw.min(m.ub_u[1]);

    let s_ref: Vec<f64> = (0..=n)
        .map(|i| pi.x0.s + i as f64 * m.t_d * pi.v_ref)
        .collect();

    // reachability boxes (step 0 is the exact initial point)
    let v_lo_lim = m.lb_x[2].max(0.0);
    let v_hi_lim = m.ub_x[2];
    let mut s_box = Vec::with_capacity(n + 1);
    let mut v_box = Vec::with_capacity(n + 1);
    let mut n_box = Vec::with_capacity(n + 1);
    let mut v_lo = pi.x0.v_s;
    let mut v_hi = pi.x0.v_s;
    let mut s_lo = pi.x0.s;
    let mut s_hi = pi.x0.s;
    s_box.push((s_lo, s_hi));
    v_box.push((v_lo, v_hi));
    n_box.push((pi.x0.n.min(lat_lo), pi.x0.n.max(lat_hi)));
    for _ in 0..n {
        s_lo += m.t_d * v_lo + 0.5 * m.t_d * m.t_d * m.lb_u[0].min(0.0);
        s_hi += m.t_d * v_hi + 0.5 * m.t_d * m.t_d * m.ub_u[0].max(0.0);
        v_lo = (v_lo + m.t_d * m.lb_u[0]).max(v_lo_lim);
        v_hi = (v_hi + m.t_d * m.ub_u[0]).min(v_hi_lim);
        s_box.push((s_lo, s_hi));
        v_box.push((v_lo, v_hi));
        n_box.push((lat_lo, lat_hi));
    }

    // tightest valid big-M over all region rows plus the margin headroom
    let sigma_max = w
        .sigma_bar
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    let mut big_m = match w.big_m {
        Some(v) => v,
        None => {
            let mut worst: f64 = 0.0;
            for (i, (sb, nb)) in s_box.iter().zip(&n_box).enumerate() {
                for t in &pi.obstacles {
                    let d = &t.bounds[i];
                    for k in Region::ALL {
                        for (a, b) in region_halfspaces(d, k) {
                            let lo = a[0] * pick(sb, a[0] < 0.0) + a[1] * pick(nb, a[1] < 0.0);
                            let hi = a[0] * pick(sb, a[0] > 0.0) + a[1] * pick(nb, a[1] > 0.0);
                            worst = worst.max((lo - b).abs()).max((hi - b).abs());
                        }
                    }
                }
            }
            worst + sigma_max + 1.0
        }
    };
    big_m = big_m.max(1.0);

    // presolve: classify each group against the reachability boxes
    let mut groups = Vec::with_capacity(n + 1);
    let mut infeasible_root = false;
    for i in 0..=n {
        let mut row = Vec::with_capacity(n_obs);
        for t in &pi.obstacles {
            let d = &t.bounds[i];
            let (sb, nb) = (&s_box[i], &n_box[i]);
            let mut covered: Option<Region> = None;
            let mut reachable: Vec<Region> = Vec::new();
            for k in Region::ALL {
                let margin = w.sigma_bar[k.index()];
                if covered.is_none() && region_covers_box(d, k, sb, nb, margin) {
                    covered = Some(k);
                }
                if region_intersects_box(d, k, sb, nb) {
                    reachable.push(k);
                }
            }
            if let Some(k) = covered {
                row.push(GroupState::Covered(k));
            } else if reachable.is_empty() {
                infeasible_root = true;
                row.push(GroupState::Contested(vec![]));
            } else {
                row.push(GroupState::Contested(reachable));
            }
        }
        groups.push(row);
    }

    Ok(MiqpInstance {
        model: m.clone(),
        weights: w.clone(),
        params: pi.clone(),
        n_obs,
        s_ref,
        lat_lo,
        lat_hi,
        an_lo,
        an_hi,
        s_box,
        v_box,
        n_box,
        big_m,
        groups,
        infeasible_root,
    })
}

fn pick(interval: &(f64, f64), lower: bool) -> f64 {
    if lower {
        interval.0
    } else {
        interval.1
    }
}

/// Every point of the box satisfies every region row tightened by `margin`.
fn region_covers_box(
    d: &crate::model::ObstacleBounds,
    k: Region,
    s_box: &(f64, f64),
    n_box: &(f64, f64),
    margin: f64,
) -> bool {
    region_halfspaces(d, k).iter().all(|(a, b)| {
        let sup = a[0] * pick(s_box, a[0] < 0.0) + a[1] * pick(n_box, a[1] < 0.0);
        sup <= b - margin + 1e-12
    })
}

/// Some point of the box satisfies every region row (no margin). Exact for
/// these regions: each is a product of axis intervals, so the per-row
/// minima are attained simultaneously.
fn region_intersects_box(
    d: &crate::model::ObstacleBounds,
    k: Region,
    s_box: &(f64, f64),
    n_box: &(f64, f64),
) -> bool {
    region_halfspaces(d, k).iter().all(|(a, b)| {
        let inf = a[0] * pick(s_box, a[0] > 0.0) + a[1] * pick(n_box, a[1] > 0.0);
        inf <= *b + 1e-12
    })
}

/// Fixing of binaries for a relaxation or a fixed-binary QP. `None` leaves
/// the group (or lane step) relaxed within its presolve-allowed set.
#[derive(Debug, Clone, Default)]
pub struct NodeFixing {
    /// Per step i < N.
    pub lane: Vec<Option<LaneChange>>,
    /// Flattened `[i * n_obs + j]`.
    pub gamma: Vec<Option<Region>>,
}

impl NodeFixing {
    pub fn free(n: usize, n_obs: usize) -> Self {
        Self {
            lane: vec![None; n],
            gamma: vec![None; (n + 1) * n_obs],
        }
    }

    pub fn from_assignment(a: &BinaryAssignment) -> Self {
        Self {
            lane: a.lane.iter().map(|l| Some(*l)).collect(),
            gamma: a
                .regions
                .iter()
                .flat_map(|row| row.iter().map(|r| Some(*r)))
                .collect(),
        }
    }
}

/// Column bookkeeping for one stage of the assembled QP.
#[derive(Debug, Clone, Default)]
struct StageLayout {
    u_cols: Option<usize>,
    lambda_cols: Option<usize>,
    /// Per obstacle: kept gamma columns as (region, col), the eliminated
    /// region, and the sigma column, when the group is in the QP.
    gamma_cols: Vec<Option<(Vec<(Region, usize)>, Region, usize)>>,
    /// Per obstacle: fixed-region sigma column (group fixed, rows active).
    fixed_sigma: Vec<Option<(Region, usize)>>,
}

/// Assembled stage-structured QP plus the mapping back to planner values.
pub struct MiqpQp {
    pub ocp: OcpQp,
    layout: Vec<StageLayout>,
    n: usize,
    n_obs: usize,
}

/// Relaxed (or fixed) solution mapped back to planner quantities.
#[derive(Debug, Clone)]
pub struct RelaxedPoint {
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    pub ref_lane: Vec<f64>,
    /// Relaxed lane distribution per step: `[keep, up, down]`.
    pub lane: Vec<[f64; 3]>,
    /// Relaxed region distribution per (step, obstacle).
    pub gamma: Vec<Vec<[f64; 4]>>,
    pub sigma: Vec<Vec<f64>>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

impl MiqpInstance {
    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    /// Variable count of the full formulation
    /// (X, U, lane binaries, lateral reference, region binaries, slacks).
    pub fn variable_count(&self) -> usize {
        let n = self.horizon();
        4 * (n + 1) + 2 * n + 2 * n + (n + 1) + self.n_obs * (4 * (n + 1) + (n + 1))
    }

    /// Number of binary variables (relaxed or not) in the full formulation.
    pub fn binary_count(&self) -> (usize, usize) {
        let n = self.horizon();
        (4 * self.n_obs * (n + 1), 2 * n)
    }

    /// Group state with a node fixing applied on top of the presolve.
    fn effective_group(&self, fix: &NodeFixing, i: usize, j: usize) -> EffectiveGroup {
        if let Some(r) = fix.gamma[i * self.n_obs + j] {
            return match self.groups[i][j] {
                // presolve proved the region holds at full margin: rows and
                // slack stay out of the QP
                GroupState::Covered(pr) if pr == r => EffectiveGroup::PresolveCovered,
                _ => EffectiveGroup::FixedActive(r),
            };
        }
        match &self.groups[i][j] {
            GroupState::Covered(_) => EffectiveGroup::PresolveCovered,
            GroupState::Contested(allowed) => EffectiveGroup::Free(allowed.clone()),
        }
    }

    /// Assembles the stage-structured QP for a given fixing.
    ///
    /// `sigma_cap` is the slack upper bound (`Some(1.0)` for the exact
    /// problem, `None` for the soft relaxation). `drop_covered_sigma`
    /// removes the zero slack variables of presolve-covered groups.
    pub fn assemble(&self, fix: &NodeFixing, sigma_cap: Option<f64>) -> MiqpQp {
        let n = self.horizon();
        let m = &self.model;
        let w = &self.weights;
        let n_obs = self.n_obs;
        let (a_mat, b_mat) = discretize_dynamics(m.t_d);
        let nw = 5; // [x (4), ref lane (1)]

        let q2: DMatrix<f64> =
            2.0 * DMatrix::from_fn(4, 4, |r, c| w.q[r][c]);
        let r2: DMatrix<f64> = 2.0 * DMatrix::from_fn(2, 2, |r, c| w.r[r][c]);
        let q_sel = &q2 * DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]); // 2Q e_n

        let mut stages: Vec<OcpStage> = Vec::with_capacity(n + 1);
        let mut dynamics: Vec<OcpDynamics> = Vec::with_capacity(n);
        let mut layout: Vec<StageLayout> = Vec::with_capacity(n + 1);
        let mut cost_offset = 0.0;

        for i in 0..=n {
            let mut lay = StageLayout {
                gamma_cols: vec![None; n_obs],
                fixed_sigma: vec![None; n_obs],
                ..StageLayout::default()
            };

            // count stage-local variables
            let mut nv = 0;
            if i < n {
                lay.u_cols = Some(nv);
                nv += 2;
                if fix.lane[i].is_none() {
                    lay.lambda_cols = Some(nv);
                    nv += 2;
                }
            }
            for j in 0..n_obs {
                match self.effective_group(fix, i, j) {
                    EffectiveGroup::PresolveCovered => {}
                    EffectiveGroup::FixedActive(r) => {
                        lay.fixed_sigma[j] = Some((r, nv));
                        nv += 1;
                    }
                    EffectiveGroup::Free(allowed) => {
                        if allowed.len() == 1 {
                            lay.fixed_sigma[j] = Some((allowed[0], nv));
                            nv += 1;
                        } else if !allowed.is_empty() {
                            let kept: Vec<(Region, usize)> = allowed[..allowed.len() - 1]
                                .iter()
                                .enumerate()
                                .map(|(idx, r)| (*r, nv + idx))
                                .collect();
                            let elim = allowed[allowed.len() - 1];
                            let sig = nv + kept.len();
                            lay.gamma_cols[j] = Some((kept, elim, sig));
                            nv += lay.gamma_cols[j].as_ref().unwrap().0.len() + 1;
                        }
                        // empty allowed set: root infeasible, handled upstream
                    }
                }
            }

            let mut st = OcpStage::new(nw, nv);

            // tracking cost: (x - c_i - e_n nref)' Q (x - ...) with
            // c_i = [s_ref, 0, v_ref, 0]
            let c_i = DVector::from_vec(vec![self.s_ref[i], 0.0, self.params.v_ref, 0.0]);
            st.q_ww.view_mut((0, 0), (4, 4)).copy_from(&q2);
            for r in 0..4 {
                st.q_ww[(r, 4)] = -q_sel[r];
                st.q_ww[(4, r)] = -q_sel[r];
            }
            st.q_ww[(4, 4)] = q_sel[1] * 1.0; // e_n' 2Q e_n
            let lin_x = -(&q2 * &c_i);
            for r in 0..4 {
                st.q_w[r] = lin_x[r];
            }
            st.q_w[4] = c_i.dot(&q_sel);
            cost_offset += 0.5 * (c_i.transpose() * &q2 * &c_i)[(0, 0)];
            // right-lane preference on n
            st.q_w[1] += w.w_rght;

            if let Some(uc) = lay.u_cols {
                st.q_vv.view_mut((uc, uc), (2, 2)).copy_from(&r2);
            }
            if let Some(lc) = lay.lambda_cols {
                st.q_v[lc] += w.w_lc;
                st.q_v[lc + 1] += w.w_lc;
                st.v_lo[lc] = 0.0;
                st.v_hi[lc] = 1.0;
                st.v_lo[lc + 1] = 0.0;
                st.v_hi[lc + 1] = 1.0;
            } else if i < n {
                cost_offset += w.w_lc
                    * match fix.lane[i] {
                        Some(LaneChange::Keep) | None => 0.0,
                        Some(_) => 1.0,
                    };
            }
            if let Some(uc) = lay.u_cols {
                st.v_lo[uc] = m.lb_u[0];
                st.v_hi[uc] = m.ub_u[0];
                st.v_lo[uc + 1] = self.an_lo;
                st.v_hi[uc + 1] = self.an_hi;
            }

            // rows
            let mut rows_w: Vec<[f64; 5]> = Vec::new();
            let mut rows_v: Vec<Vec<(usize, f64)>> = Vec::new();
            let mut rows_lo: Vec<f64> = Vec::new();
            let mut rows_hi: Vec<f64> = Vec::new();

            if i > 0 {
                // state box on n, v_s, v_n (s is unbounded by default)
                push_bound_row(
                    &mut rows_w,
                    &mut rows_v,
                    &mut rows_lo,
                    &mut rows_hi,
                    0,
                    m.lb_x[0],
                    m.ub_x[0],
                );
                push_bound_row(
                    &mut rows_w,
                    &mut rows_v,
                    &mut rows_lo,
                    &mut rows_hi,
                    1,
                    self.lat_lo,
                    self.lat_hi,
                );
                push_bound_row(
                    &mut rows_w,
                    &mut rows_v,
                    &mut rows_lo,
                    &mut rows_hi,
                    2,
                    m.lb_x[2],
                    m.ub_x[2],
                );
                push_bound_row(
                    &mut rows_w,
                    &mut rows_v,
                    &mut rows_lo,
                    &mut rows_hi,
                    3,
                    m.lb_x[3],
                    m.ub_x[3],
                );
                // velocity ratio: alpha_lo v_s <= v_n <= alpha_hi v_s
                rows_w.push([0.0, 0.0, -m.alpha_hi, 1.0, 0.0]);
                rows_v.push(vec![]);
                rows_lo.push(f64::NEG_INFINITY);
                rows_hi.push(0.0);
                rows_w.push([0.0, 0.0, -m.alpha_lo, 1.0, 0.0]);
                rows_v.push(vec![]);
                rows_lo.push(0.0);
                rows_hi.push(f64::INFINITY);
            }
            if let Some(lc) = lay.lambda_cols {
                rows_w.push([0.0; 5]);
                rows_v.push(vec![(lc, 1.0), (lc + 1, 1.0)]);
                rows_lo.push(f64::NEG_INFINITY);
                rows_hi.push(1.0);
            }

            // region rows
            for j in 0..n_obs {
                let d = &self.params.obstacles[j].bounds[i];
                if let Some((region, sc)) = lay.fixed_sigma[j] {
                    let sb = w.sigma_bar[region.index()];
                    for (a, b) in region_halfspaces(d, region) {
                        rows_w.push([a[0], a[1], 0.0, 0.0, 0.0]);
                        rows_v.push(vec![(sc, -sb)]);
                        rows_lo.push(f64::NEG_INFINITY);
                        rows_hi.push(b - sb);
                    }
                    st.q_vv[(sc, sc)] += 2.0 * w.w_dst;
                    st.v_lo[sc] = 0.0;
                    st.v_hi[sc] = sigma_cap.unwrap_or(f64::INFINITY);
                } else if let Some((kept, elim, sc)) = &lay.gamma_cols[j] {
                    let (s_lo_box, s_hi_box) = self.s_box[i];
                    let (n_lo_box, n_hi_box) = self.n_box[i];
                    // per-row tight big-M from the reachability box
                    let row_m = |a: [f64; 2], b: f64, sb: f64| -> f64 {
                        let sup = a[0] * if a[0] < 0.0 { s_lo_box } else { s_hi_box }
                            + a[1] * if a[1] < 0.0 { n_lo_box } else { n_hi_box };
                        (sup - b + sb).max(0.0) + 1.0
                    };
                    // kept regions: A p + M gamma_k - sb sigma <= b + M - sb
                    for (region, col) in kept {
                        let sb = w.sigma_bar[region.index()];
                        for (a, b) in region_halfspaces(d, *region) {
                            let m_row = row_m(a, b, sb);
                            rows_w.push([a[0], a[1], 0.0, 0.0, 0.0]);
                            rows_v.push(vec![(*col, m_row), (*sc, -sb)]);
                            rows_lo.push(f64::NEG_INFINITY);
                            rows_hi.push(b + m_row - sb);
                        }
                        st.v_lo[*col] = 0.0;
                        st.v_hi[*col] = 1.0;
                    }
                    // eliminated region (gamma_e = 1 - sum kept):
                    // A p - M sum(kept) - sb sigma <= b - sb
                    let sbe = w.sigma_bar[elim.index()];
                    for (a, b) in region_halfspaces(d, *elim) {
                        let m_row = row_m(a, b, sbe);
                        rows_w.push([a[0], a[1], 0.0, 0.0, 0.0]);
                        let mut cols: Vec<(usize, f64)> =
                            kept.iter().map(|(_, c)| (*c, -m_row)).collect();
                        cols.push((*sc, -sbe));
                        rows_v.push(cols);
                        rows_lo.push(f64::NEG_INFINITY);
                        rows_hi.push(b - sbe);
                    }
                    // 0 <= gamma_e: sum(kept) <= 1
                    rows_w.push([0.0; 5]);
                    rows_v.push(kept.iter().map(|(_, c)| (*c, 1.0)).collect());
                    rows_lo.push(f64::NEG_INFINITY);
                    rows_hi.push(1.0);

                    // per-axis hull rows of the disjunction at the slack
                    // boundary (sigma = 1); they close most of the big-M
                    // relaxation gap without cutting any integral point
                    let bounds_of = |r: Region| -> (f64, f64, f64, f64) {
                        // (s lower, s upper, n lower, n upper) implied by r
                        match r {
                            Region::Front => (d.s_f, s_hi_box, n_lo_box, n_hi_box),
                            Region::Back => (s_lo_box, d.s_b, n_lo_box, n_hi_box),
                            Region::Left => (d.s_b, d.s_f, d.n_l, n_hi_box),
                            Region::Right => (d.s_b, d.s_f, n_lo_box, d.n_r),
                        }
                    };
                    let elim_b = bounds_of(*elim);
                    let axes: [(usize, bool, fn((f64, f64, f64, f64)) -> f64); 4] = [
                        (0, true, |b| b.0),
                        (0, false, |b| b.1),
                        (1, true, |b| b.2),
                        (1, false, |b| b.3),
                    ];
                    for (axis, is_lower, get) in axes {
                        let base = get(elim_b);
                        let cols: Vec<(usize, f64)> = kept
                            .iter()
                            .map(|(r, col)| (*col, -(get(bounds_of(*r)) - base)))
                            .collect();
                        if cols.iter().all(|(_, v)| v.abs() < 1e-9) {
                            continue; // redundant with the state box
                        }
                        let mut wrow = [0.0; 5];
                        wrow[axis] = 1.0;
                        rows_w.push(wrow);
                        rows_v.push(cols);
                        if is_lower {
                            // p_axis - sum (bound_k - base) gamma_k >= base
                            rows_lo.push(base);
                            rows_hi.push(f64::INFINITY);
                        } else {
                            rows_lo.push(f64::NEG_INFINITY);
                            rows_hi.push(base);
                        }
                    }

                    st.q_vv[(*sc, *sc)] += 2.0 * w.w_dst;
                    st.v_lo[*sc] = 0.0;
                    st.v_hi[*sc] = sigma_cap.unwrap_or(f64::INFINITY);
                }
            }

            let m_rows = rows_w.len();
            st.c_w = DMatrix::from_fn(m_rows, nw, |r, c| rows_w[r][c]);
            st.c_v = DMatrix::zeros(m_rows, nv);
            for (r, cols) in rows_v.iter().enumerate() {
                for (c, val) in cols {
                    st.c_v[(r, *c)] = *val;
                }
            }
            st.lo = DVector::from_vec(rows_lo);
            st.hi = DVector::from_vec(rows_hi);

            // dynamics to the next stage
            if i < n {
                let mut e = DMatrix::zeros(nw, nw);
                for r in 0..4 {
                    for c in 0..4 {
                        e[(r, c)] = a_mat[(r, c)];
                    }
                }
                e[(4, 4)] = 1.0;
                let mut f = DMatrix::zeros(nw, nv);
                if let Some(uc) = lay.u_cols {
                    for r in 0..4 {
                        f[(r, uc)] = b_mat[(r, 0)];
                        f[(r, uc + 1)] = b_mat[(r, 1)];
                    }
                }
                let mut c = DVector::zeros(nw);
                if let Some(lc) = lay.lambda_cols {
                    f[(4, lc)] = m.d_lane;
                    f[(4, lc + 1)] = -m.d_lane;
                } else if let Some(l) = fix.lane[i] {
                    match l {
                        LaneChange::Keep => {}
                        LaneChange::Up => c[4] = m.d_lane,
                        LaneChange::Down => c[4] = -m.d_lane,
                    }
                }
                dynamics.push(OcpDynamics { e, f, c });
            }

            stages.push(st);
            layout.push(lay);
        }

        let w0 = DVector::from_vec(vec![
            self.params.x0.s,
            self.params.x0.n,
            self.params.x0.v_s,
            self.params.x0.v_n,
            self.params.lane0_ref,
        ]);

        MiqpQp {
            ocp: OcpQp {
                nw,
                w0,
                stages,
                dynamics,
                cost_offset,
            },
            layout,
            n,
            n_obs,
        }
    }

    /// Fixed-binary QP of the exact problem (slacks capped at one).
    pub fn fix_binaries(&self, a: &BinaryAssignment) -> Result<MiqpQp, MiqpError> {
        a.check_shape(self.horizon(), self.n_obs)?;
        Ok(self.assemble(&NodeFixing::from_assignment(a), Some(1.0)))
    }
}

enum EffectiveGroup {
    /// Presolve proved optimality of some region with zero slack.
    PresolveCovered,
    /// Fixed by branching or by a given assignment: rows and slack active.
    FixedActive(Region),
    /// Relaxed over the reachable regions.
    Free(Vec<Region>),
}

fn push_bound_row(
    rows_w: &mut Vec<[f64; 5]>,
    rows_v: &mut Vec<Vec<(usize, f64)>>,
    rows_lo: &mut Vec<f64>,
    rows_hi: &mut Vec<f64>,
    idx: usize,
    lo: f64,
    hi: f64,
) {
    if !lo.is_finite() && !hi.is_finite() {
        return;
    }
    let mut r = [0.0; 5];
    r[idx] = 1.0;
    rows_w.push(r);
    rows_v.push(vec![]);
    rows_lo.push(lo);
    rows_hi.push(hi);
}

impl MiqpQp {
    /// Maps an OCP solution back to planner quantities. For groups fixed by
    /// presolve or by the fixing, distributions are exact one-hots.
    pub fn extract(&self, inst: &MiqpInstance, fix: &NodeFixing, sol: &OcpSolution) -> RelaxedPoint {
        let n = self.n;
        let n_obs = self.n_obs;
        let mut states = Vec::with_capacity(n + 1);
        let mut ref_lane = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        let mut lane = Vec::with_capacity(n);
        let mut gamma = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);

        for i in 0..=n {
            let wv = &sol.w[i];
            states.push(EgoState::new(wv[0], wv[1], wv[2], wv[3]));
            ref_lane.push(wv[4]);
            let lay = &self.layout[i];
            let vv = &sol.v[i];
            if i < n {
                if let Some(uc) = lay.u_cols {
                    controls.push(Control::new(vv[uc], vv[uc + 1]));
                }
                if let Some(lc) = lay.lambda_cols {
                    let up = vv[lc];
                    let down = vv[lc + 1];
                    lane.push([(1.0 - up - down).max(0.0), up, down]);
                } else {
                    let l = fix.lane[i].unwrap_or(LaneChange::Keep);
                    let mut dist = [0.0; 3];
                    dist[l.class()] = 1.0;
                    lane.push(dist);
                }
            }
            let mut grow = Vec::with_capacity(n_obs);
            let mut srow = Vec::with_capacity(n_obs);
            for j in 0..n_obs {
                let mut dist = [0.0f64; 4];
                let mut sig = 0.0;
                if let Some((region, sc)) = lay.fixed_sigma[j] {
                    dist[region.index()] = 1.0;
                    sig = vv[sc];
                } else if let Some((kept, elim, sc)) = &lay.gamma_cols[j] {
                    let mut rest = 1.0;
                    for (region, col) in kept {
                        dist[region.index()] = vv[*col];
                        rest -= vv[*col];
                    }
                    dist[elim.index()] = rest.max(0.0);
                    sig = vv[*sc];
                } else {
                    // no columns: presolve-covered (or degenerate empty group)
                    match (fix.gamma[i * n_obs + j], &inst.groups[i][j]) {
                        (Some(r), _) => dist[r.index()] = 1.0,
                        (None, GroupState::Covered(r)) => dist[r.index()] = 1.0,
                        (None, GroupState::Contested(_)) => {}
                    }
                }
                grow.push(dist);
                srow.push(sig);
            }
            gamma.push(grow);
            sigma.push(srow);
        }

        RelaxedPoint {
            states,
            controls,
            ref_lane,
            lane,
            gamma,
            sigma,
            objective: sol.objective,
            status: sol.status,
            iterations: sol.iterations,
        }
    }
}

impl RelaxedPoint {
    /// Max deviation of any binary from an exact 0/1 value.
    pub fn integrality_gap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for l in &self.lane {
            for v in l {
                worst = worst.max((v - v.round()).abs());
            }
        }
        for row in &self.gamma {
            for g in row {
                for v in g {
                    worst = worst.max((v - v.round()).abs());
                }
            }
        }
        worst
    }

    /// Rounds the relaxed binaries to a [`BinaryAssignment`]; requires the
    /// point to be integral within `tol`.
    pub fn to_assignment(&self, tol: f64) -> Result<BinaryAssignment, MiqpError> {
        let gap = self.integrality_gap();
        if gap > tol {
            return Err(MiqpError::NonIntegral(gap));
        }
        Ok(self.round_assignment())
    }

    /// Argmax rounding without an integrality requirement (used by the
    /// diving heuristic).
    pub fn round_assignment(&self) -> BinaryAssignment {
        let lane = self
            .lane
            .iter()
            .map(|dist| {
                let mut best = 0;
                for c in 1..3 {
                    if dist[c] > dist[best] {
                        best = c;
                    }
                }
                LaneChange::from_class(best).unwrap()
            })
            .collect();
        let regions = self
            .gamma
            .iter()
            .map(|row| {
                row.iter()
                    .map(|dist| {
                        let mut best = 0;
                        for c in 1..4 {
                            if dist[c] > dist[best] {
                                best = c;
                            }
                        }
                        Region::from_index(best).unwrap()
                    })
                    .collect()
            })
            .collect();
        BinaryAssignment { lane, regions }
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0_f64, |acc, &v| acc.max(v))
    }
}

/// Expert labels from an optimal solution: the integral binaries.
pub fn extract_labels(sol: &MiqpSolution) -> Result<BinaryAssignment, MiqpError> {
    if sol.status == MiqpStatus::Infeasible {
        return Err(MiqpError::AssignmentShape("infeasible solution".into()));
    }
    Ok(sol.binaries.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObstacleBounds, ObstacleTrack};
    use crate::oracle;
    use crate::qp::ocp::solve_ocp_qp;

    fn tiny_model(n: usize) -> ModelParams {
        ModelParams {
            horizon: n,
            ..ModelParams::default()
        }
    }

    fn track(d0: ObstacleBounds, v: f64, m: &ModelParams) -> ObstacleTrack {
        crate::model::predict_obstacle_bounds(&d0, v, m)
    }

    /// Ego driving alongside a same-speed vehicle in the left lane: the
    /// left/right strip regions stay contested over the horizon.
    fn contested_scenario(n: usize) -> (PlannerParams, MiqpWeights, ModelParams) {
        let m = tiny_model(n);
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![track(ObstacleBounds::new(4.0, -2.0, 5.9, 1.1), 10.0, &m)],
            lane0_ref: 0.0,
        };
        (pi, MiqpWeights::default(), m)
    }

    #[test]
    fn variable_counts() {
        let m = tiny_model(5);
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![],
            lane0_ref: 0.0,
        };
        let inst = build_miqp(&pi, &MiqpWeights::default(), &m).unwrap();
        let n = 5;
        assert_eq!(inst.variable_count(), 4 * (n + 1) + 2 * n + 2 * n + (n + 1));

        let m28 = tiny_model(28);
        let pi2 = PlannerParams {
            obstacles: vec![
                track(ObstacleBounds::new(40.0, 32.0, 2.4, -2.4), 5.0, &m28),
                track(ObstacleBounds::new(80.0, 72.0, 5.9, 1.1), 7.0, &m28),
            ],
            ..pi
        };
        let inst2 = build_miqp(&pi2, &MiqpWeights::default(), &m28).unwrap();
        let (gamma, lambda) = inst2.binary_count();
        assert_eq!(gamma, 4 * 2 * 29);
        assert_eq!(lambda, 56);
    }

    #[test]
    fn track_length_mismatch_rejected() {
        let m = tiny_model(5);
        let bad = ObstacleTrack {
            bounds: vec![ObstacleBounds::new(10.0, 2.0, 2.0, -2.0); 3],
            v_obs: 0.0,
        };
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![bad],
            lane0_ref: 0.0,
        };
        assert!(matches!(
            build_miqp(&pi, &MiqpWeights::default(), &m),
            Err(MiqpError::TrackLength { .. })
        ));
    }

    #[test]
    fn fixed_binaries_solve_as_plain_qp() {
        let (pi, w, m) = contested_scenario(3);
        let inst = build_miqp(&pi, &w, &m).unwrap();
        let a = BinaryAssignment {
            lane: vec![LaneChange::Keep; 3],
            regions: vec![vec![Region::Back]; 4],
        };
        let qp = inst.fix_binaries(&a).unwrap();
        let sol = solve_ocp_qp(&qp.ocp, None).unwrap();
        let fixing = NodeFixing::from_assignment(&a);
        let point = qp.extract(&inst, &fixing, &sol);
        assert_eq!(point.integrality_gap(), 0.0);
        assert_eq!(point.to_assignment(0.0).unwrap(), a);
    }

    #[test]
    fn empty_road_stays_in_lane() {
        let m = tiny_model(8);
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 12.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![],
            lane0_ref: 0.0,
        };
        let inst = build_miqp(&pi, &MiqpWeights::default(), &m).unwrap();
        let sol = solve_bnb(&inst, &BnbOptions::default()).unwrap();
        assert_eq!(sol.status, MiqpStatus::Optimal);
        assert!(sol.binaries.lane.iter().all(|l| *l == LaneChange::Keep));
        // cruising at the reference: only the small right-lane linear term
        assert!(sol.objective.abs() < 5.0, "J = {}", sol.objective);
    }

    #[test]
    fn off_road_obstacle_matches_obstacle_free() {
        let n = 4;
        let m = tiny_model(n);
        let base = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 13.0,
            n_lanes: 2,
            obstacles: vec![],
            lane0_ref: 0.0,
        };
        // wall beside the road spanning the whole reachable band: the right
        // strip region covers it at full margin, so nothing binds
        let far = PlannerParams {
            obstacles: vec![track(ObstacleBounds::new(100.0, -50.0, 24.0, 20.0), 0.0, &m)],
            ..base.clone()
        };
        let j_free = solve_bnb(&build_miqp(&base, &MiqpWeights::default(), &m).unwrap(), &BnbOptions::default())
            .unwrap()
            .objective;
        let j_far = solve_bnb(&build_miqp(&far, &MiqpWeights::default(), &m).unwrap(), &BnbOptions::default())
            .unwrap()
            .objective;
        assert!((j_free - j_far).abs() <= 1e-6 * (1.0 + j_free.abs()));
    }

    #[test]
    fn bnb_matches_enumeration_on_contested_instance() {
        let (pi, w, m) = contested_scenario(3);
        let inst = build_miqp(&pi, &w, &m).unwrap();
        let bb = solve_bnb(&inst, &BnbOptions::exact()).unwrap();
        assert_eq!(bb.status, MiqpStatus::Optimal);
        let oracle = oracle::enumerate_miqp(&pi, &w, &m).expect("feasible");
        let rel = (bb.objective - oracle.objective).abs() / (1.0 + oracle.objective.abs());
        assert!(
            rel <= 1e-6,
            "bb {} vs enumeration {} (rel {rel:.2e}, {} QPs)",
            bb.objective,
            oracle.objective,
            oracle.evaluated
        );
    }

    #[test]
    fn expert_is_permutation_invariant() {
        let n = 4;
        let m = tiny_model(n);
        let o1 = track(ObstacleBounds::new(4.0, -2.0, 5.9, 1.1), 10.0, &m);
        let o2 = track(ObstacleBounds::new(14.0, 8.0, 2.4, -2.4), 9.0, &m);
        let pi_a = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![o1.clone(), o2.clone()],
            lane0_ref: 0.0,
        };
        let pi_b = PlannerParams {
            obstacles: vec![o2, o1],
            ..pi_a.clone()
        };
        let w = MiqpWeights::default();
        let sol_a = solve_bnb(&build_miqp(&pi_a, &w, &m).unwrap(), &BnbOptions::exact()).unwrap();
        let sol_b = solve_bnb(&build_miqp(&pi_b, &w, &m).unwrap(), &BnbOptions::exact()).unwrap();
        assert!((sol_a.objective - sol_b.objective).abs() <= 1e-9 * (1.0 + sol_a.objective.abs()));

        // the permuted labels of run A must be optimal for run B
        let permuted = BinaryAssignment {
            lane: sol_a.binaries.lane.clone(),
            regions: sol_a
                .binaries
                .regions
                .iter()
                .map(|row| vec![row[1], row[0]])
                .collect(),
        };
        let inst_b = build_miqp(&pi_b, &w, &m).unwrap();
        let qp = inst_b.fix_binaries(&permuted).unwrap();
        let sol = solve_ocp_qp(&qp.ocp, None).unwrap();
        assert!((sol.objective - sol_b.objective).abs() <= 1e-6 * (1.0 + sol_b.objective.abs()));
    }

    #[test]
    fn branch_selection_rules() {
        // uniform gamma group wins
        let point = RelaxedPoint {
            states: vec![],
            controls: vec![],
            ref_lane: vec![],
            lane: vec![[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]],
            gamma: vec![vec![[0.25, 0.25, 0.25, 0.25]], vec![[1.0, 0.0, 0.0, 0.0]]],
            sigma: vec![vec![0.0], vec![0.0]],
            objective: 0.0,
            status: crate::qp::QpStatus::Optimal,
            iterations: 0,
        };
        assert_eq!(
            bnb::branch_select(&point, 1e-6).unwrap(),
            bnb::BranchDecision::Gamma { step: 0, obs: 0 }
        );

        // all integral -> error
        let integral = RelaxedPoint {
            lane: vec![[1.0, 0.0, 0.0]],
            gamma: vec![vec![[1.0, 0.0, 0.0, 0.0]]],
            ..point.clone()
        };
        assert!(matches!(
            bnb::branch_select(&integral, 1e-6),
            Err(MiqpError::IntegralNode)
        ));

        // fractional lambda only -> lambda branch
        let lam = RelaxedPoint {
            lane: vec![[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]],
            gamma: vec![vec![[1.0, 0.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0, 0.0]]],
            ..point
        };
        assert_eq!(
            bnb::branch_select(&lam, 1e-6).unwrap(),
            bnb::BranchDecision::Lambda { step: 1 }
        );
    }
}
