//! Fixed-binary soft QP: scores a binary prediction by solving the expert
//! problem with the binaries pinned and the slack upper bounds removed, so
//! a minimizer always exists. A prediction is collision-free exactly when
//! every slack stays at or below one.

use thiserror::Error;

use crate::miqp::{BinaryAssignment, MiqpError, MiqpInstance, NodeFixing};
use crate::model::{Control, EgoState};
use crate::qp::ocp::solve_ocp_qp_with;
use crate::qp::{IpmSettings, QpError, QpStatus};

/// Feasibility threshold on `sigma - 1`.
pub const SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SoftQpError {
    #[error(transparent)]
    Miqp(#[from] MiqpError),
    #[error("soft QP solve failed: {0}")]
    Solver(#[from] QpError),
    #[error("soft QP did not converge (status {0:?})")]
    NotConverged(QpStatus),
    #[error("degenerate expert objective {0} (must be positive)")]
    DegenerateExpert(f64),
}

#[derive(Debug, Clone)]
pub struct SoftQpSolution {
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    /// `sigma[i][j]`, nonnegative and unbounded above.
    pub sigma: Vec<Vec<f64>>,
    pub ref_lane: Vec<f64>,
    pub objective: f64,
    pub max_slack: f64,
    /// True exactly when `max_slack <= 1 + SLACK_TOL`.
    pub feasible: bool,
}

fn tight_settings() -> IpmSettings {
    IpmSettings::tight()
}

/// Solves the soft QP for a predicted assignment.
pub fn solve_soft_qp(
    inst: &MiqpInstance,
    pred: &BinaryAssignment,
) -> Result<SoftQpSolution, SoftQpError> {
    pred.check_shape(inst.horizon(), inst.n_obs)?;
    let fixing = NodeFixing::from_assignment(pred);
    let qp = inst.assemble(&fixing, None);
    let sol = solve_ocp_qp_with(&qp.ocp, None, &tight_settings())?;
    if sol.status != QpStatus::Optimal {
        return Err(SoftQpError::NotConverged(sol.status));
    }
    let point = qp.extract(inst, &fixing, &sol);
    let max_slack = point.max_sigma();
    Ok(SoftQpSolution {
        states: point.states,
        controls: point.controls,
        sigma: point.sigma,
        ref_lane: point.ref_lane,
        objective: point.objective,
        max_slack,
        feasible: max_slack <= 1.0 + SLACK_TOL,
    })
}

/// Relative cost excess of a feasible prediction over the expert optimum.
pub fn suboptimality(j_s: f64, j_e: f64) -> Result<f64, SoftQpError> {
    if j_e <= 0.0 {
        return Err(SoftQpError::DegenerateExpert(j_e));
    }
    Ok((j_s - j_e) / j_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_parameters, SampleRanges};
    use crate::miqp::{build_miqp, solve_bnb, BnbOptions, LaneChange, MiqpStatus, MiqpWeights};
    use crate::model::{
        predict_obstacle_bounds, EgoState, ModelParams, ObstacleBounds, PlannerParams, Region,
    };
    use crate::rng::substream;

    fn leader_scenario(n: usize) -> (PlannerParams, MiqpWeights, ModelParams) {
        let m = ModelParams {
            horizon: n,
            ..ModelParams::default()
        };
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 13.0, 0.0),
            v_ref: 15.0,
            n_lanes: 2,
            obstacles: vec![predict_obstacle_bounds(
                &ObstacleBounds::new(30.0, 20.0, 2.4, -2.4),
                9.0,
                &m,
            )],
            lane0_ref: 0.0,
        };
        (pi, MiqpWeights::default(), m)
    }

    #[test]
    fn expert_labels_satisfy_relaxation_property() {
        let (pi, w, m) = leader_scenario(12);
        let inst = build_miqp(&pi, &w, &m).unwrap();
        let expert = solve_bnb(&inst, &BnbOptions::default()).unwrap();
        assert_eq!(expert.status, MiqpStatus::Optimal);
        let soft = solve_soft_qp(&inst, &expert.binaries).unwrap();
        let tol = 1e-6 * (1.0 + expert.objective.abs());
        assert!(
            soft.objective <= expert.objective + tol,
            "J_s {} > J_e {}",
            soft.objective,
            expert.objective
        );
        assert!(soft.max_slack <= 1.0 + SLACK_TOL);
        assert!(soft.feasible);

        let rho = suboptimality(soft.objective, expert.objective).unwrap();
        assert!(rho >= -1e-9, "rho {rho}");
        assert!(rho <= 1e-6, "rho {rho}");
    }

    #[test]
    fn no_obstacles_is_always_feasible() {
        let m = ModelParams {
            horizon: 6,
            ..ModelParams::default()
        };
        let pi = PlannerParams {
            x0: EgoState::new(0.0, 0.0, 10.0, 0.0),
            v_ref: 12.0,
            n_lanes: 2,
            obstacles: vec![],
            lane0_ref: 0.0,
        };
        let inst = build_miqp(&pi, &MiqpWeights::default(), &m).unwrap();
        let pred = BinaryAssignment {
            lane: vec![LaneChange::Keep; 6],
            regions: vec![vec![]; 7],
        };
        let soft = solve_soft_qp(&inst, &pred).unwrap();
        assert!(soft.feasible);
        assert_eq!(soft.max_slack, 0.0);
    }

    /// Claiming the front region while stuck behind a slower leader forces
    /// the slack beyond one.
    #[test]
    fn wrong_region_is_flagged_infeasible() {
        let (pi, w, m) = leader_scenario(8);
        let inst = build_miqp(&pi, &w, &m).unwrap();
        let pred = BinaryAssignment {
            lane: vec![LaneChange::Keep; 8],
            regions: vec![vec![Region::Front]; 9],
        };
        let soft = solve_soft_qp(&inst, &pred).unwrap();
        assert!(!soft.feasible, "max_slack {}", soft.max_slack);
        assert!(soft.max_slack > 1.0);
    }

    /// feasible = true certifies the trajectory lies outside every outer
    /// rectangle (up to the slack tolerance), checked geometrically.
    #[test]
    fn feasible_flag_is_geometrically_sound() {
        let (pi, w, m) = leader_scenario(12);
        let inst = build_miqp(&pi, &w, &m).unwrap();
        let expert = solve_bnb(&inst, &BnbOptions::default()).unwrap();
        let soft = solve_soft_qp(&inst, &expert.binaries).unwrap();
        assert!(soft.feasible);
        for (i, x) in soft.states.iter().enumerate() {
            for (j, t) in pi.obstacles.iter().enumerate() {
                let d = &t.bounds[i];
                let region = expert.binaries.regions[i][j];
                let sigma = soft.sigma[i][j].clamp(0.0, 1.0);
                let sb = w.sigma_bar[region.index()];
                for (a, b) in crate::model::region_halfspaces(d, region) {
                    let lhs = a[0] * x.s + a[1] * x.n;
                    assert!(
                        lhs <= b + (sigma - 1.0) * sb + 1e-5,
                        "step {i} obstacle {j}: {lhs} vs {b}"
                    );
                }
                assert!(!d.contains(x.position()), "inside rectangle at step {i}");
            }
        }
    }

    #[test]
    fn suboptimality_arithmetic() {
        assert_eq!(suboptimality(1.0, 1.0).unwrap(), 0.0);
        assert!((suboptimality(1.1, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(suboptimality(1.0, 0.0).is_err());
        assert!(suboptimality(1.0, -2.0).is_err());
    }

    /// Permuting obstacles together with their label blocks leaves the
    /// objective unchanged.
    #[test]
    fn permutation_determinism() {
        let m = ModelParams {
            horizon: 10,
            ..ModelParams::default()
        };
        let ranges = SampleRanges {
            n_obs: (2, 3),
            obs_lon: (-40.0, 120.0),
            ..SampleRanges::default()
        };
        let mut checked = 0;
        for idx in 0..20u64 {
            let mut rng2 = substream(7, "softperm", idx);
            let Some(pi) = sample_parameters(&mut rng2, &ranges, &m) else {
                continue;
            };
            let w = MiqpWeights::default();
            let inst = build_miqp(&pi, &w, &m).unwrap();
            if inst.infeasible_root {
                continue;
            }
            let expert = solve_bnb(&inst, &BnbOptions::labeling()).unwrap();
            if expert.status != MiqpStatus::Optimal {
                continue;
            }
            let soft = solve_soft_qp(&inst, &expert.binaries).unwrap();

            // rotate the obstacle list by one
            let k = pi.obstacles.len();
            let perm: Vec<usize> = (0..k).map(|j| (j + 1) % k).collect();
            let pi2 = PlannerParams {
                obstacles: perm.iter().map(|&j| pi.obstacles[j].clone()).collect(),
                ..pi.clone()
            };
            let labels2 = BinaryAssignment {
                lane: expert.binaries.lane.clone(),
                regions: expert
                    .binaries
                    .regions
                    .iter()
                    .map(|row| perm.iter().map(|&j| row[j]).collect())
                    .collect(),
            };
            let inst2 = build_miqp(&pi2, &w, &m).unwrap();
            let soft2 = solve_soft_qp(&inst2, &labels2).unwrap();
            let rel = (soft.objective - soft2.objective).abs() / (1.0 + soft.objective.abs());
            assert!(rel <= 1e-9, "idx {idx}: rel {rel:.2e}");
            checked += 1;
        }
        assert!(checked >= 5, "only {checked} scenarios checked");
    }
}
