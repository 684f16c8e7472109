//! Fast self-verification suite: re-runs the independent oracle and
//! property checks on fresh random cases. Used by the `selftest`
//! subcommand; the full acceptance suite lives in the integration tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{sample_parameters, SampleRanges};
use crate::miqp::{build_miqp, solve_bnb, BnbOptions, MiqpStatus, MiqpWeights};
use crate::model::{discretize_dynamics, ModelParams, Region};
use crate::net::deepset::{reds_forward, RedsParams};
use crate::net::FeatureSplit;
use crate::oracle;
use crate::projector::{ellipse_params, sqp_project, FpSettings};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::rng::substream;
use crate::sim::{krauss_step, DriverParams};
use crate::soft_qp::{solve_soft_qp, SLACK_TOL};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

/// Runs every check; `seed` drives all randomness.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(dynamics_check());
    out.push(exterior_cover_check(seed));
    out.push(qp_oracle_check(seed));
    out.push(bnb_enumeration_check(seed));
    out.push(soft_qp_relaxation_check(seed));
    out.push(projector_check());
    out.push(equivariance_check(seed));
    out.push(gradient_check(seed));
    out.push(krauss_check());
    out
}

fn dynamics_check() -> CheckResult {
    let t_d = 0.2;
    let (a, b) = discretize_dynamics(t_d);
    let u = nalgebra::SVector::<f64, 2>::new(1.5, -0.5);
    let mut x = nalgebra::SVector::<f64, 4>::new(0.0, 0.0, 10.0, 0.0);
    for _ in 0..25 {
        x = a * x + b * u;
    }
    let t = 25.0 * t_d;
    let expect_s = 10.0 * t + 0.5 * 1.5 * t * t;
    let err = (x[0] - expect_s).abs();
    check(
        "dynamics-closed-form",
        err < 1e-12,
        format!("position error {err:.2e}"),
    )
}

fn exterior_cover_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, "selftest-cover", 0);
    let mut bad = 0;
    for _ in 0..20 {
        let s_b = rng.gen_range(-50.0..50.0);
        let d = crate::model::ObstacleBounds::new(
            s_b + rng.gen_range(1.0..30.0),
            s_b,
            rng.gen_range(0.5..6.0),
            rng.gen_range(-6.0..-0.5),
        );
        for _ in 0..2000 {
            let p = [rng.gen_range(-80.0..80.0), rng.gen_range(-10.0..10.0)];
            let outside = !d.contains(p);
            let covered = Region::ALL
                .iter()
                .any(|&k| crate::model::region_satisfied(&d, k, p, 0.0));
            if outside != covered {
                bad += 1;
            }
        }
    }
    check(
        "region-exterior-cover",
        bad == 0,
        format!("{bad} mismatches over 40000 points"),
    )
}

fn qp_oracle_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, "selftest-qp", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let n = 20;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let lb = DVector::from_element(n, -1.5);
        let ub = DVector::from_element(n, 1.5);
        let mut p = QpProblem::new(h.clone(), g.clone());
        p.lb = lb.clone();
        p.ub = ub.clone();
        let Ok(sol) = solve_qp(&p, None) else {
            return check("qp-projected-gradient", false, "solver error".into());
        };
        if sol.status != QpStatus::Optimal {
            return check("qp-projected-gradient", false, format!("{:?}", sol.status));
        }
        let (_, obj_ref) = oracle::projected_gradient_box_qp(&h, &g, &lb, &ub, 300_000);
        worst = worst.max((sol.objective - obj_ref).abs() / (1.0 + obj_ref.abs()));
    }
    check(
        "qp-projected-gradient",
        worst <= 1e-6,
        format!("worst relative gap {worst:.2e}"),
    )
}

fn bnb_enumeration_check(seed: u64) -> CheckResult {
    let m = ModelParams {
        horizon: 3,
        ..ModelParams::default()
    };
    let ranges = SampleRanges {
        n_obs: (0, 1),
        obs_lon: (-30.0, 60.0),
        lon_vel: (0.0, 20.0),
        lanes: (2, 2),
        ..SampleRanges::default()
    };
    let w = MiqpWeights::default();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut idx = 0u64;
    while compared < 5 && idx < 100 {
        let mut rng = substream(seed, "selftest-bnb", idx);
        idx += 1;
        let Some(pi) = sample_parameters(&mut rng, &ranges, &m) else {
            continue;
        };
        let inst = match build_miqp(&pi, &w, &m) {
            Ok(i) => i,
            Err(_) => continue,
        };
        if inst.infeasible_root {
            continue;
        }
        let Ok(bb) = solve_bnb(&inst, &BnbOptions::exact()) else {
            continue;
        };
        let reference = oracle::enumerate_miqp(&pi, &w, &m);
        match (bb.status, reference) {
            (MiqpStatus::Optimal, Some(r)) => {
                worst = worst.max((bb.objective - r.objective).abs() / (1.0 + r.objective.abs()));
                compared += 1;
            }
            (MiqpStatus::Infeasible, None) => {
                compared += 1;
            }
            _ => {
                return check(
                    "bnb-vs-enumeration",
                    false,
                    format!("status disagreement at sample {idx}"),
                );
            }
        }
    }
    check(
        "bnb-vs-enumeration",
        worst <= 1e-6 && compared >= 5,
        format!("{compared} instances, worst relative gap {worst:.2e}"),
    )
}

fn soft_qp_relaxation_check(seed: u64) -> CheckResult {
    let m = ModelParams {
        horizon: 10,
        ..ModelParams::default()
    };
    let ranges = SampleRanges {
        n_obs: (1, 2),
        ..SampleRanges::default()
    };
    let w = MiqpWeights::default();
    let mut ok = 0;
    let mut total = 0;
    let mut idx = 0u64;
    while total < 8 && idx < 100 {
        let mut rng = substream(seed, "selftest-soft", idx);
        idx += 1;
        let Some(pi) = sample_parameters(&mut rng, &ranges, &m) else {
            continue;
        };
        let Ok(inst) = build_miqp(&pi, &w, &m) else {
            continue;
        };
        if inst.infeasible_root {
            continue;
        }
        let Ok(expert) = solve_bnb(&inst, &BnbOptions::labeling()) else {
            continue;
        };
        if expert.status == MiqpStatus::Infeasible {
            continue;
        }
        total += 1;
        if let Ok(soft) = solve_soft_qp(&inst, &expert.binaries) {
            let relaxed = soft.objective <= expert.objective + 1e-6 * (1.0 + expert.objective.abs());
            let sane = soft.max_slack <= 1.0 + SLACK_TOL;
            if relaxed && sane {
                ok += 1;
            }
        }
    }
    check(
        "soft-qp-relaxation",
        ok == total && total >= 8,
        format!("{ok}/{total} instances satisfied the relaxation bound"),
    )
}

fn projector_check() -> CheckResult {
    let m = ModelParams {
        horizon: 16,
        ..ModelParams::default()
    };
    let rx: Vec<crate::model::EgoState> = (0..=16)
        .map(|i| crate::model::EgoState::new(i as f64 * 0.2 * 12.0, 0.0, 12.0, 0.0))
        .collect();
    let ru = vec![crate::model::Control::new(0.0, 0.0); 16];
    let e = match ellipse_params(&crate::model::ObstacleBounds::new(40.0, 30.0, 2.5, -2.5)) {
        Ok(e) => e,
        Err(err) => return check("projector-certifies", false, err.to_string()),
    };
    let ellipses = vec![vec![e]; 17];
    match sqp_project(&rx, &ru, &ellipses, &m, &FpSettings::default()) {
        Ok(sol) => {
            let j0 = sol.iterates[0].1;
            let monotone = sol
                .iterates
                .iter()
                .skip(1)
                .all(|(tr, sl)| sl + tr <= j0 + 1e-8 * (1.0 + j0));
            check(
                "projector-certifies",
                sol.certified && monotone && j0 > 0.0,
                format!(
                    "certified {} monotone {} initial slack {j0:.1}",
                    sol.certified, monotone
                ),
            )
        }
        Err(e) => check("projector-certifies", false, e.to_string()),
    }
}

fn equivariance_check(seed: u64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let params = RedsParams::new_recurrent(8, 2, seed ^ (trial + 1));
        let mut rng = substream(seed, "selftest-eqv", trial);
        let n_obs = 3;
        let f = FeatureSplit {
            eq: (0..n_obs)
                .map(|_| {
                    [
                        rng.gen_range(-80.0..80.0),
                        rng.gen_range(-100.0..60.0),
                        rng.gen_range(-2.0..6.0),
                        rng.gen_range(-6.0..2.0),
                        rng.gen_range(0.0..20.0),
                    ]
                })
                .collect(),
            us: [0.0, 1.0, 12.0, 0.0, 15.0, 2.0],
        };
        let Ok(base) = reds_forward(&params, &f, 6) else {
            return check("equivariance", false, "forward failed".into());
        };
        let perm = [1usize, 2, 0];
        let pf = FeatureSplit {
            eq: perm.iter().map(|&j| f.eq[j]).collect(),
            us: f.us,
        };
        let Ok(pred) = reds_forward(&params, &pf, 6) else {
            return check("equivariance", false, "forward failed".into());
        };
        for t in 0..=6 {
            for (slot, &orig) in perm.iter().enumerate() {
                for k in 0..4 {
                    worst = worst.max(
                        (pred.obstacle_logits[t][slot][k] - base.obstacle_logits[t][orig][k])
                            .abs(),
                    );
                }
            }
        }
        for t in 0..6 {
            for k in 0..3 {
                worst = worst.max((pred.lane_logits[t][k] - base.lane_logits[t][k]).abs());
            }
        }
    }
    check(
        "equivariance",
        worst <= 1e-10,
        format!("worst deviation {worst:.2e}"),
    )
}

fn gradient_check(seed: u64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..2u64 {
        let mut params = RedsParams::new_recurrent(6, 2, seed ^ (77 + trial));
        let mut rng = substream(seed, "selftest-grad", trial);
        let feats = vec![FeatureSplit {
            eq: vec![[
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-60.0..40.0),
                3.0,
                -1.0,
                10.0,
            ]],
            us: [0.0, 0.5, 10.0, 0.0, 15.0, 2.0],
        }];
        let horizon = 3;
        let labels = vec![crate::miqp::BinaryAssignment {
            lane: vec![
                crate::miqp::LaneChange::Keep,
                crate::miqp::LaneChange::Up,
                crate::miqp::LaneChange::Keep,
            ],
            regions: (0..=horizon)
                .map(|t| vec![Region::from_index(t % 4).unwrap()])
                .collect(),
        }];
        let label_refs: Vec<&crate::miqp::BinaryAssignment> = labels.iter().collect();
        let Ok((_, grads)) = crate::net::loss_and_grads(&params, &feats, &label_refs, horizon)
        else {
            return check("gradient-fd", false, "loss failed".into());
        };
        let analytic = grads.flatten();
        let flat = params.flatten();
        let fd = oracle::fd_gradient(
            |v| {
                let mut p2 = params.clone();
                p2.assign(v);
                crate::net::loss_and_grads(&p2, &feats, &label_refs, horizon)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &flat,
            1e-5,
        );
        params.assign(&flat);
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, f) in analytic.iter().zip(&fd) {
            num += (a - f) * (a - f);
            den += f * f;
        }
        worst = worst.max((num / den.max(1e-30)).sqrt());
    }
    check(
        "gradient-fd",
        worst < 1e-4,
        format!("worst relative error {worst:.2e}"),
    )
}

fn krauss_check() -> CheckResult {
    let d = DriverParams {
        b_decel: 5.0,
        tau: 0.2,
        a_max: 2.0,
        imperfection: 0.0,
        v_max: 30.0,
    };
    let v = krauss_step(30.0, &d, 20.0, 10.0, 0.1, 0.0);
    let expect = -1.0 + 301.0_f64.sqrt();
    check(
        "krauss-safe-velocity",
        (v - expect).abs() < 1e-9,
        format!("{v:.6} vs {expect:.6}"),
    )
}
