//! Stage-structured convex QP solver.
//!
//! Problems are given as a chain of stages coupled only by affine dynamics
//! `w_{i+1} = E_i w_i + F_i v_i + c_i` with a fixed initial state `w_0`.
//! Each stage carries local variables `v_i`, a convex quadratic cost over
//! `(w_i, v_i)`, two-sided general rows and bounds on `v_i`.
//!
//! The interior-point iteration is the same Mehrotra scheme as the dense
//! solver, but every Newton system is solved by a backward Riccati
//! recursion over the stages, so one iteration costs `O(N * stage_dim^3)`
//! instead of a cubic factorization of the full KKT matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{IpmSettings, QpError, QpStatus, StallDetector};

/// One stage of the structured QP.
///
/// Cost: `1/2 w'Qww w + w'Qwv v + 1/2 v'Qvv v + qw'w + qv'v`.
/// Rows:  `lo <= Cw w + Cv v <= hi` (either side may be infinite).
/// Bounds on `v` are folded into the row set internally.
#[derive(Debug, Clone)]
pub struct OcpStage {
    pub nv: usize,
    pub q_ww: DMatrix<f64>,
    pub q_wv: DMatrix<f64>,
    pub q_vv: DMatrix<f64>,
    pub q_w: DVector<f64>,
    pub q_v: DVector<f64>,
    pub c_w: DMatrix<f64>,
    pub c_v: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub v_lo: DVector<f64>,
    pub v_hi: DVector<f64>,
}

impl OcpStage {
    pub fn new(nw: usize, nv: usize) -> Self {
        Self {
            nv,
            q_ww: DMatrix::zeros(nw, nw),
            q_wv: DMatrix::zeros(nw, nv),
            q_vv: DMatrix::zeros(nv, nv),
            q_w: DVector::zeros(nw),
            q_v: DVector::zeros(nv),
            c_w: DMatrix::zeros(0, nw),
            c_v: DMatrix::zeros(0, nv),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
            v_lo: DVector::from_element(nv, f64::NEG_INFINITY),
            v_hi: DVector::from_element(nv, f64::INFINITY),
        }
    }
}

/// Affine dynamics `w_next = e w + f v + c`.
#[derive(Debug, Clone)]
pub struct OcpDynamics {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct OcpQp {
    pub nw: usize,
    pub w0: DVector<f64>,
    pub stages: Vec<OcpStage>,
    /// One entry per stage transition, `len = stages.len() - 1`.
    pub dynamics: Vec<OcpDynamics>,
    /// Constant cost offset added to the reported objective.
    pub cost_offset: f64,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// States per stage; `w[0]` equals the fixed initial state.
    pub w: Vec<DVector<f64>>,
    /// Stage-local variables.
    pub v: Vec<DVector<f64>>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

impl OcpQp {
    pub fn check_dims(&self) -> Result<(), QpError> {
        if self.dynamics.len() + 1 != self.stages.len() || self.stages.is_empty() {
            return Err(QpError::DimensionMismatch(format!(
                "{} stages, {} transitions",
                self.stages.len(),
                self.dynamics.len()
            )));
        }
        let nw = self.nw;
        if self.w0.len() != nw {
            return Err(QpError::DimensionMismatch("w0 length".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let nv = st.nv;
            let ok = st.q_ww.shape() == (nw, nw)
                && st.q_wv.shape() == (nw, nv)
                && st.q_vv.shape() == (nv, nv)
                && st.q_w.len() == nw
                && st.q_v.len() == nv
                && st.c_w.ncols() == nw
                && st.c_v.ncols() == nv
                && st.c_w.nrows() == st.c_v.nrows()
                && st.lo.len() == st.c_w.nrows()
                && st.hi.len() == st.c_w.nrows()
                && st.v_lo.len() == nv
                && st.v_hi.len() == nv;
            if !ok {
                return Err(QpError::DimensionMismatch(format!("stage {i}")));
            }
        }
        for (i, d) in self.dynamics.iter().enumerate() {
            let ok = d.e.shape() == (nw, nw)
                && d.f.shape() == (nw, self.stages[i].nv)
                && d.c.len() == nw;
            if !ok {
                return Err(QpError::DimensionMismatch(format!("dynamics {i}")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, w: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        let mut obj = self.cost_offset;
        for (i, st) in self.stages.iter().enumerate() {
            let wi = &w[i];
            let vi = &v[i];
            obj += 0.5 * (wi.transpose() * &st.q_ww * wi)[(0, 0)]
                + (wi.transpose() * &st.q_wv * vi)[(0, 0)]
                + 0.5 * (vi.transpose() * &st.q_vv * vi)[(0, 0)]
                + st.q_w.dot(wi)
                + st.q_v.dot(vi);
        }
        obj
    }
}

/// Per-stage row data after folding in variable bounds and equilibration.
struct StageRows {
    /// m x (nw + nv) coefficient matrix.
    c: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

/// Per-stage slack/dual state; entries for infinite sides stay at 1 and are
/// masked out of all reductions.
struct StageIneq {
    s_lo: DVector<f64>,
    z_lo: DVector<f64>,
    s_hi: DVector<f64>,
    z_hi: DVector<f64>,
    has_lo: Vec<bool>,
    has_hi: Vec<bool>,
}

struct Factorization {
    /// Cholesky of the input blocks M_vv per stage.
    l_vv: Vec<Option<Cholesky<f64, Dyn>>>,
    /// Feedback gains `K = -M_vv^{-1} M_wv'`.
    gain: Vec<DMatrix<f64>>,
    /// Value-function Hessians.
    p: Vec<DMatrix<f64>>,
    /// Cross blocks needed by the linear pass.
    m_wv: Vec<DMatrix<f64>>,
}

pub fn solve_ocp_qp(qp: &OcpQp, warm: Option<&OcpSolution>) -> Result<OcpSolution, QpError> {
    solve_ocp_qp_with(qp, warm, &IpmSettings::default())
}

pub fn solve_ocp_qp_with(
    qp: &OcpQp,
    warm: Option<&OcpSolution>,
    settings: &IpmSettings,
) -> Result<OcpSolution, QpError> {
    qp.check_dims()?;
    let ns = qp.stages.len();
    let nw = qp.nw;

    // fold bounds into rows; equilibrate general rows to unit max-norm
    let mut rows: Vec<StageRows> = Vec::with_capacity(ns);
    for st in &qp.stages {
        let m_gen = st.c_w.nrows();
        let n_bnd = (0..st.nv)
            .filter(|&j| st.v_lo[j].is_finite() || st.v_hi[j].is_finite())
            .count();
        let m = m_gen + n_bnd;
        let mut c = DMatrix::zeros(m, nw + st.nv);
        let mut lo = DVector::from_element(m, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(m, f64::INFINITY);
        for r in 0..m_gen {
            let mut norm: f64 = 0.0;
            for j in 0..nw {
                norm = norm.max(st.c_w[(r, j)].abs());
            }
            for j in 0..st.nv {
                norm = norm.max(st.c_v[(r, j)].abs());
            }
            let sc = 1.0 / norm.max(1e-12);
            for j in 0..nw {
                c[(r, j)] = st.c_w[(r, j)] * sc;
            }
            for j in 0..st.nv {
                c[(r, nw + j)] = st.c_v[(r, j)] * sc;
            }
            if st.lo[r].is_finite() {
                lo[r] = st.lo[r] * sc;
            }
            if st.hi[r].is_finite() {
                hi[r] = st.hi[r] * sc;
            }
        }
        let mut r = m_gen;
        for j in 0..st.nv {
            if st.v_lo[j].is_finite() || st.v_hi[j].is_finite() {
                c[(r, nw + j)] = 1.0;
                lo[r] = st.v_lo[j];
                hi[r] = st.v_hi[j];
                r += 1;
            }
        }
        rows.push(StageRows { c, lo, hi });
    }

    // initial primal point: warm start or dynamics rollout with clamped v
    let mut w: Vec<DVector<f64>>;
    let mut v: Vec<DVector<f64>>;
    match warm {
        Some(ws) if ws.w.len() == ns && ws.v.len() == ns => {
            w = ws.w.clone();
            v = ws.v.clone();
            w[0] = qp.w0.clone();
        }
        _ => {
            w = Vec::with_capacity(ns);
            v = Vec::with_capacity(ns);
            w.push(qp.w0.clone());
            for (i, st) in qp.stages.iter().enumerate() {
                let mut vi = DVector::zeros(st.nv);
                for j in 0..st.nv {
                    let lo = st.v_lo[j];
                    let hi = st.v_hi[j];
                    vi[j] = if lo.is_finite() && hi.is_finite() {
                        0.5 * (lo + hi)
                    } else if lo.is_finite() {
                        lo.max(0.0)
                    } else if hi.is_finite() {
                        hi.min(0.0)
                    } else {
                        0.0
                    };
                }
                v.push(vi);
                if i + 1 < ns {
                    let d = &qp.dynamics[i];
                    let next = &d.e * &w[i] + &d.f * &v[i] + &d.c;
                    w.push(next);
                }
            }
        }
    }

    // slack/dual state
    let mut ineq: Vec<StageIneq> = Vec::with_capacity(ns);
    let mut total_sides = 0usize;
    for (i, sr) in rows.iter().enumerate() {
        let m = sr.c.nrows();
        let t = &sr.c * stack_wv(&w[i], &v[i]);
        let mut si = StageIneq {
            s_lo: DVector::from_element(m, 1.0),
            z_lo: DVector::from_element(m, 1.0),
            s_hi: DVector::from_element(m, 1.0),
            z_hi: DVector::from_element(m, 1.0),
            has_lo: vec![false; m],
            has_hi: vec![false; m],
        };
        for r in 0..m {
            if sr.lo[r].is_finite() {
                si.has_lo[r] = true;
                si.s_lo[r] = (t[r] - sr.lo[r]).max(1.0);
                total_sides += 1;
            }
            if sr.hi[r].is_finite() {
                si.has_hi[r] = true;
                si.s_hi[r] = (sr.hi[r] - t[r]).max(1.0);
                total_sides += 1;
            }
        }
        ineq.push(si);
    }

    // dynamics multipliers (lambda[i] belongs to the constraint producing w_i)
    let mut lambda: Vec<DVector<f64>> = (0..ns).map(|_| DVector::zeros(nw)).collect();

    let mut scale_p: f64 = 1.0 + if qp.w0.is_empty() { 0.0 } else { qp.w0.amax() };
    for sr in &rows {
        for r in 0..sr.c.nrows() {
            if sr.lo[r].is_finite() {
                scale_p = scale_p.max(sr.lo[r].abs());
            }
            if sr.hi[r].is_finite() {
                scale_p = scale_p.max(sr.hi[r].abs());
            }
        }
    }
    for d in &qp.dynamics {
        if !d.c.is_empty() {
            scale_p = scale_p.max(d.c.amax());
        }
    }

    let mut stall = StallDetector::new(settings.infeas_tol, settings.stall_limit);
    let mut best: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> = None;
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut initialized = total_sides == 0;
    let mut gap_stall = 0usize;

    for iter in 0..settings.max_iter {
        iterations = iter + 1;

        // residuals
        let mut prim: f64 = 0.0;
        let mut mu_sum = 0.0;
        let mut t_vals: Vec<DVector<f64>> = Vec::with_capacity(ns);
        for i in 0..ns {
            let t = &rows[i].c * stack_wv(&w[i], &v[i]);
            for r in 0..t.len() {
                if ineq[i].has_lo[r] {
                    prim = prim.max(rows[i].lo[r] - t[r]);
                    mu_sum += ineq[i].s_lo[r] * ineq[i].z_lo[r];
                }
                if ineq[i].has_hi[r] {
                    prim = prim.max(t[r] - rows[i].hi[r]);
                    mu_sum += ineq[i].s_hi[r] * ineq[i].z_hi[r];
                }
            }
            t_vals.push(t);
        }
        let mut r_dyn: Vec<DVector<f64>> = Vec::with_capacity(ns.saturating_sub(1));
        for i in 0..ns - 1 {
            let d = &qp.dynamics[i];
            let res = &w[i + 1] - (&d.e * &w[i] + &d.f * &v[i] + &d.c);
            if !res.is_empty() {
                prim = prim.max(res.amax());
            }
            r_dyn.push(res);
        }
        let mu = if total_sides > 0 {
            mu_sum / total_sides as f64
        } else {
            0.0
        };

        // dual residual with current multipliers
        let mut dual: f64 = 0.0;
        let mut scale_d: f64 = 1.0;
        for i in 0..ns {
            let st = &qp.stages[i];
            let zdiff = zdiff_vec(&ineq[i]);
            let cz = rows[i].c.transpose() * &zdiff;
            let mut gw = &st.q_ww * &w[i] + &st.q_wv * &v[i] + &st.q_w + cz.rows(0, nw);
            let mut gv =
                st.q_wv.transpose() * &w[i] + &st.q_vv * &v[i] + &st.q_v + cz.rows(nw, st.nv);
            if i + 1 < ns {
                gw -= qp.dynamics[i].e.transpose() * &lambda[i + 1];
                gv -= qp.dynamics[i].f.transpose() * &lambda[i + 1];
            }
            if i > 0 {
                gw += &lambda[i];
                if !gw.is_empty() {
                    dual = dual.max(gw.amax());
                }
            }
            if !gv.is_empty() {
                dual = dual.max(gv.amax());
            }
            if !st.q_w.is_empty() {
                scale_d = scale_d.max(st.q_w.amax());
            }
            if !st.q_v.is_empty() {
                scale_d = scale_d.max(st.q_v.amax());
            }
        }

        let obj = qp.objective(&w, &v);
        let prim_rel = prim.max(0.0) / scale_p;
        let dual_rel = dual / scale_d;
        let gap = mu / (1.0 + obj.abs());
        if std::env::var_os("REDSPLAN_QP_TRACE").is_some() {
            eprintln!(
                "iter {iter}: prim {prim_rel:.3e} dual {dual_rel:.3e} gap {gap:.3e} obj {obj:.6e}"
            );
        }

        let feasible_now =
            prim_rel <= settings.feas_tol && dual_rel <= settings.feas_tol.max(1e-8);
        if feasible_now {
            match &best {
                Some((.., bg)) if *bg <= gap => {
                    if gap <= settings.accept_gap {
                        gap_stall += 1;
                    }
                }
                _ => {
                    best = Some((w.clone(), v.clone(), gap));
                    gap_stall = 0;
                }
            }
        }
        if feasible_now && gap <= settings.gap_tol {
            status = QpStatus::Optimal;
            break;
        }
        // accurate and no longer improving: accept the best iterate
        if gap_stall >= 4 {
            status = QpStatus::Optimal;
            break;
        }
        if total_sides == 0 && prim_rel <= settings.feas_tol && dual_rel <= 1e-9 {
            status = QpStatus::Optimal;
            break;
        }
        if initialized {
            let stalled = stall.update(prim_rel);
            let mut zmax: f64 = 0.0;
            for si in &ineq {
                for r in 0..si.s_lo.len() {
                    if si.has_lo[r] {
                        zmax = zmax.max(si.z_lo[r]);
                    }
                    if si.has_hi[r] {
                        zmax = zmax.max(si.z_hi[r]);
                    }
                }
            }
            if stall.verdict(stalled, gap, zmax) {
                status = QpStatus::Infeasible;
                break;
            }
        }

        // effective stage Hessians (barrier weights folded in) — factor once
        let mut q_hat: Vec<DMatrix<f64>> = Vec::with_capacity(ns);
        for i in 0..ns {
            let st = &qp.stages[i];
            let nz = nw + st.nv;
            let mut q = DMatrix::zeros(nz, nz);
            q.view_mut((0, 0), (nw, nw)).copy_from(&st.q_ww);
            q.view_mut((0, nw), (nw, st.nv)).copy_from(&st.q_wv);
            q.view_mut((nw, 0), (st.nv, nw))
                .copy_from(&st.q_wv.transpose());
            q.view_mut((nw, nw), (st.nv, st.nv)).copy_from(&st.q_vv);
            let c = &rows[i].c;
            for r in 0..c.nrows() {
                let mut d = 0.0;
                if ineq[i].has_lo[r] {
                    d += ineq[i].z_lo[r] * inv_s_eff(ineq[i].s_lo[r], ineq[i].z_lo[r]);
                }
                if ineq[i].has_hi[r] {
                    d += ineq[i].z_hi[r] * inv_s_eff(ineq[i].s_hi[r], ineq[i].z_hi[r]);
                }
                if d == 0.0 {
                    continue;
                }
                for a in 0..nz {
                    let ca = c[(r, a)];
                    if ca == 0.0 {
                        continue;
                    }
                    for b in a..nz {
                        let add = d * ca * c[(r, b)];
                        q[(a, b)] += add;
                        if a != b {
                            q[(b, a)] += add;
                        }
                    }
                }
            }
            for a in 0..nz {
                q[(a, a)] += settings.reg;
            }
            q_hat.push(q);
        }
        // factor; escalate the static regularization when a stage block is
        // numerically indefinite
        let fac = {
            let mut attempt = 0;
            loop {
                match factor(qp, &q_hat) {
                    Ok(f) => break f,
                    Err(e) => {
                        attempt += 1;
                        if attempt > 3 {
                            return Err(e);
                        }
                        let bump = settings.reg * 10f64.powi(3 * attempt);
                        for q in q_hat.iter_mut() {
                            for a in 0..q.nrows() {
                                q[(a, a)] += bump;
                            }
                        }
                    }
                }
            }
        };

        // stage gradients without multiplier terms
        let grad_base: Vec<DVector<f64>> = (0..ns)
            .map(|i| {
                let st = &qp.stages[i];
                let zdiff = zdiff_vec(&ineq[i]);
                let cz = rows[i].c.transpose() * &zdiff;
                let mut g = DVector::zeros(nw + st.nv);
                g.rows_mut(0, nw)
                    .copy_from(&(&st.q_ww * &w[i] + &st.q_wv * &v[i] + &st.q_w + cz.rows(0, nw)));
                g.rows_mut(nw, st.nv).copy_from(
                    &(st.q_wv.transpose() * &w[i]
                        + &st.q_vv * &v[i]
                        + &st.q_v
                        + cz.rows(nw, st.nv)),
                );
                g
            })
            .collect();

        // affine predictor
        let r_c_aff: Vec<(DVector<f64>, DVector<f64>)> = ineq
            .iter()
            .map(|si| {
                let m = si.s_lo.len();
                let mut lo = DVector::zeros(m);
                let mut hi = DVector::zeros(m);
                for r in 0..m {
                    if si.has_lo[r] {
                        lo[r] = si.s_lo[r] * si.z_lo[r];
                    }
                    if si.has_hi[r] {
                        hi[r] = si.s_hi[r] * si.z_hi[r];
                    }
                }
                (lo, hi)
            })
            .collect();

        let step_aff =
            linear_solve(qp, &rows, &ineq, &fac, &grad_base, &t_vals, &r_dyn, &r_c_aff);

        if !initialized {
            // Mehrotra starting point: shift slacks and duals by the affine
            // direction so the first real steps are well scaled
            initialized = true;
            for (si, st) in ineq.iter_mut().zip(&step_aff.per_stage) {
                for r in 0..si.s_lo.len() {
                    if si.has_lo[r] {
                        si.s_lo[r] = (si.s_lo[r] + st.ds_lo[r]).abs().max(0.1);
                        si.z_lo[r] = (si.z_lo[r] + st.dz_lo[r]).abs().max(0.1);
                    }
                    if si.has_hi[r] {
                        si.s_hi[r] = (si.s_hi[r] + st.ds_hi[r]).abs().max(0.1);
                        si.z_hi[r] = (si.z_hi[r] + st.dz_hi[r]).abs().max(0.1);
                    }
                }
            }
            continue;
        }

        // Mehrotra centering from the affine step
        let mu_target = if total_sides > 0 {
            let ap = slack_max_step(&ineq, &step_aff, true, 1.0);
            let ad = slack_max_step(&ineq, &step_aff, false, 1.0);
            let mut mu_aff = 0.0;
            for i in 0..ns {
                let si = &ineq[i];
                let st = &step_aff.per_stage[i];
                for r in 0..si.s_lo.len() {
                    if si.has_lo[r] {
                        mu_aff +=
                            (si.s_lo[r] + ap * st.ds_lo[r]) * (si.z_lo[r] + ad * st.dz_lo[r]);
                    }
                    if si.has_hi[r] {
                        mu_aff +=
                            (si.s_hi[r] + ap * st.ds_hi[r]) * (si.z_hi[r] + ad * st.dz_hi[r]);
                    }
                }
            }
            mu_aff /= total_sides as f64;
            let sigma = (mu_aff / mu.max(1e-300)).powi(3).clamp(1e-8, 0.8);
            sigma * mu
        } else {
            0.0
        };

        // corrector
        let r_c: Vec<(DVector<f64>, DVector<f64>)> = (0..ns)
            .map(|i| {
                let si = &ineq[i];
                let st = &step_aff.per_stage[i];
                let m = si.s_lo.len();
                let mut lo = DVector::zeros(m);
                let mut hi = DVector::zeros(m);
                for r in 0..m {
                    if si.has_lo[r] {
                        lo[r] = si.s_lo[r] * si.z_lo[r] + st.ds_lo[r] * st.dz_lo[r] - mu_target;
                    }
                    if si.has_hi[r] {
                        hi[r] = si.s_hi[r] * si.z_hi[r] + st.ds_hi[r] * st.dz_hi[r] - mu_target;
                    }
                }
                (lo, hi)
            })
            .collect();

        let step = linear_solve(qp, &rows, &ineq, &fac, &grad_base, &t_vals, &r_dyn, &r_c);

        let alpha = if total_sides > 0 {
            let tau = 0.995;
            slack_max_step(&ineq, &step, true, tau).min(slack_max_step(&ineq, &step, false, tau))
        } else {
            1.0
        };
        if std::env::var_os("REDSPLAN_QP_TRACE").is_some() {
            eprintln!("    alpha {alpha:.3e} mu_target {mu_target:.3e}");
        }

        for i in 0..ns {
            let st = &step.per_stage[i];
            if i > 0 {
                w[i] += alpha * &st.dw;
                let dl = &st.nu - &lambda[i];
                lambda[i] += alpha * dl;
            }
            v[i] += alpha * &st.dv;
            let si = &mut ineq[i];
            for r in 0..si.s_lo.len() {
                if si.has_lo[r] {
                    si.s_lo[r] = (si.s_lo[r] + alpha * st.ds_lo[r]).max(1e-300);
                    si.z_lo[r] = (si.z_lo[r] + alpha * st.dz_lo[r]).max(1e-300);
                }
                if si.has_hi[r] {
                    si.s_hi[r] = (si.s_hi[r] + alpha * st.ds_hi[r]).max(1e-300);
                    si.z_hi[r] = (si.z_hi[r] + alpha * st.dz_hi[r]).max(1e-300);
                }
            }
        }
    }

    if status == QpStatus::MaxIter {
        if let Some((bw, bv, bg)) = &best {
            if *bg <= 1e-8 {
                w = bw.clone();
                v = bv.clone();
                status = QpStatus::Optimal;
            }
        }
    } else if status == QpStatus::Optimal {
        if let Some((bw, bv, _)) = best {
            w = bw;
            v = bv;
        }
    }

    let objective = qp.objective(&w, &v);
    Ok(OcpSolution {
        w,
        v,
        objective,
        status,
        iterations,
    })
}

/// Reciprocal of the effective slack: the true slack floored so the
/// barrier weight `z / s_eff` stays within a numerically safe range. Using
/// it consistently in the weights, the right-hand side and the dual
/// recovery keeps every Newton step an exact solve of one linear system.
fn inv_s_eff(s: f64, z: f64) -> f64 {
    1.0 / s.max(z * 1e-10).max(1e-14)
}

fn stack_wv(w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(w.len() + v.len());
    out.rows_mut(0, w.len()).copy_from(w);
    out.rows_mut(w.len(), v.len()).copy_from(v);
    out
}

fn zdiff_vec(si: &StageIneq) -> DVector<f64> {
    let m = si.s_lo.len();
    let mut zd = DVector::zeros(m);
    for r in 0..m {
        let hi = if si.has_hi[r] { si.z_hi[r] } else { 0.0 };
        let lo = if si.has_lo[r] { si.z_lo[r] } else { 0.0 };
        zd[r] = hi - lo;
    }
    zd
}

/// Backward matrix recursion: factor the stage blocks once per iteration.
fn factor(qp: &OcpQp, q_hat: &[DMatrix<f64>]) -> Result<Factorization, QpError> {
    let ns = qp.stages.len();
    let nw = qp.nw;
    let mut l_vv: Vec<Option<Cholesky<f64, Dyn>>> = (0..ns).map(|_| None).collect();
    let mut gain = vec![DMatrix::zeros(0, 0); ns];
    let mut p = vec![DMatrix::zeros(nw, nw); ns];
    let mut m_wv_all = vec![DMatrix::zeros(0, 0); ns];

    let mut p_next: Option<DMatrix<f64>> = None;
    for i in (0..ns).rev() {
        let nv = qp.stages[i].nv;
        let q = &q_hat[i];
        let mut m_ww = q.view((0, 0), (nw, nw)).into_owned();
        let mut m_wv = q.view((0, nw), (nw, nv)).into_owned();
        let mut m_vv = q.view((nw, nw), (nv, nv)).into_owned();
        if let Some(pn) = &p_next {
            let d = &qp.dynamics[i];
            let pe = pn * &d.e;
            let pf = pn * &d.f;
            m_ww += d.e.transpose() * &pe;
            m_wv += d.e.transpose() * &pf;
            m_vv += d.f.transpose() * &pf;
        }
        if nv > 0 {
            let chol = Cholesky::new(m_vv)
                .ok_or_else(|| QpError::NotPsd(format!("stage {i} input block")))?;
            // K = -M_vv^{-1} M_wv'
            let mut k = m_wv.transpose();
            for c in 0..k.ncols() {
                let mut col = k.column(c).into_owned();
                chol.solve_mut(&mut col);
                k.set_column(c, &(-col));
            }
            p[i] = &m_ww + &m_wv * &k;
            gain[i] = k;
            l_vv[i] = Some(chol);
        } else {
            p[i] = m_ww;
            gain[i] = DMatrix::zeros(0, nw);
        }
        let pt = p[i].transpose();
        p[i] = 0.5 * (&p[i] + pt);
        m_wv_all[i] = m_wv;
        p_next = Some(p[i].clone());
    }
    Ok(Factorization {
        l_vv,
        gain,
        p,
        m_wv: m_wv_all,
    })
}

struct StageStep {
    dw: DVector<f64>,
    dv: DVector<f64>,
    ds_lo: DVector<f64>,
    dz_lo: DVector<f64>,
    ds_hi: DVector<f64>,
    dz_hi: DVector<f64>,
    /// New dynamics multiplier (for `w_i`, valid for i >= 1).
    nu: DVector<f64>,
}

struct NewtonStep {
    per_stage: Vec<StageStep>,
}

/// Linear backward/forward pass for one right-hand side.
#[allow(clippy::too_many_arguments)]
fn linear_solve(
    qp: &OcpQp,
    rows: &[StageRows],
    ineq: &[StageIneq],
    fac: &Factorization,
    grad_base: &[DVector<f64>],
    t_vals: &[DVector<f64>],
    r_dyn: &[DVector<f64>],
    r_c: &[(DVector<f64>, DVector<f64>)],
) -> NewtonStep {
    let ns = qp.stages.len();
    let nw = qp.nw;

    // effective gradients: grad_base + C' * corr
    let mut g_eff: Vec<DVector<f64>> = Vec::with_capacity(ns);
    for i in 0..ns {
        let si = &ineq[i];
        let sr = &rows[i];
        let m = si.s_lo.len();
        let mut corr = DVector::zeros(m);
        for r in 0..m {
            let mut c = 0.0;
            if si.has_lo[r] {
                let r_slo = t_vals[i][r] - sr.lo[r] - si.s_lo[r];
                c += (r_c[i].0[r] + si.z_lo[r] * r_slo) * inv_s_eff(si.s_lo[r], si.z_lo[r]);
            }
            if si.has_hi[r] {
                let r_shi = sr.hi[r] - t_vals[i][r] - si.s_hi[r];
                c -= (r_c[i].1[r] + si.z_hi[r] * r_shi) * inv_s_eff(si.s_hi[r], si.z_hi[r]);
            }
            corr[r] = c;
        }
        g_eff.push(&grad_base[i] + sr.c.transpose() * &corr);
    }

    // backward linear recursion
    let mut kvec: Vec<DVector<f64>> = vec![DVector::zeros(0); ns];
    let mut pvec: Vec<DVector<f64>> = vec![DVector::zeros(nw); ns];
    let mut p_next: Option<DVector<f64>> = None;
    for i in (0..ns).rev() {
        let nv = qp.stages[i].nv;
        let mut m_w = g_eff[i].rows(0, nw).into_owned();
        let mut m_v = g_eff[i].rows(nw, nv).into_owned();
        if let Some(pn) = &p_next {
            let d = &qp.dynamics[i];
            // dynamics offset of the Newton step: b_i = -r_dyn_i
            let pb = &fac.p[i + 1] * (-&r_dyn[i]) + pn;
            m_w += d.e.transpose() * &pb;
            m_v += d.f.transpose() * &pb;
        }
        if nv > 0 {
            let chol = fac.l_vv[i].as_ref().unwrap();
            let mut kv = m_v;
            chol.solve_mut(&mut kv);
            kv = -kv;
            pvec[i] = &m_w + &fac.m_wv[i] * &kv;
            kvec[i] = kv;
        } else {
            pvec[i] = m_w;
        }
        p_next = Some(pvec[i].clone());
    }

    // forward rollout
    let mut per_stage: Vec<StageStep> = Vec::with_capacity(ns);
    let mut dw = DVector::zeros(nw);
    for i in 0..ns {
        let nv = qp.stages[i].nv;
        let dv = if nv > 0 {
            &fac.gain[i] * &dw + &kvec[i]
        } else {
            DVector::zeros(0)
        };
        let dw_next = if i + 1 < ns {
            let d = &qp.dynamics[i];
            Some(&d.e * &dw + &d.f * &dv - &r_dyn[i])
        } else {
            None
        };

        let si = &ineq[i];
        let sr = &rows[i];
        let m = si.s_lo.len();
        let cd = &sr.c * stack_wv(&dw, &dv);
        let mut ds_lo = DVector::zeros(m);
        let mut dz_lo = DVector::zeros(m);
        let mut ds_hi = DVector::zeros(m);
        let mut dz_hi = DVector::zeros(m);
        for r in 0..m {
            if si.has_lo[r] {
                let r_slo = t_vals[i][r] - sr.lo[r] - si.s_lo[r];
                ds_lo[r] = cd[r] + r_slo;
                dz_lo[r] =
                    (-r_c[i].0[r] - si.z_lo[r] * ds_lo[r]) * inv_s_eff(si.s_lo[r], si.z_lo[r]);
            }
            if si.has_hi[r] {
                let r_shi = sr.hi[r] - t_vals[i][r] - si.s_hi[r];
                ds_hi[r] = r_shi - cd[r];
                dz_hi[r] =
                    (-r_c[i].1[r] - si.z_hi[r] * ds_hi[r]) * inv_s_eff(si.s_hi[r], si.z_hi[r]);
            }
        }

        // multiplier of the dynamics constraint producing w_i; the value
        // function gradient carries the opposite sign of the Lagrangian
        // convention used in the residuals
        let nu = if i > 0 {
            -(&fac.p[i] * &dw + &pvec[i])
        } else {
            DVector::zeros(nw)
        };

        per_stage.push(StageStep {
            dw: dw.clone(),
            dv,
            ds_lo,
            dz_lo,
            ds_hi,
            dz_hi,
            nu,
        });
        if let Some(next) = dw_next {
            dw = next;
        }
    }
    NewtonStep { per_stage }
}

/// Max feasible fraction-to-boundary step over slacks (`primal = true`) or
/// their duals.
fn slack_max_step(ineq: &[StageIneq], step: &NewtonStep, primal: bool, tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for (si, st) in ineq.iter().zip(&step.per_stage) {
        for r in 0..si.s_lo.len() {
            if si.has_lo[r] {
                let (val, dv) = if primal {
                    (si.s_lo[r], st.ds_lo[r])
                } else {
                    (si.z_lo[r], st.dz_lo[r])
                };
                if dv < 0.0 {
                    alpha = alpha.min(-tau * val / dv);
                }
            }
            if si.has_hi[r] {
                let (val, dv) = if primal {
                    (si.s_hi[r], st.ds_hi[r])
                } else {
                    (si.z_hi[r], st.dz_hi[r])
                };
                if dv < 0.0 {
                    alpha = alpha.min(-tau * val / dv);
                }
            }
        }
    }
    alpha.min(1.0)
}
