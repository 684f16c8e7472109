//! Ablation baselines without set structure: a feed-forward network on the
//! fully flattened problem parameters and a recurrent network on padded
//! per-step features. Both require a fixed maximum obstacle count; the
//! feed-forward variant is additionally bound to its training horizon.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy_row, relu, relu_backward, Linear, LinearGrad, LstmCell, LstmGrad};
use super::{Arch, NetError, Normalization, Prediction};
use crate::miqp::BinaryAssignment;
use crate::model::PlannerParams;
use crate::rng::substream;

/// Per obstacle slot and step: four bounds plus the velocity.
pub const LSTM_LOOKAHEAD_FEATURES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfParams {
    pub n_obs_max: usize,
    pub horizon: usize,
    pub norm: Normalization,
    pub seed: u64,
    pub hidden: Vec<Linear>,
    pub head: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    pub n_obs_max: usize,
    pub norm: Normalization,
    pub seed: u64,
    pub input_net: Vec<Linear>,
    pub cell: LstmCell,
    pub output_net: Vec<Linear>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaselineParams {
    FeedForward(FfParams),
    Lstm(LstmParams),
}

impl BaselineParams {
    pub fn arch(&self) -> Arch {
        match self {
            BaselineParams::FeedForward(_) => Arch::FeedForward,
            BaselineParams::Lstm(_) => Arch::Lstm,
        }
    }

    pub fn n_obs_max(&self) -> usize {
        match self {
            BaselineParams::FeedForward(p) => p.n_obs_max,
            BaselineParams::Lstm(p) => p.n_obs_max,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BaselineParams::FeedForward(p) => {
                p.hidden.iter().map(Linear::param_count).sum::<usize>() + p.head.param_count()
            }
            BaselineParams::Lstm(p) => {
                p.input_net.iter().map(Linear::param_count).sum::<usize>()
                    + p.cell.param_count()
                    + p.output_net.iter().map(Linear::param_count).sum::<usize>()
            }
        }
    }
}

/// Feed-forward baseline with `n_hidden` layers of `width` neurons; the
/// input is the padded flattened parameter vector (all obstacle bounds
/// along the horizon), the head emits every group's logits at once.
pub fn new_ff(
    n_obs_max: usize,
    horizon: usize,
    n_hidden: usize,
    width: usize,
    seed: u64,
) -> FfParams {
    let mut rng = substream(seed, "ff-init", 0);
    let n_in = 6 + n_obs_max * ((horizon + 1) * 4 + 1);
    let n_out = (horizon + 1) * n_obs_max * 4 + horizon * 3;
    let mut hidden = Vec::with_capacity(n_hidden);
    let mut prev = n_in;
    for _ in 0..n_hidden {
        hidden.push(Linear::new(prev, width, &mut rng));
        prev = width;
    }
    FfParams {
        n_obs_max,
        horizon,
        norm: Normalization::default(),
        seed,
        hidden,
        head: Linear::new(prev, n_out, &mut rng),
    }
}

/// Recurrent baseline: per-step padded features through an input network,
/// one recurrent cell and an output network emitting all slot logits.
pub fn new_lstm(n_obs_max: usize, width: usize, seed: u64) -> LstmParams {
    let mut rng = substream(seed, "lstm-init", 0);
    let n_in = 6 + n_obs_max * LSTM_LOOKAHEAD_FEATURES;
    let n_out = n_obs_max * 4 + 3;
    LstmParams {
        n_obs_max,
        norm: Normalization::default(),
        seed,
        input_net: vec![
            Linear::new(n_in, width, &mut rng),
            Linear::new(width, width, &mut rng),
        ],
        cell: LstmCell::new(width, width, &mut rng),
        output_net: vec![
            Linear::new(width, width, &mut rng),
            Linear::new(width, n_out, &mut rng),
        ],
    }
}

/// Unstructured feature prefix shared by both baselines.
fn us_features(pi: &PlannerParams, norm: &Normalization) -> [f64; 6] {
    [
        0.0,
        pi.x0.n * norm.pos_scale,
        pi.x0.v_s * norm.vel_scale,
        pi.x0.v_n * norm.vel_scale,
        pi.v_ref * norm.vel_scale,
        pi.n_lanes as f64,
    ]
}

/// Flattened static input of the feed-forward baseline.
pub fn ff_input(pi: &PlannerParams, p: &FfParams) -> Result<Vec<f64>, NetError> {
    if pi.obstacles.len() > p.n_obs_max {
        return Err(NetError::TooManyObstacles {
            arch: Arch::FeedForward,
            max: p.n_obs_max,
            got: pi.obstacles.len(),
        });
    }
    let first = pi.obstacles.first().map(|t| t.bounds.len());
    if let Some(len) = first {
        if len != p.horizon + 1 {
            return Err(NetError::HorizonMismatch {
                arch: Arch::FeedForward,
                trained: p.horizon,
                got: len - 1,
            });
        }
    }
    let mut v = Vec::with_capacity(6 + p.n_obs_max * ((p.horizon + 1) * 4 + 1));
    v.extend(us_features(pi, &p.norm));
    for slot in 0..p.n_obs_max {
        match pi.obstacles.get(slot) {
            Some(t) => {
                for d in &t.bounds {
                    v.push((d.s_f - pi.x0.s) * p.norm.pos_scale);
                    v.push((d.s_b - pi.x0.s) * p.norm.pos_scale);
                    v.push(d.n_l * p.norm.pos_scale);
                    v.push(d.n_r * p.norm.pos_scale);
                }
                v.push(t.v_obs * p.norm.vel_scale);
            }
            None => v.extend(std::iter::repeat(0.0).take((p.horizon + 1) * 4 + 1)),
        }
    }
    Ok(v)
}

/// Per-step inputs of the recurrent baseline, one row per step 0..=N.
pub fn lstm_inputs(
    pi: &PlannerParams,
    p: &LstmParams,
    horizon: usize,
) -> Result<Vec<Vec<f64>>, NetError> {
    if pi.obstacles.len() > p.n_obs_max {
        return Err(NetError::TooManyObstacles {
            arch: Arch::Lstm,
            max: p.n_obs_max,
            got: pi.obstacles.len(),
        });
    }
    let us = us_features(pi, &p.norm);
    let mut steps = Vec::with_capacity(horizon + 1);
    for i in 0..=horizon {
        let mut v = Vec::with_capacity(6 + p.n_obs_max * LSTM_LOOKAHEAD_FEATURES);
        v.extend(us);
        for slot in 0..p.n_obs_max {
            match pi.obstacles.get(slot) {
                Some(t) => {
                    let d = &t.bounds[i];
                    v.push((d.s_f - pi.x0.s) * p.norm.pos_scale);
                    v.push((d.s_b - pi.x0.s) * p.norm.pos_scale);
                    v.push(d.n_l * p.norm.pos_scale);
                    v.push(d.n_r * p.norm.pos_scale);
                    v.push(t.v_obs * p.norm.vel_scale);
                }
                None => v.extend(std::iter::repeat(0.0).take(LSTM_LOOKAHEAD_FEATURES)),
            }
        }
        steps.push(v);
    }
    Ok(steps)
}

pub(crate) struct FfCache {
    pub input: DMatrix<f64>,
    pub post: Vec<DMatrix<f64>>,
    pub out: DMatrix<f64>,
}

pub(crate) fn ff_forward_batch(p: &FfParams, inputs: &DMatrix<f64>) -> FfCache {
    let mut x = inputs.clone();
    let mut post = Vec::with_capacity(p.hidden.len());
    for lin in &p.hidden {
        x = relu(&lin.forward(&x));
        post.push(x.clone());
    }
    let out = p.head.forward(&x);
    FfCache {
        input: inputs.clone(),
        post,
        out,
    }
}

pub(crate) struct LstmBatchCache {
    pub inputs: Vec<DMatrix<f64>>,
    pub in_posts: Vec<Vec<DMatrix<f64>>>,
    pub steps: Vec<super::layers::LstmStepCache>,
    pub hs: Vec<DMatrix<f64>>,
    pub out_posts: Vec<Vec<DMatrix<f64>>>,
    pub outs: Vec<DMatrix<f64>>,
}

pub(crate) fn lstm_forward_batch(p: &LstmParams, step_inputs: &[DMatrix<f64>]) -> LstmBatchCache {
    let rows = step_inputs[0].nrows();
    let h_dim = p.cell.hidden();
    let mut h = DMatrix::zeros(rows, h_dim);
    let mut c = DMatrix::zeros(rows, h_dim);
    let mut cache = LstmBatchCache {
        inputs: step_inputs.to_vec(),
        in_posts: Vec::new(),
        steps: Vec::new(),
        hs: Vec::new(),
        out_posts: Vec::new(),
        outs: Vec::new(),
    };
    for x_raw in step_inputs {
        let mut x = x_raw.clone();
        let mut posts = Vec::new();
        for (k, lin) in p.input_net.iter().enumerate() {
            x = lin.forward(&x);
            if k + 1 < p.input_net.len() {
                x = relu(&x);
            }
            posts.push(x.clone());
        }
        cache.in_posts.push(posts);
        let (h2, c2, sc) = p.cell.step(&x, &h, &c);
        cache.steps.push(sc);
        cache.hs.push(h2.clone());
        h = h2;
        c = c2;
        let mut y = cache.hs.last().unwrap().clone();
        let mut oposts = Vec::new();
        for (k, lin) in p.output_net.iter().enumerate() {
            y = lin.forward(&y);
            if k + 1 < p.output_net.len() {
                y = relu(&y);
            }
            oposts.push(y.clone());
        }
        cache.out_posts.push(oposts);
        cache.outs.push(y);
    }
    cache
}

/// Evaluates a baseline on one scenario; logits are truncated to the real
/// obstacle count.
pub fn baseline_forward(
    params: &BaselineParams,
    pi: &PlannerParams,
    horizon: usize,
) -> Result<Prediction, NetError> {
    let n_obs = pi.obstacles.len();
    match params {
        BaselineParams::FeedForward(p) => {
            if horizon != p.horizon {
                return Err(NetError::HorizonMismatch {
                    arch: Arch::FeedForward,
                    trained: p.horizon,
                    got: horizon,
                });
            }
            let input = ff_input(pi, p)?;
            let x = DMatrix::from_fn(1, input.len(), |_, c| input[c]);
            let cache = ff_forward_batch(p, &x);
            let out = &cache.out;
            let mut obstacle_logits = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                obstacle_logits.push(
                    (0..n_obs)
                        .map(|j| {
                            let base = (t * p.n_obs_max + j) * 4;
                            [
                                out[(0, base)],
                                out[(0, base + 1)],
                                out[(0, base + 2)],
                                out[(0, base + 3)],
                            ]
                        })
                        .collect(),
                );
            }
            let lane_base = (horizon + 1) * p.n_obs_max * 4;
            let lane_logits = (0..horizon)
                .map(|t| {
                    [
                        out[(0, lane_base + 3 * t)],
                        out[(0, lane_base + 3 * t + 1)],
                        out[(0, lane_base + 3 * t + 2)],
                    ]
                })
                .collect();
            Ok(Prediction {
                obstacle_logits,
                lane_logits,
            })
        }
        BaselineParams::Lstm(p) => {
            let steps = lstm_inputs(pi, p, horizon)?;
            let mats: Vec<DMatrix<f64>> = steps
                .iter()
                .map(|v| DMatrix::from_fn(1, v.len(), |_, c| v[c]))
                .collect();
            let cache = lstm_forward_batch(p, &mats);
            let mut obstacle_logits = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                let out = &cache.outs[t];
                obstacle_logits.push(
                    (0..n_obs)
                        .map(|j| {
                            [
                                out[(0, 4 * j)],
                                out[(0, 4 * j + 1)],
                                out[(0, 4 * j + 2)],
                                out[(0, 4 * j + 3)],
                            ]
                        })
                        .collect(),
                );
            }
            let lane_off = p.n_obs_max * 4;
            let lane_logits = (0..horizon)
                .map(|t| {
                    let out = &cache.outs[t];
                    [
                        out[(0, lane_off)],
                        out[(0, lane_off + 1)],
                        out[(0, lane_off + 2)],
                    ]
                })
                .collect();
            Ok(Prediction {
                obstacle_logits,
                lane_logits,
            })
        }
    }
}

/// Gradient mirrors.
pub struct FfGrads {
    pub hidden: Vec<LinearGrad>,
    pub head: LinearGrad,
}

pub struct LstmBaselineGrads {
    pub input_net: Vec<LinearGrad>,
    pub cell: LstmGrad,
    pub output_net: Vec<LinearGrad>,
}

pub enum BaselineGrads {
    FeedForward(FfGrads),
    Lstm(LstmBaselineGrads),
}

impl BaselineGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        let push = |v: &mut Vec<f64>, g: &LinearGrad| {
            v.extend(g.w.iter());
            v.extend(g.b.iter());
        };
        match self {
            BaselineGrads::FeedForward(g) => {
                for l in &g.hidden {
                    push(&mut v, l);
                }
                push(&mut v, &g.head);
            }
            BaselineGrads::Lstm(g) => {
                for l in &g.input_net {
                    push(&mut v, l);
                }
                v.extend(g.cell.w_x.iter());
                v.extend(g.cell.w_h.iter());
                v.extend(g.cell.b.iter());
                for l in &g.output_net {
                    push(&mut v, l);
                }
            }
        }
        v
    }
}

impl BaselineParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        let push = |v: &mut Vec<f64>, l: &Linear| {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        };
        match self {
            BaselineParams::FeedForward(p) => {
                for l in &p.hidden {
                    push(&mut v, l);
                }
                push(&mut v, &p.head);
            }
            BaselineParams::Lstm(p) => {
                for l in &p.input_net {
                    push(&mut v, l);
                }
                v.extend(p.cell.w_x.iter());
                v.extend(p.cell.w_h.iter());
                v.extend(p.cell.b.iter());
                for l in &p.output_net {
                    push(&mut v, l);
                }
            }
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        let take = |l: &mut Linear, it: &mut std::slice::Iter<f64>| {
            for e in l.w.iter_mut() {
                *e = *it.next().unwrap();
            }
            for e in l.b.iter_mut() {
                *e = *it.next().unwrap();
            }
        };
        match self {
            BaselineParams::FeedForward(p) => {
                for l in &mut p.hidden {
                    take(l, &mut it);
                }
                take(&mut p.head, &mut it);
            }
            BaselineParams::Lstm(p) => {
                for l in &mut p.input_net {
                    take(l, &mut it);
                }
                for e in p.cell.w_x.iter_mut() {
                    *e = *it.next().unwrap();
                }
                for e in p.cell.w_h.iter_mut() {
                    *e = *it.next().unwrap();
                }
                for e in p.cell.b.iter_mut() {
                    *e = *it.next().unwrap();
                }
                for l in &mut p.output_net {
                    take(l, &mut it);
                }
            }
        }
        assert!(it.next().is_none(), "flat vector length mismatch");
    }

    pub fn zero_grads(&self) -> BaselineGrads {
        match self {
            BaselineParams::FeedForward(p) => BaselineGrads::FeedForward(FfGrads {
                hidden: p.hidden.iter().map(Linear::zeros_like).collect(),
                head: p.head.zeros_like(),
            }),
            BaselineParams::Lstm(p) => BaselineGrads::Lstm(LstmBaselineGrads {
                input_net: p.input_net.iter().map(Linear::zeros_like).collect(),
                cell: p.cell.zeros_like(),
                output_net: p.output_net.iter().map(Linear::zeros_like).collect(),
            }),
        }
    }
}

/// Batched cross-entropy loss and gradients for a baseline.
/// `scenarios` and `labels` are parallel; every scenario must share the
/// horizon.
pub(crate) fn baseline_loss_and_grads(
    params: &BaselineParams,
    scenarios: &[&PlannerParams],
    labels: &[&BinaryAssignment],
    horizon: usize,
) -> Result<(f64, BaselineGrads, usize), NetError> {
    let batch = scenarios.len();
    if batch == 0 {
        return Err(NetError::EmptyDataset);
    }
    let mut total_groups = 0usize;
    for (pi, lab) in scenarios.iter().zip(labels) {
        total_groups += horizon + (horizon + 1) * pi.obstacles.len();
        if lab.lane.len() != horizon {
            return Err(NetError::Shape("label horizon".into()));
        }
    }
    let scale = 1.0 / total_groups as f64;

    match params {
        BaselineParams::FeedForward(p) => {
            let n_in = 6 + p.n_obs_max * ((p.horizon + 1) * 4 + 1);
            let mut x = DMatrix::zeros(batch, n_in);
            for (b, pi) in scenarios.iter().enumerate() {
                let v = ff_input(pi, p)?;
                for (c, val) in v.iter().enumerate() {
                    x[(b, c)] = *val;
                }
            }
            let cache = ff_forward_batch(p, &x);
            let mut loss = 0.0;
            let mut g_out = DMatrix::zeros(batch, cache.out.ncols());
            let lane_base = (p.horizon + 1) * p.n_obs_max * 4;
            for (b, (pi, lab)) in scenarios.iter().zip(labels).enumerate() {
                for t in 0..=horizon {
                    for j in 0..pi.obstacles.len() {
                        let base = (t * p.n_obs_max + j) * 4;
                        let logits = [
                            cache.out[(b, base)],
                            cache.out[(b, base + 1)],
                            cache.out[(b, base + 2)],
                            cache.out[(b, base + 3)],
                        ];
                        let (l, g) = cross_entropy_row(&logits, lab.regions[t][j].index());
                        loss += l * scale;
                        for k in 0..4 {
                            g_out[(b, base + k)] = g[k] * scale;
                        }
                    }
                }
                for t in 0..horizon {
                    let base = lane_base + 3 * t;
                    let logits = [
                        cache.out[(b, base)],
                        cache.out[(b, base + 1)],
                        cache.out[(b, base + 2)],
                    ];
                    let (l, g) = cross_entropy_row(&logits, lab.lane[t].class());
                    loss += l * scale;
                    for k in 0..3 {
                        g_out[(b, base + k)] = g[k] * scale;
                    }
                }
            }
            let mut grads = match params.zero_grads() {
                BaselineGrads::FeedForward(g) => g,
                _ => unreachable!(),
            };
            let last_post = cache.post.last().unwrap_or(&cache.input);
            let mut g = p.head.backward(last_post, &g_out, &mut grads.head);
            for k in (0..p.hidden.len()).rev() {
                let input = if k == 0 { &cache.input } else { &cache.post[k - 1] };
                let g_pre = relu_backward(&cache.post[k], &g);
                g = p.hidden[k].backward(input, &g_pre, &mut grads.hidden[k]);
            }
            Ok((loss, BaselineGrads::FeedForward(grads), total_groups))
        }
        BaselineParams::Lstm(p) => {
            let n_in = 6 + p.n_obs_max * LSTM_LOOKAHEAD_FEATURES;
            let mut step_mats: Vec<DMatrix<f64>> =
                (0..=horizon).map(|_| DMatrix::zeros(batch, n_in)).collect();
            for (b, pi) in scenarios.iter().enumerate() {
                let steps = lstm_inputs(pi, p, horizon)?;
                for (t, v) in steps.iter().enumerate() {
                    for (c, val) in v.iter().enumerate() {
                        step_mats[t][(b, c)] = *val;
                    }
                }
            }
            let cache = lstm_forward_batch(p, &step_mats);
            let mut loss = 0.0;
            let lane_off = p.n_obs_max * 4;
            let mut g_outs: Vec<DMatrix<f64>> = cache
                .outs
                .iter()
                .map(|o| DMatrix::zeros(batch, o.ncols()))
                .collect();
            for (b, (pi, lab)) in scenarios.iter().zip(labels).enumerate() {
                for t in 0..=horizon {
                    for j in 0..pi.obstacles.len() {
                        let logits = [
                            cache.outs[t][(b, 4 * j)],
                            cache.outs[t][(b, 4 * j + 1)],
                            cache.outs[t][(b, 4 * j + 2)],
                            cache.outs[t][(b, 4 * j + 3)],
                        ];
                        let (l, g) = cross_entropy_row(&logits, lab.regions[t][j].index());
                        loss += l * scale;
                        for k in 0..4 {
                            g_outs[t][(b, 4 * j + k)] = g[k] * scale;
                        }
                    }
                }
                for t in 0..horizon {
                    let logits = [
                        cache.outs[t][(b, lane_off)],
                        cache.outs[t][(b, lane_off + 1)],
                        cache.outs[t][(b, lane_off + 2)],
                    ];
                    let (l, g) = cross_entropy_row(&logits, lab.lane[t].class());
                    loss += l * scale;
                    for k in 0..3 {
                        g_outs[t][(b, lane_off + k)] = g[k] * scale;
                    }
                }
            }

            let mut grads = match params.zero_grads() {
                BaselineGrads::Lstm(g) => g,
                _ => unreachable!(),
            };
            let h_dim = p.cell.hidden();
            let mut gh = DMatrix::zeros(batch, h_dim);
            let mut gc = DMatrix::zeros(batch, h_dim);
            for t in (0..=horizon).rev() {
                // output net backward
                let mut g = g_outs[t].clone();
                for k in (0..p.output_net.len()).rev() {
                    let input = if k == 0 {
                        &cache.hs[t]
                    } else {
                        &cache.out_posts[t][k - 1]
                    };
                    if k + 1 < p.output_net.len() {
                        // post-activation of this layer was relu'd
                        g = relu_backward(&cache.out_posts[t][k], &g);
                    }
                    g = p.output_net[k].backward(input, &g, &mut grads.output_net[k]);
                }
                let gh_tot = &g + &gh;
                let x_t = cache.in_posts[t].last().unwrap();
                let (gx, gh_prev, gc_prev) =
                    p.cell
                        .step_backward(x_t, &cache.steps[t], &gh_tot, &gc, &mut grads.cell);
                gh = gh_prev;
                gc = gc_prev;
                // input net backward
                let mut g = gx;
                for k in (0..p.input_net.len()).rev() {
                    let input = if k == 0 {
                        &cache.inputs[t]
                    } else {
                        &cache.in_posts[t][k - 1]
                    };
                    if k + 1 < p.input_net.len() {
                        g = relu_backward(&cache.in_posts[t][k], &g);
                    }
                    g = p.input_net[k].backward(input, &g, &mut grads.input_net[k]);
                }
            }
            Ok((loss, BaselineGrads::Lstm(grads), total_groups))
        }
    }
}
