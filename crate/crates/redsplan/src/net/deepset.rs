//! Permutation-equivariant deep set with recurrent (or per-horizon
//! feed-forward) decoders.
//!
//! The encoder alternates four linear information routes per layer: within
//! the obstacle set (weight-tied plus a pooled term), set to unstructured
//! (sum pooling, invariant), unstructured to set (broadcast, equivariant)
//! and unstructured to unstructured. Decoders share their weights across
//! set elements, which preserves equivariance and lets one parameter set
//! evaluate any number of obstacles and any horizon.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy_row, relu, relu_backward, Linear, LinearGrad, LstmCell, LstmGrad};
use super::{
    expand_rows, pack_features, segment_sums, Arch, FeatureSplit, NetError, Normalization, Pack,
    Prediction, M_EQ, M_US,
};
use crate::miqp::BinaryAssignment;
use crate::rng::substream;

/// One encoder layer: parameter matrices of the four routes (bias-free).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub theta_ee: DMatrix<f64>,
    pub gamma_ee: DMatrix<f64>,
    pub theta_eu: DMatrix<f64>,
    pub theta_ue: DMatrix<f64>,
    pub theta_uu: DMatrix<f64>,
}

impl EncoderLayer {
    fn new(m_h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (m_h as f64).sqrt();
        let mut mk = || DMatrix::from_fn(m_h, m_h, |_, _| rng.gen_range(-bound..bound));
        Self {
            theta_ee: mk(),
            gamma_ee: mk(),
            theta_eu: mk(),
            theta_ue: mk(),
            theta_uu: mk(),
        }
    }

    fn zeros_like(&self) -> EncoderLayer {
        let z = DMatrix::zeros(self.theta_ee.nrows(), self.theta_ee.ncols());
        EncoderLayer {
            theta_ee: z.clone(),
            gamma_ee: z.clone(),
            theta_eu: z.clone(),
            theta_ue: z.clone(),
            theta_uu: z,
        }
    }
}

/// Decoder variant: shared recurrent cells (horizon-flexible) or
/// per-horizon linear heads (the non-recurrent ablation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DeepSetDecoder {
    Recurrent {
        eq: LstmCell,
        us: LstmCell,
        head_eq: Linear,
        head_us: Linear,
    },
    FeedForward {
        horizon: usize,
        head_eq: Linear,
        head_us: Linear,
    },
}

/// All learnable tensors of one equivariant network plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedsParams {
    pub m_h: usize,
    pub norm: Normalization,
    pub seed: u64,
    pub enc_eq: Linear,
    pub enc_us: Linear,
    pub layers: Vec<EncoderLayer>,
    pub decoder: DeepSetDecoder,
}

impl RedsParams {
    /// Fresh recurrent variant.
    pub fn new_recurrent(m_h: usize, n_layers: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "reds-init", 0);
        Self {
            m_h,
            norm: Normalization::default(),
            seed,
            enc_eq: Linear::new(M_EQ, m_h, &mut rng),
            enc_us: Linear::new(M_US, m_h, &mut rng),
            layers: (0..n_layers).map(|_| EncoderLayer::new(m_h, &mut rng)).collect(),
            decoder: DeepSetDecoder::Recurrent {
                eq: LstmCell::new(m_h, m_h, &mut rng),
                us: LstmCell::new(m_h, m_h, &mut rng),
                head_eq: Linear::new(m_h, 4, &mut rng),
                head_us: Linear::new(m_h, 3, &mut rng),
            },
        }
    }

    /// Fresh non-recurrent variant bound to a fixed horizon.
    pub fn new_feedforward(m_h: usize, n_layers: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "eds-init", 0);
        Self {
            m_h,
            norm: Normalization::default(),
            seed,
            enc_eq: Linear::new(M_EQ, m_h, &mut rng),
            enc_us: Linear::new(M_US, m_h, &mut rng),
            layers: (0..n_layers).map(|_| EncoderLayer::new(m_h, &mut rng)).collect(),
            decoder: DeepSetDecoder::FeedForward {
                horizon,
                head_eq: Linear::new(m_h, (horizon + 1) * 4, &mut rng),
                head_us: Linear::new(m_h, horizon * 3, &mut rng),
            },
        }
    }

    pub fn arch(&self) -> Arch {
        match self.decoder {
            DeepSetDecoder::Recurrent { .. } => Arch::RecurrentDeepSet,
            DeepSetDecoder::FeedForward { .. } => Arch::DeepSet,
        }
    }

    pub fn param_count(&self) -> usize {
        let enc = self.enc_eq.param_count() + self.enc_us.param_count();
        let layers = self.layers.len() * 5 * self.m_h * self.m_h;
        let dec = match &self.decoder {
            DeepSetDecoder::Recurrent {
                eq,
                us,
                head_eq,
                head_us,
            } => eq.param_count() + us.param_count() + head_eq.param_count() + head_us.param_count(),
            DeepSetDecoder::FeedForward {
                head_eq, head_us, ..
            } => head_eq.param_count() + head_us.param_count(),
        };
        enc + layers + dec
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        let push_lin = |v: &mut Vec<f64>, l: &Linear| {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        };
        push_lin(&mut v, &self.enc_eq);
        push_lin(&mut v, &self.enc_us);
        for l in &self.layers {
            v.extend(l.theta_ee.iter());
            v.extend(l.gamma_ee.iter());
            v.extend(l.theta_eu.iter());
            v.extend(l.theta_ue.iter());
            v.extend(l.theta_uu.iter());
        }
        match &self.decoder {
            DeepSetDecoder::Recurrent {
                eq,
                us,
                head_eq,
                head_us,
            } => {
                for c in [eq, us] {
                    v.extend(c.w_x.iter());
                    v.extend(c.w_h.iter());
                    v.extend(c.b.iter());
                }
                push_lin(&mut v, head_eq);
                push_lin(&mut v, head_us);
            }
            DeepSetDecoder::FeedForward {
                head_eq, head_us, ..
            } => {
                push_lin(&mut v, head_eq);
                push_lin(&mut v, head_us);
            }
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        let take_lin = |l: &mut Linear, it: &mut std::slice::Iter<f64>| {
            for e in l.w.iter_mut() {
                *e = *it.next().unwrap();
            }
            for e in l.b.iter_mut() {
                *e = *it.next().unwrap();
            }
        };
        take_lin(&mut self.enc_eq, &mut it);
        take_lin(&mut self.enc_us, &mut it);
        for l in &mut self.layers {
            for m in [
                &mut l.theta_ee,
                &mut l.gamma_ee,
                &mut l.theta_eu,
                &mut l.theta_ue,
                &mut l.theta_uu,
            ] {
                for e in m.iter_mut() {
                    *e = *it.next().unwrap();
                }
            }
        }
        match &mut self.decoder {
            DeepSetDecoder::Recurrent {
                eq,
                us,
                head_eq,
                head_us,
            } => {
                for c in [eq, us] {
                    for e in c.w_x.iter_mut() {
                        *e = *it.next().unwrap();
                    }
                    for e in c.w_h.iter_mut() {
                        *e = *it.next().unwrap();
                    }
                    for e in c.b.iter_mut() {
                        *e = *it.next().unwrap();
                    }
                }
                take_lin(head_eq, &mut it);
                take_lin(head_us, &mut it);
            }
            DeepSetDecoder::FeedForward {
                head_eq, head_us, ..
            } => {
                take_lin(head_eq, &mut it);
                take_lin(head_us, &mut it);
            }
        }
        assert!(it.next().is_none(), "flat vector length mismatch");
    }
}

/// One encoder layer applied to explicit hidden states (the module-level
/// contract used by the equivariance tests). Rows of `h_eq` are the set
/// elements of a single sample.
pub fn encoder_layer(
    h_eq: &DMatrix<f64>,
    h_us: &DMatrix<f64>,
    layer: &EncoderLayer,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let segments = vec![(0usize, h_eq.nrows())];
    let (out_eq, out_us, _) = layer_forward(h_eq, h_us, &segments, layer);
    (out_eq, out_us)
}

struct LayerCache {
    h_eq: DMatrix<f64>,
    h_us: DMatrix<f64>,
    sums: DMatrix<f64>,
    ee_post: DMatrix<f64>,
    ue_post: DMatrix<f64>,
    uu_post: DMatrix<f64>,
    eu_post: DMatrix<f64>,
}

fn layer_forward(
    h_eq: &DMatrix<f64>,
    h_us: &DMatrix<f64>,
    segments: &[(usize, usize)],
    layer: &EncoderLayer,
) -> (DMatrix<f64>, DMatrix<f64>, LayerCache) {
    let sums = segment_sums(h_eq, segments);
    let ee_post = relu(&(h_eq * &layer.theta_ee + expand_rows(&(&sums * &layer.gamma_ee), segments)));
    let ue_post = relu(&(h_us * &layer.theta_ue));
    let uu_post = relu(&(h_us * &layer.theta_uu));
    let eu_post = relu(&(&sums * &layer.theta_eu));
    let out_eq = &ee_post + expand_rows(&ue_post, segments);
    let out_us = &uu_post + &eu_post;
    let cache = LayerCache {
        h_eq: h_eq.clone(),
        h_us: h_us.clone(),
        sums,
        ee_post,
        ue_post,
        uu_post,
        eu_post,
    };
    (out_eq, out_us, cache)
}

fn layer_backward(
    layer: &EncoderLayer,
    cache: &LayerCache,
    segments: &[(usize, usize)],
    g_eq: &DMatrix<f64>,
    g_us: &DMatrix<f64>,
    grad: &mut EncoderLayer,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let g_pre_ee = relu_backward(&cache.ee_post, g_eq);
    let g_pre_ue = relu_backward(&cache.ue_post, &segment_sums(g_eq, segments));
    let g_pre_uu = relu_backward(&cache.uu_post, g_us);
    let g_pre_eu = relu_backward(&cache.eu_post, g_us);

    grad.theta_ee += cache.h_eq.transpose() * &g_pre_ee;
    let seg_g_ee = segment_sums(&g_pre_ee, segments);
    grad.gamma_ee += cache.sums.transpose() * &seg_g_ee;
    grad.theta_ue += cache.h_us.transpose() * &g_pre_ue;
    grad.theta_uu += cache.h_us.transpose() * &g_pre_uu;
    grad.theta_eu += cache.sums.transpose() * &g_pre_eu;

    // gradient into the per-sample sums flows back to every set row
    let g_sums = &seg_g_ee * layer.gamma_ee.transpose() + &g_pre_eu * layer.theta_eu.transpose();
    let g_h_eq = &g_pre_ee * layer.theta_ee.transpose() + expand_rows(&g_sums, segments);
    let g_h_us =
        &g_pre_uu * layer.theta_uu.transpose() + &g_pre_ue * layer.theta_ue.transpose();
    (g_h_eq, g_h_us)
}

pub(crate) struct RedsCache {
    pack: Pack,
    enc_eq_post: DMatrix<f64>,
    enc_us_post: DMatrix<f64>,
    layer_caches: Vec<LayerCache>,
    h_eq_final: DMatrix<f64>,
    h_us_final: DMatrix<f64>,
    dec: DecoderCache,
    pub eq_logits: Vec<DMatrix<f64>>,
    pub us_logits: Vec<DMatrix<f64>>,
}

enum DecoderCache {
    Recurrent {
        eq_steps: Vec<super::layers::LstmStepCache>,
        eq_hs: Vec<DMatrix<f64>>,
        us_steps: Vec<super::layers::LstmStepCache>,
        us_hs: Vec<DMatrix<f64>>,
    },
    FeedForward,
}

/// Batched forward pass; `horizon` chooses the decoder unroll length.
pub(crate) fn forward_batch(
    params: &RedsParams,
    features: &[FeatureSplit],
    horizon: usize,
) -> Result<RedsCache, NetError> {
    if let DeepSetDecoder::FeedForward { horizon: h, .. } = &params.decoder {
        if *h != horizon {
            return Err(NetError::HorizonMismatch {
                arch: params.arch(),
                trained: *h,
                got: horizon,
            });
        }
    }
    let pack = pack_features(features, &params.norm);
    let enc_eq_post = relu(&params.enc_eq.forward(&pack.eq));
    let enc_us_post = relu(&params.enc_us.forward(&pack.us));

    let mut h_eq = enc_eq_post.clone();
    let mut h_us = enc_us_post.clone();
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (ne, nu, cache) = layer_forward(&h_eq, &h_us, &pack.segments, layer);
        h_eq = ne;
        h_us = nu;
        layer_caches.push(cache);
    }

    let rows = h_eq.nrows();
    let batch = h_us.nrows();
    let m_h = params.m_h;
    let mut eq_logits = Vec::with_capacity(horizon + 1);
    let mut us_logits = Vec::with_capacity(horizon);
    let dec = match &params.decoder {
        DeepSetDecoder::Recurrent {
            eq,
            us,
            head_eq,
            head_us,
        } => {
            let mut eq_steps = Vec::with_capacity(horizon + 1);
            let mut eq_hs = Vec::with_capacity(horizon + 1);
            let mut h = DMatrix::zeros(rows, m_h);
            let mut c = DMatrix::zeros(rows, m_h);
            for _ in 0..=horizon {
                let (h2, c2, cache) = eq.step(&h_eq, &h, &c);
                eq_logits.push(head_eq.forward(&h2));
                eq_steps.push(cache);
                eq_hs.push(h2.clone());
                h = h2;
                c = c2;
            }
            let mut us_steps = Vec::with_capacity(horizon);
            let mut us_hs = Vec::with_capacity(horizon);
            let mut h = DMatrix::zeros(batch, m_h);
            let mut c = DMatrix::zeros(batch, m_h);
            for _ in 0..horizon {
                let (h2, c2, cache) = us.step(&h_us, &h, &c);
                us_logits.push(head_us.forward(&h2));
                us_steps.push(cache);
                us_hs.push(h2.clone());
                h = h2;
                c = c2;
            }
            DecoderCache::Recurrent {
                eq_steps,
                eq_hs,
                us_steps,
                us_hs,
            }
        }
        DeepSetDecoder::FeedForward {
            head_eq, head_us, ..
        } => {
            let all_eq = head_eq.forward(&h_eq); // rows x (horizon+1)*4
            let all_us = head_us.forward(&h_us); // batch x horizon*3
            for t in 0..=horizon {
                eq_logits.push(all_eq.columns(4 * t, 4).into_owned());
            }
            for t in 0..horizon {
                us_logits.push(all_us.columns(3 * t, 3).into_owned());
            }
            DecoderCache::FeedForward
        }
    };

    Ok(RedsCache {
        pack,
        enc_eq_post,
        enc_us_post,
        layer_caches,
        h_eq_final: h_eq,
        h_us_final: h_us,
        dec,
        eq_logits,
        us_logits,
    })
}

/// Unpacks logits for one sample of a batched forward pass.
pub(crate) fn predictions_from_cache(cache: &RedsCache, horizon: usize) -> Vec<Prediction> {
    let mut out = Vec::with_capacity(cache.pack.segments.len());
    for (b, (start, end)) in cache.pack.segments.iter().enumerate() {
        let mut obstacle_logits = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let m = &cache.eq_logits[t];
            obstacle_logits.push(
                (*start..*end)
                    .map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]])
                    .collect(),
            );
        }
        let lane_logits = (0..horizon)
            .map(|t| {
                let m = &cache.us_logits[t];
                [m[(b, 0)], m[(b, 1)], m[(b, 2)]]
            })
            .collect();
        out.push(Prediction {
            obstacle_logits,
            lane_logits,
        });
    }
    out
}

/// Single-sample forward pass.
pub fn reds_forward(
    params: &RedsParams,
    features: &FeatureSplit,
    horizon: usize,
) -> Result<Prediction, NetError> {
    let cache = forward_batch(params, std::slice::from_ref(features), horizon)?;
    Ok(predictions_from_cache(&cache, horizon).pop().unwrap())
}

/// Mirror of the parameters used to accumulate gradients.
pub struct RedsGrads {
    pub enc_eq: LinearGrad,
    pub enc_us: LinearGrad,
    pub layers: Vec<EncoderLayer>,
    pub dec_eq: Option<LstmGrad>,
    pub dec_us: Option<LstmGrad>,
    pub head_eq: LinearGrad,
    pub head_us: LinearGrad,
}

impl RedsGrads {
    pub fn zeros(params: &RedsParams) -> Self {
        let (dec_eq, dec_us, head_eq, head_us) = match &params.decoder {
            DeepSetDecoder::Recurrent {
                eq,
                us,
                head_eq,
                head_us,
            } => (
                Some(eq.zeros_like()),
                Some(us.zeros_like()),
                head_eq.zeros_like(),
                head_us.zeros_like(),
            ),
            DeepSetDecoder::FeedForward {
                head_eq, head_us, ..
            } => (None, None, head_eq.zeros_like(), head_us.zeros_like()),
        };
        Self {
            enc_eq: params.enc_eq.zeros_like(),
            enc_us: params.enc_us.zeros_like(),
            layers: params.layers.iter().map(|l| l.zeros_like()).collect(),
            dec_eq,
            dec_us,
            head_eq,
            head_us,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        let push_lin = |v: &mut Vec<f64>, l: &LinearGrad| {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        };
        push_lin(&mut v, &self.enc_eq);
        push_lin(&mut v, &self.enc_us);
        for l in &self.layers {
            v.extend(l.theta_ee.iter());
            v.extend(l.gamma_ee.iter());
            v.extend(l.theta_eu.iter());
            v.extend(l.theta_ue.iter());
            v.extend(l.theta_uu.iter());
        }
        if let (Some(eq), Some(us)) = (&self.dec_eq, &self.dec_us) {
            for c in [eq, us] {
                v.extend(c.w_x.iter());
                v.extend(c.w_h.iter());
                v.extend(c.b.iter());
            }
        }
        push_lin(&mut v, &self.head_eq);
        push_lin(&mut v, &self.head_us);
        v
    }
}

/// Cross-entropy loss over all groups of the batch and its gradient.
/// Returns `(loss, grads, group_count)`.
pub(crate) fn loss_and_grads_batch(
    params: &RedsParams,
    features: &[FeatureSplit],
    labels: &[&BinaryAssignment],
    horizon: usize,
) -> Result<(f64, RedsGrads, usize), NetError> {
    let cache = forward_batch(params, features, horizon)?;
    let segments = cache.pack.segments.clone();

    // total number of classification groups
    let rows = cache.h_eq_final.nrows();
    let batch = cache.h_us_final.nrows();
    let total = rows * (horizon + 1) + batch * horizon;
    if total == 0 {
        return Err(NetError::EmptyDataset);
    }
    let scale = 1.0 / total as f64;

    let mut loss = 0.0;
    let mut g_eq_logits: Vec<DMatrix<f64>> = (0..=horizon).map(|_| DMatrix::zeros(rows, 4)).collect();
    let mut g_us_logits: Vec<DMatrix<f64>> = (0..horizon).map(|_| DMatrix::zeros(batch, 3)).collect();

    for (b, (start, end)) in segments.iter().enumerate() {
        let lab = labels[b];
        if lab.lane.len() != horizon || lab.regions.len() != horizon + 1 {
            return Err(NetError::Shape(format!(
                "label shape for sample {b}: {} lanes, {} region rows, horizon {horizon}",
                lab.lane.len(),
                lab.regions.len()
            )));
        }
        for t in 0..=horizon {
            for (j, r) in (*start..*end).enumerate() {
                let m = &cache.eq_logits[t];
                let logits = [m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]];
                let (l, g) = cross_entropy_row(&logits, lab.regions[t][j].index());
                loss += l * scale;
                for k in 0..4 {
                    g_eq_logits[t][(r, k)] = g[k] * scale;
                }
            }
        }
        for t in 0..horizon {
            let m = &cache.us_logits[t];
            let logits = [m[(b, 0)], m[(b, 1)], m[(b, 2)]];
            let (l, g) = cross_entropy_row(&logits, lab.lane[t].class());
            loss += l * scale;
            for k in 0..3 {
                g_us_logits[t][(b, k)] = g[k] * scale;
            }
        }
    }

    let mut grads = RedsGrads::zeros(params);
    let m_h = params.m_h;

    // decoder backward
    let (mut g_h_eq, mut g_h_us) = match (&params.decoder, &cache.dec) {
        (
            DeepSetDecoder::Recurrent {
                eq,
                us,
                head_eq,
                head_us,
            },
            DecoderCache::Recurrent {
                eq_steps,
                eq_hs,
                us_steps,
                us_hs,
            },
        ) => {
            let mut g_input_eq = DMatrix::zeros(rows, m_h);
            let mut gh = DMatrix::zeros(rows, m_h);
            let mut gc = DMatrix::zeros(rows, m_h);
            for t in (0..=horizon).rev() {
                let mut gh_tot = head_eq.backward(&eq_hs[t], &g_eq_logits[t], &mut grads.head_eq);
                gh_tot += &gh;
                let (gx, gh_prev, gc_prev) = eq.step_backward(
                    &cache.h_eq_final,
                    &eq_steps[t],
                    &gh_tot,
                    &gc,
                    grads.dec_eq.as_mut().unwrap(),
                );
                g_input_eq += gx;
                gh = gh_prev;
                gc = gc_prev;
            }
            let mut g_input_us = DMatrix::zeros(batch, m_h);
            let mut gh = DMatrix::zeros(batch, m_h);
            let mut gc = DMatrix::zeros(batch, m_h);
            for t in (0..horizon).rev() {
                let mut gh_tot = head_us.backward(&us_hs[t], &g_us_logits[t], &mut grads.head_us);
                gh_tot += &gh;
                let (gx, gh_prev, gc_prev) = us.step_backward(
                    &cache.h_us_final,
                    &us_steps[t],
                    &gh_tot,
                    &gc,
                    grads.dec_us.as_mut().unwrap(),
                );
                g_input_us += gx;
                gh = gh_prev;
                gc = gc_prev;
            }
            (g_input_eq, g_input_us)
        }
        (
            DeepSetDecoder::FeedForward {
                head_eq, head_us, ..
            },
            DecoderCache::FeedForward,
        ) => {
            let mut g_all_eq = DMatrix::zeros(rows, (horizon + 1) * 4);
            for t in 0..=horizon {
                for r in 0..rows {
                    for k in 0..4 {
                        g_all_eq[(r, 4 * t + k)] = g_eq_logits[t][(r, k)];
                    }
                }
            }
            let mut g_all_us = DMatrix::zeros(batch, horizon * 3);
            for t in 0..horizon {
                for b in 0..batch {
                    for k in 0..3 {
                        g_all_us[(b, 3 * t + k)] = g_us_logits[t][(b, k)];
                    }
                }
            }
            let ge = head_eq.backward(&cache.h_eq_final, &g_all_eq, &mut grads.head_eq);
            let gu = head_us.backward(&cache.h_us_final, &g_all_us, &mut grads.head_us);
            (ge, gu)
        }
        _ => unreachable!("decoder cache mismatch"),
    };

    // encoder layers backward
    for (layer, lcache, lgrad) in itertools_rev(&params.layers, &cache.layer_caches, &mut grads.layers)
    {
        let (ge, gu) = layer_backward(layer, lcache, &segments, &g_h_eq, &g_h_us, lgrad);
        g_h_eq = ge;
        g_h_us = gu;
    }

    // encoder feed-forward backward (relu then linear)
    let g_pre_eq = relu_backward(&cache.enc_eq_post, &g_h_eq);
    let g_pre_us = relu_backward(&cache.enc_us_post, &g_h_us);
    params
        .enc_eq
        .backward(&cache.pack.eq, &g_pre_eq, &mut grads.enc_eq);
    params
        .enc_us
        .backward(&cache.pack.us, &g_pre_us, &mut grads.enc_us);

    Ok((loss, grads, total))
}

/// Reverse zipped iteration over layers, caches and gradient slots.
fn itertools_rev<'a>(
    layers: &'a [EncoderLayer],
    caches: &'a [LayerCache],
    grads: &'a mut [EncoderLayer],
) -> impl Iterator<Item = (&'a EncoderLayer, &'a LayerCache, &'a mut EncoderLayer)> {
    layers
        .iter()
        .rev()
        .zip(caches.iter().rev())
        .zip(grads.iter_mut().rev())
        .map(|((l, c), g)| (l, c, g))
}
