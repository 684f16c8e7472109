//! Batched layer primitives with hand-written reverse-mode passes.
//!
//! Everything operates on row-major batches: a matrix holds one element
//! per row. Forward passes return the caches the backward passes need.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Gradient of relu given its output (mask on positive values).
pub fn relu_backward(post: &DMatrix<f64>, grad: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(post.nrows(), post.ncols(), |r, c| {
        if post[(r, c)] > 0.0 {
            grad[(r, c)]
        } else {
            0.0
        }
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: DMatrix::from_fn(input, output, |_, _| rng.gen_range(-bound..bound)),
            b: DVector::from_fn(output, |_, _| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> LinearGrad {
        LinearGrad {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                y[(r, c)] += self.b[c];
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        grad_y: &DMatrix<f64>,
        grad: &mut LinearGrad,
    ) -> DMatrix<f64> {
        grad.w += x.transpose() * grad_y;
        for r in 0..grad_y.nrows() {
            for c in 0..grad_y.ncols() {
                grad.b[c] += grad_y[(r, c)];
            }
        }
        grad_y * self.w.transpose()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// LSTM cell with the standard gate layout `[input, forget, cell, output]`
/// stacked along the columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    /// input -> gates, shape (n_in, 4 h)
    pub w_x: DMatrix<f64>,
    /// hidden -> gates, shape (h, 4 h)
    pub w_h: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmGrad {
    pub w_x: DMatrix<f64>,
    pub w_h: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Per-step cache for backpropagation through time.
pub struct LstmStepCache {
    pub h_prev: DMatrix<f64>,
    pub c_prev: DMatrix<f64>,
    /// Gate activations after the nonlinearities: i, f, g, o.
    pub i: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub tanh_c: DMatrix<f64>,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((input + hidden).max(1) as f64).sqrt();
        Self {
            w_x: DMatrix::from_fn(input, 4 * hidden, |_, _| rng.gen_range(-bound..bound)),
            w_h: DMatrix::from_fn(hidden, 4 * hidden, |_, _| rng.gen_range(-bound..bound)),
            b: DVector::from_fn(4 * hidden, |_, _| rng.gen_range(-bound..bound)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn zeros_like(&self) -> LstmGrad {
        LstmGrad {
            w_x: DMatrix::zeros(self.w_x.nrows(), self.w_x.ncols()),
            w_h: DMatrix::zeros(self.w_h.nrows(), self.w_h.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    /// One step over a batch of rows.
    pub fn step(
        &self,
        x: &DMatrix<f64>,
        h: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, LstmStepCache) {
        let hdim = self.hidden();
        let rows = x.nrows();
        let mut pre = x * &self.w_x + h * &self.w_h;
        for r in 0..rows {
            for col in 0..4 * hdim {
                pre[(r, col)] += self.b[col];
            }
        }
        let mut gi = DMatrix::zeros(rows, hdim);
        let mut gf = DMatrix::zeros(rows, hdim);
        let mut gg = DMatrix::zeros(rows, hdim);
        let mut go = DMatrix::zeros(rows, hdim);
        for r in 0..rows {
            for k in 0..hdim {
                gi[(r, k)] = sigmoid(pre[(r, k)]);
                gf[(r, k)] = sigmoid(pre[(r, hdim + k)]);
                gg[(r, k)] = pre[(r, 2 * hdim + k)].tanh();
                go[(r, k)] = sigmoid(pre[(r, 3 * hdim + k)]);
            }
        }
        let mut c_new = DMatrix::zeros(rows, hdim);
        let mut tanh_c = DMatrix::zeros(rows, hdim);
        let mut h_new = DMatrix::zeros(rows, hdim);
        for r in 0..rows {
            for k in 0..hdim {
                let cv = gf[(r, k)] * c[(r, k)] + gi[(r, k)] * gg[(r, k)];
                c_new[(r, k)] = cv;
                let t = cv.tanh();
                tanh_c[(r, k)] = t;
                h_new[(r, k)] = go[(r, k)] * t;
            }
        }
        let cache = LstmStepCache {
            h_prev: h.clone(),
            c_prev: c.clone(),
            i: gi,
            f: gf,
            g: gg,
            o: go,
            c: c_new.clone(),
            tanh_c,
        };
        (h_new, c_new, cache)
    }

    /// Backward through one step. `grad_h` and `grad_c` are the gradients
    /// flowing into this step's outputs; returns `(grad_x, grad_h_prev,
    /// grad_c_prev)` and accumulates parameter gradients.
    pub fn step_backward(
        &self,
        x: &DMatrix<f64>,
        cache: &LstmStepCache,
        grad_h: &DMatrix<f64>,
        grad_c: &DMatrix<f64>,
        grad: &mut LstmGrad,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let hdim = self.hidden();
        let rows = x.nrows();
        let mut d_pre = DMatrix::zeros(rows, 4 * hdim);
        let mut d_c_prev = DMatrix::zeros(rows, hdim);
        for r in 0..rows {
            for k in 0..hdim {
                let o = cache.o[(r, k)];
                let t = cache.tanh_c[(r, k)];
                let dc = grad_c[(r, k)] + grad_h[(r, k)] * o * (1.0 - t * t);
                let i = cache.i[(r, k)];
                let f = cache.f[(r, k)];
                let g = cache.g[(r, k)];
                // gate pre-activation gradients
                d_pre[(r, k)] = dc * g * i * (1.0 - i);
                d_pre[(r, hdim + k)] = dc * cache.c_prev[(r, k)] * f * (1.0 - f);
                d_pre[(r, 2 * hdim + k)] = dc * i * (1.0 - g * g);
                d_pre[(r, 3 * hdim + k)] = grad_h[(r, k)] * t * o * (1.0 - o);
                d_c_prev[(r, k)] = dc * f;
            }
        }
        grad.w_x += x.transpose() * &d_pre;
        grad.w_h += cache.h_prev.transpose() * &d_pre;
        for r in 0..rows {
            for col in 0..4 * hdim {
                grad.b[col] += d_pre[(r, col)];
            }
        }
        let grad_x = &d_pre * self.w_x.transpose();
        let grad_h_prev = &d_pre * self.w_h.transpose();
        (grad_x, grad_h_prev, d_c_prev)
    }

    pub fn param_count(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len()
    }
}

/// Stable log-softmax cross-entropy over class logits; returns the loss
/// and the logit gradient for one row.
pub fn cross_entropy_row(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - logits[target];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / z - if k == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_gradient;
    use crate::rng::substream;

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut rng = substream(0, "lstm0", 0);
        let mut cell = LstmCell::new(3, 4, &mut rng);
        cell.w_x.fill(0.0);
        cell.w_h.fill(0.0);
        cell.b.fill(0.0);
        let x = DMatrix::from_element(2, 3, 1.0);
        let (h, c, _) = cell.step(&x, &DMatrix::zeros(2, 4), &DMatrix::zeros(2, 4));
        // zero candidate keeps everything at zero
        assert!(h.amax() < 1e-15);
        assert!(c.amax() < 1e-15);
    }

    #[test]
    fn lstm_saturated_forget_keeps_cell() {
        let mut rng = substream(0, "lstm1", 0);
        let mut cell = LstmCell::new(2, 3, &mut rng);
        cell.w_x.fill(0.0);
        cell.w_h.fill(0.0);
        // forget bias saturated high, input gate saturated low
        for k in 0..3 {
            cell.b[k] = -50.0; // input gate ~ 0
            cell.b[3 + k] = 50.0; // forget gate ~ 1
            cell.b[6 + k] = 0.0;
            cell.b[9 + k] = 0.0;
        }
        let c0 = DMatrix::from_fn(1, 3, |_, k| 0.3 * (k as f64 + 1.0));
        let (_, c1, _) = cell.step(&DMatrix::zeros(1, 2), &DMatrix::zeros(1, 3), &c0);
        assert!((c1 - c0).amax() < 1e-12);
    }

    /// Scalar step-by-step reference implementation.
    #[test]
    fn lstm_matches_scalar_reference() {
        let mut rng = substream(0, "lstmref", 0);
        let cell = LstmCell::new(2, 3, &mut rng);
        let x = DMatrix::from_fn(1, 2, |_, c| 0.3 + 0.2 * c as f64);
        let h0 = DMatrix::from_fn(1, 3, |_, c| -0.1 * (c as f64 + 1.0));
        let c0 = DMatrix::from_fn(1, 3, |_, c| 0.05 * (c as f64 + 1.0));
        let (h1, c1, _) = cell.step(&x, &h0, &c0);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..3 {
            let mut pre = [0.0; 4];
            for (gate, p) in pre.iter_mut().enumerate() {
                let col = gate * 3 + k;
                *p = cell.b[col];
                for j in 0..2 {
                    *p += x[(0, j)] * cell.w_x[(j, col)];
                }
                for j in 0..3 {
                    *p += h0[(0, j)] * cell.w_h[(j, col)];
                }
            }
            let (i, f, g, o) = (sig(pre[0]), sig(pre[1]), pre[2].tanh(), sig(pre[3]));
            let c_ref = f * c0[(0, k)] + i * g;
            let h_ref = o * c_ref.tanh();
            assert!((c1[(0, k)] - c_ref).abs() < 1e-12);
            assert!((h1[(0, k)] - h_ref).abs() < 1e-12);
        }
    }

    /// Gradient of a small unrolled LSTM + head against finite differences.
    #[test]
    fn lstm_backward_matches_finite_differences() {
        let mut rng = substream(0, "lstmfd", 0);
        let cell = LstmCell::new(2, 3, &mut rng);
        let x = DMatrix::from_fn(2, 2, |r, c| 0.2 * (r as f64 + 1.0) - 0.15 * c as f64);
        let steps = 4;

        let eval = |cell: &LstmCell| -> f64 {
            let mut h = DMatrix::zeros(2, 3);
            let mut c = DMatrix::zeros(2, 3);
            let mut acc = 0.0;
            for _ in 0..steps {
                let (h2, c2, _) = cell.step(&x, &h, &c);
                h = h2;
                c = c2;
                acc += h.iter().map(|v| v * v).sum::<f64>();
            }
            acc
        };

        // analytic gradient
        let mut h = DMatrix::zeros(2, 3);
        let mut c = DMatrix::zeros(2, 3);
        let mut caches = Vec::new();
        let mut hs = Vec::new();
        for _ in 0..steps {
            let (h2, c2, cache) = cell.step(&x, &h, &c);
            caches.push(cache);
            hs.push(h2.clone());
            h = h2;
            c = c2;
        }
        let mut grad = cell.zeros_like();
        let mut gh = DMatrix::zeros(2, 3);
        let mut gc = DMatrix::zeros(2, 3);
        for t in (0..steps).rev() {
            let mut gh_total = gh.clone();
            gh_total += 2.0 * &hs[t];
            let (_, gh_prev, gc_prev) = cell.step_backward(&x, &caches[t], &gh_total, &gc, &mut grad);
            gh = gh_prev;
            gc = gc_prev;
        }

        // finite differences over all parameters
        let flat: Vec<f64> = cell
            .w_x
            .iter()
            .chain(cell.w_h.iter())
            .chain(cell.b.iter())
            .cloned()
            .collect();
        let rebuild = |v: &[f64]| -> LstmCell {
            let mut c2 = cell.clone();
            let mut it = v.iter();
            for e in c2.w_x.iter_mut() {
                *e = *it.next().unwrap();
            }
            for e in c2.w_h.iter_mut() {
                *e = *it.next().unwrap();
            }
            for e in c2.b.iter_mut() {
                *e = *it.next().unwrap();
            }
            c2
        };
        let fd = fd_gradient(|v| eval(&rebuild(v)), &flat, 1e-6);
        let analytic: Vec<f64> = grad
            .w_x
            .iter()
            .chain(grad.w_h.iter())
            .chain(grad.b.iter())
            .cloned()
            .collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, f) in analytic.iter().zip(&fd) {
            num += (a - f) * (a - f);
            den += f * f;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-6, "rel grad error {rel}");
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let (loss, grad) = cross_entropy_row(&[0.0, 0.0, 0.0, 0.0], 2);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad[2] - (0.25 - 1.0)).abs() < 1e-12);

        let (loss2, _) = cross_entropy_row(&[0.0, 50.0, 0.0], 1);
        assert!(loss2 < 1e-12);
    }
}
