//! Dense network primitives with hand-written backward passes.
//!
//! Every trainable module here works on `f64` slices and exposes its
//! parameters through the [`Params`] trait, so the optimizer, gradient-norm
//! clipping, EMA shadows, checkpointing and finite-difference checks all
//! share one named-parameter view. Backward passes accumulate into a
//! gradient struct of the same type as the module (`zeros_like`), which keeps
//! parameter/gradient alignment trivially correct.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A read-only view of one named parameter array.
pub struct ParamEntry<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A mutable view of one named parameter array.
pub struct ParamEntryMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Named access to every trainable array of a module, in a stable order.
pub trait Params {
    fn params(&self) -> Vec<ParamEntry<'_>>;
    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>>;

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Samples a standard-normal matrix.
fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Orthogonal initialization: Gram–Schmidt on a Gaussian matrix, scaled by
/// `gain`. Rectangular shapes get orthonormal rows or columns, whichever
/// side is shorter.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    let a = gaussian(long, short, rng);
    // Modified Gram–Schmidt over columns, run twice for stability.
    let mut q = a;
    for _pass in 0..2 {
        for j in 0..short {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let col_k = q.column(k).to_owned();
                q.column_mut(j).zip_mut_with(&col_k, |x, &y| *x -= proj * y);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    let w = if rows >= cols {
        q
    } else {
        // Copy into a fresh C-layout array; `.t().to_owned()` would keep the
        // transposed memory order and break `as_slice()`.
        let mut t = Array2::zeros((rows, cols));
        t.assign(&q.t());
        t
    };
    w * gain
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

/// A fully connected layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Orthogonal weights, zero biases.
    pub fn new(in_dim: usize, out_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self { w: orthogonal(out_dim, in_dim, gain, rng), b: Array1::zeros(out_dim) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and, when `dx` is
    /// given, `dx += Wᵀ dy`.
    pub fn backward(
        &self,
        x: &ArrayView1<f64>,
        dy: &ArrayView1<f64>,
        grad: &mut Linear,
        dx: Option<&mut Array1<f64>>,
    ) {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                grad.w.row_mut(i).zip_mut_with(x, |w, &xv| *w += g * xv);
            }
            grad.b[i] += g;
        }
        if let Some(dx) = dx {
            *dx += &self.w.t().dot(dy);
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamEntry<'a>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.w"),
            shape: vec![self.w.nrows(), self.w.ncols()],
            data: self.w.as_slice().expect("standard layout"),
        });
        out.push(ParamEntry {
            name: format!("{prefix}.b"),
            shape: vec![self.b.len()],
            data: self.b.as_slice().expect("standard layout"),
        });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamEntryMut<'a>>) {
        out.push(ParamEntryMut {
            name: format!("{prefix}.w"),
            data: self.w.as_slice_mut().expect("standard layout"),
        });
        out.push(ParamEntryMut {
            name: format!("{prefix}.b"),
            data: self.b.as_slice_mut().expect("standard layout"),
        });
    }
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron
// ---------------------------------------------------------------------------

/// A stack of linear layers with tanh activations. When `linear_output` is
/// set the final layer is left unactivated (embeddings, value heads, logits);
/// otherwise every layer is followed by tanh (feature trunks).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub linear_output: bool,
}

/// Per-layer inputs retained for the backward pass; `acts[l]` is the input
/// to layer `l` and `acts.last()` is the network output.
pub struct MlpCache {
    acts: Vec<Array1<f64>>,
}

impl Mlp {
    /// Builds a network mapping `in_dim` through `widths`. Hidden layers use
    /// gain √2; the output layer uses `out_gain`.
    pub fn new(
        in_dim: usize,
        widths: &[usize],
        linear_output: bool,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!widths.is_empty(), "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let gain = if last && linear_output { out_gain } else { std::f64::consts::SQRT_2 };
            layers.push(Linear::new(prev, w, gain, rng));
            prev = w;
        }
        Self { layers, linear_output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            linear_output: self.linear_output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    fn activated(&self, layer: usize) -> bool {
        !(self.linear_output && layer + 1 == self.layers.len())
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> (Array1<f64>, MlpCache) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&acts[l].view());
            if self.activated(l) {
                y.mapv_inplace(f64::tanh);
            }
            acts.push(y);
        }
        (acts.last().unwrap().clone(), MlpCache { acts })
    }

    /// Backward from `dy` on the output; accumulates into `grad` and returns
    /// the gradient with respect to the input via `dx` when given.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dy: &ArrayView1<f64>,
        grad: &mut Mlp,
        dx: Option<&mut Array1<f64>>,
    ) {
        let mut d = dy.to_owned();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                // dtanh(z) = 1 - tanh(z)^2, and acts[l + 1] is tanh(z).
                d.zip_mut_with(&cache.acts[l + 1], |g, &y| *g *= 1.0 - y * y);
            }
            if l == 0 {
                self.layers[0].backward(&cache.acts[0].view(), &d.view(), &mut grad.layers[0], dx);
                return;
            }
            let mut d_prev = Array1::zeros(self.layers[l].in_dim());
            self.layers[l].backward(
                &cache.acts[l].view(),
                &d.view(),
                &mut grad.layers[l],
                Some(&mut d_prev),
            );
            d = d_prev;
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamEntry<'a>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.{l}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamEntryMut<'a>>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&format!("{prefix}.{l}"), out);
        }
    }
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

/// A single GRU cell:
///
/// ```text
/// r  = σ(W_xr x + W_hr h + b_r)
/// z  = σ(W_xz x + W_hz h + b_z)
/// n  = tanh(W_xn x + b_n + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_xr: Array2<f64>,
    pub w_xz: Array2<f64>,
    pub w_xn: Array2<f64>,
    pub w_hr: Array2<f64>,
    pub w_hz: Array2<f64>,
    pub w_hn: Array2<f64>,
    pub b_r: Array1<f64>,
    pub b_z: Array1<f64>,
    pub b_n: Array1<f64>,
    pub b_hn: Array1<f64>,
}

/// Intermediates for one step, consumed by [`GruCell::backward`].
pub struct GruCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    r: Array1<f64>,
    z: Array1<f64>,
    n: Array1<f64>,
    /// `W_hn h + b_hn`, the candidate's recurrent pre-activation.
    a: Array1<f64>,
}

impl GruCell {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_xr: orthogonal(hidden, in_dim, 1.0, rng),
            w_xz: orthogonal(hidden, in_dim, 1.0, rng),
            w_xn: orthogonal(hidden, in_dim, 1.0, rng),
            w_hr: orthogonal(hidden, hidden, 1.0, rng),
            w_hz: orthogonal(hidden, hidden, 1.0, rng),
            w_hn: orthogonal(hidden, hidden, 1.0, rng),
            b_r: Array1::zeros(hidden),
            b_z: Array1::zeros(hidden),
            b_n: Array1::zeros(hidden),
            b_hn: Array1::zeros(hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_xr: Array2::zeros(self.w_xr.raw_dim()),
            w_xz: Array2::zeros(self.w_xz.raw_dim()),
            w_xn: Array2::zeros(self.w_xn.raw_dim()),
            w_hr: Array2::zeros(self.w_hr.raw_dim()),
            w_hz: Array2::zeros(self.w_hz.raw_dim()),
            w_hn: Array2::zeros(self.w_hn.raw_dim()),
            b_r: Array1::zeros(self.b_r.raw_dim()),
            b_z: Array1::zeros(self.b_z.raw_dim()),
            b_n: Array1::zeros(self.b_n.raw_dim()),
            b_hn: Array1::zeros(self.b_hn.raw_dim()),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_r.len()
    }

    pub fn forward(&self, x: &ArrayView1<f64>, h: &ArrayView1<f64>) -> (Array1<f64>, GruCache) {
        let mut r = self.w_xr.dot(x) + self.w_hr.dot(h) + &self.b_r;
        r.mapv_inplace(sigmoid);
        let mut z = self.w_xz.dot(x) + self.w_hz.dot(h) + &self.b_z;
        z.mapv_inplace(sigmoid);
        let a = self.w_hn.dot(h) + &self.b_hn;
        let mut n = self.w_xn.dot(x) + &self.b_n + &(&r * &a);
        n.mapv_inplace(f64::tanh);
        let h_new = (1.0 - &z) * &n + &z * h;
        let cache = GruCache {
            x: x.to_owned(),
            h_prev: h.to_owned(),
            r,
            z,
            n,
            a,
        };
        (h_new, cache)
    }

    /// Backward for one step. `dh_new` is the gradient on the step output;
    /// returns gradients with respect to the step input and previous hidden
    /// state via accumulation into `dx` and the returned `dh_prev`.
    pub fn backward(
        &self,
        cache: &GruCache,
        dh_new: &ArrayView1<f64>,
        grad: &mut GruCell,
        dx: &mut Array1<f64>,
    ) -> Array1<f64> {
        let GruCache { x, h_prev, r, z, n, a } = cache;
        let dn = dh_new * &(1.0 - z);
        let dz = dh_new * &(h_prev - n);
        let mut dh_prev = dh_new * z;

        // Candidate gate.
        let dpre_n = &dn * &n.mapv(|v| 1.0 - v * v);
        accumulate_gate(&self.w_xn, &dpre_n, x, &mut grad.w_xn, &mut grad.b_n, dx);
        let dr = &dpre_n * a;
        let da = &dpre_n * r;
        accumulate_gate(&self.w_hn, &da, h_prev, &mut grad.w_hn, &mut grad.b_hn, &mut dh_prev);

        // Update gate.
        let dpre_z = &dz * &z.mapv(|v| v * (1.0 - v));
        accumulate_gate(&self.w_xz, &dpre_z, x, &mut grad.w_xz, &mut grad.b_z, dx);
        accumulate_rec(&self.w_hz, &dpre_z, h_prev, &mut grad.w_hz, &mut dh_prev);

        // Reset gate.
        let dpre_r = &dr * &r.mapv(|v| v * (1.0 - v));
        accumulate_gate(&self.w_xr, &dpre_r, x, &mut grad.w_xr, &mut grad.b_r, dx);
        accumulate_rec(&self.w_hr, &dpre_r, h_prev, &mut grad.w_hr, &mut dh_prev);

        dh_prev
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamEntry<'a>>) {
        let mats = [
            ("w_xr", &self.w_xr),
            ("w_xz", &self.w_xz),
            ("w_xn", &self.w_xn),
            ("w_hr", &self.w_hr),
            ("w_hz", &self.w_hz),
            ("w_hn", &self.w_hn),
        ];
        for (tag, m) in mats {
            out.push(ParamEntry {
                name: format!("{prefix}.{tag}"),
                shape: vec![m.nrows(), m.ncols()],
                data: m.as_slice().expect("standard layout"),
            });
        }
        let vecs = [
            ("b_r", &self.b_r),
            ("b_z", &self.b_z),
            ("b_n", &self.b_n),
            ("b_hn", &self.b_hn),
        ];
        for (tag, v) in vecs {
            out.push(ParamEntry {
                name: format!("{prefix}.{tag}"),
                shape: vec![v.len()],
                data: v.as_slice().expect("standard layout"),
            });
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamEntryMut<'a>>) {
        let mats = [
            ("w_xr", &mut self.w_xr),
            ("w_xz", &mut self.w_xz),
            ("w_xn", &mut self.w_xn),
            ("w_hr", &mut self.w_hr),
            ("w_hz", &mut self.w_hz),
            ("w_hn", &mut self.w_hn),
        ];
        for (tag, m) in mats {
            out.push(ParamEntryMut {
                name: format!("{prefix}.{tag}"),
                data: m.as_slice_mut().expect("standard layout"),
            });
        }
        let vecs = [
            ("b_r", &mut self.b_r),
            ("b_z", &mut self.b_z),
            ("b_n", &mut self.b_n),
            ("b_hn", &mut self.b_hn),
        ];
        for (tag, v) in vecs {
            out.push(ParamEntryMut {
                name: format!("{prefix}.{tag}"),
                data: v.as_slice_mut().expect("standard layout"),
            });
        }
    }
}

/// `dW += d yᵀ`, `db += d`, `dx += Wᵀ d` — the input-side triple of a gate.
fn accumulate_gate(
    w: &Array2<f64>,
    d: &Array1<f64>,
    x: &Array1<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
    dx: &mut Array1<f64>,
) {
    for (i, &g) in d.iter().enumerate() {
        if g != 0.0 {
            dw.row_mut(i).zip_mut_with(x, |w, &xv| *w += g * xv);
        }
        db[i] += g;
    }
    *dx += &w.t().dot(d);
}

/// Recurrent-side pair without a bias (`b_z`/`b_r` live on the input side).
fn accumulate_rec(
    w: &Array2<f64>,
    d: &Array1<f64>,
    h: &Array1<f64>,
    dw: &mut Array2<f64>,
    dh: &mut Array1<f64>,
) {
    for (i, &g) in d.iter().enumerate() {
        if g != 0.0 {
            dw.row_mut(i).zip_mut_with(h, |w, &hv| *w += g * hv);
        }
    }
    *dh += &w.t().dot(d);
}

// ---------------------------------------------------------------------------
// Optimizer and gradient utilities
// ---------------------------------------------------------------------------

/// Adam with bias correction. First/second-moment buffers are laid out to
/// match a fixed parameter order, which the caller must keep stable between
/// steps (the [`Params`] trait guarantees this per module).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update step; `params` and `grads` must match the layout given at
    /// construction.
    pub fn step(&mut self, params: &mut [ParamEntryMut<'_>], grads: &[ParamEntry<'_>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer layout mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.name, g.name, "parameter/gradient order mismatch");
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm over a full gradient set.
pub fn global_grad_norm(grads: &[ParamEntry<'_>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [ParamEntryMut<'_>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_forward_known_values() {
        let lin = Linear { w: array![[1.0, 2.0], [0.0, -1.0]], b: array![0.5, 0.0] };
        let y = lin.forward(&array![3.0, 4.0].view());
        assert_eq!(y, array![11.5, -4.0]);
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let w = orthogonal(4, 16, 1.0, &mut rng(0));
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(w.row(i).dot(&w.row(j)), expect, epsilon = 1e-10);
            }
        }
        let tall = orthogonal(16, 4, 2.0, &mut rng(1));
        for i in 0..4 {
            // Columns orthonormal before the gain, so gain² on the diagonal.
            assert_relative_eq!(tall.column(i).dot(&tall.column(i)), 4.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn mlp_tanh_then_linear_output() {
        let mut net = Mlp::new(2, &[3, 1], true, 1.0, &mut rng(2));
        net.layers[0] = Linear { w: Array2::zeros((3, 2)), b: array![0.0, 100.0, -100.0] };
        net.layers[1] = Linear { w: array![[1.0, 1.0, 1.0]], b: array![0.25] };
        let (y, _) = net.forward(&array![5.0, -5.0].view());
        // tanh(0) + tanh(100) + tanh(-100) + 0.25
        assert_relative_eq!(y[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn gru_zero_weights_zero_state_stays_zero() {
        let mut cell = GruCell::new(3, 4, &mut rng(3));
        let zeros = cell.zeros_like();
        cell = zeros;
        let (h, _) = cell.forward(&array![1.0, -2.0, 0.5].view(), &Array1::zeros(4).view());
        // n = tanh(0) = 0 and h = 0, so any convex combination is 0.
        assert_eq!(h, Array1::<f64>::zeros(4));
    }

    #[test]
    fn gru_two_step_memory_matches_hand_rollout() {
        // Scalar GRU with hand-picked weights, recurrence computed manually.
        let mut cell = GruCell::new(1, 1, &mut rng(4)).zeros_like();
        cell.w_xr[[0, 0]] = 0.3;
        cell.w_xz[[0, 0]] = -0.2;
        cell.w_xn[[0, 0]] = 0.8;
        cell.w_hr[[0, 0]] = 0.5;
        cell.w_hz[[0, 0]] = 0.4;
        cell.w_hn[[0, 0]] = -0.6;
        cell.b_r[0] = 0.1;
        cell.b_z[0] = -0.1;
        cell.b_n[0] = 0.05;
        cell.b_hn[0] = 0.2;

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h_ref = 0.0f64;
        let mut h = Array1::zeros(1);
        for &x in &[0.7f64, -1.1] {
            let r = sig(0.3 * x + 0.5 * h_ref + 0.1);
            let z = sig(-0.2 * x + 0.4 * h_ref - 0.1);
            let n = (0.8 * x + 0.05 + r * (-0.6 * h_ref + 0.2)).tanh();
            h_ref = (1.0 - z) * n + z * h_ref;
            let (h_new, _) = cell.forward(&array![x].view(), &h.view());
            h = h_new;
        }
        assert_relative_eq!(h[0], h_ref, epsilon = 1e-14);
    }

    /// Central-difference check of a module's backward pass via a scalar loss.
    fn fd_max_rel_err<N: Params>(
        net: &mut N,
        grads: &N,
        loss: &dyn Fn(&N) -> f64,
        probes_per_array: usize,
        seed: u64,
    ) -> f64 {
        let mut r = rng(seed);
        let analytic: Vec<(String, Vec<f64>)> = grads
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.data.to_vec()))
            .collect();
        let mut worst = 0.0f64;
        let n_arrays = analytic.len();
        for a in 0..n_arrays {
            let len = analytic[a].1.len();
            for _ in 0..probes_per_array.min(len) {
                let i = r.gen_range(0..len);
                let orig = net.params()[a].data[i];
                let h = 1e-6 * orig.abs().max(1.0);
                net.params_mut()[a].data[i] = orig + h;
                let fp = loss(net);
                net.params_mut()[a].data[i] = orig - h;
                let fm = loss(net);
                net.params_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[a].1[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((an - fd).abs() / denom);
            }
        }
        worst
    }

    struct MlpHarness(Mlp);
    impl Params for MlpHarness {
        fn params(&self) -> Vec<ParamEntry<'_>> {
            let mut v = Vec::new();
            self.0.collect("mlp", &mut v);
            v
        }
        fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
            let mut v = Vec::new();
            self.0.collect_mut("mlp", &mut v);
            v
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let x = array![0.3, -0.7, 1.2];
        let probe = array![0.9, -0.4];
        let loss = |net: &MlpHarness| {
            let (y, _) = net.0.forward(&x.view());
            y.dot(&probe)
        };
        let mut net = MlpHarness(Mlp::new(3, &[5, 2], true, 1.0, &mut rng(5)));
        let mut grads = MlpHarness(net.0.zeros_like());
        let (_, cache) = net.0.forward(&x.view());
        net.0.backward(&cache, &probe.view(), &mut grads.0, None);
        let err = fd_max_rel_err(&mut net, &grads, &loss, 8, 6);
        assert!(err < 1e-6, "max rel err {err}");
    }

    struct GruHarness(GruCell);
    impl Params for GruHarness {
        fn params(&self) -> Vec<ParamEntry<'_>> {
            let mut v = Vec::new();
            self.0.collect("gru", &mut v);
            v
        }
        fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
            let mut v = Vec::new();
            self.0.collect_mut("gru", &mut v);
            v
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences_over_two_steps() {
        let xs = [array![0.4, -0.2], array![-0.9, 0.6]];
        let probe = array![1.0, -2.0, 0.5];
        let loss = |net: &GruHarness| {
            let mut h = Array1::zeros(3);
            for x in &xs {
                let (h_new, _) = net.0.forward(&x.view(), &h.view());
                h = h_new;
            }
            h.dot(&probe)
        };
        let mut net = GruHarness(GruCell::new(2, 3, &mut rng(7)));
        let mut grads = GruHarness(net.0.zeros_like());

        // Forward storing caches, then backprop through time.
        let mut h = Array1::zeros(3);
        let mut caches = Vec::new();
        for x in &xs {
            let (h_new, c) = net.0.forward(&x.view(), &h.view());
            caches.push(c);
            h = h_new;
        }
        let mut dh = probe.clone();
        for c in caches.iter().rev() {
            let mut dx = Array1::zeros(2);
            dh = net.0.backward(c, &dh.view(), &mut grads.0, &mut dx);
        }
        let err = fd_max_rel_err(&mut net, &grads, &loss, 10, 8);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut opt = Adam::new(0.01, &[2]);
        let mut theta = vec![1.0f64, -2.0];
        let grad = [0.5f64, -3.0];
        {
            let mut params = vec![ParamEntryMut { name: "p".into(), data: &mut theta }];
            let grads = vec![ParamEntry { name: "p".into(), shape: vec![2], data: &grad }];
            opt.step(&mut params, &grads);
        }
        // After one step m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps).
        for (i, (&t, &g)) in theta.iter().zip(grad.iter()).enumerate() {
            let expect = [1.0, -2.0][i] - 0.01 * g / (g.abs() + 1e-8);
            assert_relative_eq!(t, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_norm_clip_scales_to_bound() {
        let mut a = vec![3.0f64, 0.0];
        let mut b = vec![0.0f64, 4.0];
        let mut grads = vec![
            ParamEntryMut { name: "a".into(), data: &mut a },
            ParamEntryMut { name: "b".into(), data: &mut b },
        ];
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert_relative_eq!(pre, 5.0, epsilon = 1e-12);
        let post = (a.iter().chain(&b).map(|v| v * v).sum::<f64>()).sqrt();
        assert_relative_eq!(post, 1.0, epsilon = 1e-12);

        let mut c = vec![0.1f64];
        let mut small = vec![ParamEntryMut { name: "c".into(), data: &mut c }];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(c[0], 0.1, "norms under the bound are untouched");
    }

    #[test]
    fn softmax_known_values() {
        let p = softmax(&array![2.0f64.ln(), 0.0].view());
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-12);
        // Shift invariance at extreme magnitudes.
        let q = softmax(&array![1000.0 + 2.0f64.ln(), 1000.0].view());
        assert_relative_eq!(q[0], 2.0 / 3.0, epsilon = 1e-12);
    }
}
