//! Centralized critics over variable-size observation sets.
//!
//! Three critics share the team-value interface:
//!
//! * [`SetTeacherCritic`] — embeds each agent observation with a shared
//!   encoder, forms `K` coordination tokens by cross-attending learned
//!   queries over the embedding set, and scores the flattened tokens with a
//!   value head. The same embeddings and tokens also yield a personalized
//!   context vector per agent (token mixture weighted by embedding–token
//!   affinity), which is what gets distilled into the decentralized actors.
//! * [`PaddedCritic`] — concatenates observations zero-padded to the maximum
//!   roster plus a presence mask (order-dependent by construction).
//! * [`MeanPoolCritic`] — value of the mean embedding, permutation-invariant
//!   but blind to which agent is which.
//!
//! [`EmaTeacher`] holds the slow-moving shadow of the set critic that serves
//! as the distillation target, keeping targets stable between updates.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, MlpCache, ParamEntry, ParamEntryMut, Params};

/// Shapes and switches for the set-structured critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub obs_width: usize,
    /// Embedding / token / context dimensionality `d`.
    pub embed_dim: usize,
    /// Hidden widths of the shared per-agent encoder.
    pub phi_widths: Vec<usize>,
    /// Number of coordination tokens `K`.
    pub tokens: usize,
    /// Hidden widths of the value head.
    pub value_widths: Vec<usize>,
    /// Append the normalized roster size to the value-head input.
    pub size_feature: bool,
    /// Largest admissible roster; normalizes the size feature.
    pub max_roster: usize,
}

/// Set-structured teacher critic with personalized context read-out.
#[derive(Debug, Clone)]
pub struct SetTeacherCritic {
    pub cfg: TeacherConfig,
    /// Shared observation encoder φ.
    pub phi: Mlp,
    /// Learned queries, one row per coordination token.
    pub queries: Array2<f64>,
    /// Value head over the flattened tokens (plus optional size feature).
    pub value: Mlp,
}

/// Everything the value backward pass needs from one forward evaluation.
pub struct TeacherForward {
    phi_caches: Vec<MlpCache>,
    /// Per-agent embeddings, one row per agent (n×d).
    pub embeds: Array2<f64>,
    /// Attention over agents per token (K×n rows summing to 1).
    pub attn: Array2<f64>,
    /// Coordination tokens (K×d).
    pub tokens: Array2<f64>,
    value_cache: MlpCache,
    pub value: f64,
}

impl SetTeacherCritic {
    pub fn new(cfg: TeacherConfig, rng: &mut impl Rng) -> Self {
        let mut phi_widths = cfg.phi_widths.clone();
        phi_widths.push(cfg.embed_dim);
        let phi = Mlp::new(cfg.obs_width, &phi_widths, true, 1.0, rng);
        let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
        let queries =
            Array2::from_shape_fn((cfg.tokens, cfg.embed_dim), |_| {
                let g: f64 = rng.sample(StandardNormal);
                g * scale
            });
        let mut value_widths = cfg.value_widths.clone();
        value_widths.push(1);
        let in_dim = cfg.tokens * cfg.embed_dim + usize::from(cfg.size_feature);
        let value = Mlp::new(in_dim, &value_widths, true, 1.0, rng);
        Self { cfg, phi, queries, value }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            phi: self.phi.zeros_like(),
            queries: Array2::zeros(self.queries.raw_dim()),
            value: self.value.zeros_like(),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.cfg.embed_dim as f64).sqrt()
    }

    /// Full forward pass over one observation set.
    pub fn forward(&self, obs_set: &[Vec<f64>]) -> TeacherForward {
        let n = obs_set.len();
        assert!(n > 0, "empty observation set");
        let d = self.cfg.embed_dim;
        let k = self.cfg.tokens;

        let mut embeds = Array2::zeros((n, d));
        let mut phi_caches = Vec::with_capacity(n);
        for (i, obs) in obs_set.iter().enumerate() {
            let (e, cache) = self.phi.forward(&Array1::from_vec(obs.clone()).view());
            embeds.row_mut(i).assign(&e);
            phi_caches.push(cache);
        }

        // Token k attends over agents: α_k = softmax_j(q_k · e_j / √d).
        let mut attn = Array2::zeros((k, n));
        for t in 0..k {
            let scores = embeds.dot(&self.queries.row(t)) * self.scale();
            attn.row_mut(t).assign(&crate::nn::softmax(&scores.view()));
        }
        let tokens = attn.dot(&embeds);

        let mut value_input = Vec::with_capacity(self.value.in_dim());
        value_input.extend(tokens.iter().copied());
        if self.cfg.size_feature {
            value_input.push(n as f64 / self.cfg.max_roster as f64);
        }
        let (v, value_cache) = self.value.forward(&Array1::from_vec(value_input).view());

        TeacherForward { phi_caches, embeds, attn, tokens, value_cache, value: v[0] }
    }

    /// Personalized context per agent: c_i mixes the tokens by the softmax
    /// affinity between e_i and each token. Returns (contexts n×d, η n×K).
    pub fn personalize(&self, embeds: &Array2<f64>, tokens: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = embeds.nrows();
        let k = tokens.nrows();
        let mut eta = Array2::zeros((n, k));
        for i in 0..n {
            let scores = tokens.dot(&embeds.row(i)) * self.scale();
            eta.row_mut(i).assign(&crate::nn::softmax(&scores.view()));
        }
        let contexts = eta.dot(tokens);
        (contexts, eta)
    }

    /// Convenience: contexts for an observation set (no caches retained).
    pub fn contexts_for(&self, obs_set: &[Vec<f64>]) -> Array2<f64> {
        let fwd = self.forward(obs_set);
        self.personalize(&fwd.embeds, &fwd.tokens).0
    }

    /// Backward from a scalar gradient on the value output, accumulating
    /// into `grads` (same layout as `self`).
    pub fn backward(&self, fwd: &TeacherForward, dv: f64, grads: &mut SetTeacherCritic) {
        let n = fwd.embeds.nrows();
        let d = self.cfg.embed_dim;
        let k = self.cfg.tokens;
        let scale = self.scale();

        let mut d_input = Array1::zeros(self.value.in_dim());
        self.value.backward(
            &fwd.value_cache,
            &Array1::from_vec(vec![dv]).view(),
            &mut grads.value,
            Some(&mut d_input),
        );
        // Any size-feature slot gradient is dropped: it is an input, not a
        // parameter.
        let mut d_embeds = Array2::<f64>::zeros((n, d));
        for t in 0..k {
            let dz = d_input.slice(ndarray::s![t * d..(t + 1) * d]);
            // z_t = Σ_j α_tj e_j
            let alpha = fwd.attn.row(t);
            let d_alpha = fwd.embeds.dot(&dz); // dα_tj = dz · e_j
            let dot = alpha.dot(&d_alpha);
            for j in 0..n {
                let ds = alpha[j] * (d_alpha[j] - dot); // softmax backward
                d_embeds
                    .row_mut(j)
                    .zip_mut_with(&dz, |acc, &v| *acc += alpha[j] * v);
                grads
                    .queries
                    .row_mut(t)
                    .zip_mut_with(&fwd.embeds.row(j), |q, &e| *q += ds * e * scale);
                d_embeds
                    .row_mut(j)
                    .zip_mut_with(&self.queries.row(t), |acc, &q| *acc += ds * q * scale);
            }
        }
        for (i, cache) in fwd.phi_caches.iter().enumerate() {
            self.phi.backward(cache, &d_embeds.row(i), &mut grads.phi, None);
        }
    }
}

impl Params for SetTeacherCritic {
    fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut v = Vec::new();
        self.phi.collect("phi", &mut v);
        v.push(ParamEntry {
            name: "queries".into(),
            shape: vec![self.queries.nrows(), self.queries.ncols()],
            data: self.queries.as_slice().expect("standard layout"),
        });
        self.value.collect("value", &mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut v = Vec::new();
        self.phi.collect_mut("phi", &mut v);
        v.push(ParamEntryMut {
            name: "queries".into(),
            data: self.queries.as_slice_mut().expect("standard layout"),
        });
        self.value.collect_mut("value", &mut v);
        v
    }
}

// ---------------------------------------------------------------------------
// EMA shadow
// ---------------------------------------------------------------------------

/// Exponential-moving-average copy of the set critic. The shadow provides
/// the distillation targets, decoupling them from the fast value updates.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    pub shadow: SetTeacherCritic,
    pub tau: f64,
}

impl EmaTeacher {
    /// Starts the shadow as an exact copy of the live critic.
    pub fn new(live: &SetTeacherCritic, tau: f64) -> Self {
        Self { shadow: live.clone(), tau }
    }

    /// `shadow ← (1 − τ)·shadow + τ·live`, applied once per learner update.
    pub fn update(&mut self, live: &SetTeacherCritic) {
        let tau = self.tau;
        let live_params = live.params();
        for (s, l) in self.shadow.params_mut().iter_mut().zip(&live_params) {
            debug_assert_eq!(s.name, l.name);
            for (sv, &lv) in s.data.iter_mut().zip(l.data) {
                *sv = (1.0 - tau) * *sv + tau * lv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Padded joint-observation critic
// ---------------------------------------------------------------------------

/// Centralized critic over `[o_1 … o_max | mask]` with zeros for absent
/// agents. Input width is fixed by the maximum roster, so one network serves
/// every team size, at the cost of order sensitivity.
#[derive(Debug, Clone)]
pub struct PaddedCritic {
    pub net: Mlp,
    pub obs_width: usize,
    pub max_roster: usize,
}

pub struct PaddedForward {
    cache: MlpCache,
    pub value: f64,
}

impl PaddedCritic {
    pub fn new(obs_width: usize, max_roster: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut w = widths.to_vec();
        w.push(1);
        let net = Mlp::new(max_roster * obs_width + max_roster, &w, true, 1.0, rng);
        Self { net, obs_width, max_roster }
    }

    pub fn zeros_like(&self) -> Self {
        Self { net: self.net.zeros_like(), obs_width: self.obs_width, max_roster: self.max_roster }
    }

    fn input(&self, obs_set: &[Vec<f64>]) -> Array1<f64> {
        let n = obs_set.len();
        assert!(n <= self.max_roster, "roster exceeds critic capacity");
        let mut x = vec![0.0; self.max_roster * self.obs_width + self.max_roster];
        for (i, obs) in obs_set.iter().enumerate() {
            x[i * self.obs_width..(i + 1) * self.obs_width].copy_from_slice(obs);
        }
        for i in 0..n {
            x[self.max_roster * self.obs_width + i] = 1.0;
        }
        Array1::from_vec(x)
    }

    pub fn forward(&self, obs_set: &[Vec<f64>]) -> PaddedForward {
        let (v, cache) = self.net.forward(&self.input(obs_set).view());
        PaddedForward { cache, value: v[0] }
    }

    pub fn backward(&self, fwd: &PaddedForward, dv: f64, grads: &mut PaddedCritic) {
        self.net.backward(
            &fwd.cache,
            &Array1::from_vec(vec![dv]).view(),
            &mut grads.net,
            None,
        );
    }
}

impl Params for PaddedCritic {
    fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut v = Vec::new();
        self.net.collect("joint", &mut v);
        v
    }
    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut v = Vec::new();
        self.net.collect_mut("joint", &mut v);
        v
    }
}

// ---------------------------------------------------------------------------
// Mean-pooled permutation-invariant critic
// ---------------------------------------------------------------------------

/// Permutation-invariant critic: value of the mean per-agent embedding, with
/// an optional normalized roster-size input.
#[derive(Debug, Clone)]
pub struct MeanPoolCritic {
    pub phi: Mlp,
    pub head: Mlp,
    pub size_feature: bool,
    pub max_roster: usize,
}

pub struct MeanPoolForward {
    phi_caches: Vec<MlpCache>,
    head_cache: MlpCache,
    pub value: f64,
}

impl MeanPoolCritic {
    pub fn new(
        obs_width: usize,
        embed_dim: usize,
        phi_widths: &[usize],
        head_widths: &[usize],
        size_feature: bool,
        max_roster: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut pw = phi_widths.to_vec();
        pw.push(embed_dim);
        let phi = Mlp::new(obs_width, &pw, true, 1.0, rng);
        let mut hw = head_widths.to_vec();
        hw.push(1);
        let head = Mlp::new(embed_dim + usize::from(size_feature), &hw, true, 1.0, rng);
        Self { phi, head, size_feature, max_roster }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi: self.phi.zeros_like(),
            head: self.head.zeros_like(),
            size_feature: self.size_feature,
            max_roster: self.max_roster,
        }
    }

    pub fn forward(&self, obs_set: &[Vec<f64>]) -> MeanPoolForward {
        let n = obs_set.len();
        assert!(n > 0, "empty observation set");
        let d = self.phi.out_dim();
        let mut pooled = Array1::<f64>::zeros(d);
        let mut phi_caches = Vec::with_capacity(n);
        for obs in obs_set {
            let (e, cache) = self.phi.forward(&Array1::from_vec(obs.clone()).view());
            pooled += &e;
            phi_caches.push(cache);
        }
        pooled.mapv_inplace(|v| v / n as f64);
        let mut input = pooled.to_vec();
        if self.size_feature {
            input.push(n as f64 / self.max_roster as f64);
        }
        let (v, head_cache) = self.head.forward(&Array1::from_vec(input).view());
        MeanPoolForward { phi_caches, head_cache, value: v[0] }
    }

    pub fn backward(&self, fwd: &MeanPoolForward, dv: f64, grads: &mut MeanPoolCritic) {
        let n = fwd.phi_caches.len();
        let d = self.phi.out_dim();
        let mut d_input = Array1::zeros(self.head.in_dim());
        self.head.backward(
            &fwd.head_cache,
            &Array1::from_vec(vec![dv]).view(),
            &mut grads.head,
            Some(&mut d_input),
        );
        let d_embed = d_input.slice(ndarray::s![..d]).mapv(|v| v / n as f64);
        for cache in &fwd.phi_caches {
            self.phi.backward(cache, &d_embed.view(), &mut grads.phi, None);
        }
    }
}

impl Params for MeanPoolCritic {
    fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut v = Vec::new();
        self.phi.collect("pool_phi", &mut v);
        self.head.collect("pool_head", &mut v);
        v
    }
    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut v = Vec::new();
        self.phi.collect_mut("pool_phi", &mut v);
        self.head.collect_mut("pool_head", &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn cfg(obs: usize, d: usize, k: usize, size_feature: bool) -> TeacherConfig {
        TeacherConfig {
            obs_width: obs,
            embed_dim: d,
            phi_widths: vec![8],
            tokens: k,
            value_widths: vec![8],
            size_feature,
            max_roster: 8,
        }
    }

    fn obs_set(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut rng = stream(seed, "obs", 0);
        (0..n).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn single_agent_tokens_copy_the_embedding() {
        let teacher = SetTeacherCritic::new(cfg(5, 4, 3, false), &mut stream(1, "init", 0));
        let fwd = teacher.forward(&obs_set(1, 5, 2));
        for t in 0..3 {
            assert_relative_eq!(fwd.attn[[t, 0]], 1.0, epsilon = 1e-15);
            for c in 0..4 {
                assert_relative_eq!(fwd.tokens[[t, c]], fwd.embeds[[0, c]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn identical_observations_give_uniform_attention() {
        let teacher = SetTeacherCritic::new(cfg(5, 4, 2, false), &mut stream(3, "init", 0));
        let one = obs_set(1, 5, 4).pop().unwrap();
        let fwd = teacher.forward(&vec![one; 4]);
        for t in 0..2 {
            for j in 0..4 {
                assert_relative_eq!(fwd.attn[[t, j]], 0.25, epsilon = 1e-12);
            }
            for c in 0..4 {
                assert_relative_eq!(fwd.tokens[[t, c]], fwd.embeds[[0, c]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_naive_reimplementation() {
        // Independent re-computation of the token path from the embeddings,
        // using the plain softmax definition without the max-shift.
        let teacher = SetTeacherCritic::new(cfg(6, 4, 2, false), &mut stream(5, "init", 0));
        let set = obs_set(3, 6, 6);
        let fwd = teacher.forward(&set);
        let scale = 1.0 / (4.0f64).sqrt();
        for t in 0..2 {
            let exps: Vec<f64> = (0..3)
                .map(|j| (teacher.queries.row(t).dot(&fwd.embeds.row(j)) * scale).exp())
                .collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                assert_relative_eq!(fwd.attn[[t, j]], exps[j] / z, epsilon = 1e-9);
            }
            for c in 0..4 {
                let expect: f64 = (0..3).map(|j| exps[j] / z * fwd.embeds[[j, c]]).sum();
                assert_relative_eq!(fwd.tokens[[t, c]], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn personalization_matches_naive_reimplementation_and_k1_copies_token() {
        let teacher = SetTeacherCritic::new(cfg(6, 4, 4, false), &mut stream(7, "init", 0));
        let set = obs_set(3, 6, 8);
        let fwd = teacher.forward(&set);
        let (contexts, eta) = teacher.personalize(&fwd.embeds, &fwd.tokens);
        let scale = 0.5;
        for i in 0..3 {
            let exps: Vec<f64> = (0..4)
                .map(|k| (fwd.embeds.row(i).dot(&fwd.tokens.row(k)) * scale).exp())
                .collect();
            let z: f64 = exps.iter().sum();
            for k in 0..4 {
                assert_relative_eq!(eta[[i, k]], exps[k] / z, epsilon = 1e-9);
            }
            for c in 0..4 {
                let expect: f64 = (0..4).map(|k| exps[k] / z * fwd.tokens[[k, c]]).sum();
                assert_relative_eq!(contexts[[i, c]], expect, epsilon = 1e-9);
            }
        }

        let single = SetTeacherCritic::new(cfg(6, 4, 1, false), &mut stream(9, "init", 0));
        let fwd = single.forward(&set);
        let (contexts, eta) = single.personalize(&fwd.embeds, &fwd.tokens);
        for i in 0..3 {
            assert_relative_eq!(eta[[i, 0]], 1.0, epsilon = 1e-15);
            for c in 0..4 {
                assert_relative_eq!(contexts[[i, c]], fwd.tokens[[0, c]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn team_value_is_permutation_invariant() {
        let teacher = SetTeacherCritic::new(cfg(5, 6, 3, true), &mut stream(11, "init", 0));
        let set = obs_set(5, 5, 12);
        let v = teacher.forward(&set).value;
        let mut permuted = set.clone();
        permuted.rotate_left(2);
        permuted.swap(0, 3);
        let vp = teacher.forward(&permuted).value;
        assert_relative_eq!(v, vp, epsilon = 1e-9);
    }

    #[test]
    fn personalization_is_permutation_equivariant() {
        let teacher = SetTeacherCritic::new(cfg(5, 4, 3, false), &mut stream(13, "init", 0));
        let set = obs_set(4, 5, 14);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| set[i].clone()).collect();
        let base = teacher.contexts_for(&set);
        let moved = teacher.contexts_for(&permuted);
        for (slot, &orig) in perm.iter().enumerate() {
            for c in 0..4 {
                assert_relative_eq!(moved[[slot, c]], base[[orig, c]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_encoder_embeds_everything_to_the_bias() {
        let mut teacher = SetTeacherCritic::new(cfg(5, 4, 2, false), &mut stream(15, "init", 0));
        teacher.phi = teacher.phi.zeros_like();
        teacher.phi.layers.last_mut().unwrap().b =
            Array1::from_vec(vec![0.5, -1.0, 0.0, 2.0]);
        let fwd = teacher.forward(&obs_set(3, 5, 16));
        for i in 0..3 {
            assert_eq!(
                fwd.embeds.row(i).to_vec(),
                vec![0.5, -1.0, 0.0, 2.0],
                "agent {i}"
            );
        }
    }

    #[test]
    fn size_feature_distinguishes_roster_sizes() {
        let mut teacher = SetTeacherCritic::new(cfg(5, 4, 2, true), &mut stream(17, "init", 0));
        // Silence everything except the size slot: v = tanh(size) through the
        // value head's first unit.
        teacher.phi = teacher.phi.zeros_like();
        teacher.value = teacher.value.zeros_like();
        let size_slot = 2 * 4; // K·d
        teacher.value.layers[0].w[[0, size_slot]] = 1.0;
        teacher.value.layers[1].w[[0, 0]] = 1.0;
        let one = vec![0.0; 5];
        let v2 = teacher.forward(&vec![one.clone(); 2]).value;
        let v4 = teacher.forward(&vec![one; 4]).value;
        assert_relative_eq!(v2, (2.0f64 / 8.0).tanh(), epsilon = 1e-12);
        assert_relative_eq!(v4, (4.0f64 / 8.0).tanh(), epsilon = 1e-12);
    }

    #[test]
    fn value_gradients_match_finite_differences() {
        let set = obs_set(3, 5, 18);
        let mut teacher = SetTeacherCritic::new(cfg(5, 4, 2, true), &mut stream(19, "init", 0));
        let mut grads = teacher.zeros_like();
        let fwd = teacher.forward(&set);
        teacher.backward(&fwd, 1.0, &mut grads);

        use rand::Rng;
        let mut rng = stream(20, "fd", 0);
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data.to_vec()).collect();
        let n_arrays = analytic.len();
        let mut worst = 0.0f64;
        for a in 0..n_arrays {
            for _ in 0..6usize.min(analytic[a].len()) {
                let i = rng.gen_range(0..analytic[a].len());
                let orig = teacher.params()[a].data[i];
                let h = 1e-6 * orig.abs().max(1.0);
                teacher.params_mut()[a].data[i] = orig + h;
                let fp = teacher.forward(&set).value;
                teacher.params_mut()[a].data[i] = orig - h;
                let fm = teacher.forward(&set).value;
                teacher.params_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[a][i];
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-5, "max rel err {worst}");
    }

    #[test]
    fn ema_degenerate_and_typical_rates() {
        let live = SetTeacherCritic::new(cfg(5, 4, 2, false), &mut stream(21, "init", 0));
        let start = SetTeacherCritic::new(cfg(5, 4, 2, false), &mut stream(22, "init", 0));

        // τ = 1 copies the live critic exactly.
        let mut ema = EmaTeacher { shadow: start.clone(), tau: 1.0 };
        ema.update(&live);
        for (s, l) in ema.shadow.params().iter().zip(live.params().iter()) {
            assert_eq!(s.data, l.data);
        }

        // τ = 0 leaves the shadow untouched.
        let mut ema = EmaTeacher { shadow: start.clone(), tau: 0.0 };
        ema.update(&live);
        for (s, o) in ema.shadow.params().iter().zip(start.params().iter()) {
            assert_eq!(s.data, o.data);
        }

        // Generic τ: exact convex combination, elementwise between the ends.
        let tau = 0.02;
        let mut ema = EmaTeacher { shadow: start.clone(), tau };
        ema.update(&live);
        for ((s, o), l) in ema
            .shadow
            .params()
            .iter()
            .zip(start.params().iter())
            .zip(live.params().iter())
        {
            for i in 0..s.data.len() {
                let expect = (1.0 - tau) * o.data[i] + tau * l.data[i];
                assert_relative_eq!(s.data[i], expect, epsilon = 1e-15);
                let (lo, hi) = if o.data[i] <= l.data[i] {
                    (o.data[i], l.data[i])
                } else {
                    (l.data[i], o.data[i])
                };
                assert!(s.data[i] >= lo - 1e-15 && s.data[i] <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn padded_critic_is_order_sensitive_and_mask_marks_presence() {
        let critic = PaddedCritic::new(4, 5, &[8], &mut stream(23, "init", 0));
        let set = obs_set(3, 4, 24);
        let v = critic.forward(&set).value;
        let mut swapped = set.clone();
        swapped.swap(0, 2);
        let vs = critic.forward(&swapped).value;
        assert!(
            (v - vs).abs() > 1e-9,
            "padded critic should depend on agent order (v={v}, swapped={vs})"
        );
        // Full roster fills every slot.
        let full = critic.input(&obs_set(5, 4, 25));
        assert!(full.slice(ndarray::s![20..]).iter().all(|&m| m == 1.0));
        // Partial roster zero-pads and masks.
        let part = critic.input(&set);
        assert_eq!(part.slice(ndarray::s![20..]).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(part.slice(ndarray::s![12..20]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_pool_critic_is_permutation_invariant_and_duplicate_blind() {
        let critic = MeanPoolCritic::new(4, 6, &[8], &[8], false, 8, &mut stream(27, "init", 0));
        let set = obs_set(4, 4, 28);
        let v = critic.forward(&set).value;
        let mut permuted = set.clone();
        permuted.reverse();
        assert_relative_eq!(critic.forward(&permuted).value, v, epsilon = 1e-9);

        // Without the size feature, duplicating the whole set is invisible.
        let doubled: Vec<Vec<f64>> = set.iter().chain(set.iter()).cloned().collect();
        assert_relative_eq!(critic.forward(&doubled).value, v, epsilon = 1e-9);

        // With it, the same duplication changes the value.
        let sized = MeanPoolCritic::new(4, 6, &[8], &[8], true, 8, &mut stream(29, "init", 0));
        let v4 = sized.forward(&set).value;
        let doubled: Vec<Vec<f64>> = set.iter().chain(set.iter()).cloned().collect();
        let v8 = sized.forward(&doubled).value;
        assert!((v4 - v8).abs() > 1e-9);
    }

    #[test]
    fn critics_accept_every_admissible_roster() {
        let teacher = SetTeacherCritic::new(cfg(5, 4, 3, true), &mut stream(31, "init", 0));
        let padded = PaddedCritic::new(5, 8, &[8], &mut stream(32, "init", 0));
        let pool = MeanPoolCritic::new(5, 4, &[8], &[8], true, 8, &mut stream(33, "init", 0));
        for n in 1..=8 {
            let set = obs_set(n, 5, 40 + n as u64);
            let fwd = teacher.forward(&set);
            assert!(fwd.value.is_finite());
            let (contexts, eta) = teacher.personalize(&fwd.embeds, &fwd.tokens);
            assert_eq!(contexts.nrows(), n);
            for i in 0..n {
                assert_relative_eq!(eta.row(i).sum(), 1.0, epsilon = 1e-12);
            }
            assert!(padded.forward(&set).value.is_finite());
            assert!(pool.forward(&set).value.is_finite());
        }
    }

    #[test]
    fn mean_pool_gradients_match_finite_differences() {
        let set = obs_set(3, 4, 50);
        let mut critic = MeanPoolCritic::new(4, 5, &[6], &[6], true, 8, &mut stream(51, "init", 0));
        let mut grads = critic.zeros_like();
        let fwd = critic.forward(&set);
        critic.backward(&fwd, 1.0, &mut grads);

        use rand::Rng;
        let mut rng = stream(52, "fd", 0);
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data.to_vec()).collect();
        let mut worst = 0.0f64;
        for a in 0..analytic.len() {
            for _ in 0..6usize.min(analytic[a].len()) {
                let i = rng.gen_range(0..analytic[a].len());
                let orig = critic.params()[a].data[i];
                let h = 1e-6 * orig.abs().max(1.0);
                critic.params_mut()[a].data[i] = orig + h;
                let fp = critic.forward(&set).value;
                critic.params_mut()[a].data[i] = orig - h;
                let fm = critic.forward(&set).value;
                critic.params_mut()[a].data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[a][i];
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-5, "max rel err {worst}");
    }
}
