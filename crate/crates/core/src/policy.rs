//! Decentralized recurrent actor with optional distilled-context read-out.
//!
//! Every agent runs the same network (full parameter sharing): an MLP trunk
//! into a GRU, then a categorical policy head. Context-conditioned variants
//! add three read-outs of the recurrent state — a student context `ĉ` (the
//! distillation student), a scalar reliance `ρ` hard-clipped to a configured
//! range, and a gate `g = σ(a·ρ + b)` — and modulate only the policy head
//! input:
//!
//! * FiLM: `h̃ = h ⊙ (1 + g·γ) + g·β` with `[γ; β]` linear in `ĉ`;
//! * hyper: logits come from `(W₀ + g·ΔW) h + (b₀ + g·Δb)` where `(ΔW, Δb)`
//!   is a small network of `ĉ`, and `h` itself is left untouched.
//!
//! The recurrent state is never modulated, so context can steer the current
//! decision but cannot rewrite the agent's memory. Forcing the gate to zero
//! takes the exact unmodulated code path, which makes the gate-off ablation
//! bit-identical to surgically removing the mechanism.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{softmax, GruCache, GruCell, Linear, Mlp, MlpCache, ParamEntry, ParamEntryMut, Params};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite logits: {0:?}")]
    NonFiniteLogits(Vec<f64>),
}

/// How the student context conditions the policy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Gated feature-wise modulation of the policy-head input.
    #[default]
    Film,
    /// Gated low-rank correction of the policy head itself.
    Hyper,
    /// FiLM structure with the gate forced to 0 (modulation removed).
    GateOff,
    /// FiLM structure with the gate forced to 1 (always fully on).
    GateOn,
}

impl ConditioningMode {
    pub fn uses_hyper_head(self) -> bool {
        matches!(self, ConditioningMode::Hyper)
    }
}

/// Actor shapes and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub obs_width: usize,
    pub action_count: usize,
    /// Widths of the tanh trunk between observation and GRU.
    pub mlp_widths: Vec<usize>,
    pub rnn_dim: usize,
    /// Student-context dimensionality; must match the teacher's embed_dim.
    pub context_dim: usize,
    /// Hard clip range for the reliance scalar.
    pub rho_min: f64,
    pub rho_max: f64,
    pub mode: ConditioningMode,
    /// Give the actor a local value head (independent-learner critics).
    pub local_value: bool,
    /// Whether the context/reliance/modulation machinery exists at all.
    pub with_context: bool,
    /// Hidden width of the hypernetwork head.
    pub hyper_hidden: usize,
}

/// Context-to-logits conditioner.
#[derive(Debug, Clone)]
pub enum Conditioner {
    /// `d → 2·rnn_dim` producing `[γ; β]`.
    Film(Linear),
    /// `d → action_count·rnn_dim + action_count` producing `(ΔW, Δb)`.
    Hyper(Mlp),
}

/// The context read-out stack of a conditioned actor.
#[derive(Debug, Clone)]
pub struct ContextPath {
    /// Student context head: `ĉ = W_c h + b_c`.
    pub context: Linear,
    /// Reliance head: `ρ = clip(w_u·h + b_u)`.
    pub reliance: Linear,
    /// Gate parameters `[a_g, b_g]` in `g = σ(a_g·ρ + b_g)`.
    pub gate: Array1<f64>,
    pub conditioner: Conditioner,
}

/// Shared-parameter recurrent actor.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub cfg: ActorConfig,
    pub trunk: Mlp,
    pub gru: GruCell,
    /// Base policy head (also the `W₀, b₀` of the hyper variant).
    pub policy: Linear,
    pub value: Option<Linear>,
    pub ctx: Option<ContextPath>,
}

/// Public outputs of one actor step.
pub struct ActorStep {
    /// New recurrent state (pre-modulation).
    pub h: Array1<f64>,
    pub logits: Array1<f64>,
    /// Student context `ĉ`, when the actor has a context path.
    pub context: Option<Array1<f64>>,
    /// Clipped reliance `ρ`.
    pub reliance: Option<f64>,
    /// Gate value `g` actually applied (0 or 1 under forced modes).
    pub gate: Option<f64>,
    /// Local value estimate, when configured.
    pub value: Option<f64>,
}

struct FilmCache {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct HyperCache {
    net_cache: MlpCache,
    dw: Array2<f64>,
    db: Array1<f64>,
}

struct CtxCache {
    chat: Array1<f64>,
    /// Pre-clip reliance.
    u: f64,
    rho: f64,
    g: f64,
    film: Option<FilmCache>,
    hyper: Option<HyperCache>,
}

/// Intermediates for one step, consumed by [`ActorNet::backward_step`].
pub struct ActorCache {
    trunk: MlpCache,
    gru: GruCache,
    h_new: Array1<f64>,
    /// Policy-head input (equals `h_new` when unmodulated).
    htilde: Array1<f64>,
    ctx: Option<CtxCache>,
}

/// Gradients flowing into one step from the loss.
pub struct ActorStepGrad<'a> {
    pub d_logits: ArrayView1<'a, f64>,
    pub d_value: f64,
    /// Distillation gradient on the student context.
    pub d_context: Option<ArrayView1<'a, f64>>,
}

impl ActorNet {
    pub fn new(cfg: ActorConfig, rng: &mut impl Rng) -> Self {
        let trunk = Mlp::new(cfg.obs_width, &cfg.mlp_widths, false, 1.0, rng);
        let gru = GruCell::new(*cfg.mlp_widths.last().unwrap(), cfg.rnn_dim, rng);
        // Small-gain policy head keeps the initial policy near uniform.
        let policy = Linear::new(cfg.rnn_dim, cfg.action_count, 0.01, rng);
        let value = cfg.local_value.then(|| Linear::new(cfg.rnn_dim, 1, 1.0, rng));
        let ctx = cfg.with_context.then(|| {
            let context = Linear::new(cfg.rnn_dim, cfg.context_dim, 1.0, rng);
            let reliance = Linear::new(cfg.rnn_dim, 1, 1.0, rng);
            let conditioner = if cfg.mode.uses_hyper_head() {
                Conditioner::Hyper(Mlp::new(
                    cfg.context_dim,
                    &[cfg.hyper_hidden, cfg.action_count * cfg.rnn_dim + cfg.action_count],
                    true,
                    0.01,
                    rng,
                ))
            } else {
                Conditioner::Film(Linear::new(cfg.context_dim, 2 * cfg.rnn_dim, 1.0, rng))
            };
            ContextPath {
                context,
                reliance,
                gate: Array1::from_vec(vec![1.0, 0.0]),
                conditioner,
            }
        });
        Self { cfg, trunk, gru, policy, value, ctx }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            trunk: self.trunk.zeros_like(),
            gru: self.gru.zeros_like(),
            policy: self.policy.zeros_like(),
            value: self.value.as_ref().map(Linear::zeros_like),
            ctx: self.ctx.as_ref().map(|c| ContextPath {
                context: c.context.zeros_like(),
                reliance: c.reliance.zeros_like(),
                gate: Array1::zeros(2),
                conditioner: match &c.conditioner {
                    Conditioner::Film(l) => Conditioner::Film(l.zeros_like()),
                    Conditioner::Hyper(m) => Conditioner::Hyper(m.zeros_like()),
                },
            }),
        }
    }

    pub fn initial_state(&self) -> Array1<f64> {
        Array1::zeros(self.cfg.rnn_dim)
    }

    /// One time step for one agent.
    pub fn forward_step(&self, obs: &[f64], h: &ArrayView1<f64>) -> (ActorStep, ActorCache) {
        debug_assert_eq!(obs.len(), self.cfg.obs_width);
        let (feat, trunk_cache) = self.trunk.forward(&ndarray::aview1(obs));
        let (h_new, gru_cache) = self.gru.forward(&feat.view(), h);
        let value = self.value.as_ref().map(|vh| vh.forward(&h_new.view())[0]);

        let (logits, htilde, ctx_cache, step_ctx) = match &self.ctx {
            None => {
                let logits = self.policy.forward(&h_new.view());
                (logits, h_new.clone(), None, (None, None, None))
            }
            Some(path) => {
                let chat = path.context.forward(&h_new.view());
                let u = path.reliance.forward(&h_new.view())[0];
                let rho = u.clamp(self.cfg.rho_min, self.cfg.rho_max);
                let g = match self.cfg.mode {
                    ConditioningMode::GateOff => 0.0,
                    ConditioningMode::GateOn => 1.0,
                    _ => sigmoid(path.gate[0] * rho + path.gate[1]),
                };
                match &path.conditioner {
                    Conditioner::Film(film) => {
                        let (htilde, film_cache) = if g == 0.0 {
                            // Exact unmodulated path: bit-identical to an
                            // actor without the mechanism.
                            (h_new.clone(), None)
                        } else {
                            let gb = film.forward(&chat.view());
                            let (gamma, beta) = split_gamma_beta(&gb, self.cfg.rnn_dim);
                            let htilde = &h_new * &(1.0 + &(&gamma * g)) + &(&beta * g);
                            (htilde, Some(FilmCache { gamma, beta }))
                        };
                        let logits = self.policy.forward(&htilde.view());
                        let cc = CtxCache { chat: chat.clone(), u, rho, g, film: film_cache, hyper: None };
                        (logits, htilde, Some(cc), (Some(chat), Some(rho), Some(g)))
                    }
                    Conditioner::Hyper(net) => {
                        let (raw, net_cache) = net.forward(&chat.view());
                        let (a, hdim) = (self.cfg.action_count, self.cfg.rnn_dim);
                        let dw = Array2::from_shape_vec((a, hdim), raw.as_slice().unwrap()[..a * hdim].to_vec())
                            .expect("layout");
                        let db = Array1::from_vec(raw.as_slice().unwrap()[a * hdim..].to_vec());
                        let mut logits = self.policy.forward(&h_new.view());
                        logits += &((dw.dot(&h_new) + &db) * g);
                        let cc = CtxCache {
                            chat: chat.clone(),
                            u,
                            rho,
                            g,
                            film: None,
                            hyper: Some(HyperCache { net_cache, dw, db }),
                        };
                        (logits, h_new.clone(), Some(cc), (Some(chat), Some(rho), Some(g)))
                    }
                }
            }
        };
        let (context, reliance, gate) = step_ctx;
        let step = ActorStep { h: h_new.clone(), logits, context, reliance, gate, value };
        let cache = ActorCache { trunk: trunk_cache, gru: gru_cache, h_new, htilde, ctx: ctx_cache };
        (step, cache)
    }

    /// Backward for one step; returns the gradient on the previous hidden
    /// state. `dh_next` carries the recurrent gradient arriving from step
    /// `t + 1` (zeros at the episode end).
    pub fn backward_step(
        &self,
        cache: &ActorCache,
        grad_in: &ActorStepGrad<'_>,
        dh_next: &Array1<f64>,
        grads: &mut ActorNet,
    ) -> Array1<f64> {
        let hdim = self.cfg.rnn_dim;
        let mut dh = dh_next.clone();

        if let (Some(vh), Some(vg)) = (&self.value, grads.value.as_mut()) {
            if grad_in.d_value != 0.0 {
                let dy = Array1::from_vec(vec![grad_in.d_value]);
                vh.backward(&cache.h_new.view(), &dy.view(), vg, Some(&mut dh));
            }
        }

        match (&self.ctx, &cache.ctx) {
            (None, None) => {
                self.policy.backward(
                    &cache.h_new.view(),
                    &grad_in.d_logits,
                    &mut grads.policy,
                    Some(&mut dh),
                );
            }
            (Some(path), Some(cc)) => {
                let gpath = grads.ctx.as_mut().expect("gradient layout matches");
                let mut d_chat = Array1::zeros(self.cfg.context_dim);
                if let Some(dc) = &grad_in.d_context {
                    d_chat += dc;
                }
                let mut dg = 0.0;

                match &path.conditioner {
                    Conditioner::Film(film) => {
                        let mut d_htilde = Array1::zeros(hdim);
                        self.policy.backward(
                            &cache.htilde.view(),
                            &grad_in.d_logits,
                            &mut grads.policy,
                            Some(&mut d_htilde),
                        );
                        match &cc.film {
                            None => {
                                // Gate exactly zero: modulation absent.
                                dh += &d_htilde;
                            }
                            Some(fc) => {
                                let g = cc.g;
                                for j in 0..hdim {
                                    dh[j] += d_htilde[j] * (1.0 + g * fc.gamma[j]);
                                    dg += d_htilde[j]
                                        * (cache.h_new[j] * fc.gamma[j] + fc.beta[j]);
                                }
                                let mut d_gb = Array1::zeros(2 * hdim);
                                for j in 0..hdim {
                                    d_gb[j] = d_htilde[j] * cache.h_new[j] * g;
                                    d_gb[hdim + j] = d_htilde[j] * g;
                                }
                                let gfilm = match &mut gpath.conditioner {
                                    Conditioner::Film(l) => l,
                                    _ => unreachable!("conditioner layouts match"),
                                };
                                film.backward(&cc.chat.view(), &d_gb.view(), gfilm, Some(&mut d_chat));
                            }
                        }
                    }
                    Conditioner::Hyper(net) => {
                        let a = self.cfg.action_count;
                        let hc = cc.hyper.as_ref().expect("hyper cache");
                        let g = cc.g;
                        // Base head: dW₀ += d_logits h_newᵀ, db₀ += d_logits.
                        for (i, &dl) in grad_in.d_logits.iter().enumerate() {
                            if dl != 0.0 {
                                grads
                                    .policy
                                    .w
                                    .row_mut(i)
                                    .zip_mut_with(&cache.h_new, |w, &hv| *w += dl * hv);
                            }
                            grads.policy.b[i] += dl;
                        }
                        // dh += (W₀ + g·ΔW)ᵀ d_logits.
                        dh += &self.policy.w.t().dot(&grad_in.d_logits);
                        dh += &(hc.dw.t().dot(&grad_in.d_logits) * g);
                        // Gate gradient: d_logits · (ΔW h + Δb).
                        let corr = hc.dw.dot(&cache.h_new) + &hc.db;
                        dg += grad_in.d_logits.dot(&corr);
                        // Hypernetwork gradient through (ΔW, Δb).
                        let mut d_raw = Array1::zeros(a * hdim + a);
                        for (i, &dl) in grad_in.d_logits.iter().enumerate() {
                            for j in 0..hdim {
                                d_raw[i * hdim + j] = dl * g * cache.h_new[j];
                            }
                            d_raw[a * hdim + i] = dl * g;
                        }
                        let gnet = match &mut gpath.conditioner {
                            Conditioner::Hyper(m) => m,
                            _ => unreachable!("conditioner layouts match"),
                        };
                        net.backward(&hc.net_cache, &d_raw.view(), gnet, Some(&mut d_chat));
                    }
                }

                // Gate parameters and reliance, unless the gate is forced.
                if !matches!(self.cfg.mode, ConditioningMode::GateOff | ConditioningMode::GateOn)
                    && dg != 0.0
                {
                    let g = cc.g;
                    let dsig = g * (1.0 - g);
                    gpath.gate[0] += dg * dsig * cc.rho;
                    gpath.gate[1] += dg * dsig;
                    // Hard clip: gradient passes only strictly inside the range.
                    if cc.u > self.cfg.rho_min && cc.u < self.cfg.rho_max {
                        let du = dg * dsig * path.gate[0];
                        let dy = Array1::from_vec(vec![du]);
                        path.reliance.backward(
                            &cache.h_new.view(),
                            &dy.view(),
                            &mut gpath.reliance,
                            Some(&mut dh),
                        );
                    }
                }

                // Student context head (distill + modulation gradients).
                if d_chat.iter().any(|&v| v != 0.0) {
                    path.context.backward(
                        &cache.h_new.view(),
                        &d_chat.view(),
                        &mut gpath.context,
                        Some(&mut dh),
                    );
                }
            }
            _ => unreachable!("cache layout matches actor layout"),
        }

        let mut d_feat = Array1::zeros(self.trunk.out_dim());
        let dh_prev = self.gru.backward(&cache.gru, &dh.view(), &mut grads.gru, &mut d_feat);
        self.trunk.backward(&cache.trunk, &d_feat.view(), &mut grads.trunk, None);
        dh_prev
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_gamma_beta(gb: &Array1<f64>, hdim: usize) -> (Array1<f64>, Array1<f64>) {
    (
        gb.slice(ndarray::s![..hdim]).to_owned(),
        gb.slice(ndarray::s![hdim..]).to_owned(),
    )
}

impl Params for ActorNet {
    fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut v = Vec::new();
        self.trunk.collect("trunk", &mut v);
        self.gru.collect("gru", &mut v);
        self.policy.collect("policy", &mut v);
        if let Some(vh) = &self.value {
            vh.collect("local_value", &mut v);
        }
        if let Some(c) = &self.ctx {
            c.context.collect("ctx.context", &mut v);
            c.reliance.collect("ctx.reliance", &mut v);
            v.push(ParamEntry {
                name: "ctx.gate".into(),
                shape: vec![2],
                data: c.gate.as_slice().expect("standard layout"),
            });
            match &c.conditioner {
                Conditioner::Film(l) => l.collect("ctx.film", &mut v),
                Conditioner::Hyper(m) => m.collect("ctx.hyper", &mut v),
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut v = Vec::new();
        self.trunk.collect_mut("trunk", &mut v);
        self.gru.collect_mut("gru", &mut v);
        self.policy.collect_mut("policy", &mut v);
        if let Some(vh) = &mut self.value {
            vh.collect_mut("local_value", &mut v);
        }
        if let Some(c) = &mut self.ctx {
            c.context.collect_mut("ctx.context", &mut v);
            c.reliance.collect_mut("ctx.reliance", &mut v);
            v.push(ParamEntryMut {
                name: "ctx.gate".into(),
                data: c.gate.as_slice_mut().expect("standard layout"),
            });
            match &mut c.conditioner {
                Conditioner::Film(l) => l.collect_mut("ctx.film", &mut v),
                Conditioner::Hyper(m) => m.collect_mut("ctx.hyper", &mut v),
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Categorical action distribution
// ---------------------------------------------------------------------------

/// Categorical distribution in log space.
pub struct Categorical {
    pub log_probs: Array1<f64>,
}

impl Categorical {
    pub fn from_logits(logits: &ArrayView1<f64>) -> Result<Self, PolicyError> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteLogits(logits.to_vec()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        Ok(Self { log_probs: logits.mapv(|v| v - log_z) })
    }

    pub fn probs(&self) -> Array1<f64> {
        self.log_probs.mapv(f64::exp)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (a, &lp) in self.log_probs.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                return a;
            }
        }
        self.log_probs.len() - 1
    }

    /// Highest-probability action, ties to the lower index.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (a, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = a;
            }
        }
        best
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .map(|&lp| lp.exp() * lp)
            .sum::<f64>()
    }

    /// Gradient of `log π(action)` with respect to the logits.
    pub fn d_log_prob(&self, action: usize) -> Array1<f64> {
        let mut d = -self.probs();
        d[action] += 1.0;
        d
    }

    /// Gradient of the entropy with respect to the logits.
    pub fn d_entropy(&self) -> Array1<f64> {
        let h = self.entropy();
        let p = self.probs();
        Array1::from_shape_fn(p.len(), |j| -p[j] * (self.log_probs[j] + h))
    }
}

/// Stable softmax probabilities straight from logits.
pub fn action_probs(logits: &ArrayView1<f64>) -> Array1<f64> {
    softmax(logits)
}
