//! Twin-critic actor-critic with the COMBO conservative critic objective.
//!
//! The critic minimises `L_TD + beta * L_CQL`, where the TD term is taken
//! over the `f`-mixture of dataset and model transitions and the CQL term
//! pushes Q down on model states with policy actions and up on dataset
//! pairs. The policy is a tanh-squashed Gaussian trained SAC-style.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{load_params, save_params, Activation, AdamConfig, AdamState, Gradients, MlpParams, ScalarAdam, Tensor};
use crate::envdata::{sample_indices, Dataset, Policy, Transition};
use crate::kv::{self, format_list, parse_list, parse_value, real};
use crate::rng;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboCfg {
    /// Conservatism coefficient on the CQL term.
    pub beta: f64,
    pub gamma: f64,
    /// Weight of dataset samples in the TD mixture.
    pub f: f64,
    pub tau: f64,
    /// Entropy temperature (initial value when `auto_alpha`).
    pub alpha: f64,
    pub auto_alpha: bool,
    /// Size of the TD, CQL-model and CQL-dataset batches.
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
}

impl Default for ComboCfg {
    fn default() -> Self {
        ComboCfg {
            beta: 5.0,
            gamma: 0.99,
            f: 0.5,
            tau: 0.005,
            alpha: 0.2,
            auto_alpha: true,
            batch_size: 256,
            hidden: vec![256, 256],
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            alpha_lr: 3e-4,
        }
    }
}

impl ComboCfg {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.f) {
            return bad("f must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.alpha >= 0.0) || (self.auto_alpha && self.alpha <= 0.0) {
            return bad("alpha must be >= 0 (and > 0 when auto-tuned)");
        }
        if self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("batch_size and hidden sizes must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("beta", real(self.beta)),
            ("gamma", real(self.gamma)),
            ("f", real(self.f)),
            ("tau", real(self.tau)),
            ("alpha", real(self.alpha)),
            ("auto_alpha", self.auto_alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("hidden", format_list(&self.hidden)),
            ("critic_lr", real(self.critic_lr)),
            ("actor_lr", real(self.actor_lr)),
            ("alpha_lr", real(self.alpha_lr)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Apply one config entry; `Ok(false)` when the key is not ours.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "beta" => self.beta = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "f" => self.f = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "auto_alpha" => self.auto_alpha = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "critic_lr" => self.critic_lr = parse_value(key, v)?,
            "actor_lr" => self.actor_lr = parse_value(key, v)?,
            "alpha_lr" => self.alpha_lr = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Column-stacked transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Vec<f64>,
    pub s_next: Tensor,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(Batch {
            s: Tensor::from_rows(&ts.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>())?,
            a: Tensor::from_rows(&ts.iter().map(|t| t.a.as_slice()).collect::<Vec<_>>())?,
            r: ts.iter().map(|t| t.r).collect(),
            s_next: Tensor::from_rows(&ts.iter().map(|t| t.s_next.as_slice()).collect::<Vec<_>>())?,
            done: ts.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Draw `n` elements: element `i` comes from `dataset[i % |dataset|]` with
/// probability `f`, otherwise from `model[i % |model|]`. Both inputs are
/// themselves uniform samples, so each output is a draw from the mixture.
pub fn mix_batches<'a, R: Rng + ?Sized>(
    dataset: &[&'a Transition],
    model: &[&'a Transition],
    f: f64,
    n: usize,
    rng: &mut R,
) -> Vec<&'a Transition> {
    assert!(!dataset.is_empty() && !model.is_empty(), "mix_batches needs non-empty inputs");
    (0..n)
        .map(|i| {
            if rng.random::<f64>() < f {
                dataset[i % dataset.len()]
            } else {
                model[i % model.len()]
            }
        })
        .collect()
}

/// Mean of `model_q` minus mean of `data_q`.
pub fn cql_gap(model_q: &[f64], data_q: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(model_q) - mean(data_q)
}

/// Value of `Q(s, a)` and its gradient with respect to `a`, per row.
pub trait ActionCritic {
    fn value_and_action_grad(&self, s: &Tensor, a: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// `min(Q1, Q2)` with the gradient of whichever critic attains the minimum.
struct MinCritic<'a> {
    q1: &'a MlpParams,
    q2: &'a MlpParams,
}

impl ActionCritic for MinCritic<'_> {
    fn value_and_action_grad(&self, s: &Tensor, a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let x = s.hcat(a)?;
        let ones = Tensor::filled(vec![x.rows(), 1], 1.0);
        let c1 = self.q1.forward_cached(&x)?;
        let c2 = self.q2.forward_cached(&x)?;
        let (_, g1) = self.q1.backward_cached(&c1, &ones, false)?;
        let (_, g2) = self.q2.backward_cached(&c2, &ones, false)?;
        let ds = s.cols();
        let mut values = Vec::with_capacity(x.rows());
        let mut grad = Tensor::zeros(a.shape().to_vec());
        for i in 0..x.rows() {
            let (v1, v2) = (c1.output().data()[i], c2.output().data()[i]);
            let src = if v1 <= v2 { &g1 } else { &g2 };
            values.push(v1.min(v2));
            grad.row_mut(i).copy_from_slice(&src.row(i)[ds..]);
        }
        Ok((values, grad))
    }
}

/// Reparameterised policy sample with everything needed for its gradient.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Tensor,
    pub log_prob: Vec<f64>,
    pre_tanh: Tensor,
    noise: Tensor,
    log_std: Tensor,
    clamped: Vec<bool>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CriticMetrics {
    pub td_loss: f64,
    pub cql_loss: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ActorMetrics {
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
}

/// Gradients of the two critic loss components, per critic.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub td: [Gradients; 2],
    pub cql: Option<[Gradients; 2]>,
    pub metrics: CriticMetrics,
}

#[derive(Debug, Clone)]
pub struct ConservativeAgent {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub policy: MlpParams,
    q1_opt: AdamState,
    q2_opt: AdamState,
    policy_opt: AdamState,
    log_alpha: f64,
    alpha_opt: ScalarAdam,
    cfg: ComboCfg,
    state_dim: usize,
    action_dim: usize,
}

/// Independent random streams for one critic update. Both the full update
/// and the dataset-only TD update derive them in the same order.
struct UpdateStreams {
    mix: rng::Stream,
    td: rng::Stream,
    cql: rng::Stream,
}

impl UpdateStreams {
    fn derive<R: Rng + ?Sized>(rng: &mut R) -> Self {
        UpdateStreams {
            mix: rng::child(rng),
            td: rng::child(rng),
            cql: rng::child(rng),
        }
    }
}

impl ConservativeAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: ComboCfg, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let critic_sizes: Vec<usize> = std::iter::once(state_dim + action_dim)
            .chain(cfg.hidden.iter().copied())
            .chain([1])
            .collect();
        let policy_sizes: Vec<usize> = std::iter::once(state_dim)
            .chain(cfg.hidden.iter().copied())
            .chain([2 * action_dim])
            .collect();
        let q1 = MlpParams::init(&critic_sizes, Activation::Tanh, rng);
        let q2 = MlpParams::init(&critic_sizes, Activation::Tanh, rng);
        let policy = MlpParams::init(&policy_sizes, Activation::Tanh, rng);
        Ok(Self::from_networks(q1, q2, policy, cfg, state_dim, action_dim))
    }

    /// Assemble an agent from explicit networks; targets start as copies.
    pub fn from_networks(q1: MlpParams, q2: MlpParams, policy: MlpParams, cfg: ComboCfg, state_dim: usize, action_dim: usize) -> Self {
        let q1_opt = AdamState::new(&q1, AdamConfig::with_lr(cfg.critic_lr));
        let q2_opt = AdamState::new(&q2, AdamConfig::with_lr(cfg.critic_lr));
        let policy_opt = AdamState::new(&policy, AdamConfig::with_lr(cfg.actor_lr));
        let alpha_opt = ScalarAdam::new(AdamConfig::with_lr(cfg.alpha_lr));
        ConservativeAgent {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy,
            q1_opt,
            q2_opt,
            policy_opt,
            log_alpha: cfg.alpha.max(f64::MIN_POSITIVE).ln(),
            alpha_opt,
            cfg,
            state_dim,
            action_dim,
        }
    }

    pub fn cfg(&self) -> &ComboCfg {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn alpha(&self) -> f64 {
        if self.cfg.auto_alpha {
            self.log_alpha.exp()
        } else {
            self.cfg.alpha
        }
    }

    fn critic_input(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        if s.cols() != self.state_dim || a.cols() != self.action_dim {
            return Err(Error::Shape(format!(
                "agent expects {}-d states and {}-d actions",
                self.state_dim, self.action_dim
            )));
        }
        s.hcat(a)
    }

    pub fn q1_values(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        Ok(self.q1.forward_cached(&self.critic_input(s, a)?)?.into_output().into_data())
    }

    pub fn min_q_values(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let x = self.critic_input(s, a)?;
        let v1 = self.q1.forward_cached(&x)?.into_output();
        let v2 = self.q2.forward_cached(&x)?.into_output();
        Ok(v1.data().iter().zip(v2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Q1 at a single pair (diagnostic critic).
    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.q1_values(&Tensor::row_vector(s)?, &Tensor::row_vector(a)?)?[0])
    }

    /// `min(Q1, Q2)` at a single pair, as used for targets.
    pub fn min_q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.min_q_values(&Tensor::row_vector(s)?, &Tensor::row_vector(a)?)?[0])
    }

    /// Pre-squash Gaussian mean and clamped log-std.
    pub fn policy_params(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.policy.forward_cached(s)?.into_output();
        let da = self.action_dim;
        let mean = out.columns(0, da);
        let mut log_std = out.columns(da, 2 * da);
        log_std.data_mut().iter_mut().for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mean_actions(&self, s: &Tensor) -> Result<Tensor> {
        let (mut mean, _) = self.policy_params(s)?;
        mean.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        Ok(mean)
    }

    pub fn sample_actions<R: Rng + ?Sized>(&self, s: &Tensor, rng: &mut R) -> Result<PolicySample> {
        let out = self.policy.forward_cached(s)?.into_output();
        Ok(sample_from_output(&out, self.action_dim, rng))
    }

    fn td_targets<R: Rng + ?Sized>(&self, b: &Batch, rng: &mut R) -> Result<Vec<f64>> {
        let next = self.sample_actions(&b.s_next, rng)?;
        let x = self.critic_input(&b.s_next, &next.actions)?;
        let t1 = self.q1_target.forward_cached(&x)?.into_output();
        let t2 = self.q2_target.forward_cached(&x)?.into_output();
        let alpha = self.alpha();
        Ok((0..b.len())
            .map(|i| {
                let boot = t1.data()[i].min(t2.data()[i]) - alpha * next.log_prob[i];
                if b.done[i] {
                    b.r[i]
                } else {
                    b.r[i] + self.cfg.gamma * boot
                }
            })
            .collect())
    }

    /// Mean squared Bellman error of both critics against the target
    /// critics, averaged over the two critics. One next action per row.
    pub fn td_loss<R: Rng + ?Sized>(&self, b: &Batch, rng: &mut R) -> Result<f64> {
        let y = self.td_targets(b, rng)?;
        let x = self.critic_input(&b.s, &b.a)?;
        let mut total = 0.0;
        for q in [&self.q1, &self.q2] {
            let v = q.forward_cached(&x)?.into_output();
            total += v.data().iter().zip(&y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / y.len() as f64;
        }
        Ok(total / 2.0)
    }

    /// CQL gap averaged over both critics: policy actions on model states
    /// versus dataset pairs.
    pub fn cql_loss<R: Rng + ?Sized>(&self, model_states: &Tensor, dataset: &Batch, rng: &mut R) -> Result<f64> {
        let pa = self.sample_actions(model_states, rng)?;
        let xm = self.critic_input(model_states, &pa.actions)?;
        let xd = self.critic_input(&dataset.s, &dataset.a)?;
        let mut total = 0.0;
        for q in [&self.q1, &self.q2] {
            let vm = q.forward_cached(&xm)?.into_output();
            let vd = q.forward_cached(&xd)?.into_output();
            total += cql_gap(vm.data(), vd.data());
        }
        Ok(total / 2.0)
    }

    fn td_grads(&self, b: &Batch, y: &[f64]) -> Result<([Gradients; 2], f64)> {
        let x = self.critic_input(&b.s, &b.a)?;
        let n = y.len() as f64;
        let mut loss = 0.0;
        let mut out = Vec::with_capacity(2);
        for q in [&self.q1, &self.q2] {
            let cache = q.forward_cached(&x)?;
            let v = cache.output().data();
            loss += v.iter().zip(y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n / 2.0;
            let up = Tensor::new(vec![y.len(), 1], v.iter().zip(y).map(|(q, y)| 2.0 * (q - y) / n).collect())?;
            out.push(q.backward_cached(&cache, &up, true)?.0.expect("requested"));
        }
        let g2 = out.pop().expect("two");
        let g1 = out.pop().expect("two");
        Ok(([g1, g2], loss))
    }

    fn cql_grads(&self, model_states: &Tensor, dataset: &Batch, rng: &mut rng::Stream) -> Result<([Gradients; 2], f64)> {
        let pa = self.sample_actions(model_states, rng)?;
        let xm = self.critic_input(model_states, &pa.actions)?;
        let xd = self.critic_input(&dataset.s, &dataset.a)?;
        let (nm, nd) = (xm.rows(), xd.rows());
        let mut gap = 0.0;
        let mut out = Vec::with_capacity(2);
        for q in [&self.q1, &self.q2] {
            let cm = q.forward_cached(&xm)?;
            let cd = q.forward_cached(&xd)?;
            gap += cql_gap(cm.output().data(), cd.output().data()) / 2.0;
            let (gm, _) = q.backward_cached(&cm, &Tensor::filled(vec![nm, 1], 1.0 / nm as f64), true)?;
            let (gd, _) = q.backward_cached(&cd, &Tensor::filled(vec![nd, 1], -1.0 / nd as f64), true)?;
            let mut g = gm.expect("requested");
            g.add_scaled(&gd.expect("requested"), 1.0);
            out.push(g);
        }
        let g2 = out.pop().expect("two");
        let g1 = out.pop().expect("two");
        Ok(([g1, g2], gap))
    }

    /// Loss components and their gradients for one critic step. The CQL
    /// path is skipped entirely when `beta == 0`; its loss value is still
    /// reported, from a stream that nothing else reads.
    fn critic_grads_with(&self, dataset: &Batch, model: &Batch, streams: &mut UpdateStreams) -> Result<CriticGrads> {
        let mixed = mix_rows(dataset, model, self.cfg.f, self.cfg.batch_size, &mut streams.mix)?;
        let y = self.td_targets(&mixed, &mut streams.td)?;
        let (td, td_loss) = self.td_grads(&mixed, &y)?;
        let (cql, cql_loss) = if self.cfg.beta == 0.0 {
            (None, self.cql_loss(&model.s, dataset, &mut streams.cql)?)
        } else {
            let (g, v) = self.cql_grads(&model.s, dataset, &mut streams.cql)?;
            (Some(g), v)
        };
        Ok(CriticGrads {
            td,
            cql,
            metrics: CriticMetrics { td_loss, cql_loss },
        })
    }

    /// Gradients of both loss components without touching parameters.
    pub fn critic_gradients<R: Rng + ?Sized>(&self, dataset: &Batch, model: &Batch, rng: &mut R) -> Result<CriticGrads> {
        self.critic_grads_with(dataset, model, &mut UpdateStreams::derive(rng))
    }

    fn apply_critic_grads(&mut self, grads: [Gradients; 2]) -> Result<()> {
        let [g1, g2] = grads;
        self.q1_opt.update(&mut self.q1, &g1).map_err(|e| Error::NonFinite(format!("critic 1: {e}")))?;
        self.q2_opt.update(&mut self.q2, &g2).map_err(|e| Error::NonFinite(format!("critic 2: {e}")))?;
        self.q1_target.polyak_from(&self.q1, self.cfg.tau);
        self.q2_target.polyak_from(&self.q2, self.cfg.tau);
        Ok(())
    }

    /// One Adam step on `L_TD(mix) + beta * L_CQL` for both critics,
    /// followed by the Polyak target update.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, dataset: &Batch, model: &Batch, rng: &mut R) -> Result<CriticMetrics> {
        let g = self.critic_gradients(dataset, model, rng)?;
        if !g.metrics.td_loss.is_finite() {
            return Err(Error::NonFinite("td_loss".into()));
        }
        if !g.metrics.cql_loss.is_finite() {
            return Err(Error::NonFinite("cql_loss".into()));
        }
        let [mut t1, mut t2] = g.td;
        if let Some([c1, c2]) = &g.cql {
            t1.add_scaled(c1, self.cfg.beta);
            t2.add_scaled(c2, self.cfg.beta);
        }
        self.apply_critic_grads([t1, t2])?;
        Ok(g.metrics)
    }

    /// Plain TD step on a dataset batch with no model data and no
    /// conservative term. Consumes `rng` exactly like [`Self::critic_update`].
    pub fn dataset_td_update<R: Rng + ?Sized>(&mut self, dataset: &Batch, rng: &mut R) -> Result<f64> {
        let mut streams = UpdateStreams::derive(rng);
        let y = self.td_targets(dataset, &mut streams.td)?;
        let (grads, loss) = self.td_grads(dataset, &y)?;
        self.apply_critic_grads(grads)?;
        Ok(loss)
    }

    /// One Adam step on the policy maximising `E[min Q(s, a~) - alpha log pi(a~|s)]`
    /// over `states`, plus the temperature step when auto-tuned.
    pub fn actor_update<R: Rng + ?Sized>(&mut self, states: &Tensor, rng: &mut R) -> Result<ActorMetrics> {
        let critic = MinCritic { q1: &self.q1, q2: &self.q2 };
        let alpha = self.alpha();
        let (metrics, grads) = policy_gradient(&self.policy, self.action_dim, alpha, states, &critic, rng)?;
        self.policy_opt
            .update(&mut self.policy, &grads)
            .map_err(|e| Error::NonFinite(format!("policy: {e}")))?;
        if self.cfg.auto_alpha {
            let target_entropy = -(self.action_dim as f64);
            let g = -(metrics.mean_log_prob + target_entropy);
            self.alpha_opt.update(&mut self.log_alpha, g);
        }
        Ok(ActorMetrics { alpha: self.alpha(), ..metrics })
    }

    /// Policy step against an arbitrary critic.
    pub fn actor_update_with<R: Rng + ?Sized>(&mut self, states: &Tensor, critic: &dyn ActionCritic, rng: &mut R) -> Result<ActorMetrics> {
        let (metrics, grads) = policy_gradient(&self.policy, self.action_dim, self.alpha(), states, critic, rng)?;
        self.policy_opt
            .update(&mut self.policy, &grads)
            .map_err(|e| Error::NonFinite(format!("policy: {e}")))?;
        Ok(metrics)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, p) in [
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
            ("policy", &self.policy),
        ] {
            save_params(p, &dir.join(format!("{name}.bin")))?;
        }
        let mut pairs = vec![
            ("state_dim".to_string(), self.state_dim.to_string()),
            ("action_dim".to_string(), self.action_dim.to_string()),
            ("log_alpha".to_string(), real(self.log_alpha)),
        ];
        pairs.extend(self.cfg.to_kv());
        let p = dir.join("combo.txt");
        fs::write(&p, kv::format_kv(&pairs)).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }

    /// Load networks and configuration; optimiser moments start fresh.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("combo.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let mut cfg = ComboCfg::default();
        let (mut ds, mut da, mut log_alpha) = (None, None, None);
        for (line, k, v) in kv::parse_kv(&text, &p)? {
            match k.as_str() {
                "state_dim" => ds = Some(parse_value::<usize>(&k, &v)?),
                "action_dim" => da = Some(parse_value::<usize>(&k, &v)?),
                "log_alpha" => log_alpha = Some(parse_value::<f64>(&k, &v)?),
                _ => {
                    if !cfg.set(&k, &v)? {
                        return Err(Error::parse(&p, line, format!("unknown key `{k}`")));
                    }
                }
            }
        }
        let missing = |k: &str| Error::parse(&p, 0, format!("missing `{k}`"));
        let load = |n: &str| load_params(&dir.join(format!("{n}.bin")));
        let mut agent = Self::from_networks(
            load("q1")?,
            load("q2")?,
            load("policy")?,
            cfg,
            ds.ok_or_else(|| missing("state_dim"))?,
            da.ok_or_else(|| missing("action_dim"))?,
        );
        agent.q1_target = load("q1_target")?;
        agent.q2_target = load("q2_target")?;
        agent.log_alpha = log_alpha.ok_or_else(|| missing("log_alpha"))?;
        Ok(agent)
    }
}

impl Policy for ConservativeAgent {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        let t = Tensor::row_vector(s).expect("non-empty state");
        self.mean_actions(&t).expect("state dims match policy").into_data()
    }
}

fn sample_from_output<R: Rng + ?Sized>(out: &Tensor, da: usize, rng: &mut R) -> PolicySample {
    let n = out.rows();
    let mut actions = Tensor::zeros(vec![n, da]);
    let mut pre_tanh = Tensor::zeros(vec![n, da]);
    let mut noise = Tensor::zeros(vec![n, da]);
    let mut log_std = Tensor::zeros(vec![n, da]);
    let mut clamped = vec![false; n * da];
    let mut log_prob = vec![0.0; n];
    for i in 0..n {
        let row = out.row(i);
        for j in 0..da {
            let raw = row[da + j];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            clamped[i * da + j] = ls != raw;
            let eps: f64 = rng.sample(StandardNormal);
            let u = row[j] + ls.exp() * eps;
            log_prob[i] += -0.5 * eps * eps - ls - HALF_LN_2PI - log_tanh_jacobian(u);
            actions.row_mut(i)[j] = u.tanh();
            pre_tanh.row_mut(i)[j] = u;
            noise.row_mut(i)[j] = eps;
            log_std.row_mut(i)[j] = ls;
        }
    }
    PolicySample {
        actions,
        log_prob,
        pre_tanh,
        noise,
        log_std,
        clamped,
    }
}

/// Reparameterised gradient of `mean(alpha * log pi(a~|s) - Q(s, a~))`
/// with respect to the policy parameters.
fn policy_gradient<R: Rng + ?Sized>(
    policy: &MlpParams,
    da: usize,
    alpha: f64,
    states: &Tensor,
    critic: &dyn ActionCritic,
    rng: &mut R,
) -> Result<(ActorMetrics, Gradients)> {
    let cache = policy.forward_cached(states)?;
    let smp = sample_from_output(cache.output(), da, rng);
    let (q, dq_da) = critic.value_and_action_grad(states, &smp.actions)?;
    let n = states.rows();
    let inv_n = 1.0 / n as f64;
    let mut up = Tensor::zeros(vec![n, 2 * da]);
    let mut loss = 0.0;
    for i in 0..n {
        loss += (alpha * smp.log_prob[i] - q[i]) * inv_n;
        let row = up.row_mut(i);
        for j in 0..da {
            let u = smp.pre_tanh.row(i)[j];
            let a = smp.actions.row(i)[j];
            let eps = smp.noise.row(i)[j];
            let sigma = smp.log_std.row(i)[j].exp();
            let dq_du = dq_da.row(i)[j] * (1.0 - a * a);
            let dlogp_du = 2.0 * u.tanh();
            row[j] = (alpha * dlogp_du - dq_du) * inv_n;
            if !smp.clamped[i * da + j] {
                row[da + j] = (alpha * (-1.0 + dlogp_du * sigma * eps) - dq_du * sigma * eps) * inv_n;
            }
        }
    }
    let (grads, _) = policy.backward_cached(&cache, &up, true)?;
    let mean_log_prob = smp.log_prob.iter().sum::<f64>() * inv_n;
    Ok((
        ActorMetrics {
            actor_loss: loss,
            alpha,
            mean_log_prob,
        },
        grads.expect("requested"),
    ))
}

/// Row-level form of [`mix_batches`] on stacked batches.
fn mix_rows<R: Rng + ?Sized>(dataset: &Batch, model: &Batch, f: f64, n: usize, rng: &mut R) -> Result<Batch> {
    if dataset.is_empty() || model.is_empty() {
        return Err(Error::Config("critic update needs non-empty batches".into()));
    }
    if f >= 1.0 && n == dataset.len() {
        // Every coin lands on the dataset side; keep the draws for stream
        // alignment but reuse the batch as is.
        for _ in 0..n {
            let _: f64 = rng.random();
        }
        return Ok(dataset.clone());
    }
    let pick = |b: &Batch, i: usize, t: &mut Vec<(Vec<f64>, Vec<f64>, f64, Vec<f64>, bool)>| {
        let k = i % b.len();
        t.push((b.s.row(k).to_vec(), b.a.row(k).to_vec(), b.r[k], b.s_next.row(k).to_vec(), b.done[k]));
    };
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        if rng.random::<f64>() < f {
            pick(dataset, i, &mut rows);
        } else {
            pick(model, i, &mut rows);
        }
    }
    Ok(Batch {
        s: Tensor::from_rows(&rows.iter().map(|r| r.0.as_slice()).collect::<Vec<_>>())?,
        a: Tensor::from_rows(&rows.iter().map(|r| r.1.as_slice()).collect::<Vec<_>>())?,
        r: rows.iter().map(|r| r.2).collect(),
        s_next: Tensor::from_rows(&rows.iter().map(|r| r.3.as_slice()).collect::<Vec<_>>())?,
        done: rows.iter().map(|r| r.4).collect(),
    })
}

/// Mean Q1 over `n_sample` dataset pairs drawn uniformly with replacement.
pub fn average_dataset_q<R: Rng + ?Sized>(agent: &ConservativeAgent, d: &Dataset, n_sample: usize, rng: &mut R) -> Result<f64> {
    if n_sample == 0 {
        return Err(Error::Config("n_sample must be >= 1".into()));
    }
    let idx = sample_indices(d.len(), n_sample, rng);
    let ts: Vec<&Transition> = idx.iter().map(|&i| &d.transitions()[i]).collect();
    let b = Batch::from_transitions(&ts)?;
    let q = agent.q1_values(&b.s, &b.a)?;
    Ok(q.iter().sum::<f64>() / q.len() as f64)
}

/// Q1 over every dataset pair, in dataset order.
pub fn dataset_q_values(agent: &ConservativeAgent, d: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(d.len());
    let all: Vec<&Transition> = d.transitions().iter().collect();
    for chunk in all.chunks(4096) {
        let b = Batch::from_transitions(chunk)?;
        out.extend(agent.q1_values(&b.s, &b.a)?);
    }
    Ok(out)
}
