//! Perturb-and-filter state augmentation.
//!
//! States from a batch are pushed along the gradient of the value of the
//! current policy (`qgrad`) or along random directions (`random`), and the
//! resulting candidates are kept only if their model uncertainty lies
//! strictly inside the interquartile band of the original batch.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::ConservativeAgent;
use crate::diffcore::Tensor;
use crate::ensemble::{DynamicsEnsemble, UncertaintyMode};
use crate::kv::{parse_value, real};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Qgrad,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSign {
    Both,
    PosOnly,
    NegOnly,
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbMode::Qgrad => "qgrad",
            PerturbMode::Random => "random",
        })
    }
}

impl FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qgrad" => Ok(PerturbMode::Qgrad),
            "random" => Ok(PerturbMode::Random),
            _ => Err(Error::Config(format!("unknown perturbation mode `{s}`"))),
        }
    }
}

impl fmt::Display for StepSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepSign::Both => "both",
            StepSign::PosOnly => "pos_only",
            StepSign::NegOnly => "neg_only",
        })
    }
}

impl FromStr for StepSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(StepSign::Both),
            "pos_only" => Ok(StepSign::PosOnly),
            "neg_only" => Ok(StepSign::NegOnly),
            _ => Err(Error::Config(format!("unknown step sign `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnfCfg {
    pub n_steps: usize,
    pub delta_max: f64,
    pub mode: PerturbMode,
    /// Only consulted in `qgrad` mode.
    pub sign: StepSign,
    pub n_aug: usize,
    pub max_rounds: usize,
    pub uncertainty_mode: UncertaintyMode,
}

impl Default for PnfCfg {
    fn default() -> Self {
        PnfCfg::qgrad()
    }
}

impl PnfCfg {
    /// Gradient perturbation defaults: four steps of at most `1e-3`.
    pub fn qgrad() -> Self {
        PnfCfg {
            n_steps: 4,
            delta_max: 1e-3,
            mode: PerturbMode::Qgrad,
            sign: StepSign::Both,
            n_aug: 64,
            max_rounds: 10,
            uncertainty_mode: UncertaintyMode::DisagreementMaxDev,
        }
    }

    /// Random-direction ablation defaults: a single step of at most `0.1`.
    pub fn random() -> Self {
        PnfCfg {
            n_steps: 1,
            delta_max: 0.1,
            mode: PerturbMode::Random,
            ..PnfCfg::qgrad()
        }
    }

    /// Steps actually taken per chain; random mode always takes one.
    pub fn effective_steps(&self) -> usize {
        match self.mode {
            PerturbMode::Qgrad => self.n_steps,
            PerturbMode::Random => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_aug == 0 || self.max_rounds == 0 {
            return Err(Error::Config("n_steps, n_aug and max_rounds must be >= 1".into()));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(Error::Config("delta_max must be a positive finite number".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("pnf_mode".into(), self.mode.to_string()),
            ("n_steps".into(), self.effective_steps().to_string()),
            ("delta_max".into(), real(self.delta_max)),
            ("sign".into(), self.sign.to_string()),
            ("n_aug".into(), self.n_aug.to_string()),
            ("max_rounds".into(), self.max_rounds.to_string()),
            ("uncertainty_mode".into(), self.uncertainty_mode.to_string()),
        ]
    }

    /// Apply one config entry; `Ok(false)` when the key is not ours.
    /// Selecting random mode resets `n_steps` to 1.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "pnf_mode" => self.mode = v.parse()?,
            "n_steps" => self.n_steps = parse_value(key, v)?,
            "delta_max" => self.delta_max = parse_value(key, v)?,
            "sign" => self.sign = v.parse()?,
            "n_aug" => self.n_aug = parse_value(key, v)?,
            "max_rounds" => self.max_rounds = parse_value(key, v)?,
            "uncertainty_mode" => self.uncertainty_mode = v.parse()?,
            _ => return Ok(false),
        }
        if self.mode == PerturbMode::Random {
            self.n_steps = 1;
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBand {
    pub u_low: f64,
    pub u_high: f64,
}

impl UncertaintyBand {
    /// Strictly inside the band.
    pub fn contains(&self, u: f64) -> bool {
        u > self.u_low && u < self.u_high
    }
}

/// Linear-interpolation quantile of sorted data at position `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interquartile band of `values`.
pub fn quantile_band(values: &[f64]) -> Result<UncertaintyBand> {
    if values.len() < 2 {
        return Err(Error::Config(format!("quantile band needs at least 2 values, got {}", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("uncertainty value {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(UncertaintyBand {
        u_low: quantile_sorted(&sorted, 0.25),
        u_high: quantile_sorted(&sorted, 0.75),
    })
}

/// Gradient of `s -> Q1(s, tanh(mean(s)))` for each row of `states`,
/// through both the critic's state input and the policy output.
pub fn state_q_gradients(agent: &ConservativeAgent, states: &Tensor) -> Result<Tensor> {
    let (ds, da) = (agent.state_dim(), agent.action_dim());
    let n = states.rows();
    let pcache = agent.policy.forward_cached(states)?;
    let mut actions = pcache.output().columns(0, da);
    actions.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    let x = states.hcat(&actions)?;
    let qcache = agent.q1.forward_cached(&x)?;
    let (_, gx) = agent.q1.backward_cached(&qcache, &Tensor::filled(vec![n, 1], 1.0), false)?;
    let mut up = Tensor::zeros(vec![n, 2 * da]);
    for i in 0..n {
        for j in 0..da {
            let a = actions.row(i)[j];
            up.row_mut(i)[j] = gx.row(i)[ds + j] * (1.0 - a * a);
        }
    }
    let (_, through_policy) = agent.policy.backward_cached(&pcache, &up, false)?;
    let mut g = gx.columns(0, ds);
    for (g, p) in g.data_mut().iter_mut().zip(through_policy.data()) {
        *g += p;
    }
    Ok(g)
}

pub fn state_q_gradient(agent: &ConservativeAgent, s: &[f64]) -> Result<Vec<f64>> {
    Ok(state_q_gradients(agent, &Tensor::row_vector(s)?)?.into_data())
}

/// One perturbation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub round: usize,
    pub input: Vec<f64>,
    /// Step scalar used at each step (constant within a chain).
    pub eta: Vec<f64>,
    /// Random mode only: the unit direction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    pub steps: Vec<Vec<f64>>,
    /// Norm of the gradient applied at each step (qgrad only).
    pub grad_norms: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub accepted: Vec<bool>,
    pub dropped: bool,
}

fn draw_eta<R: Rng + ?Sized>(sign: StepSign, delta: f64, rng: &mut R) -> f64 {
    let u = rng::open01(rng);
    match sign {
        StepSign::Both => (2.0 * u - 1.0) * delta,
        StepSign::PosOnly => u * delta,
        StepSign::NegOnly => -u * delta,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A single gradient chain from `start` with a fixed step scalar.
pub fn qgrad_chain(agent: &ConservativeAgent, start: &[f64], eta: f64, n_steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut s = start.to_vec();
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let g = state_q_gradient(agent, &s)?;
        s.iter_mut().zip(&g).for_each(|(s, g)| *s += eta * g);
        out.push(s.clone());
    }
    Ok(out)
}

/// Gradient chains from every row of `states`. Each chain draws its step
/// scalar once from its own substream. Returns the candidate states (all
/// intermediate steps of surviving chains, chain-major) and per-chain
/// traces; chains hitting a non-finite iterate are dropped whole.
pub fn propose_qgrad<R: Rng + ?Sized>(agent: &ConservativeAgent, states: &Tensor, cfg: &PnfCfg, rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<ChainTrace>)> {
    if cfg.mode != PerturbMode::Qgrad {
        return Err(Error::Config("propose_qgrad called with random mode".into()));
    }
    let n = states.rows();
    let etas: Vec<f64> = (0..n)
        .map(|_| draw_eta(cfg.sign, cfg.delta_max, &mut rng::child(rng)))
        .collect();
    let mut current = states.clone();
    let mut traces: Vec<ChainTrace> = (0..n)
        .map(|i| ChainTrace {
            round: 0,
            input: states.row(i).to_vec(),
            eta: Vec::with_capacity(cfg.n_steps),
            direction: None,
            steps: Vec::with_capacity(cfg.n_steps),
            grad_norms: Vec::with_capacity(cfg.n_steps),
            uncertainty: Vec::new(),
            accepted: Vec::new(),
            dropped: false,
        })
        .collect();
    for _ in 0..cfg.n_steps {
        let g = state_q_gradients(agent, &current)?;
        for i in 0..n {
            let t = &mut traces[i];
            if t.dropped {
                continue;
            }
            let gi = g.row(i);
            let row = current.row_mut(i);
            for (s, d) in row.iter_mut().zip(gi) {
                *s += etas[i] * d;
            }
            t.eta.push(etas[i]);
            t.grad_norms.push(norm(gi));
            if row.iter().all(|v| v.is_finite()) {
                t.steps.push(row.to_vec());
            } else {
                t.dropped = true;
                // Keep the batch finite for the remaining chains.
                row.copy_from_slice(&t.input);
            }
        }
    }
    let candidates = traces
        .iter()
        .filter(|t| !t.dropped)
        .flat_map(|t| t.steps.iter().cloned())
        .collect();
    Ok((candidates, traces))
}

/// One random-direction step per row of `states`.
pub fn propose_random<R: Rng + ?Sized>(states: &Tensor, cfg: &PnfCfg, rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<ChainTrace>)> {
    if cfg.mode != PerturbMode::Random {
        return Err(Error::Config("propose_random called with qgrad mode".into()));
    }
    let ds = states.cols();
    let mut candidates = Vec::with_capacity(states.rows());
    let mut traces = Vec::with_capacity(states.rows());
    for s in states.iter_rows() {
        let mut r = rng::child(rng);
        let d = loop {
            let d: Vec<f64> = (0..ds).map(|_| r.sample(StandardNormal)).collect();
            let len = norm(&d);
            if len > 0.0 {
                break d.into_iter().map(|x| x / len).collect::<Vec<_>>();
            }
        };
        let eta = draw_eta(StepSign::Both, cfg.delta_max, &mut r);
        let c: Vec<f64> = s.iter().zip(&d).map(|(s, d)| s + eta * d).collect();
        candidates.push(c.clone());
        traces.push(ChainTrace {
            round: 0,
            input: s.to_vec(),
            eta: vec![eta],
            direction: Some(d),
            steps: vec![c],
            grad_norms: Vec::new(),
            uncertainty: Vec::new(),
            accepted: Vec::new(),
            dropped: false,
        });
    }
    Ok((candidates, traces))
}

/// Model uncertainty of each state under the policy-mean action.
pub fn state_uncertainties(agent: &ConservativeAgent, model: &DynamicsEnsemble, states: &Tensor, mode: UncertaintyMode) -> Result<Vec<f64>> {
    let a = agent.mean_actions(states)?;
    model.uncertainty_batch(states, &a, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PnfOutput {
    pub states: Vec<Vec<f64>>,
    pub band: UncertaintyBand,
    /// Fewer than `n_aug` states were accepted within `max_rounds`.
    pub shortfall: bool,
    pub rounds: usize,
    pub n_candidates: usize,
    pub n_accepted: usize,
    pub dropped_chains: usize,
    #[serde(skip)]
    pub trace: Vec<ChainTrace>,
}

impl PnfOutput {
    pub fn accept_rate(&self) -> f64 {
        if self.n_candidates == 0 {
            0.0
        } else {
            self.n_accepted as f64 / self.n_candidates as f64
        }
    }
}

/// Propose and filter until `n_aug` states are accepted or `max_rounds`
/// proposal rounds have run; every round perturbs the original batch.
/// Traces are kept only when `keep_trace` is set.
pub fn pnf_augment<R: Rng + ?Sized>(
    agent: &ConservativeAgent,
    model: &DynamicsEnsemble,
    states: &Tensor,
    cfg: &PnfCfg,
    keep_trace: bool,
    rng: &mut R,
) -> Result<PnfOutput> {
    cfg.validate()?;
    if states.is_empty() {
        return Err(Error::Config("pnf_augment needs a non-empty batch".into()));
    }
    let band = quantile_band(&state_uncertainties(agent, model, states, cfg.uncertainty_mode)?)?;
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut out = PnfOutput {
        states: Vec::new(),
        band,
        shortfall: false,
        rounds: 0,
        n_candidates: 0,
        n_accepted: 0,
        dropped_chains: 0,
        trace: Vec::new(),
    };
    while accepted.len() < cfg.n_aug && out.rounds < cfg.max_rounds {
        let (candidates, mut traces) = match cfg.mode {
            PerturbMode::Qgrad => propose_qgrad(agent, states, cfg, rng)?,
            PerturbMode::Random => propose_random(states, cfg, rng)?,
        };
        out.dropped_chains += traces.iter().filter(|t| t.dropped).count();
        out.n_candidates += candidates.len();
        let u = if candidates.is_empty() {
            Vec::new()
        } else {
            let refs: Vec<&[f64]> = candidates.iter().map(Vec::as_slice).collect();
            state_uncertainties(agent, model, &Tensor::from_rows(&refs)?, cfg.uncertainty_mode)?
        };
        let keep: Vec<bool> = u.iter().map(|&u| band.contains(u)).collect();
        if keep_trace {
            let mut k = 0;
            for t in traces.iter_mut().filter(|t| !t.dropped) {
                let m = t.steps.len();
                t.round = out.rounds;
                t.uncertainty = u[k..k + m].to_vec();
                t.accepted = keep[k..k + m].to_vec();
                k += m;
            }
            for t in traces.iter_mut() {
                t.round = out.rounds;
            }
            out.trace.extend(traces);
        }
        accepted.extend(candidates.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c));
        out.rounds += 1;
    }
    out.n_accepted = accepted.len();
    out.shortfall = accepted.len() < cfg.n_aug;
    if accepted.len() > cfg.n_aug {
        let mut idx = index::sample(rng, accepted.len(), cfg.n_aug).into_vec();
        idx.sort_unstable();
        accepted = idx.into_iter().map(|i| std::mem::take(&mut accepted[i])).collect();
    }
    out.states = accepted;
    Ok(out)
}

/// Write chain traces as JSON lines.
pub fn write_trace(path: &Path, traces: &[ChainTrace]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    append_trace(&mut w, traces).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn append_trace<W: Write>(w: &mut W, traces: &[ChainTrace]) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<ChainTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
