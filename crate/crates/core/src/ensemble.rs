//! Probabilistic ensemble of Gaussian dynamics-and-reward models.
//!
//! Each member maps a normalised `(s, a)` to the mean and log-variance of the
//! normalised target `[s' - s, r]`. Uncertainty estimates are computed in
//! that normalised output space so quantile bands do not depend on the units
//! of individual state dimensions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{load_params, save_params, Activation, AdamConfig, AdamState, MlpParams, Tensor};
use crate::envdata::{env_step, EnvSpec, Transition};
use crate::rng;
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// Max over members of the L2 deviation of the member mean from the ensemble mean.
    DisagreementMaxDev,
    /// Max over members of the L2 norm of the predicted standard deviation.
    AleatoricMaxStd,
    /// L2 norm of the per-dimension standard deviation of member means.
    StdOfMeans,
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertaintyMode::DisagreementMaxDev => "disagreement_max_dev",
            UncertaintyMode::AleatoricMaxStd => "aleatoric_max_std",
            UncertaintyMode::StdOfMeans => "std_of_means",
        })
    }
}

impl FromStr for UncertaintyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disagreement_max_dev" => Ok(UncertaintyMode::DisagreementMaxDev),
            "aleatoric_max_std" => Ok(UncertaintyMode::AleatoricMaxStd),
            "std_of_means" => Ok(UncertaintyMode::StdOfMeans),
            other => Err(Error::Config(format!("unknown uncertainty mode `{other}`"))),
        }
    }
}

/// Per-dimension affine normaliser `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation per column; near-constant columns get scale 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mut shift = vec![0.0; dim];
        for r in &rows {
            shift.iter_mut().zip(*r).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; dim];
        for r in &rows {
            scale.iter_mut().zip(*r).zip(&shift).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Normalizer { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn apply_into(&self, row: &[f64], out: &mut [f64]) {
        for i in 0..row.len() {
            out[i] = (row[i] - self.shift[i]) / self.scale[i];
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shift.len() != self.scale.len() {
            return Err(Error::Shape("normalizer shift/scale length mismatch".into()));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) || !self.shift.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("normalizer scales must be finite and strictly positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCfg {
    pub n_members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for EnsembleCfg {
    fn default() -> Self {
        EnsembleCfg {
            n_members: 5,
            hidden: vec![128, 128, 128],
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberPrediction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalised-space outputs of one member for a batch.
#[derive(Debug, Clone)]
pub struct NormalizedOutput {
    pub mean: Tensor,
    pub logvar: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    members: Vec<MlpParams>,
    input_norm: Normalizer,
    output_norm: Normalizer,
    state_dim: usize,
    action_dim: usize,
}

/// Outcome of fitting one member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberFit {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub final_val_nll: f64,
}

impl DynamicsEnsemble {
    pub fn new(
        members: Vec<MlpParams>,
        input_norm: Normalizer,
        output_norm: Normalizer,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        input_norm.validate()?;
        output_norm.validate()?;
        let (din, dout) = (state_dim + action_dim, state_dim + 1);
        if input_norm.dim() != din || output_norm.dim() != dout {
            return Err(Error::Shape("normalizer dimensions do not match state/action dims".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if m.input_dim() != din || m.output_dim() != 2 * dout {
                return Err(Error::Shape(format!(
                    "member {i} maps {} -> {}, expected {din} -> {}",
                    m.input_dim(),
                    m.output_dim(),
                    2 * dout
                )));
            }
        }
        Ok(DynamicsEnsemble {
            members,
            input_norm,
            output_norm,
            state_dim,
            action_dim,
        })
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &Normalizer {
        &self.output_norm
    }

    fn out_dim(&self) -> usize {
        self.state_dim + 1
    }

    fn normalized_inputs(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        if s.cols() != self.state_dim || a.cols() != self.action_dim || s.rows() != a.rows() {
            return Err(Error::Shape(format!(
                "ensemble expects [n, {}] states and [n, {}] actions",
                self.state_dim, self.action_dim
            )));
        }
        let mut x = s.hcat(a)?;
        let d = x.cols();
        for row in x.data_mut().chunks_exact_mut(d) {
            let raw = row.to_vec();
            self.input_norm.apply_into(&raw, row);
        }
        Ok(x)
    }

    /// Per-member normalised means and clamped log-variances for a batch.
    pub fn predict_normalized(&self, s: &Tensor, a: &Tensor) -> Result<Vec<NormalizedOutput>> {
        let x = self.normalized_inputs(s, a)?;
        let d = self.out_dim();
        self.members
            .iter()
            .map(|m| {
                let y = m.forward_cached(&x)?.into_output();
                let mean = y.columns(0, d);
                let mut logvar = y.columns(d, 2 * d);
                logvar.data_mut().iter_mut().for_each(|v| *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX));
                Ok(NormalizedOutput { mean, logvar })
            })
            .collect()
    }

    /// Member predictions of `[s' - s, r]` in raw units.
    pub fn predict_members(&self, s: &[f64], a: &[f64]) -> Result<Vec<MemberPrediction>> {
        let outs = self.predict_normalized(&Tensor::row_vector(s)?, &Tensor::row_vector(a)?)?;
        let on = &self.output_norm;
        Ok(outs
            .iter()
            .map(|o| MemberPrediction {
                mean: o.mean.data().iter().enumerate().map(|(j, m)| m * on.scale[j] + on.shift[j]).collect(),
                std: o.logvar.data().iter().enumerate().map(|(j, lv)| (0.5 * lv).exp() * on.scale[j]).collect(),
            })
            .collect())
    }

    /// Ensemble-mean raw prediction of `(s_next, r)`.
    pub fn mean_prediction(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
        let preds = self.predict_members(s, a)?;
        let m = preds.len() as f64;
        let mut avg = vec![0.0; self.out_dim()];
        for p in &preds {
            avg.iter_mut().zip(&p.mean).for_each(|(x, v)| *x += v / m);
        }
        let s_next = s.iter().zip(&avg).map(|(x, d)| x + d).collect();
        Ok((s_next, avg[self.state_dim]))
    }

    /// Sample `(s_next, r)` for each row: pick a member uniformly, then draw
    /// from its Gaussian.
    pub fn sample_transitions<R: Rng + ?Sized>(&self, s: &Tensor, a: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let outs = self.predict_normalized(s, a)?;
        let d = self.out_dim();
        let on = &self.output_norm;
        let mut s_next = s.clone();
        let mut rewards = Vec::with_capacity(s.rows());
        for i in 0..s.rows() {
            let o = &outs[rng.random_range(0..self.members.len())];
            let (mu, lv) = (o.mean.row(i), o.logvar.row(i));
            let mut y = vec![0.0; d];
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                y[j] = (mu[j] + (0.5 * lv[j]).exp() * z) * on.scale[j] + on.shift[j];
            }
            s_next.row_mut(i).iter_mut().zip(&y).for_each(|(x, dy)| *x += dy);
            rewards.push(y[self.state_dim]);
        }
        Ok((s_next, rewards))
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let (sn, r) = self.sample_transitions(&Tensor::row_vector(s)?, &Tensor::row_vector(a)?, rng)?;
        Ok((sn.into_data(), r[0]))
    }

    /// Batched uncertainty, one value per row.
    pub fn uncertainty_batch(&self, s: &Tensor, a: &Tensor, mode: UncertaintyMode) -> Result<Vec<f64>> {
        let m = self.members.len();
        if m < 2 && mode != UncertaintyMode::AleatoricMaxStd {
            return Err(Error::Config(format!("{mode} needs at least two ensemble members, have {m}")));
        }
        let outs = self.predict_normalized(s, a)?;
        let d = self.out_dim();
        Ok((0..s.rows())
            .map(|i| match mode {
                UncertaintyMode::AleatoricMaxStd => outs
                    .iter()
                    .map(|o| o.logvar.row(i).iter().map(|lv| lv.exp()).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
                _ => {
                    // Mean taken relative to member 0, so identical members give
                    // exactly zero deviation.
                    let base = outs[0].mean.row(i);
                    let mut centre = base.to_vec();
                    for j in 0..d {
                        let off: f64 = outs.iter().map(|o| o.mean.row(i)[j] - base[j]).sum();
                        centre[j] += off / m as f64;
                    }
                    let devs = outs.iter().map(|o| o.mean.row(i).iter().zip(&centre).map(|(x, c)| x - c));
                    if mode == UncertaintyMode::DisagreementMaxDev {
                        devs.map(|dv| dv.map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
                    } else {
                        let mut var = vec![0.0; d];
                        for dv in devs {
                            var.iter_mut().zip(dv).for_each(|(acc, v)| *acc += v * v / m as f64);
                        }
                        var.iter().sum::<f64>().sqrt()
                    }
                }
            })
            .collect())
    }

    pub fn uncertainty(&self, s: &[f64], a: &[f64], mode: UncertaintyMode) -> Result<f64> {
        Ok(self.uncertainty_batch(&Tensor::row_vector(s)?, &Tensor::row_vector(a)?, mode)?[0])
    }

    /// Mean Gaussian negative log-likelihood of one member on transitions.
    pub fn member_nll(&self, member: usize, data: &[Transition]) -> Result<f64> {
        let (x, y) = self.training_arrays(data)?;
        gaussian_nll(&self.members[member], &x, &y, self.out_dim())
    }

    fn training_arrays(&self, data: &[Transition]) -> Result<(Tensor, Tensor)> {
        let (din, dout) = (self.state_dim + self.action_dim, self.out_dim());
        let mut x = Vec::with_capacity(data.len() * din);
        let mut y = Vec::with_capacity(data.len() * dout);
        let mut bx = vec![0.0; din];
        let mut by = vec![0.0; dout];
        for t in data {
            let raw_in: Vec<f64> = t.s.iter().chain(&t.a).copied().collect();
            self.input_norm.apply_into(&raw_in, &mut bx);
            let raw_out: Vec<f64> = t.s_next.iter().zip(&t.s).map(|(n, s)| n - s).chain([t.r]).collect();
            self.output_norm.apply_into(&raw_out, &mut by);
            x.extend_from_slice(&bx);
            y.extend_from_slice(&by);
        }
        Ok((Tensor::new(vec![data.len(), din], x)?, Tensor::new(vec![data.len(), dout], y)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (i, m) in self.members.iter().enumerate() {
            save_params(m, &dir.join(format!("member_{i}.bin")))?;
        }
        let fmt_row = |name: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
            format!("{name} {}\n", vals.join(" "))
        };
        let text = format!(
            "members {}\nstate_dim {}\naction_dim {}\n{}{}{}{}",
            self.members.len(),
            self.state_dim,
            self.action_dim,
            fmt_row("input_shift", &self.input_norm.shift),
            fmt_row("input_scale", &self.input_norm.scale),
            fmt_row("output_shift", &self.output_norm.shift),
            fmt_row("output_scale", &self.output_norm.scale),
        );
        let p = dir.join("normalizer.txt");
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("normalizer.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let mut fields = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let vals = it
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(&p, n + 1, format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            fields.insert(key.to_string(), vals);
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| Error::parse(&p, 0, format!("missing `{k}`")));
        let scalar = |k: &str| -> Result<usize> { Ok(*get(k)?.first().unwrap_or(&0.0) as usize) };
        let members = (0..scalar("members")?)
            .map(|i| load_params(&dir.join(format!("member_{i}.bin"))))
            .collect::<Result<Vec<_>>>()?;
        DynamicsEnsemble::new(
            members,
            Normalizer { shift: get("input_shift")?, scale: get("input_scale")? },
            Normalizer { shift: get("output_shift")?, scale: get("output_scale")? },
            scalar("state_dim")?,
            scalar("action_dim")?,
        )
    }
}

/// Forward pass plus NLL gradient with respect to the network output.
fn nll_and_upstream(member: &MlpParams, x: &Tensor, y: &Tensor, d: usize) -> Result<(f64, crate::diffcore::ForwardCache, Tensor)> {
    let cache = member.forward_cached(x)?;
    let out = cache.output();
    let n = x.rows();
    let norm = 1.0 / (n * d) as f64;
    let mut up = Tensor::zeros(out.shape().to_vec());
    let mut loss = 0.0;
    for i in 0..n {
        let (o, t) = (out.row(i), y.row(i));
        let u = up.row_mut(i);
        for j in 0..d {
            let raw_lv = o[d + j];
            let lv = raw_lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            let inv_var = (-lv).exp();
            let err = t[j] - o[j];
            loss += 0.5 * (err * err * inv_var + lv) + HALF_LN_2PI;
            u[j] = -err * inv_var * norm;
            if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw_lv) {
                u[d + j] = 0.5 * (1.0 - err * err * inv_var) * norm;
            }
        }
    }
    Ok((loss * norm, cache, up))
}

fn gaussian_nll(member: &MlpParams, x: &Tensor, y: &Tensor, d: usize) -> Result<f64> {
    Ok(nll_and_upstream(member, x, y, d)?.0)
}

/// Fit one member by minibatch Adam on the Gaussian NLL with early stopping.
fn fit_member(
    member_idx: usize,
    template: &DynamicsEnsemble,
    x_train: &Tensor,
    y_train: &Tensor,
    x_val: &Tensor,
    y_val: &Tensor,
    cfg: &EnsembleCfg,
    rng: &mut rng::Stream,
) -> Result<(MlpParams, MemberFit)> {
    let d = template.out_dim();
    let mut sizes = vec![x_train.cols()];
    sizes.extend(&cfg.hidden);
    sizes.push(2 * d);
    let mut params = MlpParams::init(&sizes, Activation::Tanh, rng);
    let mut opt = AdamState::new(&params, AdamConfig::with_lr(cfg.lr));

    let n = x_train.rows();
    let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let diverged = |msg: String| Error::Divergence { member: member_idx, msg };

    let mut best = (gaussian_nll(&params, x_val, y_val, d)?, 0usize, params.clone());
    let mut last_val = best.0;
    let mut epochs_run = 0;
    let mut order = boot.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather(x_train, chunk);
            let yb = gather(y_train, chunk);
            let (loss, cache, up) = nll_and_upstream(&params, &xb, &yb, d)?;
            if !loss.is_finite() {
                return Err(diverged(format!("training loss {loss} at epoch {epoch}")));
            }
            let (grads, _) = params.backward_cached(&cache, &up, true)?;
            opt.update(&mut params, &grads.expect("requested"))
                .map_err(|e| diverged(e.to_string()))?;
        }
        epochs_run = epoch;
        last_val = gaussian_nll(&params, x_val, y_val, d)?;
        if !last_val.is_finite() {
            return Err(diverged(format!("validation loss {last_val} at epoch {epoch}")));
        }
        if last_val < best.0 {
            best = (last_val, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (best_val_nll, best_epoch, best_params) = best;
    Ok((
        best_params,
        MemberFit {
            epochs_run,
            best_epoch,
            best_val_nll,
            final_val_nll: last_val,
        },
    ))
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("non-empty gather")
}

/// Train every member independently on a bootstrap resample of `train`,
/// early-stopping on `val` NLL, and return the ensemble at each member's
/// best validation parameters.
pub fn fit_ensemble(train: &[Transition], val: &[Transition], cfg: &EnsembleCfg) -> Result<(DynamicsEnsemble, Vec<MemberFit>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and val splits must be non-empty".into()));
    }
    if cfg.n_members < 2 {
        return Err(Error::Config("an ensemble needs at least two members".into()));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::Config("batch_size and patience must be positive".into()));
    }
    let (ds, da) = (train[0].s.len(), train[0].a.len());
    if val.iter().chain(train).any(|t| t.s.len() != ds || t.a.len() != da) {
        return Err(Error::Shape("train and val transitions disagree on dimensions".into()));
    }
    let inputs: Vec<Vec<f64>> = train.iter().map(|t| t.s.iter().chain(&t.a).copied().collect()).collect();
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|t| t.s_next.iter().zip(&t.s).map(|(n, s)| n - s).chain([t.r]).collect())
        .collect();
    let input_norm = Normalizer::fit(inputs.iter().map(Vec::as_slice), ds + da);
    let output_norm = Normalizer::fit(targets.iter().map(Vec::as_slice), ds + 1);

    // Placeholder members give the normalisation helpers a valid ensemble.
    let placeholder = MlpParams::zeros(&[ds + da, 2 * (ds + 1)], Activation::Identity);
    let mut ens = DynamicsEnsemble::new(vec![placeholder], input_norm, output_norm, ds, da)?;
    let (x_train, y_train) = ens.training_arrays(train)?;
    let (x_val, y_val) = ens.training_arrays(val)?;

    let mut root = rng::stream(cfg.seed);
    let mut members = Vec::with_capacity(cfg.n_members);
    let mut fits = Vec::with_capacity(cfg.n_members);
    for i in 0..cfg.n_members {
        let mut member_rng = rng::child(&mut root);
        let (p, fit) = fit_member(i, &ens, &x_train, &y_train, &x_val, &y_val, cfg, &mut member_rng)?;
        log::debug!("member {i}: best val nll {:.4} at epoch {}", fit.best_val_nll, fit.best_epoch);
        members.push(p);
        fits.push(fit);
    }
    ens.members = members;
    Ok((ens, fits))
}

/// Mean absolute difference between the ensemble-mean prediction and a
/// known `(s_next, r)`, averaged over the `dS + 1` outputs.
pub fn prediction_error(model: &DynamicsEnsemble, s: &[f64], a: &[f64], s_next: &[f64], r: f64) -> Result<f64> {
    let (pred_s, pred_r) = model.mean_prediction(s, a)?;
    let total: f64 = pred_s.iter().zip(s_next).map(|(p, t)| (p - t).abs()).sum::<f64>() + (pred_r - r).abs();
    Ok(total / (s.len() + 1) as f64)
}

/// [`prediction_error`] against the environment's ground-truth step.
pub fn true_model_error(model: &DynamicsEnsemble, spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<f64> {
    let truth = env_step(spec, s, a)?;
    prediction_error(model, s, a, &truth.s_next, truth.r)
}
