//! Reference loop without state augmentation: sample start states from
//! the dataset, roll the model out, update critic and actor.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::agent::{average_dataset_q, Batch, ConservativeAgent};
use crate::diffcore::Tensor;
use crate::ensemble::DynamicsEnsemble;
use crate::envdata::{sample_batch, sample_indices, Dataset};
use crate::rng;
use crate::{Error, Result};

use super::augmented::{EpochMetrics, EpochStreams};
use super::config::TrainCfg;
use super::eval::evaluate_policy;
use super::rollout::{branched_rollout, RolloutBuffer};

/// Train without augmentation (`f_aug` is ignored) and return per-epoch
/// metrics.
pub fn baseline_metrics(cfg: &TrainCfg, dataset: &Dataset, model: &DynamicsEnsemble) -> Result<Vec<EpochMetrics>> {
    let spec = dataset.env();
    let mut root = rng::stream(cfg.seed);
    let mut agent = ConservativeAgent::new(spec.state_dim, spec.action_dim, cfg.combo.clone(), &mut rng::child(&mut root))?;
    let mut buffer = RolloutBuffer::new(cfg.buffer_capacity());
    let bs = cfg.combo.batch_size;
    let mut metrics = Vec::with_capacity(cfg.n_epochs);
    for epoch in 0..cfg.n_epochs {
        let mut st = EpochStreams::derive(&mut root);
        let starts: Vec<&[f64]> = sample_indices(dataset.len(), cfg.n_start, &mut st.starts)
            .into_iter()
            .map(|i| dataset.transitions()[i].s.as_slice())
            .collect();
        let starts = Tensor::from_rows(&starts)?;
        buffer.push(branched_rollout(model, &agent, &starts, cfg.H, cfg.rollout_policy, &mut st.rollout)?);
        if buffer.is_empty() {
            return Err(Error::NonFinite("every model rollout diverged".into()));
        }
        let mut sums = [0.0; 3];
        for _ in 0..cfg.steps_per_epoch {
            let d = Batch::from_transitions(&sample_batch(dataset, bs, &mut st.update))?;
            let m = Batch::from_transitions(&buffer.sample(bs, &mut st.update))?;
            let c = agent.critic_update(&d, &m, &mut st.update)?;
            let a = agent.actor_update(&m.s, &mut st.update)?;
            sums[0] += c.td_loss;
            sums[1] += c.cql_loss;
            sums[2] += a.actor_loss;
        }
        let steps = cfg.steps_per_epoch as f64;
        metrics.push(EpochMetrics {
            epoch,
            adq: average_dataset_q(&agent, dataset, cfg.adq_samples, &mut st.adq)?,
            td_loss: sums[0] / steps,
            cql_loss: sums[1] / steps,
            actor_loss: sums[2] / steps,
            score: evaluate_policy(spec, &agent, cfg.eval_episodes, st.eval_seed)?.1,
            pnf_accept_rate: None,
            pnf_shortfalls: 0,
        });
    }
    Ok(metrics)
}

/// Run the baseline and write its metrics as JSON lines to `path`.
pub fn run_baseline(cfg: &TrainCfg, dataset: &Dataset, model: &DynamicsEnsemble, path: &Path) -> Result<Vec<EpochMetrics>> {
    let metrics = baseline_metrics(cfg, dataset, model)?;
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for m in &metrics {
        w.write_all(m.to_json_line().as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(metrics)
}
