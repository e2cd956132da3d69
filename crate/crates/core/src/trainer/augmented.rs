use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{average_dataset_q, Batch, ConservativeAgent};
use crate::diffcore::Tensor;
use crate::ensemble::{fit_ensemble, DynamicsEnsemble, EnsembleCfg};
use crate::envdata::{load_dataset, sample_batch, sample_indices, split_train_val, Dataset};
use crate::pnf::{append_trace, pnf_augment, PnfCfg, PnfOutput};
use crate::rng::{self, Stream};
use crate::{Error, Result};

use super::config::TrainCfg;
use super::eval::evaluate_policy;
use super::rollout::{branched_rollout, RolloutBuffer};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub adq: f64,
    pub td_loss: f64,
    pub cql_loss: f64,
    pub actor_loss: f64,
    pub score: f64,
    /// Accepted over proposed candidates; `None` without augmentation.
    pub pnf_accept_rate: Option<f64>,
    pub pnf_shortfalls: usize,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Per-epoch random streams, derived in a fixed order from the root.
pub(crate) struct EpochStreams {
    pub starts: Stream,
    pub rollout: Stream,
    pub update: Stream,
    pub adq: Stream,
    pub eval_seed: u64,
}

impl EpochStreams {
    pub(crate) fn derive(root: &mut Stream) -> Self {
        let mut ep = rng::child(root);
        EpochStreams {
            starts: rng::child(&mut ep),
            rollout: rng::child(&mut ep),
            update: rng::child(&mut ep),
            adq: rng::child(&mut ep),
            eval_seed: ep.random(),
        }
    }
}

/// Sampled start states plus the augmentation report, if any.
#[derive(Debug, Clone)]
pub struct StartBatch {
    pub states: Tensor,
    pub replaced_slots: Vec<usize>,
    pub pnf: Option<PnfOutput>,
}

/// `n_start` dataset states with `floor(f_aug * n_start)` uniformly chosen
/// slots overwritten by augmented states. With `f_aug = 0` the stream is
/// used only for the dataset sample. Slots left unfilled after a shortfall
/// keep their dataset state.
pub fn start_state_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    agent: &ConservativeAgent,
    model: &DynamicsEnsemble,
    cfg: &TrainCfg,
    rng: &mut R,
) -> Result<StartBatch> {
    let idx = sample_indices(dataset.len(), cfg.n_start, rng);
    let rows: Vec<&[f64]> = idx.iter().map(|&i| dataset.transitions()[i].s.as_slice()).collect();
    let mut states = Tensor::from_rows(&rows)?;
    let n_aug = cfg.n_aug();
    if n_aug == 0 {
        return Ok(StartBatch {
            states,
            replaced_slots: Vec::new(),
            pnf: None,
        });
    }
    let mut slot_rng = rng::child(rng);
    let mut pnf_rng = rng::child(rng);
    let slots = index::sample(&mut slot_rng, cfg.n_start, n_aug).into_vec();
    let pcfg = PnfCfg { n_aug, ..cfg.pnf.clone() };
    let out = pnf_augment(agent, model, &states, &pcfg, cfg.trace, &mut pnf_rng)?;
    let replaced: Vec<usize> = slots.iter().copied().take(out.states.len()).collect();
    for (&slot, s) in replaced.iter().zip(&out.states) {
        states.row_mut(slot).copy_from_slice(s);
    }
    Ok(StartBatch {
        states,
        replaced_slots: replaced,
        pnf: Some(out),
    })
}

/// Training state of the augmented loop.
pub struct Trainer {
    cfg: TrainCfg,
    dataset: Dataset,
    model: DynamicsEnsemble,
    agent: ConservativeAgent,
    buffer: RolloutBuffer,
    root: Stream,
    epoch: usize,
    trace: Option<BufWriter<File>>,
    /// Augmentation calls made so far.
    pub pnf_calls: usize,
    /// Branches truncated by non-finite model output so far.
    pub truncated_branches: usize,
}

impl Trainer {
    pub fn new(cfg: TrainCfg, dataset: Dataset, model: DynamicsEnsemble) -> Result<Self> {
        cfg.validate()?;
        let spec = dataset.env();
        if model.state_dim() != spec.state_dim || model.action_dim() != spec.action_dim {
            return Err(Error::Shape("model and dataset dimensions differ".into()));
        }
        let mut root = rng::stream(cfg.seed);
        let mut agent_rng = rng::child(&mut root);
        let agent = ConservativeAgent::new(spec.state_dim, spec.action_dim, cfg.combo.clone(), &mut agent_rng)?;
        Ok(Trainer {
            buffer: RolloutBuffer::new(cfg.buffer_capacity()),
            cfg,
            dataset,
            model,
            agent,
            root,
            epoch: 0,
            trace: None,
            pnf_calls: 0,
            truncated_branches: 0,
        })
    }

    /// Send augmentation chain records to `path` as JSON lines.
    pub fn trace_to(&mut self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.trace = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn agent(&self) -> &ConservativeAgent {
        &self.agent
    }

    pub fn model(&self) -> &DynamicsEnsemble {
        &self.model
    }

    pub fn buffer(&self) -> &RolloutBuffer {
        &self.buffer
    }

    pub fn cfg(&self) -> &TrainCfg {
        &self.cfg
    }

    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let mut st = EpochStreams::derive(&mut self.root);
        let start = start_state_batch(&self.dataset, &self.agent, &self.model, &self.cfg, &mut st.starts)?;
        if let Some(out) = &start.pnf {
            self.pnf_calls += 1;
            if let Some(w) = self.trace.as_mut() {
                append_trace(w, &out.trace).map_err(|e| Error::io("writing augmentation trace", e))?;
            }
        }
        let rollout = branched_rollout(&self.model, &self.agent, &start.states, self.cfg.H, self.cfg.rollout_policy, &mut st.rollout)?;
        self.truncated_branches += rollout.truncated;
        if rollout.truncated > 0 {
            log::warn!("epoch {}: {} rollout branches truncated", self.epoch, rollout.truncated);
        }
        self.buffer.push(rollout);
        if self.buffer.is_empty() {
            return Err(Error::NonFinite("every model rollout diverged".into()));
        }

        let bs = self.cfg.combo.batch_size;
        let (mut td, mut cql, mut actor) = (0.0, 0.0, 0.0);
        for _ in 0..self.cfg.steps_per_epoch {
            let db = Batch::from_transitions(&sample_batch(&self.dataset, bs, &mut st.update))?;
            let mb = Batch::from_transitions(&self.buffer.sample(bs, &mut st.update))?;
            let c = self.agent.critic_update(&db, &mb, &mut st.update)?;
            let a = self.agent.actor_update(&mb.s, &mut st.update)?;
            td += c.td_loss;
            cql += c.cql_loss;
            actor += a.actor_loss;
        }
        let n = self.cfg.steps_per_epoch as f64;
        let adq = average_dataset_q(&self.agent, &self.dataset, self.cfg.adq_samples, &mut st.adq)?;
        let (_, score) = evaluate_policy(self.dataset.env(), &self.agent, self.cfg.eval_episodes, st.eval_seed)?;
        let m = EpochMetrics {
            epoch: self.epoch,
            adq,
            td_loss: td / n,
            cql_loss: cql / n,
            actor_loss: actor / n,
            score,
            pnf_accept_rate: start.pnf.as_ref().map(PnfOutput::accept_rate),
            pnf_shortfalls: start.pnf.as_ref().map_or(0, |o| usize::from(o.shortfall)),
        };
        self.epoch += 1;
        Ok(m)
    }

    pub fn finish(mut self) -> Result<ConservativeAgent> {
        if let Some(w) = self.trace.as_mut() {
            w.flush().map_err(|e| Error::io("writing augmentation trace", e))?;
        }
        Ok(self.agent)
    }
}

/// Fit the dynamics ensemble on a train/validation split of `dataset`.
pub fn fit_model(dataset: &Dataset, cfg: &TrainCfg) -> Result<DynamicsEnsemble> {
    let (train, val) = split_train_val(dataset, cfg.val_fraction, cfg.seed)?;
    let mcfg = EnsembleCfg { seed: cfg.seed, ..cfg.model.clone() };
    let (model, fits) = fit_ensemble(train.transitions(), val.transitions(), &mcfg)?;
    for (i, f) in fits.iter().enumerate() {
        log::info!("member {i}: {} epochs, best val nll {:.4} at epoch {}", f.epochs_run, f.best_val_nll, f.best_epoch);
    }
    Ok(model)
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub model_dir: PathBuf,
    pub agent_dir: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    pub metrics: Vec<EpochMetrics>,
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Load the dataset, fit the model and train for `n_epochs`.
pub fn run(cfg: &TrainCfg, dataset_path: &Path, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dataset = load_dataset(dataset_path)?;
    let model = fit_model(&dataset, cfg)?;
    run_with_model(cfg, dataset, model, out_dir)
}

/// Train against an already fitted model.
pub fn run_with_model(cfg: &TrainCfg, dataset: Dataset, model: DynamicsEnsemble, out_dir: &Path) -> Result<RunArtifacts> {
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let model_dir = out_dir.join("model");
    model.save(&model_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut out = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?);
    let mut trainer = Trainer::new(cfg.clone(), dataset, model)?;
    let trace_path = if cfg.trace && cfg.f_aug > 0.0 {
        let p = out_dir.join("pnf_trace.jsonl");
        trainer.trace_to(&p)?;
        Some(p)
    } else {
        None
    };
    let mut metrics = Vec::with_capacity(cfg.n_epochs);
    for _ in 0..cfg.n_epochs {
        let m = trainer.train_epoch()?;
        log::info!("epoch {} adq {:.3} score {:.1}", m.epoch, m.adq, m.score);
        out.write_all(m.to_json_line().as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
        metrics.push(m);
    }
    let agent = trainer.finish()?;
    let agent_dir = if cfg.n_epochs > 0 {
        let d = out_dir.join("agent");
        agent.save(&d)?;
        Some(d)
    } else {
        None
    };
    Ok(RunArtifacts {
        metrics_path,
        model_dir,
        agent_dir,
        trace_path,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ComboCfg;
    use crate::envdata::{generate_dataset, save_dataset, Behavior, EnvSpec};
    use crate::pnf::PnfCfg;
    use crate::trainer::baseline::baseline_metrics;

    fn tiny_cfg(f_aug: f64) -> TrainCfg {
        TrainCfg {
            H: 2,
            n_start: 32,
            f_aug,
            n_epochs: 2,
            steps_per_epoch: 5,
            combo: ComboCfg {
                hidden: vec![16, 16],
                batch_size: 16,
                ..ComboCfg::default()
            },
            pnf: PnfCfg { delta_max: 0.05, ..PnfCfg::random() },
            model: EnsembleCfg {
                n_members: 3,
                hidden: vec![16, 16],
                max_epochs: 5,
                batch_size: 64,
                ..EnsembleCfg::default()
            },
            eval_episodes: 1,
            adq_samples: 64,
            seed: 4,
            ..TrainCfg::default()
        }
    }

    fn fixture() -> (Dataset, DynamicsEnsemble) {
        let d = generate_dataset(&EnvSpec::pendulum(), Behavior::Medium, 1000, 1).unwrap();
        let model = fit_model(&d, &tiny_cfg(0.0)).unwrap();
        (d, model)
    }

    #[test]
    fn no_augmentation_leaves_sample_untouched() {
        let (d, model) = fixture();
        let cfg = tiny_cfg(0.0);
        let agent = ConservativeAgent::new(3, 1, cfg.combo.clone(), &mut rng::stream(0)).unwrap();
        let mut r = rng::stream(9);
        let b = start_state_batch(&d, &agent, &model, &cfg, &mut r).unwrap();
        let mut r2 = rng::stream(9);
        let idx = sample_indices(d.len(), cfg.n_start, &mut r2);
        for (row, i) in b.states.iter_rows().zip(idx) {
            assert_eq!(row, d.transitions()[i].s.as_slice());
        }
        assert!(b.pnf.is_none() && b.replaced_slots.is_empty());
        assert_eq!(r.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn replaced_slot_count_follows_floor() {
        let (d, model) = fixture();
        for (f, expect) in [(0.5, 128), (0.9, 230)] {
            let cfg = TrainCfg { n_start: 256, ..tiny_cfg(f) };
            let agent = ConservativeAgent::new(3, 1, cfg.combo.clone(), &mut rng::stream(0)).unwrap();
            let b = start_state_batch(&d, &agent, &model, &cfg, &mut rng::stream(2)).unwrap();
            let out = b.pnf.unwrap();
            assert!(!out.shortfall, "shortfall at f_aug {f}");
            assert_eq!(b.replaced_slots.len(), expect);
            for (&slot, s) in b.replaced_slots.iter().zip(&out.states) {
                assert_eq!(b.states.row(slot), s.as_slice());
            }
        }
    }

    #[test]
    fn zero_fraction_matches_baseline_and_skips_augmentation() {
        let (d, model) = fixture();
        let cfg = tiny_cfg(0.0);
        let mut t = Trainer::new(cfg.clone(), d.clone(), model.clone()).unwrap();
        let ours: Vec<EpochMetrics> = (0..cfg.n_epochs).map(|_| t.train_epoch().unwrap()).collect();
        assert_eq!(t.pnf_calls, 0);
        assert_eq!(ours, baseline_metrics(&cfg, &d, &model).unwrap());
        assert!(ours.iter().all(|m| m.adq.is_finite() && m.pnf_accept_rate.is_none()));
    }

    #[test]
    fn epochs_are_deterministic_and_prefix_stable() {
        let (d, model) = fixture();
        let cfg = tiny_cfg(0.5);
        let run = |n: usize| {
            let mut t = Trainer::new(TrainCfg { n_epochs: n, ..cfg.clone() }, d.clone(), model.clone()).unwrap();
            (0..n).map(|_| t.train_epoch().unwrap()).collect::<Vec<_>>()
        };
        let three = run(3);
        assert_eq!(three, run(3));
        assert_eq!(&three[..2], run(2).as_slice());
        assert!(three.iter().all(|m| m.pnf_accept_rate.is_some()));
    }

    #[test]
    fn rollout_buffer_holds_model_transitions() {
        let (d, model) = fixture();
        let mut t = Trainer::new(tiny_cfg(0.0), d.clone(), model).unwrap();
        t.train_epoch().unwrap();
        assert_eq!(t.buffer().len(), 32 * 2);
        assert!(t.buffer().iter().all(|x| !x.done));
        assert!(t.buffer().iter().all(|x| !d.transitions().contains(x)));
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.csv");
        save_dataset(&generate_dataset(&EnvSpec::pendulum(), Behavior::Medium, 600, 1).unwrap(), &data).unwrap();

        let zero = run(&TrainCfg { n_epochs: 0, ..tiny_cfg(0.0) }, &data, &dir.path().join("zero")).unwrap();
        assert!(zero.model_dir.join("normalizer.txt").exists());
        assert!(zero.agent_dir.is_none());
        assert_eq!(fs::read_to_string(&zero.metrics_path).unwrap(), "");

        let cfg = TrainCfg { trace: true, ..tiny_cfg(0.5) };
        let a = run(&cfg, &data, &dir.path().join("a")).unwrap();
        let b = run(&cfg, &data, &dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());
        assert_eq!(fs::read_to_string(&a.metrics_path).unwrap().lines().count(), 2);
        assert!(!crate::pnf::read_trace(a.trace_path.as_ref().unwrap()).unwrap().is_empty());
        ConservativeAgent::load(a.agent_dir.as_ref().unwrap()).unwrap();
    }
}
