#![allow(dead_code)]

use pnf_core::agent::ComboCfg;
use pnf_core::ensemble::EnsembleCfg;
use pnf_core::envdata::Transition;
use pnf_core::pnf::PnfCfg;
use pnf_core::rng;
use pnf_core::trainer::TrainCfg;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Known linear-Gaussian system used as a fitting oracle.
pub struct LinearSystem {
    pub a: [[f64; 3]; 3],
    pub b: [[f64; 2]; 3],
    pub w_s: [f64; 3],
    pub w_a: [f64; 2],
    pub noise: f64,
}

impl LinearSystem {
    pub fn standard() -> Self {
        LinearSystem {
            a: [[0.9, 0.1, 0.0], [-0.1, 0.95, 0.05], [0.0, 0.2, 0.8]],
            b: [[0.5, 0.0], [0.0, 0.3], [0.2, -0.4]],
            w_s: [1.0, -0.5, 0.25],
            w_a: [0.3, 0.1],
            noise: 0.01,
        }
    }

    /// Noise-free `(s_next, r)`.
    pub fn mean(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        let sn = (0..3)
            .map(|i| (0..3).map(|j| self.a[i][j] * s[j]).sum::<f64>() + (0..2).map(|j| self.b[i][j] * a[j]).sum::<f64>())
            .collect();
        let r = (0..3).map(|j| self.w_s[j] * s[j]).sum::<f64>() + (0..2).map(|j| self.w_a[j] * a[j]).sum::<f64>();
        (sn, r)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Transition> {
        let mut r = rng::stream(seed);
        let eps = Normal::new(0.0, self.noise).unwrap();
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                let (mut sn, mut rew) = self.mean(&s, &a);
                sn.iter_mut().for_each(|x| *x += eps.sample(&mut r));
                rew += eps.sample(&mut r);
                Transition { s, a, r: rew, s_next: sn, done: false }
            })
            .collect()
    }
}

pub fn linear_fit_cfg() -> EnsembleCfg {
    EnsembleCfg {
        n_members: 3,
        hidden: vec![64, 64],
        lr: 1e-3,
        batch_size: 256,
        max_epochs: 40,
        patience: 5,
        seed: 7,
    }
}

/// Desk-scale training setup on the point maze.
pub fn maze_cfg(seed: u64) -> TrainCfg {
    TrainCfg {
        H: 5,
        n_start: 128,
        f_aug: 0.0,
        n_epochs: 50,
        steps_per_epoch: 100,
        seed,
        combo: ComboCfg {
            hidden: vec![64, 64],
            batch_size: 128,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            ..ComboCfg::default()
        },
        pnf: PnfCfg::qgrad(),
        model: EnsembleCfg {
            n_members: 5,
            hidden: vec![64, 64],
            max_epochs: 60,
            batch_size: 256,
            ..EnsembleCfg::default()
        },
        eval_episodes: 3,
        adq_samples: 1000,
        ..TrainCfg::default()
    }
}
