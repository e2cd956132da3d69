use crate::envdata::{normalized_score, run_episode, EnvSpec, Policy};
use crate::rng;
use crate::{Error, Result};

/// Mean undiscounted return of `policy` over `n_episodes` ground-truth
/// episodes, and its normalized score. Episode `k` uses the `k`-th child
/// stream of `seed`, so results do not depend on evaluation order.
pub fn evaluate_policy<P: Policy + ?Sized>(spec: &EnvSpec, policy: &P, n_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let mut root = rng::stream(seed);
    let total: f64 = (0..n_episodes)
        .map(|_| {
            let mut r = rng::child(&mut root);
            run_episode(spec, |s, _| policy.act(s), &mut r).0
        })
        .sum();
    let mean = total / n_episodes as f64;
    Ok((mean, normalized_score(mean, spec)?))
}
