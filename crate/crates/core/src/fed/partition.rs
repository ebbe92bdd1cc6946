//! Label-skewed client partitions drawn from a symmetric Dirichlet.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::rng::Rng;
use crate::{Error, Result};

pub const MAX_REDRAWS: usize = 100;

/// One draw from `Dir(beta * 1_k)`.
///
/// Gamma variates are built as `Gamma(1 + beta) * U^(1/beta)` in log space,
/// so very small `beta` does not underflow every component to zero.
pub fn dirichlet_sample(k: usize, beta: f64, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(1.0 + beta, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / beta
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Integer split of `n` by `props` with largest-remainder rounding; ties go to
/// the lower index.
pub fn largest_remainder(n: usize, props: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = n.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(left) {
        out[i] += 1;
    }
    out
}

/// Per-client index lists covering `0..labels.len()` exactly once. Every
/// client receives at least one index; the whole draw is repeated otherwise.
pub fn dirichlet_partition(labels: &[usize], classes: usize, clients: usize, beta: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if clients > labels.len() {
        return Err(Error::Config(format!("{clients} clients for {} samples", labels.len())));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..MAX_REDRAWS {
        let mut parts = vec![Vec::new(); clients];
        for idx in &by_class {
            let props = dirichlet_sample(clients, beta, rng);
            let counts = largest_remainder(idx.len(), &props);
            let mut shuffled = idx.clone();
            shuffled.shuffle(rng);
            let mut start = 0;
            for (k, &n) in counts.iter().enumerate() {
                parts[k].extend_from_slice(&shuffled[start..start + n]);
                start += n;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::Data(format!("no partition with every client nonempty after {MAX_REDRAWS} draws")))
}
