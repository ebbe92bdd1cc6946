//! Experiment drivers shared by the command line and the test suites.

use std::path::Path;

use super::{gen_synthetic, Config, Dataset};
use crate::fed::{metrics_csv, Federation, Method};
use crate::proto::default_k;
use crate::server::log_to_csv;
use crate::Result;

/// Train and test sets from files, or the configured synthetic task.
pub fn load_or_generate(cfg: &Config, train: Option<&Path>, test: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match (train, test) {
        (Some(a), Some(b)) => Ok((Dataset::load(a)?, Dataset::load(b)?)),
        (None, None) => gen_synthetic(&cfg.resolved_data()),
        _ => Err(crate::Error::Config("--train and --test must be given together".into())),
    }
}

/// Runs every round of one configuration.
pub fn run_experiment(cfg: &Config, train: &Dataset, test: &Dataset) -> Result<Federation> {
    let mut f = Federation::new(cfg.run.clone(), train, test)?;
    f.run()?;
    Ok(f)
}

/// Writes the resolved config, metrics, byte ledger, server log and final
/// model of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &Config, f: &Federation) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&f.metrics))?;
    std::fs::write(dir.join("ledger.csv"), f.ledger.to_csv())?;
    let mut log = String::from("round,");
    let rows: Vec<_> = f.server_log.iter().map(|(_, r)| *r).collect();
    let body = log_to_csv(&rows);
    let mut lines = body.lines();
    log.push_str(lines.next().unwrap_or(""));
    log.push('\n');
    for ((t, _), line) in f.server_log.iter().zip(lines) {
        log.push_str(&format!("{t},{line}\n"));
    }
    std::fs::write(dir.join("server_log.csv"), log)?;
    std::fs::write(dir.join("model.bin"), f.current().to_bytes())?;
    if !f.archive.is_empty() {
        f.archive.save(&dir.join("archive.fvka"))?;
    }
    Ok(())
}

/// Final accuracy of one arm under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub final_accuracy: f64,
    /// Accuracy after every round.
    pub curve: Vec<f64>,
    /// Mean adjacent-round MMD over rounds `2..T` (0-based `1..`), if any.
    pub mean_adjacent_mmd: Option<f64>,
    pub condense_losses: Vec<f64>,
    pub upload_bytes_per_round: Vec<usize>,
}

fn arm_result(arm: String, seed: u64, f: &Federation) -> ArmResult {
    let adj: Vec<f64> = f.metrics.iter().skip(1).filter_map(|m| m.adjacent_mmd).collect();
    ArmResult {
        arm,
        seed,
        final_accuracy: f.final_accuracy(),
        curve: f.metrics.iter().map(|m| m.accuracy).collect(),
        mean_adjacent_mmd: (!adj.is_empty()).then(|| adj.iter().sum::<f64>() / adj.len() as f64),
        condense_losses: f.metrics.iter().filter_map(|m| m.mean_condense_loss).collect(),
        upload_bytes_per_round: f.metrics.iter().map(|m| m.upload_bytes).collect(),
    }
}

fn seeded(cfg: &Config, seed: u64) -> Config {
    let mut c = cfg.clone();
    c.run.seed = seed;
    c
}

/// Runs `methods` under every seed. Data follows each seed unless
/// `data.seed` is pinned.
pub fn run_arms(cfg: &Config, methods: &[Method], seeds: &[u64], data: Option<(&Dataset, &Dataset)>) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let base = seeded(cfg, seed);
        let owned;
        let (train, test) = match data {
            Some(d) => d,
            None => {
                owned = gen_synthetic(&base.resolved_data())?;
                (&owned.0, &owned.1)
            }
        };
        for &m in methods {
            let mut c = base.clone();
            c.run.method = m;
            let f = run_experiment(&c, train, test)?;
            out.push(arm_result(m.as_str().to_string(), seed, &f));
        }
    }
    Ok(out)
}

/// Hard-negative counts swept by the ablation: `{1, 3, 5, C - 1}` clipped
/// to `1..C`.
pub fn k_values(classes: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 3, 5, classes.saturating_sub(1)].into_iter().filter(|&k| k >= 1 && k < classes.max(2)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// FedVCK under each hard-negative count.
pub fn k_sweep(cfg: &Config, seeds: &[u64], data: Option<(&Dataset, &Dataset)>) -> Result<Vec<(usize, ArmResult)>> {
    let classes = match data {
        Some((t, _)) => t.classes,
        None => cfg.data.classes,
    };
    let mut out = Vec::new();
    for k in k_values(classes) {
        let mut c = cfg.clone();
        c.run.hard_negatives = Some(k);
        for r in run_arms(&c, &[Method::FedVck], seeds, data)? {
            out.push((k, ArmResult { arm: format!("fedvck_k{k}"), ..r }));
        }
    }
    Ok(out)
}

pub fn arms_csv(rows: &[ArmResult]) -> String {
    let mut s = String::from("arm,seed,final_accuracy,mean_adjacent_mmd\n");
    for r in rows {
        let adj = r.mean_adjacent_mmd.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.arm, r.seed, r.final_accuracy, adj));
    }
    s
}

/// Mean final accuracy per arm, in first-seen order.
pub fn arm_means(rows: &[ArmResult]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(a, _, _)| *a == r.arm) {
            Some(e) => {
                e.1 += r.final_accuracy;
                e.2 += 1;
            }
            None => out.push((r.arm.clone(), r.final_accuracy, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

/// Plain-text comparison table of mean final accuracy per arm.
pub fn comparison_table(rows: &[ArmResult]) -> String {
    let means = arm_means(rows);
    let w = means.iter().map(|(a, _)| a.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<w$}  mean_final_accuracy\n", "arm");
    for (a, m) in means {
        s.push_str(&format!("{a:<w$}  {m:.4}\n"));
    }
    s
}

pub fn k_sweep_csv(rows: &[(usize, ArmResult)], classes: usize) -> String {
    let d = default_k(classes);
    let mut s = String::from("k,is_default,seed,final_accuracy\n");
    for (k, r) in rows {
        s.push_str(&format!("{},{},{},{}\n", k, *k == d, r.seed, r.final_accuracy));
    }
    s
}

/// Per-round adjacent MMD with importance sampling and with uniform
/// sampling, all else equal.
pub fn mmd_diag(cfg: &Config, data: Option<(&Dataset, &Dataset)>) -> Result<String> {
    let owned;
    let (train, test) = match data {
        Some(d) => d,
        None => {
            owned = gen_synthetic(&cfg.resolved_data())?;
            (&owned.0, &owned.1)
        }
    };
    let curve = |m: Method| -> Result<Vec<Option<f64>>> {
        let mut c = cfg.clone();
        c.run.method = m;
        Ok(run_experiment(&c, train, test)?.metrics.iter().map(|m| m.adjacent_mmd).collect())
    };
    let (w, u) = (curve(Method::NoLrc)?, curve(Method::NoLrcNoPw)?);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("round,importance,uniform\n");
    for (t, (a, b)) in w.iter().zip(&u).enumerate() {
        s.push_str(&format!("{t},{},{}\n", opt(*a), opt(*b)));
    }
    Ok(s)
}
