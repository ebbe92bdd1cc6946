//! Federation orchestration: partitioning, the condensed-knowledge round
//! protocol, the FedAvg baseline, byte accounting and per-round metrics.

mod partition;
mod wire;

pub use partition::{dirichlet_partition, dirichlet_sample, largest_remainder, MAX_REDRAWS};
pub use wire::{
    comm_calc, knowledge_from_wire, knowledge_to_wire, knowledge_wire_len, CommLedger, Direction, PayloadKind,
    RoundMessage, KNOWLEDGE_HEADER,
};

use std::sync::Mutex;

use rayon::prelude::*;

use crate::cli_io::Dataset;
use crate::condense::{
    condense_round, init_knowledge, mmd_value, CondenseConfig, KernelSpec, KnowledgeDataset,
};
use crate::model::{EncoderConfig, ModelSnapshot, NormMode};
use crate::numerics::{Precision, Tensor};
use crate::proto::{aggregate_prototypes, client_logit_prototypes, default_k, feature_prototypes, hard_negatives, LogitPrototypeSet};
use crate::rng::{stream, Stream};
use crate::select::{ClassSampler, ImportanceTable, SelectConfig, UniformSampler, WeightedSampler};
use crate::server::{update_global, ContrastTargets, ServerConfig, TrainLogRow};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedVck,
    FedAvg,
    /// Without the contrastive server term.
    NoLrc,
    /// Without the contrastive term and importance sampling.
    NoLrcNoPw,
    /// Without the contrastive term, importance sampling and latent constraints.
    Vanilla,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::FedVck, Method::FedAvg, Method::NoLrc, Method::NoLrcNoPw, Method::Vanilla];
    pub const ABLATION: [Method; 4] = [Method::FedVck, Method::NoLrc, Method::NoLrcNoPw, Method::Vanilla];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedVck => "fedvck",
            Method::FedAvg => "fedavg",
            Method::NoLrc => "fedvck_no_lrc",
            Method::NoLrcNoPw => "fedvck_no_lrc_no_pw",
            Method::Vanilla => "fedvck_vanilla",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_lrc(self) -> bool {
        self == Method::FedVck
    }

    pub fn uses_importance(self) -> bool {
        matches!(self, Method::FedVck | Method::NoLrc)
    }

    pub fn uses_constraints(self) -> bool {
        matches!(self, Method::FedVck | Method::NoLrc | Method::NoLrcNoPw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.01, momentum: 0.9, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub rounds: usize,
    /// Knowledge size as a percentage of local data.
    pub percent: f64,
    pub clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub precision: Precision,
    pub parallel: bool,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub condense: CondenseConfig,
    pub select: SelectConfig,
    pub server: ServerConfig,
    /// `None` picks `min(5, C - 1)`.
    pub hard_negatives: Option<usize>,
    pub fedavg: FedAvgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::FedVck,
            rounds: 10,
            percent: 5.0,
            clients: 10,
            beta: 0.05,
            seed: 0,
            precision: Precision::F32,
            parallel: false,
            encoder_depth: 3,
            encoder_width: 32,
            condense: CondenseConfig::default(),
            select: SelectConfig::default(),
            server: ServerConfig::default(),
            hard_negatives: None,
            fedavg: FedAvgConfig::default(),
        }
    }
}

impl RunConfig {
    /// Four-client desk task: linear-kernel matching with a large, capped
    /// pixel step so ten condensation epochs move the noise start.
    pub fn desk(method: Method, seed: u64) -> Self {
        let mut cfg = Self { method, clients: 4, seed, ..Self::default() };
        cfg.condense.kernel = KernelSpec::Linear;
        cfg.condense.lr = 1.0;
        cfg.condense.grad_clip = Some(0.1);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(self.percent > 0.0 && self.percent <= 100.0) {
            return Err(Error::Config(format!("percent must lie in (0, 100], got {}", self.percent)));
        }
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.select.alpha) {
            return Err(Error::Config("select.alpha must lie in [0, 1]".into()));
        }
        if self.hard_negatives == Some(0) {
            return Err(Error::Config("proto.k must be >= 1".into()));
        }
        if self.fedavg.epochs == 0 || !(self.fedavg.lr > 0.0) || self.fedavg.batch_size == 0 {
            return Err(Error::Config("fedavg epochs, lr and batch_size must be positive".into()));
        }
        self.condense.validate()?;
        self.server.validate()
    }

    /// Condensation settings with the latent constraints set by the method.
    pub fn effective_condense(&self) -> CondenseConfig {
        CondenseConfig { constraints: self.method.uses_constraints(), ..self.condense.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub method: Method,
    pub accuracy: f64,
    pub mean_condense_loss: Option<f64>,
    pub upload_bytes: usize,
    pub cumulative_upload_bytes: usize,
    pub adjacent_mmd: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(
        "round,method,global_accuracy,mean_condense_loss,upload_bytes,cumulative_upload_bytes,adjacent_mmd_mean\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.method.as_str(),
            r.accuracy,
            opt(r.mean_condense_loss),
            r.upload_bytes,
            r.cumulative_upload_bytes,
            opt(r.adjacent_mmd)
        ));
    }
    s
}

/// Per-class MMD between two knowledge sets under one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacentMmd {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Class-wise MMD between `cur` and `prev` features (running statistics).
/// `None` when no class is shared.
pub fn adjacent_round_mmd(
    cur: &KnowledgeDataset,
    prev: &KnowledgeDataset,
    snapshot: &ModelSnapshot,
    kernel: KernelSpec,
) -> Result<Option<AdjacentMmd>> {
    if cur.classes() != prev.classes() {
        return Err(Error::Protocol("knowledge class counts differ".into()));
    }
    let mut per_class = vec![None; cur.classes()];
    for c in 0..cur.classes() {
        let (a, b) = (cur.class(c), prev.class(c));
        if a.shape()[0] == 0 || b.shape()[0] == 0 {
            continue;
        }
        let (fa, _) = snapshot.encode(a, NormMode::RunningStats)?;
        let (fb, _) = snapshot.encode(b, NormMode::RunningStats)?;
        per_class[c] = Some(mmd_value(&fa, &fb, &kernel)?);
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Ok(None);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(Some(AdjacentMmd { per_class, mean }))
}

/// Local data regrouped as a knowledge set of decoded real images.
pub fn dataset_as_knowledge(d: &Dataset, round: u32) -> Result<KnowledgeDataset> {
    let slices = d.indices_by_class().iter().map(|idx| d.gather(idx)).collect();
    KnowledgeDataset::from_slices(d.image, round, slices)
}

/// What one client sends back in a condensed-knowledge round.
struct ClientResult {
    knowledge: KnowledgeDataset,
    knowledge_bytes: Vec<u8>,
    proto_bytes: Vec<u8>,
    final_loss: f64,
    adjacent: Option<f64>,
}

/// A read of client data: `(requester, owner)`.
pub type Access = (usize, usize);

pub struct Federation {
    pub cfg: RunConfig,
    test_x: Tensor,
    test_y: Vec<usize>,
    clients: Vec<Dataset>,
    pub partition: Vec<Vec<usize>>,
    /// Published global models; entry `v` is version `v`.
    pub snapshots: Vec<ModelSnapshot>,
    pub archive: KnowledgeDataset,
    knowledge: Vec<Option<KnowledgeDataset>>,
    pub ledger: CommLedger,
    pub metrics: Vec<MetricsRow>,
    pub server_log: Vec<(usize, TrainLogRow)>,
    pub importance: Vec<Option<ImportanceTable>>,
    pub initial_accuracy: f64,
    audit: Option<Mutex<Vec<Access>>>,
}

impl Federation {
    pub fn new(cfg: RunConfig, train: &Dataset, test: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.image != test.image || train.classes != test.classes {
            return Err(Error::Data("train and test sets disagree on image shape or classes".into()));
        }
        let enc = EncoderConfig { depth: cfg.encoder_depth, width: cfg.encoder_width, image: train.image, classes: train.classes };
        enc.validate()?;
        let partition = dirichlet_partition(
            &train.labels(),
            train.classes,
            cfg.clients,
            cfg.beta,
            &mut stream(cfg.seed, Stream::Partition, 0, 0),
        )?;
        let clients: Vec<Dataset> = partition.iter().map(|p| train.subset(p)).collect();
        let init = ModelSnapshot::init(enc, cfg.precision, &mut stream(cfg.seed, Stream::ModelInit, 0, 0))?;
        let test_x = test.to_tensor();
        let test_y = test.labels();
        let initial_accuracy = init.accuracy(&test_x, &test_y)?;
        let n = clients.len();
        Ok(Self {
            archive: KnowledgeDataset::empty(train.image, train.classes, 0),
            knowledge: vec![None; n],
            importance: vec![None; n],
            cfg,
            test_x,
            test_y,
            clients,
            partition,
            snapshots: vec![init],
            ledger: CommLedger::default(),
            metrics: Vec::new(),
            server_log: Vec::new(),
            initial_accuracy,
            audit: None,
        })
    }

    /// Records every client-data read from now on.
    pub fn enable_audit(&mut self) {
        self.audit = Some(Mutex::new(Vec::new()));
    }

    pub fn audit_log(&self) -> Vec<Access> {
        self.audit.as_ref().map(|a| a.lock().unwrap().clone()).unwrap_or_default()
    }

    fn client_data(&self, requester: usize, owner: usize) -> &Dataset {
        if let Some(a) = &self.audit {
            a.lock().unwrap().push((requester, owner));
        }
        &self.clients[owner]
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.len()).collect()
    }

    pub fn client_class_counts(&self) -> Vec<Vec<usize>> {
        self.clients.iter().map(|c| c.class_counts()).collect()
    }

    pub fn current(&self) -> &ModelSnapshot {
        self.snapshots.last().expect("initial snapshot")
    }

    pub fn rounds_done(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn run(&mut self) -> Result<()> {
        while self.rounds_done() < self.cfg.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<()> {
        match self.cfg.method {
            Method::FedAvg => self.run_round_fedavg(),
            _ => self.run_round_fedvck(),
        }
    }

    fn map_clients<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let n = self.clients.len();
        if self.cfg.parallel {
            (0..n).into_par_iter().map(f).collect()
        } else {
            (0..n).map(f).collect()
        }
    }

    fn broadcast(&mut self, t: usize) {
        let bytes = self.current().wire_len();
        for k in 0..self.clients.len() {
            self.ledger.record(t, k, Direction::Download, PayloadKind::Model, bytes);
        }
    }

    fn client_fedvck(&self, k: usize, t: usize) -> Result<(ClientResult, Option<ImportanceTable>)> {
        let cfg = &self.cfg;
        let data = self.client_data(k, k);
        let current = &self.snapshots[t];
        let (table, sampler): (Option<ImportanceTable>, Box<dyn ClassSampler>) = if cfg.method.uses_importance() && t >= 1 {
            let previous = (t >= 2).then(|| &self.snapshots[t - 1]);
            let table = ImportanceTable::build(current, previous, data, &cfg.select)?;
            let sampler = WeightedSampler::new(&table)?;
            (Some(table), Box::new(sampler))
        } else {
            (None, Box::new(UniformSampler::new(data)))
        };
        let init = match &self.knowledge[k] {
            Some(prev) => prev.clone().with_round(t as u32),
            None => init_knowledge(data, cfg.percent, t as u32, &mut stream(cfg.seed, Stream::Knowledge, k as u64, t as u64)),
        };
        let ccfg = cfg.effective_condense();
        let out = condense_round(data, current, sampler.as_ref(), &ccfg, init, &mut stream(cfg.seed, Stream::Client, k as u64, t as u64))?;
        let protos = client_logit_prototypes(current, data, k as u16, t as u32)?;
        let adjacent = match &self.knowledge[k] {
            Some(prev) => adjacent_round_mmd(&out.knowledge, prev, current, out.kernel)?.map(|a| a.mean),
            None => None,
        };
        let result = ClientResult {
            knowledge_bytes: knowledge_to_wire(&out.knowledge, k as u16),
            proto_bytes: protos.to_bytes(),
            knowledge: out.knowledge,
            final_loss: out.losses.last().copied().unwrap_or(0.0),
            adjacent,
        };
        Ok((result, table))
    }

    /// One condensed-knowledge round: broadcast version `t`, condense and
    /// upload on every client, then extend the archive and train version
    /// `t + 1` on the server.
    pub fn run_round_fedvck(&mut self) -> Result<()> {
        let t = self.rounds_done();
        self.broadcast(t);
        let results = self.map_clients(|k| self.client_fedvck(k, t))?;

        // server side: only the serialized uploads are read from here on
        let mut uploads = Vec::with_capacity(results.len());
        let mut proto_sets: Vec<LogitPrototypeSet> = Vec::with_capacity(results.len());
        let mut losses = Vec::new();
        let mut adjacent = Vec::new();
        for (k, (r, table)) in results.into_iter().enumerate() {
            self.ledger.record(t, k, Direction::Upload, PayloadKind::Knowledge, r.knowledge_bytes.len());
            self.ledger.record(t, k, Direction::Upload, PayloadKind::LogitPrototypes, r.proto_bytes.len());
            let (client, kd) = knowledge_from_wire(&r.knowledge_bytes)?;
            if client as usize != k {
                return Err(Error::Protocol(format!("upload from client {client} arrived as {k}")));
            }
            uploads.push(kd);
            proto_sets.push(LogitPrototypeSet::from_bytes(&r.proto_bytes)?);
            losses.push(r.final_loss);
            adjacent.extend(r.adjacent);
            self.knowledge[k] = Some(r.knowledge);
            self.importance[k] = table;
        }

        let current = self.snapshots[t].clone();
        let targets = if self.cfg.method.uses_lrc() && !self.archive.is_empty() {
            let fp = feature_prototypes(&current, &self.archive)?;
            let global = aggregate_prototypes(&proto_sets)?;
            let k = self.cfg.hard_negatives.unwrap_or_else(|| default_k(current.config.classes));
            let hn = hard_negatives(&global, k)?;
            Some(ContrastTargets::new(&fp, &hn, current.config.feature_dim()))
        } else {
            None
        };
        for kd in &uploads {
            self.archive.extend(kd)?;
        }
        self.archive.round = t as u32;
        let (next, log) = update_global(
            &current,
            &self.archive,
            targets.as_ref(),
            &self.cfg.server,
            (t + 1) as u32,
            &mut stream(self.cfg.seed, Stream::Server, t as u64, 0),
        )?;
        self.server_log.extend(log.into_iter().map(|r| (t, r)));
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let adj = (!adjacent.is_empty()).then(|| adjacent.iter().sum::<f64>() / adjacent.len() as f64);
        self.publish(t, next, Some(mean_loss), adj)
    }

    /// One FedAvg round: local cross-entropy training on every client, then a
    /// sample-count weighted parameter average.
    pub fn run_round_fedavg(&mut self) -> Result<()> {
        let t = self.rounds_done();
        self.broadcast(t);
        let fa = &self.cfg.fedavg;
        let local_cfg = ServerConfig {
            epochs: fa.epochs,
            lr: fa.lr,
            momentum: fa.momentum,
            batch_size: fa.batch_size,
            contrastive_weight: 0.0,
            ..ServerConfig::default()
        };
        let current = self.snapshots[t].clone();
        let uploads = self.map_clients(|k| {
            let data = self.client_data(k, k);
            let local = dataset_as_knowledge(data, t as u32)?;
            let rng = &mut stream(self.cfg.seed, Stream::Client, k as u64, t as u64);
            let (m, _) = update_global(&current, &local, None, &local_cfg, (t + 1) as u32, rng)?;
            Ok(m.to_bytes())
        })?;
        let mut models = Vec::with_capacity(uploads.len());
        for (k, bytes) in uploads.iter().enumerate() {
            self.ledger.record(t, k, Direction::Upload, PayloadKind::Model, bytes.len());
            models.push(ModelSnapshot::from_bytes(bytes, self.cfg.precision)?);
        }
        let weights: Vec<f64> = self.client_sizes().iter().map(|&n| n as f64).collect();
        let refs: Vec<&ModelSnapshot> = models.iter().collect();
        let mut next = ModelSnapshot::weighted_average(&refs, &weights)?;
        next.round = (t + 1) as u32;
        self.publish(t, next, None, None)
    }

    fn publish(&mut self, t: usize, next: ModelSnapshot, loss: Option<f64>, adjacent: Option<f64>) -> Result<()> {
        let accuracy = next.accuracy(&self.test_x, &self.test_y)?;
        self.snapshots.push(next);
        self.metrics.push(MetricsRow {
            round: t,
            method: self.cfg.method,
            accuracy,
            mean_condense_loss: loss,
            upload_bytes: self.ledger.round_total(t, Direction::Upload),
            cumulative_upload_bytes: self.ledger.cumulative(t, Direction::Upload),
            adjacent_mmd: adjacent,
        });
        Ok(())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(self.initial_accuracy, |m| m.accuracy)
    }
}

#[cfg(test)]
mod tests;
