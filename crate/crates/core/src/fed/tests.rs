use super::*;
use crate::cli_io::{gen_synthetic, SyntheticSpec};
use crate::condense::{knowledge_counts, mmd_kernel};
use crate::model::ImageShape;
use crate::numerics::Graph;
use crate::rng::Rng;
use proptest::prelude::*;
use rand::Rng as _;

fn cover_ok(parts: &[Vec<usize>], n: usize) -> bool {
    let mut all: Vec<usize> = parts.concat();
    all.sort_unstable();
    all == (0..n).collect::<Vec<_>>()
}

#[test]
fn partition_is_a_disjoint_cover_for_fifty_draws() {
    let mut meta = stream(99, Stream::Partition, 9, 9);
    let (mut covered, mut exhausted) = (0, 0);
    let mut i = 0u64;
    while covered < 50 {
        i += 1;
        let classes = meta.random_range(2..8);
        let n = meta.random_range(40..300);
        let clients = meta.random_range(1..10);
        let beta = 10f64.powf(meta.random_range(-2.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| meta.random_range(0..classes)).collect();
        match dirichlet_partition(&labels, classes, clients, beta, &mut stream(i, Stream::Partition, 0, 0)) {
            Ok(parts) => {
                assert_eq!(parts.len(), clients);
                assert!(parts.iter().all(|p| !p.is_empty()));
                assert!(cover_ok(&parts, n), "seed {i} beta {beta}");
                covered += 1;
            }
            // many clients and a near-degenerate draw can leave someone empty every time
            Err(Error::Data(_)) => exhausted += 1,
            Err(e) => panic!("{e}"),
        }
    }
    assert!(exhausted < 25, "{exhausted}");
}

#[test]
fn one_client_takes_everything() {
    let labels: Vec<usize> = (0..37).map(|i| i % 3).collect();
    let parts = dirichlet_partition(&labels, 3, 1, 0.05, &mut stream(1, Stream::Partition, 0, 0)).unwrap();
    assert_eq!(parts, vec![(0..37).collect::<Vec<_>>()]);
}

#[test]
fn partition_rejects_bad_arguments() {
    let labels = vec![0, 1, 0];
    let rng = &mut stream(1, Stream::Partition, 0, 0);
    assert!(matches!(dirichlet_partition(&labels, 2, 4, 0.5, rng), Err(Error::Config(_))));
    assert!(matches!(dirichlet_partition(&labels, 2, 2, 0.0, rng), Err(Error::Config(_))));
    assert!(matches!(dirichlet_partition(&labels, 2, 0, 0.5, rng), Err(Error::Config(_))));
}

#[test]
fn small_beta_concentrates_each_class() {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let mut hits = 0;
    for seed in 0..50 {
        let parts = dirichlet_partition(&labels, 10, 10, 0.02, &mut stream(seed, Stream::Partition, 0, 0)).unwrap();
        let mut share = 0.0;
        for c in 0..10 {
            let top = parts.iter().map(|p| p.iter().filter(|&&i| labels[i] == c).count()).max().unwrap();
            share += top as f64 / 1000.0;
        }
        if share / 10.0 >= 0.7 {
            hits += 1;
        }
    }
    assert!(hits >= 45, "{hits}/50");
}

#[test]
fn dirichlet_draws_are_on_the_simplex() {
    let mut r = stream(3, Stream::Partition, 0, 0);
    for beta in [0.01, 0.05, 1.0, 10.0] {
        let p = dirichlet_sample(7, beta, &mut r);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
    }
}

proptest! {
    #[test]
    fn largest_remainder_is_exact(n in 0usize..500, raw in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0);
        let props: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let out = largest_remainder(n, &props);
        prop_assert_eq!(out.iter().sum::<usize>(), n);
        for (o, p) in out.iter().zip(&props) {
            prop_assert!((*o as f64 - p * n as f64).abs() < 1.0 + 1e-9);
        }
    }
}

fn img() -> ImageShape {
    ImageShape { height: 4, width: 4, channels: 2 }
}

fn knowledge(counts: &[usize], seed: u64) -> KnowledgeDataset {
    KnowledgeDataset::from_noise(img(), counts, 3, &mut stream(seed, Stream::Knowledge, 0, 0))
}

#[test]
fn knowledge_wire_round_trip() {
    let k = knowledge(&[2, 0, 3], 1);
    let buf = knowledge_to_wire(&k, 7);
    assert_eq!(buf.len(), knowledge_wire_len(5, img()));
    let (client, back) = knowledge_from_wire(&buf).unwrap();
    assert_eq!(client, 7);
    assert_eq!(back.round, 3);
    assert_eq!(back.counts(), vec![2, 0, 3]);
    let all: Vec<f64> = k.slices().iter().flat_map(|s| s.data().to_vec()).collect();
    let span = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - all.iter().cloned().fold(f64::INFINITY, f64::min);
    for (a, b) in k.slices().iter().zip(back.slices()) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= span / 510.0 + 1e-5, "{x} {y}");
        }
    }
}

#[test]
fn empty_upload_is_header_only() {
    let k = KnowledgeDataset::empty(img(), 3, 0);
    let buf = knowledge_to_wire(&k, 0);
    assert_eq!(buf.len(), KNOWLEDGE_HEADER);
    let (_, back) = knowledge_from_wire(&buf).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.classes(), 3);
}

#[test]
fn corrupted_uploads_are_rejected() {
    let buf = knowledge_to_wire(&knowledge(&[1, 1, 1], 2), 0);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(knowledge_from_wire(&bad), Err(Error::Protocol(_))));
    assert!(knowledge_from_wire(&buf[..buf.len() - 1]).is_err());
    let mut label = buf.clone();
    label[KNOWLEDGE_HEADER] = 9;
    assert!(knowledge_from_wire(&label).is_err());
}

#[test]
fn comm_calc_matches_table_anchor() {
    let image = ImageShape { height: 28, width: 28, channels: 3 };
    let bytes = comm_calc(90_000, 1.0, image);
    assert_eq!(bytes, 900 * (2 + 2352) + KNOWLEDGE_HEADER);
    assert_eq!(bytes, 2_118_631);
    assert!((bytes as f64 / 1e6 - 2.04).abs() / 2.04 <= 0.05);
    assert_eq!(comm_calc(0, 5.0, image), KNOWLEDGE_HEADER);
}

#[test]
fn ledger_totals() {
    let mut l = CommLedger::default();
    l.record(0, 0, Direction::Upload, PayloadKind::Knowledge, 10);
    l.record(0, 1, Direction::Upload, PayloadKind::Model, 5);
    l.record(0, 1, Direction::Download, PayloadKind::Model, 7);
    l.record(1, 0, Direction::Upload, PayloadKind::Knowledge, 3);
    assert_eq!(l.round_total(0, Direction::Upload), 15);
    assert_eq!(l.cumulative(1, Direction::Upload), 18);
    assert_eq!(l.cumulative(1, Direction::Download), 7);
    assert!(l.to_csv().starts_with("round,client,direction,payload,bytes\n0,0,upload,knowledge,10\n"));
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(Method::parse(m.as_str()), Some(m));
    }
    assert_eq!(Method::parse("fedprox"), None);
    assert!(Method::FedVck.uses_lrc() && Method::FedVck.uses_importance() && Method::FedVck.uses_constraints());
    assert!(!Method::NoLrc.uses_lrc() && Method::NoLrc.uses_importance());
    assert!(!Method::NoLrcNoPw.uses_importance() && Method::NoLrcNoPw.uses_constraints());
    assert!(!Method::Vanilla.uses_constraints());
}

fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec { classes: 3, train_per_class: 20, test_per_class: 5, side: 8, seed, ..SyntheticSpec::default() };
    gen_synthetic(&spec).unwrap()
}

fn tiny_cfg(method: Method, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        rounds: 3,
        clients: 3,
        beta: 0.5,
        seed,
        precision: Precision::F64,
        encoder_depth: 2,
        encoder_width: 4,
        percent: 10.0,
        ..RunConfig::default()
    };
    cfg.condense.epochs = 3;
    cfg.server.epochs = 2;
    cfg.fedavg.epochs = 2;
    cfg
}

fn run(cfg: RunConfig, seed: u64) -> Federation {
    let (train, test) = tiny_data(seed);
    let mut f = Federation::new(cfg, &train, &test).unwrap();
    f.enable_audit();
    f.run().unwrap();
    f
}

#[test]
fn serial_and_parallel_runs_are_identical() {
    for method in [Method::FedVck, Method::FedAvg] {
        let a = run(tiny_cfg(method, 4), 4);
        let b = run(tiny_cfg(method, 4), 4);
        let c = run(RunConfig { parallel: true, ..tiny_cfg(method, 4) }, 4);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&c.metrics));
        assert_eq!(a.current().to_bytes(), c.current().to_bytes());
        assert_eq!(a.ledger, c.ledger);
    }
}

#[test]
fn fedvck_round_bookkeeping() {
    let f = run(tiny_cfg(Method::FedVck, 5), 5);
    let per_round: usize = f.client_class_counts().iter().map(|c| knowledge_counts(c, 10.0).iter().sum::<usize>()).sum();
    assert_eq!(f.archive.len(), 3 * per_round);
    assert_eq!(f.rounds_done(), 3);
    assert_eq!(f.snapshots.iter().map(|s| s.round).collect::<Vec<_>>(), vec![0, 1, 2, 3]);

    // only the final round's importance tables survive; round 0 would have none
    assert!(f.importance.iter().all(|t| t.is_some()));
    let mut g = Federation::new(tiny_cfg(Method::FedVck, 5), &tiny_data(5).0, &tiny_data(5).1).unwrap();
    g.run_round().unwrap();
    assert!(g.importance.iter().all(|t| t.is_none()));
    assert!(g.metrics[0].adjacent_mmd.is_none());

    let image = f.archive.image;
    let mut cum = 0;
    for t in 0..3 {
        let up: Vec<&RoundMessage> = f.ledger.messages.iter().filter(|m| m.round == t && m.direction == Direction::Upload).collect();
        for m in &up {
            if m.kind == PayloadKind::Knowledge {
                let n = knowledge_counts(&f.client_class_counts()[m.client], 10.0).iter().sum();
                assert_eq!(m.bytes, knowledge_wire_len(n, image));
            }
        }
        let total: usize = up.iter().map(|m| m.bytes).sum();
        assert_eq!(f.metrics[t].upload_bytes, total);
        assert!(f.metrics[t].cumulative_upload_bytes >= cum);
        cum += total;
        assert_eq!(f.metrics[t].cumulative_upload_bytes, cum);
        let model = f.snapshots[t].wire_len();
        let down = f.ledger.messages.iter().filter(|m| m.round == t && m.direction == Direction::Download);
        assert!(down.clone().all(|m| m.bytes == model));
        assert_eq!(down.count(), 3);
    }
}

#[test]
fn clients_read_only_their_own_data() {
    for method in [Method::FedVck, Method::FedAvg] {
        let f = run(RunConfig { parallel: true, ..tiny_cfg(method, 6) }, 6);
        let log = f.audit_log();
        assert!(!log.is_empty());
        assert!(log.iter().all(|(r, o)| r == o));
        for k in 0..3 {
            assert!(log.iter().any(|(r, _)| *r == k));
        }
    }
}

#[test]
fn archive_only_grows() {
    let (train, test) = tiny_data(7);
    let mut f = Federation::new(tiny_cfg(Method::Vanilla, 7), &train, &test).unwrap();
    let mut prev = f.archive.clone();
    for _ in 0..3 {
        f.run_round().unwrap();
        for (a, b) in prev.slices().iter().zip(f.archive.slices()) {
            assert_eq!(a.data(), &b.data()[..a.len()]);
        }
        prev = f.archive.clone();
    }
}

#[test]
fn fedavg_with_one_client_is_that_client() {
    let (train, test) = tiny_data(8);
    let cfg = RunConfig { clients: 1, rounds: 1, ..tiny_cfg(Method::FedAvg, 8) };
    let mut f = Federation::new(cfg.clone(), &train, &test).unwrap();
    let start = f.current().clone();
    f.run().unwrap();
    let local_cfg = ServerConfig {
        epochs: cfg.fedavg.epochs,
        lr: cfg.fedavg.lr,
        momentum: cfg.fedavg.momentum,
        batch_size: cfg.fedavg.batch_size,
        contrastive_weight: 0.0,
        ..ServerConfig::default()
    };
    let local = dataset_as_knowledge(&train, 0).unwrap();
    let (want, _) = update_global(&start, &local, None, &local_cfg, 1, &mut stream(8, Stream::Client, 0, 0)).unwrap();
    // the model upload is f32
    for (a, b) in f.current().params().iter().zip(want.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()));
        }
    }
    let up: Vec<usize> = f.ledger.messages.iter().filter(|m| m.direction == Direction::Upload).map(|m| m.bytes).collect();
    assert_eq!(up, vec![want.wire_len()]);
}

#[test]
fn averaging_identical_models_is_identity() {
    let (train, test) = tiny_data(9);
    let f = Federation::new(tiny_cfg(Method::FedAvg, 9), &train, &test).unwrap();
    let m = f.current();
    let avg = ModelSnapshot::weighted_average(&[m, m, m], &[3.0, 5.0, 11.0]).unwrap();
    for (a, b) in avg.params().iter().zip(m.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fedavg_upload_is_one_model_per_client() {
    let f = run(tiny_cfg(Method::FedAvg, 10), 10);
    let bytes = f.current().wire_len();
    for t in 0..3 {
        assert_eq!(f.ledger.round_total(t, Direction::Upload), 3 * bytes);
        assert!(f.metrics[t].mean_condense_loss.is_none());
    }
}

fn tiny_model(seed: u64) -> ModelSnapshot {
    let cfg = EncoderConfig { depth: 2, width: 3, image: img(), classes: 3 };
    ModelSnapshot::init(cfg, Precision::F64, &mut stream(seed, Stream::ModelInit, 0, 0)).unwrap()
}

#[test]
fn adjacent_mmd_of_identical_sets_is_zero() {
    let m = tiny_model(1);
    let k = knowledge(&[3, 1, 2], 2);
    let a = adjacent_round_mmd(&k, &k, &m, KernelSpec::Gaussian { bandwidth: 1.3 }).unwrap().unwrap();
    assert!(a.per_class.iter().all(|v| v.unwrap().abs() < 1e-12));
    assert!(a.mean.abs() < 1e-12);
}

#[test]
fn adjacent_mmd_without_shared_classes_is_absent() {
    let m = tiny_model(1);
    let a = knowledge(&[2, 0, 0], 3);
    let b = knowledge(&[0, 2, 1], 4);
    assert!(adjacent_round_mmd(&a, &b, &m, KernelSpec::Linear).unwrap().is_none());
    let partial = adjacent_round_mmd(&a, &knowledge(&[1, 2, 0], 5), &m, KernelSpec::Linear).unwrap().unwrap();
    assert!(partial.per_class[0].is_some() && partial.per_class[1].is_none());
}

fn graph_mmd(x: &Tensor, y: &Tensor, k: KernelSpec) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let (a, b) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
    let v = mmd_kernel(&mut g, a, b, k).unwrap();
    g.value(v).item()
}

#[test]
fn adjacent_mmd_matches_direct_oracle() {
    let m = tiny_model(2);
    let mut r: Rng = stream(11, Stream::Knowledge, 1, 1);
    let kernels = [KernelSpec::Linear, KernelSpec::Poly { degree: 2, offset: 1.0 }, KernelSpec::Gaussian { bandwidth: 0.7 }];
    for trial in 0..10u64 {
        let ca: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
        let cb: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
        let (a, b) = (knowledge(&ca, 100 + trial), knowledge(&cb, 200 + trial));
        let kernel = kernels[trial as usize % 3];
        let got = adjacent_round_mmd(&a, &b, &m, kernel).unwrap();
        let mut want = Vec::new();
        for c in 0..3 {
            if ca[c] > 0 && cb[c] > 0 {
                let (fa, _) = m.encode(a.class(c), NormMode::RunningStats).unwrap();
                let (fb, _) = m.encode(b.class(c), NormMode::RunningStats).unwrap();
                let v = graph_mmd(&fa, &fb, kernel);
                assert!((got.as_ref().unwrap().per_class[c].unwrap() - v).abs() < 1e-10);
                want.push(v);
            }
        }
        match got {
            Some(g) => assert!((g.mean - want.iter().sum::<f64>() / want.len() as f64).abs() < 1e-10),
            None => assert!(want.is_empty()),
        }
    }
}

#[test]
fn config_validation() {
    assert!(RunConfig::default().validate().is_ok());
    assert!(RunConfig::desk(Method::FedVck, 0).validate().is_ok());
    assert!(RunConfig { beta: 0.0, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { percent: 0.0, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { hard_negatives: Some(0), ..RunConfig::default() }.validate().is_err());
    assert!(!RunConfig { method: Method::Vanilla, ..RunConfig::default() }.effective_condense().constraints);
}

#[test]
fn metrics_csv_layout() {
    let f = run(tiny_cfg(Method::NoLrc, 12), 12);
    let csv = metrics_csv(&f.metrics);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,method,global_accuracy,mean_condense_loss,upload_bytes,cumulative_upload_bytes,adjacent_mmd_mean");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,fedvck_no_lrc,"));
    assert!(lines[1].ends_with(','));
    assert!(!lines[2].ends_with(','));
}
