use fedvck::cli_io::{gen_synthetic, SyntheticSpec};
use fedvck::fed::dataset_as_knowledge;
use fedvck::model::{EncoderConfig, ModelSnapshot};
use fedvck::numerics::Precision;
use fedvck::rng::{stream, Stream};
use fedvck::server::{update_global, ServerConfig};

#[test]
fn central_reference_encoder_learns_the_default_task() {
    let spec = SyntheticSpec::default();
    let (train, test) = gen_synthetic(&spec).unwrap();
    let enc = EncoderConfig { depth: 3, width: 32, image: spec.image(), classes: spec.classes };
    let init = ModelSnapshot::init(enc, Precision::F32, &mut stream(0, Stream::ModelInit, 0, 0)).unwrap();
    let cfg = ServerConfig { epochs: 10, ..ServerConfig::default() };
    let all = dataset_as_knowledge(&train, 0).unwrap();
    let (m, log) = update_global(&init, &all, None, &cfg, 1, &mut stream(0, Stream::Server, 0, 0)).unwrap();
    assert_eq!(log.len(), 10);
    let acc = m.accuracy(&test.to_tensor(), &test.labels()).unwrap();
    assert!(acc >= 0.9, "central accuracy {acc}");
}
