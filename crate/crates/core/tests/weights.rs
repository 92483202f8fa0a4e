use proptest::prelude::*;
use tokenfusion::fusion::{all_variants, build_model, FusionMethod, HeadType, ModelConfig};
use tokenfusion::params::{Init, ParamLayout};
use tokenfusion::weights::{read_tensors, read_weights, write_weights};
use tokenfusion::{Error, Tensor};

#[test]
fn every_variant_round_trips() {
    for v in all_variants() {
        let m = build_model(&v.apply(&ModelConfig::default())).unwrap();
        let p: Vec<Tensor<f32>> = m.init_params(3);
        let mut buf = Vec::new();
        write_weights(&mut buf, m.layout(), &p).unwrap();
        let back: Vec<Tensor<f32>> = read_weights(&mut buf.as_slice(), m.layout()).unwrap();
        assert_eq!(back, p, "{}", v.name());
    }
}

#[test]
fn hand_written_file_parses() {
    let mut bytes = b"TFWT".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(3u32.to_le_bytes());
    bytes.extend(b"w.b");
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(2u64.to_le_bytes());
    bytes.push(1);
    bytes.extend(1.5f64.to_le_bytes());
    bytes.extend((-2.0f64).to_le_bytes());
    let t = read_tensors::<f64>(&mut bytes.as_slice()).unwrap();
    assert_eq!(t[0].name, "w.b");
    assert_eq!(t[0].value.data(), &[1.5, -2.0]);

    let mut l = ParamLayout::new();
    l.add("w.b", [2], Init::Zeros);
    assert_eq!(read_weights::<f32>(&mut bytes.as_slice(), &l).unwrap()[0].data(), &[1.5f32, -2.0]);
    bytes[16] = b'x';
    assert!(matches!(read_weights::<f64>(&mut bytes.as_slice(), &l), Err(Error::WeightMismatch(_))));
}

#[test]
fn other_architecture_is_a_mismatch() {
    let late = build_model(&ModelConfig::toy(FusionMethod::LateParallel, HeadType::Mixing)).unwrap();
    let early = build_model(&ModelConfig::toy(FusionMethod::EarlyFusion, HeadType::Mixing)).unwrap();
    let token = build_model(&ModelConfig::toy(FusionMethod::LateParallel, HeadType::TokenWise)).unwrap();
    let p: Vec<Tensor<f32>> = late.init_params(0);
    let mut buf = Vec::new();
    write_weights(&mut buf, late.layout(), &p).unwrap();
    for other in [&early, &token] {
        assert!(matches!(read_weights::<f32>(&mut buf.as_slice(), other.layout()), Err(Error::WeightMismatch(_))));
    }
}

#[test]
fn write_rejects_params_of_the_wrong_shape() {
    let m = build_model(&ModelConfig::toy(FusionMethod::LateParallel, HeadType::Mixing)).unwrap();
    let mut p: Vec<Tensor<f32>> = m.init_params(0);
    p.pop();
    assert!(write_weights(&mut Vec::new(), m.layout(), &p).is_err());
}

proptest! {
    #[test]
    fn any_prefix_is_rejected(cut in 0usize..200) {
        let mut l = ParamLayout::new();
        l.add("x.weight", [3, 4], Init::EMBED);
        l.add("x.bias", [4], Init::Zeros);
        let p: Vec<Tensor<f64>> = l.init(1);
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        let cut = cut % buf.len();
        prop_assert!(matches!(read_weights::<f64>(&mut &buf[..cut], &l), Err(Error::WeightFormat(_))));
    }

    #[test]
    fn f64_round_trip_is_exact(vals in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
        let mut l = ParamLayout::new();
        l.add("v", [vals.len()], Init::Zeros);
        let p = vec![Tensor::from_vec(vec![vals.len()], vals.clone()).unwrap()];
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        prop_assert_eq!(read_weights::<f64>(&mut buf.as_slice(), &l).unwrap(), p);
    }
}
