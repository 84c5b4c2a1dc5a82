use saelab::datagen::{
    decode_activations, encode_activations, gen_synthetic, read_activations, write_activations, ActivationBatch,
    SyntheticSpec, ValueDistribution,
};
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Deserialize)]
struct Reference {
    d_model: usize,
    n_tokens: usize,
    values: Vec<f64>,
    labels: Vec<String>,
    sha256: String,
}

#[test]
fn reads_reference_writer_output() {
    let bytes = include_bytes!("fixtures/reference.saea");
    let want: Reference = serde_json::from_str(include_str!("fixtures/reference.json")).unwrap();
    assert_eq!(hex::encode(Sha256::digest(bytes)), want.sha256);
    let batch = decode_activations(bytes).unwrap();
    assert_eq!((batch.n_tokens(), batch.d_model), (want.n_tokens, want.d_model));
    assert_eq!(batch.data, want.values);
    assert_eq!(batch.labels.as_ref().unwrap(), &want.labels);
    // Writing the same content reproduces the reference bytes exactly.
    let ours = ActivationBatch::new(want.d_model, want.values, Some(want.labels)).unwrap();
    let encoded = encode_activations(&ours).unwrap();
    assert_eq!(hex::encode(Sha256::digest(&encoded)), want.sha256);
}

#[test]
fn file_round_trip_is_bit_exact_at_f32() {
    let (batch, _) = gen_synthetic(&SyntheticSpec {
        n_tokens: 500,
        concept_groups: 4,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.saea");
    write_activations(&batch, &path).unwrap();
    let back = read_activations(&path).unwrap();
    assert_eq!(back, batch.quantized());
    write_activations(&back, dir.path().join("b.saea")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("b.saea")).unwrap()
    );
}

/// Mean active-feature count within three standard errors of the target.
#[test]
fn active_count_follows_binomial_statistics() {
    for (sparsity, n_features, groups) in [(4.0, 128, 0), (2.0, 64, 0), (8.0, 256, 0), (3.0, 128, 4)] {
        let spec = SyntheticSpec {
            d_model: 16,
            n_true_features: n_features,
            feature_sparsity: sparsity,
            n_tokens: 10_000,
            seed: 99,
            concept_groups: groups,
            ..Default::default()
        };
        let (_, truth) = gen_synthetic(&spec).unwrap();
        let p = spec.activation_probability();
        let pool = if groups > 0 { n_features / groups } else { n_features } as f64;
        let variance = pool * p * (1.0 - p);
        let mean = truth.codes.iter().map(Vec::len).sum::<usize>() as f64 / 10_000.0;
        let bound = 3.0 * (variance / 10_000.0).sqrt();
        assert!(
            (mean - sparsity).abs() <= bound,
            "sparsity {sparsity}: mean {mean}, bound {bound}"
        );
    }
}

#[test]
fn coefficient_distributions_have_expected_means() {
    for (dist, want_mean, want_var) in [
        (ValueDistribution::UniformUnit, 0.5, 1.0 / 12.0),
        (ValueDistribution::Exponential, 1.0, 1.0),
    ] {
        let (_, truth) = gen_synthetic(&SyntheticSpec {
            d_model: 8,
            n_tokens: 10_000,
            value_distribution: dist,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let values: Vec<f64> = truth.codes.iter().flatten().map(|&(_, c)| c).collect();
        assert!(values.iter().all(|&c| c > 0.0));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let bound = 3.0 * (want_var / values.len() as f64).sqrt();
        assert!((mean - want_mean).abs() <= bound, "{dist:?}: {mean}");
    }
}

#[test]
fn generator_is_deterministic() {
    let (batch, _) = gen_synthetic(&SyntheticSpec {
        n_tokens: 1000,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let bytes = encode_activations(&batch).unwrap();
    let (again, _) = gen_synthetic(&SyntheticSpec {
        n_tokens: 1000,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(encode_activations(&again).unwrap(), bytes);
}
