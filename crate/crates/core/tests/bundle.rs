mod common;

use lcx::bundle::{load_bundle, save_bundle, BUNDLE_FORMAT_VERSION};
use lcx::latent::default_lambdas;
use lcx::nets;
use lcx::persist::sha256_hex;
use lcx::LcxError;

#[test]
fn round_trip_is_exact_and_digest_stable() {
    let b = common::tiny_bundle(11);
    let dir = tempfile::tempdir().unwrap();
    let digest = save_bundle(&b, dir.path()).unwrap();
    let (loaded, loaded_digest) = load_bundle(dir.path()).unwrap();
    assert_eq!(digest, loaded_digest);
    assert_eq!(digest, sha256_hex(&std::fs::read(dir.path().join("bundle.json")).unwrap()));
    assert_eq!(loaded.direction, b.direction);
    assert_eq!(loaded.mapping, b.mapping);
    assert_eq!(loaded.synthesis, b.synthesis);
    assert_eq!(loaded.encoder, b.encoder);
    assert_eq!(loaded.classifier, b.classifier);
    assert_eq!(loaded, b);
    for (key, t) in &b.synthesis.arrays {
        let u = loaded.synthesis.get(key).unwrap();
        assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{key}");
    }

    let again = tempfile::tempdir().unwrap();
    assert_eq!(save_bundle(&loaded, again.path()).unwrap(), digest);
}

#[test]
fn reloaded_bundle_renders_identical_traversals() {
    let b = common::tiny_bundle(12);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let (loaded, _) = load_bundle(dir.path()).unwrap();
    let w = nets::mapping_forward(&b.mapping, &b.generator_spec, &[0.3; 8]).unwrap();
    let s1 = b.traverse(&w, &default_lambdas(), false, "x").unwrap();
    let s2 = loaded.traverse(&w, &default_lambdas(), false, "x").unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn truncated_header_is_a_digest_error() {
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&common::tiny_bundle(1), dir.path()).unwrap();
    let path = dir.path().join("bundle.json");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(LcxError::Digest(_))));
}

#[test]
fn tampered_network_is_a_digest_error() {
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&common::tiny_bundle(1), dir.path()).unwrap();
    let file = dir.path().join("classifier/head.weight.bin");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(LcxError::Digest(_))));

    let dir = tempfile::tempdir().unwrap();
    save_bundle(&common::tiny_bundle(1), dir.path()).unwrap();
    let manifest = dir.path().join("encoder/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"init_seed\": 3", "\"init_seed\": 4")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(LcxError::Digest(_))));
}

#[test]
fn unknown_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&common::tiny_bundle(1), dir.path()).unwrap();
    let path = dir.path().join("bundle.json");
    let mut header: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    header["format_version"] = serde_json::json!(BUNDLE_FORMAT_VERSION + 1);
    std::fs::write(&path, serde_json::to_vec(&header).unwrap()).unwrap();
    match load_bundle(dir.path()) {
        Err(LcxError::Version { found, supported }) => {
            assert_eq!(found, BUNDLE_FORMAT_VERSION + 1);
            assert_eq!(supported, BUNDLE_FORMAT_VERSION);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn inconsistent_bundles_are_not_saved() {
    let mut b = common::tiny_bundle(1);
    b.direction.alpha.push(1.0);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(save_bundle(&b, dir.path()), Err(LcxError::Shape(_))));
}
