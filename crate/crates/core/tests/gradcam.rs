mod common;

use lcx::gradcam::{colormap, gradcam, overlay_canvas, Heatmap};
use lcx::nets;
use lcx::{ImageTensor, LcxError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(seed: u64, r: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(r, (0..r * r).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn scale_head(params: &mut nets::NetworkParams, c: f32) {
    for key in ["head.weight", "head.bias"] {
        params.get_mut(key).unwrap().scale(c);
    }
}

#[test]
fn zero_head_gives_an_all_zero_map() {
    let mut b = common::tiny_bundle(1);
    scale_head(&mut b.classifier, 0.0);
    for layer in b.classifier_spec.feature_layers() {
        let h = gradcam(&b.classifier, &b.classifier_spec, &noise_image(2, 16), &layer).unwrap();
        assert!(h.is_zero(), "layer {layer}");
        assert_eq!(h.row_band_mass(0, 16), 0.0);
    }
}

#[test]
fn doubling_the_head_leaves_the_map_unchanged() {
    let b = common::tiny_bundle(3);
    let mut doubled = b.classifier.clone();
    scale_head(&mut doubled, 2.0);
    for seed in 0..4 {
        let x = noise_image(10 + seed, 16);
        for layer in b.classifier_spec.feature_layers() {
            let a = gradcam(&b.classifier, &b.classifier_spec, &x, &layer).unwrap();
            let d = gradcam(&doubled, &b.classifier_spec, &x, &layer).unwrap();
            assert_eq!(a.target, d.target);
            for (u, v) in a.values.iter().zip(&d.values) {
                assert!((u - v).abs() <= 1e-6, "layer {layer}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn maps_are_normalized_and_follow_the_prediction() {
    let b = common::tiny_bundle(5);
    for seed in 0..4 {
        let x = noise_image(20 + seed, 16);
        let p = nets::classifier_forward(&b.classifier, &b.classifier_spec, &x).unwrap();
        let h = gradcam(&b.classifier, &b.classifier_spec, &x, &b.classifier_spec.last_block()).unwrap();
        assert_eq!(h.values.len(), 256);
        assert_eq!(h.target, u8::from(p > 0.5));
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        if !h.is_zero() {
            assert_eq!(h.values.iter().cloned().fold(0.0f32, f32::max), 1.0);
        }
    }
}

#[test]
fn unknown_layer_is_a_lookup_error() {
    let b = common::tiny_bundle(1);
    let err = gradcam(&b.classifier, &b.classifier_spec, &noise_image(0, 16), "block9").unwrap_err();
    assert!(matches!(err, LcxError::LayerLookup(name) if name == "block9"));
}

#[test]
fn colormap_matches_the_jet_formula() {
    let channel = |t: f64, k: f64| ((1.5 - (4.0 * t - k).abs()).clamp(0.0, 1.0) * 255.0);
    for (i, rgb) in colormap().iter().enumerate() {
        let t = i as f64 / 255.0;
        for (c, k) in rgb.iter().zip([3.0, 2.0, 1.0]) {
            assert!((*c as f64 - channel(t, k)).abs() <= 1.0, "index {i}: {rgb:?}");
        }
    }
}

#[test]
fn overlay_blends_half_and_half() {
    let x = ImageTensor::filled(4, 1.0);
    let h = Heatmap {
        resolution: 4,
        values: vec![0.0; 16],
        layer_name: "stem".into(),
        target: 0,
    };
    let canvas = overlay_canvas(&x, &h, 3).unwrap();
    // white blended with colormap[0] = (0, 0, 128)
    assert_eq!(canvas.get(11, 11), [128, 128, 192]);
}
