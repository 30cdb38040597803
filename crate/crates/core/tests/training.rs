use lcx::graph::Graph;
use lcx::nets::{self, Bound, ClassifierSpec, DiscriminatorSpec, EncoderSpec, GeneratorSpec, NetworkParams};
use lcx::synthdata::{generate_dataset, DatasetSplit};
use lcx::training::{Checkpoint, ClassifierTrainer, EncoderTrainer, GanTrainer, TrainConfig};
use lcx::{ImageTensor, LcxError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: usize = 32;

fn g_spec() -> GeneratorSpec {
    GeneratorSpec {
        noise_dim: 8,
        latent_dim: 8,
        mapping_layers: 2,
        base_channels: 8,
        resolution: RES,
        mapping_lr_mul: 0.1,
    }
}

fn d_spec() -> DiscriminatorSpec {
    DiscriminatorSpec {
        base_channels: 4,
        resolution: RES,
    }
}

fn e_spec() -> EncoderSpec {
    EncoderSpec {
        latent_dim: 8,
        conv_blocks: 2,
        base_channels: 4,
        resolution: RES,
    }
}

fn c_spec() -> ClassifierSpec {
    ClassifierSpec {
        conv_blocks: 2,
        base_channels: 4,
        resolution: RES,
    }
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        learning_rate: 2e-3,
        seed: 17,
        r1_gamma: 1.0,
        checkpoint_every: 3,
        eval_every: 2,
        beta1: 0.0,
        beta2: 0.99,
    }
}

fn data() -> DatasetSplit {
    generate_dataset(24, 8, 8, 5, RES).unwrap()
}

fn same_bits(a: &NetworkParams, b: &NetworkParams) -> bool {
    a.arrays.len() == b.arrays.len()
        && a.arrays.iter().all(|(k, t)| {
            b.arrays.get(k).is_some_and(|u| {
                t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        })
}

#[test]
fn gan_resume_from_disk_matches_an_uninterrupted_run() {
    let ds = data();
    let mut straight = GanTrainer::new(&ds, g_spec(), d_spec(), config(6)).unwrap();
    straight.run_until(6, None).unwrap();

    let root = tempfile::tempdir().unwrap();
    let mut first = GanTrainer::new(&ds, g_spec(), d_spec(), config(6)).unwrap();
    first.run_until(3, Some(root.path())).unwrap();
    drop(first);
    let latest = Checkpoint::latest(root.path()).unwrap();
    assert_eq!(latest, Checkpoint::dir_for(root.path(), 3));
    let ckpt = Checkpoint::load(&latest).unwrap();
    let mut resumed = GanTrainer::from_checkpoint(&ds, g_spec(), d_spec(), config(6), ckpt).unwrap();
    resumed.run_until(6, None).unwrap();

    assert_eq!(resumed.step, 6);
    assert!(same_bits(&resumed.mapping, &straight.mapping));
    assert!(same_bits(&resumed.synthesis, &straight.synthesis));
    assert!(same_bits(&resumed.discriminator, &straight.discriminator));
    assert_eq!(resumed.progress, straight.progress);
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
}

#[test]
fn gan_training_is_deterministic() {
    let ds = data();
    let mut a = GanTrainer::new(&ds, g_spec(), d_spec(), config(3)).unwrap();
    let mut b = GanTrainer::new(&ds, g_spec(), d_spec(), config(3)).unwrap();
    for _ in 0..3 {
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
    }
    assert!(same_bits(&a.synthesis, &b.synthesis));
}

/// R1 penalty recomputed with the activation pattern held fixed, which is
/// smooth in the discriminator weights and agrees with the true penalty
/// gradient wherever the pattern is locally constant.
fn frozen_penalty(params: &NetworkParams, reals: &Tensor, pattern: &[Tensor], gamma: f64) -> f64 {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, &d_spec().layers_table(), false).unwrap();
    let xv = g.leaf(reals.clone(), true);
    let (logits, _) = nets::discriminator_graph_with(&mut g, &p, &d_spec(), xv, Some(pattern)).unwrap();
    let b = reals.batch();
    let grads = g.backward(logits, Tensor::full(&[b, 1], 1.0)).unwrap();
    let gx = grads.get(xv).unwrap();
    0.5 * gamma * gx.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / b as f64
}

#[test]
fn r1_gradient_matches_finite_differences_of_the_penalty() {
    let ds = data();
    let trainer = GanTrainer::new(&ds, g_spec(), d_spec(), config(1)).unwrap();
    let images: Vec<ImageTensor> = ds.train[..4].iter().map(|s| s.image.clone()).collect();
    let reals = ImageTensor::batch(&images).unwrap();
    let (penalty, grads) = trainer.r1_penalty(&reals).unwrap();

    let pattern = {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &trainer.discriminator, &d_spec().layers_table(), false).unwrap();
        let xv = g.leaf(reals.clone(), false);
        nets::discriminator_graph_with(&mut g, &p, &d_spec(), xv, None).unwrap().1
    };
    let at_origin = frozen_penalty(&trainer.discriminator, &reals, &pattern, 1.0);
    assert!(penalty > 0.0);
    assert!((at_origin - penalty).abs() <= 1e-6 * penalty, "{at_origin} vs {penalty}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let mut direction = trainer.discriminator.clone();
        for t in direction.arrays.values_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0f32..1.0);
            }
        }
        let analytic: f64 = grads
            .iter()
            .map(|(k, g)| {
                let d = direction.get(k).unwrap();
                g.data().iter().zip(d.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            })
            .sum();
        let eps = 1e-2f32;
        let shifted = |sign: f32| {
            let mut params = trainer.discriminator.clone();
            for (k, p) in params.arrays.iter_mut() {
                let d = direction.get(k).unwrap();
                for (v, &dv) in p.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * eps * dv;
                }
            }
            frozen_penalty(&params, &reals, &pattern, 1.0)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps as f64);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-2, "analytic {analytic} vs numeric {numeric}");
    }
}

#[test]
fn non_finite_losses_fail_and_name_the_last_checkpoint() {
    let ds = data();
    let root = tempfile::tempdir().unwrap();
    let mut cfg = config(10);
    cfg.checkpoint_every = 1;
    let mut t = GanTrainer::new(&ds, g_spec(), d_spec(), cfg).unwrap();
    t.run_until(2, Some(root.path())).unwrap();
    t.discriminator.get_mut("out.weight").unwrap().data_mut()[0] = f32::NAN;
    match t.run_until(10, Some(root.path())) {
        Err(LcxError::TrainingFailure {
            step,
            last_checkpoint: Some(p),
            ..
        }) => {
            assert_eq!(step, 2);
            assert_eq!(p, Checkpoint::dir_for(root.path(), 2));
        }
        other => panic!("expected a training failure, got {other:?}"),
    }
}

fn trained_generator() -> (NetworkParams, NetworkParams) {
    let ds = data();
    let mut t = GanTrainer::new(&ds, g_spec(), d_spec(), config(2)).unwrap();
    t.run_until(2, None).unwrap();
    (t.mapping, t.synthesis)
}

#[test]
fn encoder_batch_loss_equals_a_hand_computed_mse() {
    let (mapping, synthesis) = trained_generator();
    let mut t = EncoderTrainer::new(&mapping, &synthesis, g_spec(), e_spec(), config(4)).unwrap();
    let (w, x) = t.batch(0).unwrap();
    let images = ImageTensor::unbatch(&x).unwrap();
    let pred = nets::encoder_forward_batch(&t.encoder, &e_spec(), &images).unwrap();
    let mut sum = 0.0;
    for (i, p) in pred.iter().enumerate() {
        for (a, b) in p.0.iter().zip(w.item(i)) {
            sum += (*a as f64 - *b as f64).powi(2);
        }
    }
    let expected = sum / w.numel() as f64;
    let got = t.train_step().unwrap();
    assert!((got - expected).abs() <= 1e-6 * expected, "{got} vs {expected}");

    // The batch is a pure function of the step.
    let (w2, _) = t.batch(0).unwrap();
    assert_eq!(w.data(), w2.data());
}

#[test]
fn encoder_resume_matches_an_uninterrupted_run() {
    let (mapping, synthesis) = trained_generator();
    let mut straight = EncoderTrainer::new(&mapping, &synthesis, g_spec(), e_spec(), config(6)).unwrap();
    straight.run_until(6, None).unwrap();
    let root = tempfile::tempdir().unwrap();
    let mut first = EncoderTrainer::new(&mapping, &synthesis, g_spec(), e_spec(), config(6)).unwrap();
    first.run_until(3, Some(root.path())).unwrap();
    let ckpt = Checkpoint::load(&Checkpoint::latest(root.path()).unwrap()).unwrap();
    let mut resumed =
        EncoderTrainer::from_checkpoint(&mapping, &synthesis, g_spec(), e_spec(), config(6), ckpt).unwrap();
    resumed.run_until(6, None).unwrap();
    assert!(same_bits(&resumed.encoder, &straight.encoder));
    assert_eq!(resumed.progress, straight.progress);
}

#[test]
fn classifier_resume_matches_an_uninterrupted_run() {
    let ds = data();
    let mut cfg = config(6);
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    let mut straight = ClassifierTrainer::new(&ds, c_spec(), cfg.clone()).unwrap();
    straight.run_until(6, None).unwrap();
    let root = tempfile::tempdir().unwrap();
    let mut first = ClassifierTrainer::new(&ds, c_spec(), cfg.clone()).unwrap();
    first.run_until(3, Some(root.path())).unwrap();
    let ckpt = Checkpoint::load(&Checkpoint::latest(root.path()).unwrap()).unwrap();
    let mut resumed = ClassifierTrainer::from_checkpoint(&ds, c_spec(), cfg, ckpt).unwrap();
    resumed.run_until(6, None).unwrap();
    assert!(same_bits(&resumed.classifier, &straight.classifier));
}

#[test]
fn single_class_training_split_is_degenerate() {
    let mut ds = data();
    ds.train.retain(|s| s.label == 1);
    assert!(matches!(
        ClassifierTrainer::new(&ds, c_spec(), config(3)),
        Err(LcxError::DegenerateData(_))
    ));
}

#[test]
fn invalid_configs_name_the_offending_field() {
    let ds = data();
    let mut cfg = config(3);
    cfg.batch_size = 0;
    match GanTrainer::new(&ds, g_spec(), d_spec(), cfg) {
        Err(LcxError::Config { path, .. }) => assert_eq!(path, "gan.batch_size"),
        Err(other) => panic!("unexpected error {other:?}"),
        Ok(_) => panic!("accepted batch_size 0"),
    }
    let mut wrong = e_spec();
    wrong.latent_dim = 9;
    let (mapping, synthesis) = trained_generator();
    match EncoderTrainer::new(&mapping, &synthesis, g_spec(), wrong, config(3)) {
        Err(LcxError::Config { path, .. }) => assert_eq!(path, "encoder.latent_dim"),
        Err(other) => panic!("unexpected error {other:?}"),
        Ok(_) => panic!("accepted mismatched latent_dim"),
    }
}
