#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lcx::bundle::ModelBundle;
use lcx::latent::{FitTarget, LatentDirection};
use lcx::nets::{ClassifierSpec, EncoderSpec, GeneratorSpec, NetworkParams};
use lcx::pipeline::{Pipeline, PipelineConfig};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn smoke_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&repo_root().join("configs/smoke.json")).unwrap();
    cfg.output_dir = None;
    cfg
}

pub fn quiet(mut p: Pipeline) -> Pipeline {
    p.log = Box::new(|_| {});
    p
}

/// Runs every smoke stage into `out`.
pub fn run_smoke(cfg: PipelineConfig, out: &Path) -> Pipeline {
    let mut p = quiet(Pipeline::open(cfg, out.to_path_buf()).unwrap());
    p.run_all(false).unwrap();
    p
}

/// Untrained networks at 16x16 with an 8-dim latent and a fixed direction.
pub fn tiny_bundle(seed: u64) -> ModelBundle {
    let g = GeneratorSpec {
        noise_dim: 8,
        latent_dim: 8,
        mapping_layers: 2,
        base_channels: 8,
        resolution: 16,
        mapping_lr_mul: 0.1,
    };
    let e = EncoderSpec {
        latent_dim: 8,
        conv_blocks: 2,
        base_channels: 4,
        resolution: 16,
    };
    let c = ClassifierSpec {
        conv_blocks: 2,
        base_channels: 4,
        resolution: 16,
    };
    let alpha: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 3.5)).collect();
    let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    ModelBundle {
        mapping: NetworkParams::init(&g.mapping_layers_table(), seed),
        synthesis: NetworkParams::init(&g.synthesis_layers_table(), seed + 1),
        encoder: NetworkParams::init(&e.layers_table(), seed + 2),
        classifier: NetworkParams::init(&c.layers_table(), seed + 3),
        direction: LatentDirection {
            alpha_unit: alpha.iter().map(|a| a / norm).collect(),
            alpha,
            beta: 0.1,
            projection_std: 1.0,
            train_auc: 1.0,
            l2_strength: 0.01,
            target: FitTarget::Hard,
        },
        generator_spec: g,
        encoder_spec: e,
        classifier_spec: c,
        config_digests: BTreeMap::from([("all".to_string(), "0".repeat(64))]),
        stage_seeds: BTreeMap::from([("gan".to_string(), seed)]),
        metadata: BTreeMap::from([("tool".to_string(), serde_json::json!("lcx-test"))]),
    }
}
