//! The model bundle: generator, encoder, classifier and latent direction
//! saved together under one digest.
//!
//! Layout: `bundle.json` (version, specs, direction, digests) plus one
//! parameter directory per network. The bundle digest is the SHA-256 of
//! `bundle.json`, which in turn records each network's manifest digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};
use crate::latent::{self, Explanation, LatentDirection, Models, StepMode, TraversalSeries};
use crate::nets::{ClassifierSpec, EncoderSpec, GeneratorSpec, NetworkParams};
use crate::persist;
use crate::tensor::{ImageTensor, LatentVector};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const NETWORKS: [&str; 4] = ["mapping", "synthesis", "encoder", "classifier"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub generator_spec: GeneratorSpec,
    pub encoder_spec: EncoderSpec,
    pub classifier_spec: ClassifierSpec,
    pub mapping: NetworkParams,
    pub synthesis: NetworkParams,
    pub encoder: NetworkParams,
    pub classifier: NetworkParams,
    pub direction: LatentDirection,
    pub config_digests: BTreeMap<String, String>,
    pub stage_seeds: BTreeMap<String, u64>,
    /// Free-form provenance; kept free of timestamps so reruns are byte-identical.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    generator_spec: GeneratorSpec,
    encoder_spec: EncoderSpec,
    classifier_spec: ClassifierSpec,
    direction: LatentDirection,
    config_digests: BTreeMap<String, String>,
    stage_seeds: BTreeMap<String, u64>,
    metadata: BTreeMap<String, serde_json::Value>,
    networks: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let g = &self.generator_spec;
        let d = g.latent_dim;
        if self.encoder_spec.latent_dim != d || self.direction.dim() != d {
            return Err(LcxError::shape(format!(
                "latent dims disagree: generator {d}, encoder {}, direction {}",
                self.encoder_spec.latent_dim,
                self.direction.dim()
            )));
        }
        if self.encoder_spec.resolution != g.resolution || self.classifier_spec.resolution != g.resolution {
            return Err(LcxError::shape("bundle members disagree on resolution"));
        }
        self.mapping.check_layout(&g.mapping_layers_table())?;
        self.synthesis.check_layout(&g.synthesis_layers_table())?;
        self.encoder.check_layout(&self.encoder_spec.layers_table())?;
        self.classifier.check_layout(&self.classifier_spec.layers_table())?;
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.generator_spec.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.generator_spec.latent_dim
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            synthesis: &self.synthesis,
            g_spec: &self.generator_spec,
            encoder: &self.encoder,
            e_spec: &self.encoder_spec,
            classifier: &self.classifier,
            c_spec: &self.classifier_spec,
            direction: &self.direction,
        }
    }

    fn network(&self, name: &str) -> &NetworkParams {
        match name {
            "mapping" => &self.mapping,
            "synthesis" => &self.synthesis,
            "encoder" => &self.encoder,
            _ => &self.classifier,
        }
    }

    fn spec_json(&self, name: &str) -> Result<serde_json::Value> {
        Ok(match name {
            "mapping" | "synthesis" => serde_json::to_value(&self.generator_spec)?,
            "encoder" => serde_json::to_value(&self.encoder_spec)?,
            _ => serde_json::to_value(&self.classifier_spec)?,
        })
    }

    pub fn traverse(&self, w: &LatentVector, lambdas: &[f64], gap_oracle: bool, input_id: &str) -> Result<TraversalSeries> {
        latent::traverse(&self.models(), w, lambdas, gap_oracle, StepMode::Unit, input_id)
    }

    pub fn explain(&self, image: &ImageTensor, lambdas: &[f64], input_id: &str) -> Result<Explanation> {
        latent::explain(&self.models(), image, lambdas, input_id)
    }
}

fn truncated(path: &Path, e: impl std::fmt::Display) -> LcxError {
    LcxError::Digest(format!("{}: {e}", path.display()))
}

/// Writes the bundle into `dir` and returns its digest.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<String> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| LcxError::io(dir, e))?;
    let mut networks = BTreeMap::new();
    for name in NETWORKS {
        let digest = persist::save_params(bundle.network(name), &bundle.spec_json(name)?, &dir.join(name))?;
        networks.insert(name.to_string(), digest);
    }
    let header = Header {
        format_version: BUNDLE_FORMAT_VERSION,
        generator_spec: bundle.generator_spec.clone(),
        encoder_spec: bundle.encoder_spec.clone(),
        classifier_spec: bundle.classifier_spec.clone(),
        direction: bundle.direction.clone(),
        config_digests: bundle.config_digests.clone(),
        stage_seeds: bundle.stage_seeds.clone(),
        metadata: bundle.metadata.clone(),
        networks,
    };
    let bytes = serde_json::to_vec_pretty(&header)?;
    let path = dir.join("bundle.json");
    std::fs::write(&path, &bytes).map_err(|e| LcxError::io(&path, e))?;
    Ok(persist::sha256_hex(&bytes))
}

/// Loads and verifies a bundle, returning it with its digest.
pub fn load_bundle(dir: &Path) -> Result<(ModelBundle, String)> {
    let path = dir.join("bundle.json");
    let bytes = std::fs::read(&path).map_err(|e| LcxError::io(&path, e))?;
    let probe: VersionProbe = serde_json::from_slice(&bytes).map_err(|e| truncated(&path, e))?;
    if probe.format_version != BUNDLE_FORMAT_VERSION {
        return Err(LcxError::Version {
            found: probe.format_version,
            supported: BUNDLE_FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_slice(&bytes).map_err(|e| truncated(&path, e))?;
    let mut nets = BTreeMap::new();
    for name in NETWORKS {
        let sub = dir.join(name);
        let expected = header
            .networks
            .get(name)
            .ok_or_else(|| LcxError::Digest(format!("bundle lists no `{name}` network")))?;
        let manifest_path = sub.join("manifest.json");
        let manifest_bytes = std::fs::read(&manifest_path).map_err(|e| LcxError::io(&manifest_path, e))?;
        if &persist::sha256_hex(&manifest_bytes) != expected {
            return Err(LcxError::Digest(manifest_path.display().to_string()));
        }
        let (params, _) = persist::load_params(&sub)?;
        nets.insert(name, params);
    }
    let mut take = |n: &str| nets.remove(n).expect("loaded above");
    let bundle = ModelBundle {
        mapping: take("mapping"),
        synthesis: take("synthesis"),
        encoder: take("encoder"),
        classifier: take("classifier"),
        generator_spec: header.generator_spec,
        encoder_spec: header.encoder_spec,
        classifier_spec: header.classifier_spec,
        direction: header.direction,
        config_digests: header.config_digests,
        stage_seeds: header.stage_seeds,
        metadata: header.metadata,
    };
    bundle.validate()?;
    Ok((bundle, persist::sha256_hex(&bytes)))
}
