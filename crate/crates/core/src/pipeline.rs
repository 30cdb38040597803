//! Staged pipeline: data, gan, encoder, classifier, direction, report.
//!
//! Each stage writes `<out>/<stage>/stage.json` last. Its digest covers the
//! stage's config block, the global seed and the digests of its upstream
//! stages, so a rerun with an unchanged config is skipped and a changed
//! upstream config surfaces as a stale-artifact error.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{self, ModelBundle};
use crate::error::{LcxError, Result};
use crate::gradcam;
use crate::latent::{self, FitTarget, LatentDirection};
use crate::metrics;
use crate::nets::{self, ClassifierSpec, DiscriminatorSpec, EncoderSpec, GeneratorSpec, NetworkParams};
use crate::persist;
use crate::render;
use crate::synthdata::{self, stream_seed, DatasetSplit, SynthConfig};
use crate::training::{self, Checkpoint, TrainConfig, TrainReport};

pub const STAGE_FORMAT: &str = "lcx-stage-v1";

// --- config ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub gan: GanStageConfig,
    pub encoder: EncoderStageConfig,
    pub classifier: ClassifierStageConfig,
    pub direction: DirectionConfig,
    pub report: ReportConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub resolution: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_gap_threshold")]
    pub gap_threshold: f64,
    /// Write every sample as a PNG alongside the manifest.
    #[serde(default = "default_true")]
    pub export_png: bool,
}

fn default_gap_threshold() -> f64 {
    synthdata::DEFAULT_GAP_THRESHOLD
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanStageConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderStageConfig {
    pub net: EncoderSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStageConfig {
    pub net: ClassifierSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    pub n_latents: usize,
    /// Held-out latents for the direction's test AUC.
    pub n_eval_latents: usize,
    /// Defaults to `1 / n_latents`.
    #[serde(default)]
    pub l2_strength: Option<f64>,
    #[serde(default)]
    pub target: FitTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "latent::default_lambdas")]
    pub lambdas: Vec<f64>,
    pub n_explain: usize,
    pub n_strips: usize,
    /// Defaults to the classifier's last block.
    #[serde(default)]
    pub gradcam_layer: Option<String>,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> LcxError {
    LcxError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// Parses JSON, rejecting unknown keys with the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path.is_empty() { "$".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LcxError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let prefix = |p: &str, e: LcxError| match e {
            LcxError::Config { path, message } => config_error(format!("{p}.{path}"), message),
            other => other,
        };
        let d = &self.data;
        SynthConfig {
            resolution: d.resolution,
            gap_threshold: d.gap_threshold,
        }
        .validate()
        .map_err(|e| prefix("data", e))?;
        for (name, n) in [("n_train", d.n_train), ("n_val", d.n_val), ("n_test", d.n_test)] {
            if n == 0 {
                return Err(config_error(format!("data.{name}"), "must be > 0"));
            }
        }
        let g = &self.gan.generator;
        g.validate().map_err(|e| prefix("gan.generator", e))?;
        self.gan.discriminator.validate().map_err(|e| prefix("gan.discriminator", e))?;
        self.encoder.net.validate().map_err(|e| prefix("encoder.net", e))?;
        self.classifier.net.validate().map_err(|e| prefix("classifier.net", e))?;
        self.gan.train.validate("gan.train")?;
        self.encoder.train.validate("encoder.train")?;
        self.classifier.train.validate("classifier.train")?;
        for (path, r) in [
            ("gan.generator.resolution", g.resolution),
            ("gan.discriminator.resolution", self.gan.discriminator.resolution),
            ("encoder.net.resolution", self.encoder.net.resolution),
            ("classifier.net.resolution", self.classifier.net.resolution),
        ] {
            if r != d.resolution {
                return Err(config_error(path, format!("{r} differs from data.resolution {}", d.resolution)));
            }
        }
        if self.encoder.net.latent_dim != g.latent_dim {
            return Err(config_error(
                "encoder.net.latent_dim",
                format!("{} differs from gan.generator.latent_dim {}", self.encoder.net.latent_dim, g.latent_dim),
            ));
        }
        if self.direction.n_latents < 2 * g.latent_dim {
            return Err(config_error(
                "direction.n_latents",
                format!("must be at least 2 * latent_dim = {}", 2 * g.latent_dim),
            ));
        }
        if self.direction.n_eval_latents < 2 {
            return Err(config_error("direction.n_eval_latents", "must be at least 2"));
        }
        if let Some(l2) = self.direction.l2_strength {
            if !(l2 >= 0.0 && l2.is_finite()) {
                return Err(config_error("direction.l2_strength", "must be >= 0"));
            }
        }
        latent::check_lambdas(&self.report.lambdas).map_err(|e| config_error("report.lambdas", e.to_string()))?;
        if self.report.n_explain == 0 || self.report.n_explain > d.n_test {
            return Err(config_error("report.n_explain", format!("must lie in 1..={}", d.n_test)));
        }
        if self.report.n_strips > self.report.n_explain {
            return Err(config_error("report.n_strips", "cannot exceed report.n_explain"));
        }
        if let Some(layer) = &self.report.gradcam_layer {
            if !self.classifier.net.feature_layers().contains(layer) {
                return Err(config_error(
                    "report.gradcam_layer",
                    format!("unknown layer `{layer}`; expected one of {:?}", self.classifier.net.feature_layers()),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. Covers every field.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        persist::sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            resolution: self.data.resolution,
            gap_threshold: self.data.gap_threshold,
        }
    }

    pub fn l2_strength(&self) -> f64 {
        self.direction.l2_strength.unwrap_or(1.0 / self.direction.n_latents as f64)
    }

    pub fn gradcam_layer(&self) -> String {
        self.report.gradcam_layer.clone().unwrap_or_else(|| self.classifier.net.last_block())
    }

    /// Training config with the stage seed mixed from the global seed.
    fn effective_train(&self, stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Gan => &self.gan.train,
            Stage::Encoder => &self.encoder.train,
            _ => &self.classifier.train,
        };
        TrainConfig {
            seed: self.stage_seed(stage, base.seed),
            ..base.clone()
        }
    }

    pub fn stage_seed(&self, stage: Stage, offset: u64) -> u64 {
        stream_seed(self.seed, &[stage.index() as u64, offset])
    }

    fn block(&self, stage: Stage) -> serde_json::Value {
        let v = match stage {
            Stage::Data => serde_json::to_value(&self.data),
            Stage::Gan => serde_json::to_value(&self.gan),
            Stage::Encoder => serde_json::to_value(&self.encoder),
            Stage::Classifier => serde_json::to_value(&self.classifier),
            Stage::Direction => serde_json::to_value(&self.direction),
            Stage::Report => serde_json::to_value(&self.report),
        };
        v.expect("config block serializes")
    }

    /// Digest of a stage: its block, the global seed, and upstream digests.
    pub fn stage_digest(&self, stage: Stage) -> String {
        let upstream: BTreeMap<&str, String> = stage.deps().iter().map(|d| (d.name(), self.stage_digest(*d))).collect();
        let mut canonical = serde_json::json!({
            "format": STAGE_FORMAT,
            "stage": stage.name(),
            "seed": self.seed,
            "block": self.block(stage),
            "upstream": upstream,
        });
        if stage == Stage::Data {
            canonical["generator"] = synthdata::GENERATOR.into();
        }
        persist::sha256_hex(canonical.to_string().as_bytes())
    }
}

// --- stages ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Gan,
    Encoder,
    Classifier,
    Direction,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Gan,
        Stage::Encoder,
        Stage::Classifier,
        Stage::Direction,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Gan => "gan",
            Stage::Encoder => "encoder",
            Stage::Classifier => "classifier",
            Stage::Direction => "direction",
            Stage::Report => "report",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Gan => &[Stage::Data],
            Stage::Encoder => &[Stage::Gan],
            Stage::Classifier => &[Stage::Data],
            Stage::Direction => &[Stage::Gan, Stage::Encoder, Stage::Classifier],
            Stage::Report => &[Stage::Data, Stage::Direction],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = LcxError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| config_error("stage", format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub format: String,
    pub stage: Stage,
    pub digest: String,
    pub upstream: BTreeMap<String, String>,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Exclusive hold on an output directory; released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| LcxError::io(out, e))?;
        let path = out.join(".lcx.lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(OutputLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&path) {
                        let _ = std::fs::remove_file(&path);
                        continue;
                    }
                    return Err(LcxError::Locked(path));
                }
                Err(e) => return Err(LcxError::io(&path, e)),
            }
        }
        Err(LcxError::Locked(path))
    }
}

/// A lock whose owning process no longer exists.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(path) else {
        return false;
    };
    match text.trim().parse::<u32>() {
        Ok(pid) if cfg!(target_os = "linux") => !Path::new(&format!("/proc/{pid}")).exists(),
        _ => false,
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A pipeline bound to an output directory it holds locked.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    _lock: OutputLock,
    /// Progress lines such as `gan: skipped, up-to-date`.
    pub log: Box<dyn Fn(&str) + Send + Sync>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LcxError::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| LcxError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| LcxError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Stable digest of a dataset's pixel bits and labels.
pub fn dataset_content_digest(split: &DatasetSplit) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for part in [&split.train, &split.val, &split.test] {
        h.update((part.len() as u64).to_le_bytes());
        for s in part {
            h.update([s.label]);
            for &p in s.image.pixels() {
                h.update(p.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

impl Pipeline {
    pub fn open(config: PipelineConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        let lock = OutputLock::acquire(&out)?;
        Ok(Pipeline {
            config,
            out,
            _lock: lock,
            log: Box::new(|line| eprintln!("{line}")),
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.out.join("bundle")
    }

    pub fn record(&self, stage: Stage) -> Option<StageRecord> {
        read_json(&self.stage_dir(stage).join("stage.json")).ok()
    }

    fn is_current(&self, stage: Stage) -> bool {
        self.record(stage)
            .is_some_and(|r| r.digest == self.config.stage_digest(stage))
    }

    fn check_upstream(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut upstream = BTreeMap::new();
        for &dep in stage.deps() {
            let rec = self.record(dep).ok_or_else(|| LcxError::Dependency {
                stage: stage.name().into(),
                missing: dep.name().into(),
            })?;
            if rec.digest != self.config.stage_digest(dep) {
                return Err(LcxError::StaleArtifact(dep.name().into()));
            }
            upstream.insert(dep.name().to_string(), rec.digest);
        }
        Ok(upstream)
    }

    /// Runs one stage unless its record is current and `force` is off.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let upstream = self.check_upstream(stage)?;
        if !force && self.is_current(stage) {
            (self.log)(&format!("{}: skipped, up-to-date", stage.name()));
            return Ok(StageOutcome::Skipped);
        }
        let dir = self.stage_dir(stage);
        let digest = self.config.stage_digest(stage);
        let resumable = stage == Stage::Gan
            && !force
            && std::fs::read_to_string(dir.join("checkpoints").join("digest.txt")).is_ok_and(|d| d.trim() == digest);
        if dir.exists() && !resumable {
            std::fs::remove_dir_all(&dir).map_err(|e| LcxError::io(&dir, e))?;
        } else if resumable {
            let _ = std::fs::remove_file(dir.join("stage.json"));
        }
        std::fs::create_dir_all(&dir).map_err(|e| LcxError::io(&dir, e))?;
        (self.log)(&format!("{}: running", stage.name()));
        let (seed, metrics, artifacts) = match stage {
            Stage::Data => self.run_data(&dir)?,
            Stage::Gan => self.run_gan(&dir, &digest)?,
            Stage::Encoder => self.run_encoder(&dir)?,
            Stage::Classifier => self.run_classifier(&dir)?,
            Stage::Direction => self.run_direction(&dir)?,
            Stage::Report => self.run_report(&dir)?,
        };
        let record = StageRecord {
            format: STAGE_FORMAT.into(),
            stage,
            digest,
            upstream,
            seed,
            metrics,
            artifacts,
        };
        write_json(&dir.join("stage.json"), &record)?;
        (self.log)(&format!("{}: done", stage.name()));
        Ok(StageOutcome::Ran)
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            out.push((stage, self.run_stage(stage, force)?));
        }
        Ok(out)
    }

    // --- stage bodies ------------------------------------------------------

    fn generate_data(&self) -> Result<DatasetSplit> {
        let d = &self.config.data;
        synthdata::generate_dataset_with(
            d.n_train,
            d.n_val,
            d.n_test,
            self.config.stage_seed(Stage::Data, 0),
            &self.config.synth_config(),
        )
    }

    /// Regenerates the dataset and checks it against the data stage record.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let split = self.generate_data()?;
        let rec = self.record(Stage::Data).ok_or_else(|| LcxError::Dependency {
            stage: "dataset".into(),
            missing: "data".into(),
        })?;
        if rec.artifacts.get("content_digest") != Some(&dataset_content_digest(&split)) {
            return Err(LcxError::StaleArtifact("data".into()));
        }
        Ok(split)
    }

    fn run_data(&self, dir: &Path) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let split = self.generate_data()?;
        if self.config.data.export_png {
            synthdata::export_dataset(&split, dir)?;
        }
        let metrics = BTreeMap::from([
            ("train_label_mean".to_string(), synthdata::label_mean(&split.train)),
            ("val_label_mean".to_string(), synthdata::label_mean(&split.val)),
            ("test_label_mean".to_string(), synthdata::label_mean(&split.test)),
        ]);
        let artifacts = BTreeMap::from([
            ("content_digest".to_string(), dataset_content_digest(&split)),
            ("config_digest".to_string(), split.config_digest.clone()),
        ]);
        Ok((split.generation_seed, metrics, artifacts))
    }

    fn save_net(&self, params: &NetworkParams, spec: &impl Serialize, dir: &Path) -> Result<String> {
        persist::save_params(params, &serde_json::to_value(spec)?, dir)
    }

    fn load_net(&self, stage: Stage, name: &str) -> Result<NetworkParams> {
        Ok(persist::load_params(&self.stage_dir(stage).join(name))?.0)
    }

    fn report_metrics(report: &TrainReport) -> BTreeMap<String, f64> {
        let mut m = report.final_metrics.clone();
        m.insert("wall_time_s".into(), report.wall_time_s);
        m
    }

    fn run_gan(&self, dir: &Path, digest: &str) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let split = self.dataset()?;
        let cfg = self.config.effective_train(Stage::Gan);
        let ckpt = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt).map_err(|e| LcxError::io(&ckpt, e))?;
        std::fs::write(ckpt.join("digest.txt"), digest).map_err(|e| LcxError::io(&ckpt, e))?;
        if let Some(latest) = Checkpoint::latest(&ckpt) {
            (self.log)(&format!("gan: resuming from {}", latest.display()));
        }
        let out = training::train_gan_with(&split, &self.config.gan.generator, &self.config.gan.discriminator, &cfg, Some(&ckpt))?;
        let g = &self.config.gan.generator;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("mapping".into(), self.save_net(&out.mapping, g, &dir.join("mapping"))?);
        artifacts.insert("synthesis".into(), self.save_net(&out.synthesis, g, &dir.join("synthesis"))?);
        artifacts.insert(
            "discriminator".into(),
            self.save_net(&out.discriminator, &self.config.gan.discriminator, &dir.join("discriminator"))?,
        );
        write_json(&dir.join("report.json"), &out.report)?;
        let (_, samples) = training::sample_generator(&out.mapping, &out.synthesis, g, 16, cfg.seed)?;
        std::fs::write(dir.join("samples.png"), sample_grid(&samples)?).map_err(|e| LcxError::io(dir, e))?;
        std::fs::remove_dir_all(&ckpt).map_err(|e| LcxError::io(&ckpt, e))?;
        Ok((cfg.seed, Self::report_metrics(&out.report), artifacts))
    }

    fn run_encoder(&self, dir: &Path) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let mapping = self.load_net(Stage::Gan, "mapping")?;
        let synthesis = self.load_net(Stage::Gan, "synthesis")?;
        let cfg = self.config.effective_train(Stage::Encoder);
        let (encoder, report) = training::train_encoder(
            &synthesis,
            &mapping,
            &self.config.gan.generator,
            &self.config.encoder.net,
            &cfg,
        )?;
        let digest = self.save_net(&encoder, &self.config.encoder.net, &dir.join("encoder"))?;
        write_json(&dir.join("report.json"), &report)?;
        Ok((cfg.seed, Self::report_metrics(&report), BTreeMap::from([("encoder".into(), digest)])))
    }

    fn run_classifier(&self, dir: &Path) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let split = self.dataset()?;
        let cfg = self.config.effective_train(Stage::Classifier);
        let (classifier, report) = training::train_classifier(&split, &self.config.classifier.net, &cfg)?;
        let digest = self.save_net(&classifier, &self.config.classifier.net, &dir.join("classifier"))?;
        write_json(&dir.join("report.json"), &report)?;
        Ok((cfg.seed, Self::report_metrics(&report), BTreeMap::from([("classifier".into(), digest)])))
    }

    fn run_direction(&self, dir: &Path) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let c = &self.config;
        let g = &c.gan.generator;
        let mapping = self.load_net(Stage::Gan, "mapping")?;
        let synthesis = self.load_net(Stage::Gan, "synthesis")?;
        let encoder = self.load_net(Stage::Encoder, "encoder")?;
        let classifier = self.load_net(Stage::Classifier, "classifier")?;
        let seed = c.stage_seed(Stage::Direction, 0);
        let ds = latent::sample_latent_dataset(&mapping, &synthesis, g, &classifier, &c.classifier.net, c.direction.n_latents, seed)?;
        let direction = latent::fit_direction_with(&ds, c.l2_strength(), c.direction.target)?;
        let test_auc = held_out_latent_auc(&mapping, &synthesis, g, &classifier, &c.classifier.net, &direction, c.direction.n_eval_latents, c.stage_seed(Stage::Direction, 1))?;
        write_json(&dir.join("direction.json"), &direction)?;
        let mut metrics = BTreeMap::from([
            ("train_auc".to_string(), direction.train_auc),
            ("positive_fraction".to_string(), ds.positive_fraction()),
            ("alpha_norm".to_string(), direction.alpha_norm()),
            ("projection_std".to_string(), direction.projection_std),
        ]);
        if let Some(auc) = test_auc {
            metrics.insert("test_auc".into(), auc);
        }
        let bundle = ModelBundle {
            generator_spec: g.clone(),
            encoder_spec: c.encoder.net.clone(),
            classifier_spec: c.classifier.net.clone(),
            mapping,
            synthesis,
            encoder,
            classifier,
            direction,
            config_digests: Stage::ALL[..5]
                .iter()
                .map(|s| (s.name().to_string(), c.stage_digest(*s)))
                .collect(),
            stage_seeds: Stage::ALL[1..5]
                .iter()
                .map(|&s| {
                    let seed = match s {
                        Stage::Direction => c.stage_seed(Stage::Direction, 0),
                        _ => c.effective_train(s).seed,
                    };
                    (s.name().to_string(), seed)
                })
                .collect(),
            metadata: BTreeMap::from([
                ("tool".to_string(), serde_json::json!(concat!("lcx ", env!("CARGO_PKG_VERSION")))),
                ("pipeline_config_digest".to_string(), serde_json::json!(c.digest())),
            ]),
        };
        let bundle_dir = self.bundle_dir();
        if bundle_dir.exists() {
            std::fs::remove_dir_all(&bundle_dir).map_err(|e| LcxError::io(&bundle_dir, e))?;
        }
        let digest = bundle::save_bundle(&bundle, &bundle_dir)?;
        Ok((seed, metrics, BTreeMap::from([("bundle".into(), digest)])))
    }

    fn run_report(&self, dir: &Path) -> Result<(u64, BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let (bundle, bundle_digest) = bundle::load_bundle(&self.bundle_dir())?;
        let split = self.dataset()?;
        let summary = evaluate_bundle(&bundle, &split, &self.config.report, &self.config.gradcam_layer(), Some(dir), &bundle_digest)?;
        let mut metrics = summary.metrics.clone();
        for (stage, keys) in [
            (Stage::Gan, &["measurable_fraction"][..]),
            (Stage::Encoder, &["median_relative_latent_error", "median_reconstruction_psnr"][..]),
            (Stage::Classifier, &["test_auc"][..]),
            (Stage::Direction, &["test_auc", "train_auc", "positive_fraction"][..]),
        ] {
            if let Some(rec) = self.record(stage) {
                for k in keys {
                    if let Some(v) = rec.metrics.get(*k) {
                        metrics.insert(format!("{}.{k}", stage.name()), *v);
                    }
                }
            }
        }
        write_json(
            &dir.join("report.json"),
            &serde_json::json!({
                "bundle_digest": bundle_digest,
                "config_digest": self.config.digest(),
                "metrics": metrics,
                "explained": summary.per_image,
            }),
        )?;
        Ok((0, metrics, BTreeMap::from([("bundle".into(), bundle_digest)])))
    }
}

/// `f~` AUC on freshly sampled latents against the classifier's hard labels.
#[allow(clippy::too_many_arguments)]
pub fn held_out_latent_auc(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    g_spec: &GeneratorSpec,
    classifier: &NetworkParams,
    c_spec: &ClassifierSpec,
    direction: &LatentDirection,
    n: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let n = n.max(2 * g_spec.latent_dim);
    let held = latent::sample_latent_dataset(mapping, synthesis, g_spec, classifier, c_spec, n, seed)?;
    let scores = held
        .latents
        .iter()
        .map(|w| latent::latent_predict(direction, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::auc(&scores, &held.hard_labels).ok())
}

fn sample_grid(images: &[crate::tensor::ImageTensor]) -> Result<Vec<u8>> {
    let r = images[0].resolution();
    let cols = 4;
    let rows = images.len().div_ceil(cols);
    let mut canvas = crate::imageio::RgbCanvas::new(cols * (r + 2) + 2, rows * (r + 2) + 2, [255, 255, 255]);
    for (i, im) in images.iter().enumerate() {
        let (x0, y0) = (2 + (i % cols) * (r + 2), 2 + (i / cols) * (r + 2));
        for y in 0..r {
            for x in 0..r {
                canvas.set(x0 + x, y0 + y, [crate::imageio::to_u8(im.get(y, x)); 3]);
            }
        }
    }
    canvas.encode_png()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainedImage {
    pub index: usize,
    pub label: u8,
    pub spearman_score: Option<f64>,
    pub spearman_gap: Option<f64>,
    pub measured_frames: usize,
    pub reconstruction_psnr: f64,
    pub prediction_drift: f64,
    pub gradcam_band_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct EvaluationSummary {
    pub metrics: BTreeMap<String, f64>,
    pub per_image: Vec<ExplainedImage>,
}

/// Explains the first `n_explain` test images and summarizes counterfactual
/// validity and GradCAM localization. Writes series and strips when `out`
/// is given.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    report: &ReportConfig,
    gradcam_layer: &str,
    out: Option<&Path>,
    bundle_digest: &str,
) -> Result<EvaluationSummary> {
    let r = bundle.resolution();
    let band_margin = r as f64 / 16.0;
    let mut per_image = Vec::with_capacity(report.n_explain);
    for (i, sample) in split.test.iter().take(report.n_explain).enumerate() {
        let exp = bundle.explain(&sample.image, &report.lambdas, &format!("test_{i:05}"))?;
        let series = &exp.series;
        let scores = series.image_scores();
        let (lam_m, gap_m): (Vec<f64>, Vec<f64>) = series
            .frames
            .iter()
            .filter_map(|f| f.gap_estimate.and_then(|g| g.value()).map(|g| (f.lambda, g)))
            .unzip();
        let heatmap = gradcam::gradcam(&bundle.classifier, &bundle.classifier_spec, &sample.image, gradcam_layer)?;
        let (start, end) = synthdata::gap_band_rows(&sample.factors, r, band_margin);
        let uniform = (end - start) as f64 / r as f64;
        per_image.push(ExplainedImage {
            index: i,
            label: sample.label,
            spearman_score: metrics::spearman(&series.lambdas, &scores),
            spearman_gap: metrics::spearman(&lam_m, &gap_m),
            measured_frames: lam_m.len(),
            reconstruction_psnr: exp.reconstruction.psnr,
            prediction_drift: exp.reconstruction.prediction_drift,
            gradcam_band_ratio: heatmap.row_band_mass(start, end) / uniform,
        });
        if let Some(dir) = out {
            let sdir = dir.join("series").join(format!("test_{i:05}"));
            latent::export_series(series, Some(&exp.reconstruction), Some(bundle_digest), &sdir)?;
            std::fs::write(sdir.join("gradcam.png"), gradcam::overlay_png(&sample.image, &heatmap)?)
                .map_err(|e| LcxError::io(&sdir, e))?;
            if i < report.n_strips {
                let strips = dir.join("strips");
                std::fs::create_dir_all(&strips).map_err(|e| LcxError::io(&strips, e))?;
                render::export_strip(series, Some(&heatmap), &strips.join(format!("strip_{i:02}.png")))?;
            }
        }
    }
    let collect = |f: fn(&ExplainedImage) -> Option<f64>| -> Vec<f64> { per_image.iter().filter_map(f).collect() };
    let sp_score = collect(|e| e.spearman_score);
    let sp_gap = collect(|e| e.spearman_gap);
    let ratios = collect(|e| Some(e.gradcam_band_ratio));
    let psnr = collect(|e| Some(e.reconstruction_psnr));
    let drift = collect(|e| Some(e.prediction_drift));
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put("median_spearman_score", metrics::median(&sp_score));
    put("median_spearman_gap", metrics::median(&sp_gap));
    put("spearman_score_defined", Some(sp_score.len() as f64));
    put("spearman_gap_defined", Some(sp_gap.len() as f64));
    put("gradcam_band_ratio_mean", Some(ratios.iter().sum::<f64>() / ratios.len() as f64));
    put("real_reconstruction_psnr_median", metrics::median(&psnr));
    put("real_prediction_drift_median", metrics::median(&drift));
    // f~(E(x)) against the true labels on the explained images, info only.
    let latents = nets::encoder_forward_batch(
        &bundle.encoder,
        &bundle.encoder_spec,
        &split.test.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
    )?;
    let lat_scores = latents
        .iter()
        .map(|w| latent::latent_predict(&bundle.direction, w))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = split.test.iter().map(|s| s.label).collect();
    put("real_latent_auc", metrics::auc(&lat_scores, &labels).ok());
    Ok(EvaluationSummary { metrics: m, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn deps_precede_their_stage() {
        for s in Stage::ALL {
            for d in s.deps() {
                assert!(d.index() < s.index(), "{s:?} depends on later {d:?}");
            }
        }
    }
}
