//! Staged workflow over a working directory.
//!
//! Every stage owns one or more output directories under the workdir and
//! records a stamp in `stamps/<step>.json` with its config digest, the layout
//! hash, the digests of the inputs it consumed and of the outputs it wrote.
//! A stage whose stamp still matches is skipped; an input whose content no
//! longer matches the stamp of the stage that produced it is reported stale.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autoencoder::{
    extract_latents, load_latent_dataset, save_latent_dataset, train_ae, AeConfig, LatentDataset, PoseAutoencoder,
};
use crate::corpus::{load_corpus, load_text_file, read_pose_file, save_corpus, CorpusSample, TextSample};
use crate::digest::{sha256_hex, sha256_json, substream_seed};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, export_for_backtranslation, read_manifest, EvalReport};
use crate::generator::{generate, idle_pose_from, train_generator, GenSample, Generator, GeneratorConfig, Phase};
use crate::plots::{
    density_path, emit_plots, load_projections, points_to_rows, projection_path, read_json, write_json,
    DensityArtifact, PlotKind, ProjectionArtifact, CHANNEL_STATS_FILE,
};
use crate::skeleton::{normalize_pose, CanonicalPose, LayoutConfig, PoseSequence, Region, SkeletonLayout};
use crate::stats::{
    channel_stats, compute_priors, density_difference, fit_region_projection, masked_region_embedding, project,
    stack_latents, ChannelPrior, ChannelSelection, DEFAULT_BINS, DEFAULT_GRID,
};
use crate::synth::{SynthConfig, SyntheticLanguage};

pub const LOCK_FILE: &str = ".darslp.lock";
pub const STAMP_DIR: &str = "stamps";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

const DATA: &str = "data";
const AE: &str = "ae";
const LATENTS: &str = "latents";
const PRIORS: &str = "priors";
const GENERATED: &str = "generated";
const EVAL: &str = "eval";
const ANALYSIS: &str = "analysis";
const MODEL_FILE: &str = "model.ckpt";
const HISTORY_FILE: &str = "history.json";
const PRIORS_FILE: &str = "priors.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PrepareData,
    SynthData,
    TrainAe,
    ExtractLatents,
    ComputePriors,
    TrainGenPhase1,
    TrainGenPhase2,
    Generate,
    Evaluate,
    AnalyzeLatents,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::PrepareData,
        Stage::SynthData,
        Stage::TrainAe,
        Stage::ExtractLatents,
        Stage::ComputePriors,
        Stage::TrainGenPhase1,
        Stage::TrainGenPhase2,
        Stage::Generate,
        Stage::Evaluate,
        Stage::AnalyzeLatents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepareData => "prepare-data",
            Stage::SynthData => "synth-data",
            Stage::TrainAe => "train-ae",
            Stage::ExtractLatents => "extract-latents",
            Stage::ComputePriors => "compute-priors",
            Stage::TrainGenPhase1 => "train-gen-phase1",
            Stage::TrainGenPhase2 => "train-gen-phase2",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::AnalyzeLatents => "analyze-latents",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory with `train/`, `dev/`, `test/` split subdirectories for `prepare-data`.
    pub corpus: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDataConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub language: SynthConfig,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        SynthDataConfig {
            n_train: 256,
            n_dev: 32,
            n_test: 32,
            language: SynthConfig::default(),
        }
    }
}

/// Phase-2 values that replace the shared generator settings when set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub lr: Option<f64>,
    pub kl_weight: Option<f64>,
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
    pub grid: usize,
    /// Isotropic KDE bandwidth; Scott's rule when absent.
    pub bandwidth: Option<f64>,
    /// Split whose frames are projected; falls back to `train` when absent.
    pub split: String,
    pub what: Vec<PlotKind>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bins: DEFAULT_BINS,
            grid: DEFAULT_GRID,
            bandwidth: None,
            split: "dev".into(),
            what: PlotKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Splits that `generate` and `evaluate` process when present.
    pub splits: Vec<String>,
    /// Generator checkpoint used for generation.
    pub phase: Phase,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: vec!["dev".into(), "test".into()],
            phase: Phase::Two,
        }
    }
}

/// Whole-workflow configuration. The module seeds inside `ae`, `gen` and
/// `synth` are derived from `seed` per stage and ignored on input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub layout: LayoutConfig,
    pub synth: SynthDataConfig,
    pub ae: AeConfig,
    pub gen: GeneratorConfig,
    pub phase2: Phase2Config,
    pub analysis: AnalysisConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            layout: LayoutConfig::default(),
            synth: SynthDataConfig::default(),
            ae: AeConfig::default(),
            gen: GeneratorConfig::default(),
            phase2: Phase2Config::default(),
            analysis: AnalysisConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Applies `key.path=value` overrides to a config. Values parse as JSON
    /// and fall back to plain strings; every key must already exist.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {item:?} is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Configuration with the per-stage seeds expanded from the global seed.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        cfg.ae.seed = substream_seed(self.seed, Stage::TrainAe.name());
        cfg.gen.seed = substream_seed(self.seed, "train-gen");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        self.gen.validate()?;
        self.phase2_gen_config().validate()?;
        if self.ae.latent_layout != self.gen.latent_layout {
            return Err(Error::InvalidArgument(
                "ae and generator latent layouts differ".into(),
            ));
        }
        if self.synth.language.t_max > self.gen.t_max {
            return Err(Error::InvalidArgument(
                "synthetic t_max exceeds the generator t_max".into(),
            ));
        }
        if self.analysis.bins < 2 || self.analysis.grid < 2 {
            return Err(Error::InvalidArgument("analysis bins and grid must be >= 2".into()));
        }
        if self.analysis.bandwidth.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::InvalidArgument("analysis bandwidth must be > 0".into()));
        }
        if let Some(bad) = self.eval.splits.iter().find(|s| !SPLITS.contains(&s.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown split {bad:?}")));
        }
        SkeletonLayout::from_config(self.layout.clone())?;
        Ok(())
    }

    /// Digest of everything except the paths.
    pub fn digest(&self) -> String {
        let mut cfg = self.clone();
        cfg.paths = PathsConfig {
            corpus: None,
            workdir: PathBuf::new(),
        };
        sha256_json(&cfg)
    }

    pub fn phase2_gen_config(&self) -> GeneratorConfig {
        let mut gen = self.gen.clone();
        if let Some(lr) = self.phase2.lr {
            gen.lr = lr;
        }
        if let Some(w) = self.phase2.kl_weight {
            gen.kl_weight = w;
        }
        if let Some(n) = self.phase2.max_epochs {
            gen.max_epochs = n;
        }
        gen
    }
}

/// Provenance record of one completed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_digest: String,
    pub layout_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub overrides: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub step: String,
    pub cached: bool,
    pub outputs: Vec<PathBuf>,
}

/// Content digest of a file, or of a directory tree by relative path and file digest.
pub fn path_digest(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut names: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.file_name()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    names.sort();
    let mut hasher = Sha256::new();
    for name in names {
        let child = path_digest(&path.join(&name))?;
        hasher.update(name.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(child.as_bytes());
        hasher.update([b'\n']);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Exclusive lock on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(WorkdirLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if holder_alive(&path) {
                        return Err(Error::Locked(path));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked(path))
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A lock whose recorded process no longer exists is stale.
fn holder_alive(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return true;
    };
    match text.trim().parse::<u32>() {
        Ok(pid) if Path::new("/proc/self").exists() => Path::new(&format!("/proc/{pid}")).exists(),
        Ok(_) => true,
        Err(_) => false,
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn remove_path(path: &Path) -> Result<()> {
    let result = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        Ok(())
    };
    result.map_err(|e| Error::io(path, e))
}

struct StepSpec {
    name: String,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// An opened workdir with a validated configuration and the workdir lock held.
pub struct Pipeline {
    cfg: PipelineConfig,
    layout: SkeletonLayout,
    workdir: PathBuf,
    overrides: Vec<String>,
    _lock: WorkdirLock,
}

impl Pipeline {
    /// Applies overrides, validates and locks the workdir named by the result.
    pub fn open(base: &PipelineConfig, overrides: &[String]) -> Result<Self> {
        let cfg = base.with_overrides(overrides)?.effective();
        cfg.validate()?;
        let layout = SkeletonLayout::from_config(cfg.layout.clone())?;
        let workdir = cfg.paths.workdir.clone();
        let lock = WorkdirLock::acquire(&workdir)?;
        Ok(Pipeline {
            cfg,
            layout,
            workdir,
            overrides: overrides.to_vec(),
            _lock: lock,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn layout(&self) -> &SkeletonLayout {
        &self.layout
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    pub fn stamp_path(&self, step: &str) -> PathBuf {
        self.workdir.join(STAMP_DIR).join(format!("{step}.json"))
    }

    pub fn read_stamp(&self, step: &str) -> Result<Option<Stamp>> {
        let path = self.stamp_path(step);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    fn stamps(&self) -> Result<Vec<Stamp>> {
        let dir = self.workdir.join(STAMP_DIR);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| read_json(p)).collect()
    }

    /// Data source stage implied by the configuration.
    pub fn data_stage(&self) -> Stage {
        if self.cfg.paths.corpus.is_some() {
            Stage::PrepareData
        } else {
            Stage::SynthData
        }
    }

    /// The stages `pipeline` runs, in order.
    pub fn plan(&self) -> Vec<Stage> {
        let mut plan = vec![self.data_stage()];
        plan.extend([
            Stage::TrainAe,
            Stage::ExtractLatents,
            Stage::ComputePriors,
            Stage::TrainGenPhase1,
            Stage::TrainGenPhase2,
            Stage::Generate,
            Stage::Evaluate,
            Stage::AnalyzeLatents,
        ]);
        plan
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        let mut all = Vec::new();
        for stage in self.plan() {
            all.extend(self.run_stage(stage)?);
        }
        Ok(all)
    }

    /// Runs one stage, skipping any step whose stamp still matches.
    pub fn run_stage(&self, stage: Stage) -> Result<Vec<StageOutcome>> {
        let mut outcomes = Vec::new();
        for spec in self.specs(stage)? {
            outcomes.push(self.run_step(stage, spec)?);
        }
        Ok(outcomes)
    }

    fn generator_dir(phase: Phase) -> String {
        format!("gen/phase{}", phase.number())
    }

    fn specs(&self, stage: Stage) -> Result<Vec<StepSpec>> {
        let cfg = &self.cfg;
        let data = || DATA.to_string();
        let spec = |config: Value, inputs: Vec<String>, outputs: Vec<String>| StepSpec {
            name: stage.name().to_string(),
            config,
            inputs,
            outputs,
        };
        Ok(match stage {
            Stage::PrepareData => {
                let corpus = cfg.paths.corpus.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("prepare-data needs paths.corpus".into())
                })?;
                vec![spec(
                    serde_json::json!({ "t_max": cfg.gen.t_max, "corpus": corpus }),
                    vec![],
                    vec![data()],
                )]
            }
            Stage::SynthData => vec![spec(
                serde_json::json!({ "synth": serde_json::to_value(&cfg.synth)?, "seed": cfg.seed }),
                vec![],
                vec![data()],
            )],
            Stage::TrainAe => vec![spec(
                serde_json::json!({ "ae": serde_json::to_value(&cfg.ae)?, "t_max": cfg.gen.t_max }),
                vec![data()],
                vec![AE.into()],
            )],
            Stage::ExtractLatents => vec![spec(Value::Null, vec![data(), AE.into()], vec![LATENTS.into()])],
            Stage::ComputePriors => vec![spec(
                serde_json::json!({ "sigma_floor": cfg.gen.sigma_floor }),
                vec![LATENTS.into()],
                vec![PRIORS.into()],
            )],
            Stage::TrainGenPhase1 => vec![spec(
                serde_json::json!({ "gen": serde_json::to_value(&cfg.gen)? }),
                vec![data(), LATENTS.into()],
                vec![Self::generator_dir(Phase::One)],
            )],
            Stage::TrainGenPhase2 => vec![spec(
                serde_json::json!({ "gen": serde_json::to_value(&cfg.phase2_gen_config())? }),
                vec![
                    data(),
                    LATENTS.into(),
                    PRIORS.into(),
                    Self::generator_dir(Phase::One),
                ],
                vec![Self::generator_dir(Phase::Two)],
            )],
            Stage::Generate => vec![spec(
                serde_json::json!({ "eval": serde_json::to_value(&cfg.eval)? }),
                vec![data(), AE.into(), Self::generator_dir(cfg.eval.phase)],
                vec![GENERATED.into()],
            )],
            Stage::Evaluate => vec![spec(
                serde_json::json!({ "eval": serde_json::to_value(&cfg.eval)?, "config": cfg.digest() }),
                vec![data(), GENERATED.into()],
                vec![EVAL.into()],
            )],
            Stage::AnalyzeLatents => {
                let mut what = cfg.analysis.what.clone();
                what.sort_by_key(|k| PlotKind::ALL.iter().position(|x| x == k));
                what.dedup();
                let mut specs = Vec::new();
                for kind in what {
                    let out = format!("{ANALYSIS}/{}", kind.name());
                    let mut inputs = vec![data(), LATENTS.into(), AE.into()];
                    if kind == PlotKind::DensityDiff {
                        inputs.push(format!("{ANALYSIS}/{}", PlotKind::Projection.name()));
                        let gens: Vec<String> = [Phase::One, Phase::Two]
                            .into_iter()
                            .map(Self::generator_dir)
                            .filter(|d| self.path(d).exists())
                            .collect();
                        if gens.is_empty() {
                            return Err(Error::MissingUpstream(
                                "density-diff needs a trained generator".into(),
                            ));
                        }
                        inputs.extend(gens);
                    }
                    specs.push(StepSpec {
                        name: format!("{}.{}", stage.name(), kind.name()),
                        config: serde_json::json!({ "analysis": serde_json::to_value(&cfg.analysis)?, "kind": kind }),
                        inputs,
                        outputs: vec![out],
                    });
                }
                specs
            }
        })
    }

    /// Digests of `inputs`, each checked against the stamp of the step that wrote it.
    fn verify_inputs(&self, step: &str, inputs: &[String]) -> Result<BTreeMap<String, String>> {
        let stamps = self.stamps()?;
        let mut digests = BTreeMap::new();
        for input in inputs {
            let path = self.path(input);
            if !path.exists() {
                return Err(Error::MissingUpstream(format!("{step} needs {}", path.display())));
            }
            let producer = stamps.iter().filter(|s| s.outputs.contains_key(input)).max_by_key(|s| s.timestamp);
            let Some(producer) = producer else {
                return Err(Error::MissingUpstream(format!(
                    "{} has no stage stamp; rerun the stage that produces it",
                    path.display()
                )));
            };
            if producer.layout_hash != self.layout.layout_hash() {
                return Err(Error::HashMismatch {
                    expected: self.layout.layout_hash().to_string(),
                    found: producer.layout_hash.clone(),
                });
            }
            let digest = path_digest(&path)?;
            if producer.outputs[input] != digest {
                return Err(Error::StaleArtifact(format!(
                    "{} changed after {} wrote it",
                    path.display(),
                    producer.stage
                )));
            }
            digests.insert(input.clone(), digest);
        }
        if let (Some(corpus), true) = (&self.cfg.paths.corpus, step == Stage::PrepareData.name()) {
            if !corpus.exists() {
                return Err(Error::MissingUpstream(format!("corpus {}", corpus.display())));
            }
            digests.insert(format!("corpus:{}", corpus.display()), path_digest(corpus)?);
        }
        Ok(digests)
    }

    fn run_step(&self, stage: Stage, spec: StepSpec) -> Result<StageOutcome> {
        let config_digest = sha256_json(&serde_json::json!({
            "step": spec.name,
            "layout": self.layout.layout_hash(),
            "config": spec.config,
        }));
        let inputs = self.verify_inputs(&spec.name, &spec.inputs)?;
        let output_paths: Vec<PathBuf> = spec.outputs.iter().map(|o| self.path(o)).collect();
        if let Some(stamp) = self.read_stamp(&spec.name)? {
            let fresh = stamp.config_digest == config_digest
                && stamp.layout_hash == self.layout.layout_hash()
                && stamp.inputs == inputs
                && spec.outputs.iter().all(|o| {
                    let p = self.path(o);
                    p.exists() && stamp.outputs.get(o).is_some_and(|d| path_digest(&p).ok().as_ref() == Some(d))
                });
            if fresh {
                log::info!("{}: cached", spec.name);
                return Ok(StageOutcome {
                    step: spec.name,
                    cached: true,
                    outputs: output_paths,
                });
            }
        }
        let _ = fs::remove_file(self.stamp_path(&spec.name));
        for p in &output_paths {
            remove_path(p)?;
        }
        log::info!("{}: running", spec.name);
        match stage {
            Stage::PrepareData => self.prepare_data()?,
            Stage::SynthData => self.synth_data()?,
            Stage::TrainAe => self.train_ae()?,
            Stage::ExtractLatents => self.extract_latents()?,
            Stage::ComputePriors => self.compute_priors()?,
            Stage::TrainGenPhase1 => self.train_gen(Phase::One)?,
            Stage::TrainGenPhase2 => self.train_gen(Phase::Two)?,
            Stage::Generate => self.generate()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::AnalyzeLatents => {
                let kind: PlotKind = spec
                    .name
                    .rsplit('.')
                    .next()
                    .unwrap_or_default()
                    .parse()?;
                self.analyze(kind)?;
            }
        }
        let mut outputs = BTreeMap::new();
        for (rel, p) in spec.outputs.iter().zip(&output_paths) {
            if !p.exists() {
                fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            outputs.insert(rel.clone(), path_digest(p)?);
        }
        let stamp = Stamp {
            stage: spec.name.clone(),
            config_digest,
            layout_hash: self.layout.layout_hash().to_string(),
            timestamp: now(),
            overrides: self.overrides.clone(),
            inputs,
            outputs,
        };
        write_json(&self.stamp_path(&spec.name), &stamp)?;
        Ok(StageOutcome {
            step: spec.name,
            cached: false,
            outputs: output_paths,
        })
    }

    fn split_dir(&self, split: &str) -> PathBuf {
        self.path(DATA).join(split)
    }

    /// Loads a split of the prepared corpus, `None` when the split is absent.
    pub fn load_split(&self, split: &str) -> Result<Option<Vec<CorpusSample>>> {
        let dir = self.split_dir(split);
        if !dir.exists() {
            return Ok(None);
        }
        load_corpus(&dir, &self.layout, self.cfg.gen.t_max).map(Some)
    }

    fn require_split(&self, split: &str) -> Result<Vec<CorpusSample>> {
        self.load_split(split)?
            .ok_or_else(|| Error::MissingUpstream(format!("split {split} under {}", self.path(DATA).display())))
    }

    fn normalized(&self, samples: &[CorpusSample]) -> Result<Vec<PoseSequence>> {
        samples.iter().map(|s| normalize_pose(&s.pose, &self.layout)).collect()
    }

    fn prepare_data(&self) -> Result<()> {
        let corpus = self.cfg.paths.corpus.as_ref().expect("checked by specs");
        let mut found = false;
        for split in SPLITS {
            let dir = corpus.join(split);
            if !dir.exists() {
                continue;
            }
            let samples = load_corpus(&dir, &self.layout, self.cfg.gen.t_max)?;
            for s in &samples {
                normalize_pose(&s.pose, &self.layout)?;
            }
            save_corpus(&samples, &self.split_dir(split), &self.layout)?;
            found |= split == "train";
        }
        if !found {
            return Err(Error::MissingUpstream(format!("{}/train", corpus.display())));
        }
        Ok(())
    }

    fn synth_data(&self) -> Result<()> {
        let seed = substream_seed(self.cfg.seed, Stage::SynthData.name());
        let language = SyntheticLanguage::new(seed, self.cfg.synth.language.clone(), self.layout.clone())?;
        let counts = [self.cfg.synth.n_train, self.cfg.synth.n_dev, self.cfg.synth.n_test];
        for (split, n) in SPLITS.iter().zip(counts) {
            if n == 0 {
                continue;
            }
            let samples = language.samples(substream_seed(seed, split), n, &format!("{split}-"))?;
            save_corpus(&samples, &self.split_dir(split), &self.layout)?;
        }
        if self.cfg.synth.n_train == 0 {
            return Err(Error::InvalidArgument("synth.n_train must be >= 1".into()));
        }
        Ok(())
    }

    fn load_ae(&self) -> Result<PoseAutoencoder> {
        let path = self.path(AE).join(MODEL_FILE);
        PoseAutoencoder::load(&path, &self.layout)
    }

    fn train_ae(&self) -> Result<()> {
        let train = self.normalized(&self.require_split("train")?)?;
        let dev = match self.load_split("dev")? {
            Some(d) => self.normalized(&d)?,
            None => Vec::new(),
        };
        let model = train_ae(&train, &dev, &self.cfg.ae, &self.layout)?;
        let dir = self.path(AE);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        model.save(&dir.join(MODEL_FILE))?;
        write_json(&dir.join(HISTORY_FILE), &model.history)
    }

    fn extract_latents(&self) -> Result<()> {
        let ae = self.load_ae()?;
        for split in SPLITS {
            let Some(samples) = self.load_split(split)? else {
                continue;
            };
            let items: Vec<(String, PoseSequence)> = samples
                .iter()
                .map(|s| Ok((s.id.clone(), normalize_pose(&s.pose, &self.layout)?)))
                .collect::<Result<_>>()?;
            let ds = extract_latents(&ae, &items)?;
            save_latent_dataset(&ds, &self.path(LATENTS).join(split))?;
        }
        Ok(())
    }

    fn load_latents(&self, split: &str) -> Result<Option<LatentDataset>> {
        let dir = self.path(LATENTS).join(split);
        if !dir.exists() {
            return Ok(None);
        }
        load_latent_dataset(&dir, self.cfg.ae.latent_layout, self.layout.layout_hash()).map(Some)
    }

    fn require_latents(&self, split: &str) -> Result<LatentDataset> {
        self.load_latents(split)?
            .ok_or_else(|| Error::MissingUpstream(format!("latents for split {split}")))
    }

    fn compute_priors(&self) -> Result<()> {
        let frames = stack_latents(&self.require_latents("train")?)?;
        let priors = compute_priors(&frames, self.cfg.gen.sigma_floor, self.layout.layout_hash(), "train")?;
        let dir = self.path(PRIORS);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        priors.save(&dir.join(PRIORS_FILE))
    }

    fn gen_samples(&self, split: &str) -> Result<Option<Vec<GenSample>>> {
        let (Some(corpus), Some(latents)) = (self.load_split(split)?, self.load_latents(split)?) else {
            return Ok(None);
        };
        corpus
            .into_iter()
            .map(|s| {
                let lat = latents
                    .get(&s.id)
                    .ok_or_else(|| Error::MissingUpstream(format!("latents for sample {}", s.id)))?;
                Ok(GenSample {
                    id: s.id,
                    embedding: s.embedding,
                    latents: lat.codes.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn generator_path(&self, phase: Phase) -> PathBuf {
        self.path(&Self::generator_dir(phase)).join(MODEL_FILE)
    }

    pub fn ae_path(&self) -> PathBuf {
        self.path(AE).join(MODEL_FILE)
    }

    pub fn load_generator(&self, phase: Phase) -> Result<Generator> {
        let path = self.generator_path(phase);
        if !path.exists() {
            return Err(Error::MissingUpstream(format!("phase {} checkpoint {}", phase.number(), path.display())));
        }
        Generator::load(&path, self.layout.layout_hash())
    }

    fn train_gen(&self, phase: Phase) -> Result<()> {
        let train = self
            .gen_samples("train")?
            .ok_or_else(|| Error::MissingUpstream("train split latents".into()))?;
        let dev = self.gen_samples("dev")?.unwrap_or_default();
        let model = match phase {
            Phase::One => {
                let poses = self.normalized(&self.require_split("train")?)?;
                let idle = idle_pose_from(&poses)?;
                let gen = Generator::new(self.cfg.gen.clone(), idle, self.layout.layout_hash())?;
                train_generator(gen, &train, &dev, None, Phase::One)?
            }
            Phase::Two => {
                let priors = ChannelPrior::load(&self.path(PRIORS).join(PRIORS_FILE), self.layout.layout_hash())?;
                let mut gen = self.load_generator(Phase::One)?;
                gen.set_training_config(self.cfg.phase2_gen_config())?;
                train_generator(gen, &train, &dev, Some(&priors), Phase::Two)?
            }
        };
        let dir = self.path(&Self::generator_dir(phase));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        model.save(&dir.join(MODEL_FILE))?;
        write_json(&dir.join(HISTORY_FILE), &model.history)
    }

    fn generate(&self) -> Result<()> {
        let ae = self.load_ae()?;
        let gen = self.load_generator(self.cfg.eval.phase)?;
        for split in &self.cfg.eval.splits {
            let Some(samples) = self.load_split(split)? else {
                continue;
            };
            let texts: Vec<TextSample> = samples.iter().map(TextSample::from).collect();
            generate_texts(&texts, &gen, &ae, &self.path(GENERATED).join(split))?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let digest = self.cfg.digest();
        let mut any = false;
        for split in &self.cfg.eval.splits {
            let Some(samples) = self.load_split(split)? else {
                continue;
            };
            let gen_dir = self.path(GENERATED).join(split);
            let manifest = read_manifest(&gen_dir)?;
            let by_id: BTreeMap<&str, &CorpusSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut pairs = Vec::with_capacity(manifest.len());
            for entry in &manifest {
                let gt = by_id
                    .get(entry.id.as_str())
                    .ok_or_else(|| Error::MissingUpstream(format!("ground truth for {}", entry.id)))?;
                let pred = read_pose_file(&gen_dir.join(&entry.pose_file))?;
                pairs.push((entry.id.clone(), pred, normalize_pose(&gt.pose, &self.layout)?));
            }
            let report = evaluate_pairs(split, &digest, &pairs)?;
            log::info!(
                "{split}: mean DTW-MJE {:.5}, median {:.5}, length MAE {:.2}",
                report.mean_dtw_mje,
                report.median_dtw_mje,
                report.length_mae
            );
            report.write(&self.path(EVAL), split)?;
            any = true;
        }
        if !any {
            return Err(Error::MissingUpstream("none of the evaluation splits exist".into()));
        }
        Ok(())
    }

    pub fn read_report(&self, split: &str) -> Result<EvalReport> {
        EvalReport::read(&self.path(EVAL).join(format!("{split}.json")))
    }

    /// Split used for projections: the configured one if present, else train.
    fn analysis_split(&self) -> Result<String> {
        let split = &self.cfg.analysis.split;
        if self.split_dir(split).exists() && self.path(LATENTS).join(split).exists() {
            Ok(split.clone())
        } else {
            Ok("train".into())
        }
    }

    fn analyze(&self, kind: PlotKind) -> Result<()> {
        let root = self.path(ANALYSIS);
        let layout = self.cfg.ae.latent_layout;
        match kind {
            PlotKind::Stats => {
                let frames = stack_latents(&self.require_latents("train")?)?;
                let stats = channel_stats(&frames, self.cfg.analysis.bins)?;
                let dir = root.join(kind.name());
                write_json(&dir.join(CHANNEL_STATS_FILE), &stats)?;
                let summary: BTreeMap<&str, f64> = Region::ALL
                    .iter()
                    .map(|&r| (r.name(), stats.region_mean_entropy(&layout, r)))
                    .collect();
                write_json(&dir.join("entropy_summary.json"), &summary)?;
            }
            PlotKind::Projection => {
                let ae = self.load_ae()?;
                let train_poses = self.normalized(&self.require_split("train")?)?;
                let canonical = CanonicalPose::from_sequences(&train_poses)?;
                let train = stack_latents(&self.require_latents("train")?)?;
                let split = self.analysis_split()?;
                let poses = self.normalized(&self.require_split(&split)?)?;
                let codes = stack_latents(&self.require_latents(&split)?)?;
                for region in Region::ALL {
                    let proj = fit_region_projection(&train, ChannelSelection::Region(region), &layout)?;
                    let masked = masked_region_embedding(&poses, &ae, region, &canonical, &proj)?;
                    let unmasked = project(&codes, &proj)?;
                    let art = ProjectionArtifact {
                        region,
                        projection: proj,
                        masked: points_to_rows(&masked),
                        unmasked: points_to_rows(&unmasked),
                    };
                    write_json(&projection_path(&root, region), &art)?;
                }
            }
            PlotKind::DensityDiff => {
                let projections = load_projections(&root)?;
                let split = self.analysis_split()?;
                let samples = self.require_split(&split)?;
                let codes = stack_latents(&self.require_latents(&split)?)?;
                for phase in [Phase::One, Phase::Two] {
                    if !self.generator_path(phase).exists() {
                        continue;
                    }
                    let gen = self.load_generator(phase)?;
                    let mut predicted = Vec::with_capacity(samples.len());
                    for s in &samples {
                        predicted.push(gen.infer(&s.embedding, None)?.0.codes);
                    }
                    let views: Vec<_> = predicted.iter().map(|p| p.view()).collect();
                    let predicted: Array2<f64> =
                        concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                    let label = format!("phase{}", phase.number());
                    for art in &projections {
                        let gt = project(&codes, &art.projection)?;
                        let pred = project(&predicted, &art.projection)?;
                        let grid = density_difference(&gt, &pred, self.cfg.analysis.grid, self.cfg.analysis.bandwidth)?;
                        write_json(
                            &density_path(&root, art.region, &label),
                            &DensityArtifact::from_grid(art.region, &label, &grid),
                        )?;
                    }
                }
            }
        }
        emit_plots(&root, kind, &layout)?;
        Ok(())
    }
}

/// Generates every text and exports the poses with a manifest into `out_dir`.
pub fn generate_texts(
    texts: &[TextSample],
    gen: &Generator,
    ae: &PoseAutoencoder,
    out_dir: &Path,
) -> Result<Vec<(String, PoseSequence)>> {
    let mut out = Vec::with_capacity(texts.len());
    for t in texts {
        out.push((t.id.clone(), generate(&t.embedding, gen, ae)?));
    }
    export_for_backtranslation(&out, out_dir)?;
    Ok(out)
}

/// Generates poses for an index file of texts with explicit checkpoints.
pub fn generate_from_text_file(
    text_file: &Path,
    gen_ckpt: &Path,
    ae_ckpt: &Path,
    layout: &SkeletonLayout,
    out_dir: &Path,
) -> Result<Vec<(String, PoseSequence)>> {
    for p in [text_file, gen_ckpt, ae_ckpt] {
        if !p.exists() {
            return Err(Error::MissingUpstream(p.display().to_string()));
        }
    }
    let ae = PoseAutoencoder::load(ae_ckpt, layout)?;
    let gen = Generator::load(gen_ckpt, layout.layout_hash())?;
    let texts = load_text_file(text_file)?;
    generate_texts(&texts, &gen, &ae, out_dir)
}

/// Opens the workdir of `cfg` and runs one stage.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, overrides: &[String]) -> Result<Vec<StageOutcome>> {
    Pipeline::open(cfg, overrides)?.run_stage(stage)
}
