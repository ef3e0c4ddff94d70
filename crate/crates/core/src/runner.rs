//! Experiment orchestration: scene generation, training of the learned
//! systems, resumable condition sweeps and summary reports.
//!
//! Everything lives under `output_dir`:
//!
//! ```text
//! scenes/scene_000/            manifest.json and WAVs
//! checkpoints/{system}.json    trained heads
//! training/{system}_curve.csv
//! results/{axis}_{max}.csv     one file per sweep condition
//! results.csv                  all conditions, in config order
//! report.csv                   medians per condition and system
//! sto/                         offset estimates and similarity matrices
//! ```
//!
//! Every CSV starts with a `# config_hash=` line. The hash covers the whole
//! resolved config except `output_dir` and `jobs`, which do not change results.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asynchrony::{apply_async, AsyncSpec, SweepAxis};
use crate::attention::features::{
    recording_offsets, scene_recordings, stacked_features, window_similarities, HeadEstimator,
};
use crate::attention::{checkpoint, train, AttnConfig, AttnHead, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::scene::manifest::{
    read_scene, write_scene_audio, ConditionSpec, SceneManifest, SourceSpec, MANIFEST_FILE,
};
use crate::scene::{scene_from_sources, synthetic_scene, SceneRecipe, SceneSignals};
use crate::signal::wav::{read_wav_expect, WavFormat};
use crate::signal::TimeSignal;
use crate::tango::{local_stage, run_synchronized, stack, MaskEstimator, PipelineConfig};

pub const HASH_PREFIX: &str = "# config_hash=";

/// Training scenes use seeds from here on, away from evaluation scenes.
const TRAIN_SEED_OFFSET: u64 = 1_000_000;
/// Decorrelates clock offsets from the geometry drawn with the same seed.
const ASYNC_SEED_SALT: u64 = 0x4153_594e;
const NOISE_FILE_SALT: u64 = 0x4e4f_4953;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    /// Stage 2 driven by the ideal ratio mask.
    Oracle,
    /// Attention-free head trained on synchronized scenes.
    SyncTrained,
    /// Attention-free head trained with random STO.
    AsyncTrained,
    /// Attention head trained with random STO.
    Attention,
}

impl System {
    pub const ALL: [System; 4] = [
        System::Oracle,
        System::SyncTrained,
        System::AsyncTrained,
        System::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Oracle => "oracle",
            System::SyncTrained => "sync-trained",
            System::AsyncTrained => "async-trained",
            System::Attention => "attention",
        }
    }

    pub fn is_learned(self) -> bool {
        self != System::Oracle
    }

    fn trained_with_offsets(self) -> bool {
        matches!(self, System::AsyncTrained | System::Attention)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown system {s:?}")))
    }
}

fn parse_axis(s: &str) -> Result<SweepAxis> {
    match s {
        "sro" => Ok(SweepAxis::Sro),
        "sto" => Ok(SweepAxis::Sto),
        _ => Err(Error::Data(format!("unknown sweep axis {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    /// SRO maxima in ppm or STO maxima in ms, non-negative and increasing.
    pub max_values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Sto,
            max_values: vec![0.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_scenes: usize,
    pub n_val_scenes: usize,
    /// Upper end of the uniform STO draw for systems trained with offsets.
    pub sto_max_ms: f64,
    /// Every `stride`-th window of a recording becomes a training item.
    pub stride: usize,
    /// Head layout; `attention` is overridden per system.
    pub head: AttnConfig,
    pub optimizer: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            n_val_scenes: 2,
            sto_max_ms: 32.0,
            stride: 4,
            head: AttnConfig::default(),
            optimizer: TrainConfig {
                learning_rate: 8.0,
                steps: 1500,
                batch_size: 64,
                eval_every: 50,
                patience: Some(10),
                ..TrainConfig::default()
            },
        }
    }
}

/// Directories of mono WAV files used as dry sources in place of the
/// synthetic ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDirs {
    pub target_dir: PathBuf,
    pub noise_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_scenes: usize,
    pub seed: u64,
    /// Node whose clock the others are offset from (0-based).
    pub reference_node: usize,
    pub scene: SceneRecipe,
    pub sweep: Sweep,
    pub systems: Vec<System>,
    pub pipeline: PipelineConfig,
    pub training: TrainingConfig,
    pub sources: Option<SourceDirs>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            seed: 0,
            reference_node: 0,
            scene: SceneRecipe::default(),
            sweep: Sweep::default(),
            systems: vec![
                System::SyncTrained,
                System::AsyncTrained,
                System::Attention,
            ],
            pipeline: PipelineConfig::default(),
            training: TrainingConfig::default(),
            sources: None,
            output_dir: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let n_nodes = self.scene.config.n_nodes;
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive".into());
        }
        if n_nodes < 2 || self.reference_node >= n_nodes {
            return bad(format!(
                "reference node {} with {n_nodes} nodes",
                self.reference_node + 1
            ));
        }
        let values = &self.sweep.max_values;
        if values.is_empty() {
            return bad("empty sweep".into());
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad(format!("sweep values must be non-negative: {values:?}"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("sweep values must be increasing: {values:?}"));
        }
        if self.systems.is_empty() {
            return bad("no systems".into());
        }
        for (i, s) in self.systems.iter().enumerate() {
            if self.systems[..i].contains(s) {
                return bad(format!("system {s} listed twice"));
            }
        }
        let t = &self.training;
        if self.systems.iter().any(|s| s.is_learned()) {
            if t.n_scenes == 0 || t.stride == 0 {
                return bad("training needs scenes and a positive stride".into());
            }
            if !t.sto_max_ms.is_finite() || t.sto_max_ms < 0.0 {
                return bad(format!("invalid training STO maximum {}", t.sto_max_ms));
            }
            if t.head.window < 3 || t.head.window % 2 == 0 {
                return bad(format!("window must be odd and at least 3, got {}", t.head.window));
            }
        }
        let stft = &self.pipeline.stft;
        if stft.hop == 0 || stft.hop > stft.frame_len {
            return bad(format!("invalid STFT config {stft:?}"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without `output_dir` and `jobs`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("jobs");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_foreign(&self) -> usize {
        self.scene.config.n_nodes - 1
    }

    pub fn scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    pub fn train_scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(TRAIN_SEED_OFFSET + i as u64)
    }

    /// Clock offsets of a scene under one sweep condition. Conditions of the
    /// same scene share their random draws and differ only in scale.
    pub fn condition_spec(&self, scene_seed: u64, max: f64) -> Result<AsyncSpec> {
        self.sweep.axis.spec(
            self.scene.config.n_nodes,
            self.reference_node,
            max,
            scene_seed ^ ASYNC_SEED_SALT,
        )
    }

    pub fn scene_dir(&self, i: usize) -> PathBuf {
        self.output_dir.join("scenes").join(format!("scene_{i:03}"))
    }

    pub fn checkpoint_path(&self, system: System) -> PathBuf {
        self.output_dir
            .join("checkpoints")
            .join(format!("{system}.json"))
    }

    pub fn curve_path(&self, system: System) -> PathBuf {
        self.output_dir
            .join("training")
            .join(format!("{system}_curve.csv"))
    }

    pub fn condition_path(&self, max: f64) -> PathBuf {
        self.output_dir
            .join("results")
            .join(format!("{}_{max}.csv", self.sweep.axis))
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join("results.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join("report.csv")
    }

    pub fn sto_dir(&self) -> PathBuf {
        self.output_dir.join("sto")
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }

    /// Scene `scene_id` from `seed`, with synthetic or file sources.
    pub fn build_scene(&self, scene_id: usize, seed: u64) -> Result<(SceneManifest, SceneSignals)> {
        let Some(dirs) = &self.sources else {
            return synthetic_scene(scene_id, seed, &self.scene);
        };
        let n = (self.scene.duration_s * self.scene.sample_rate as f64).round() as usize;
        let target = self.pick_source(&dirs.target_dir, seed, n)?;
        let noise = self.pick_source(&dirs.noise_dir, seed ^ NOISE_FILE_SALT, n)?;
        scene_from_sources(
            scene_id,
            seed,
            &self.scene,
            (&target.0, target.1),
            (&noise.0, noise.1),
        )
    }

    fn pick_source(&self, dir: &Path, seed: u64, max_len: usize) -> Result<(TimeSignal, SourceSpec)> {
        let files = wav_files(dir)?;
        let path = files[ChaCha8Rng::seed_from_u64(seed).random_range(0..files.len())].clone();
        let mut channels = read_wav_expect(&path, self.scene.sample_rate)?;
        let x = channels.swap_remove(0);
        let x = if x.len() > max_len { x.with_len(max_len) } else { x };
        Ok((x, SourceSpec::File { path }))
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no WAV files in {}", dir.display())));
    }
    Ok(files)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated CSV that looks finished.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn csv_bytes(hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    drop(w);
    Ok(out)
}

/// Config hash recorded in the first line of a CSV, if the file exists.
pub fn csv_hash(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(HASH_PREFIX))
        .map(str::to_owned))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes `scenes/scene_XXX` for every scene of the config.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    cfg.install(|| {
        (0..cfg.n_scenes)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.scene_seed(i);
                let (mut manifest, signals) = cfg.build_scene(i, seed)?;
                manifest.conditions = cfg
                    .sweep
                    .max_values
                    .iter()
                    .map(|&max_value| {
                        Ok(ConditionSpec {
                            axis: cfg.sweep.axis,
                            max_value,
                            spec: cfg.condition_spec(seed, max_value)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let dir = cfg.scene_dir(i);
                manifest.write(&dir)?;
                write_scene_audio(&dir, &signals, WavFormat::Float32)?;
                log::info!("scene {i} written to {}", dir.display());
                Ok(dir)
            })
            .collect()
    })?
}

/// Training and validation sets, synchronized or with random STO.
fn training_sets(cfg: &ExperimentConfig, with_offsets: bool) -> Result<(Dataset, Dataset)> {
    let t = &cfg.training;
    let n_nodes = cfg.scene.config.n_nodes;
    let per_scene: Vec<_> = (0..t.n_scenes + t.n_val_scenes)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.train_scene_seed(i);
            let (_, scene) = cfg.build_scene(i, seed)?;
            let spec = if with_offsets {
                SweepAxis::Sto.spec(n_nodes, cfg.reference_node, t.sto_max_ms, seed ^ ASYNC_SEED_SALT)?
            } else {
                AsyncSpec::synchronous(n_nodes, cfg.reference_node)
            };
            scene_recordings(&scene, &spec, &cfg.pipeline, t.head.window)
        })
        .collect::<Result<_>>()?;
    let mut train_set = Dataset::new(t.head.window);
    let mut val_set = Dataset::new(t.head.window);
    for (i, recs) in per_scene.into_iter().enumerate() {
        let set = if i < t.n_scenes {
            &mut train_set
        } else {
            &mut val_set
        };
        for r in recs {
            set.push(r, t.stride)?;
        }
    }
    Ok((train_set, val_set))
}

/// Trains every learned system of the config and writes its checkpoint and
/// training curve. Training scenes are synthesized from their own seeds.
pub fn cmd_train_attn(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let learned: Vec<System> = cfg.systems.iter().copied().filter(|s| s.is_learned()).collect();
    if learned.is_empty() {
        log::warn!("no learned systems to train");
    }
    cfg.install(|| {
        let mut sets = BTreeMap::new();
        let mut written = Vec::new();
        for system in learned {
            let key = system.trained_with_offsets();
            if !sets.contains_key(&key) {
                sets.insert(key, training_sets(cfg, key)?);
            }
            let (train_set, val_set) = &sets[&key];
            let head_cfg = AttnConfig {
                attention: system == System::Attention,
                ..cfg.training.head
            };
            let train_seed = cfg.train_scene_seed(0);
            let init = AttnHead::init(
                head_cfg,
                cfg.pipeline.stft.n_bins(),
                cfg.n_foreign(),
                train_seed,
            )?;
            let opt = TrainConfig {
                seed: train_seed,
                ..cfg.training.optimizer
            };
            log::info!("training {system} on {} windows", train_set.len());
            let result = train(init, train_set, val_set, &opt)?;
            let path = cfg.checkpoint_path(system);
            create_parent(&path)?;
            checkpoint::save(&result.head, &path)?;
            let curve = format!("{HASH_PREFIX}{hash}\n{}", result.curve_csv());
            write_atomic(&cfg.curve_path(system), curve.as_bytes())?;
            log::info!("{system}: best step {}", result.best_step);
            written.push(path);
        }
        Ok(written)
    })?
}

/// One foreign channel of a result row. Ids are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ForeignSlot {
    pub sender: usize,
    /// Sender's start offset minus the node's own, in ms.
    pub sto_true_ms: f64,
    pub sto_est_ms: Option<f64>,
}

/// One node of one scene under one condition and system. Ids are 1-based
/// except `scene_id`, which matches the scene directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene_id: usize,
    pub node_id: usize,
    pub axis: SweepAxis,
    pub max_value: f64,
    pub system: System,
    pub si_sdr_in: f64,
    pub si_sdr_stage1: f64,
    pub si_sdr_out: f64,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
    pub foreign: Vec<ForeignSlot>,
}

pub fn results_header(n_foreign: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "scene_id",
        "node_id",
        "axis",
        "max_value",
        "system",
        "si_sdr_in",
        "si_sdr_stage1",
        "si_sdr_out",
        "sdr",
        "sir",
        "sar",
    ]
    .map(String::from)
    .to_vec();
    for j in 1..=n_foreign {
        h.push(format!("sender_{j}"));
        h.push(format!("sto_true_ms_{j}"));
        h.push(format!("sto_est_ms_{j}"));
    }
    h
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.scene_id.to_string(),
            self.node_id.to_string(),
            self.axis.to_string(),
            self.max_value.to_string(),
            self.system.to_string(),
            self.si_sdr_in.to_string(),
            self.si_sdr_stage1.to_string(),
            self.si_sdr_out.to_string(),
            fmt_opt(self.sdr),
            fmt_opt(self.sir),
            fmt_opt(self.sar),
        ];
        for s in &self.foreign {
            r.push(s.sender.to_string());
            r.push(s.sto_true_ms.to_string());
            r.push(fmt_opt(s.sto_est_ms));
        }
        r
    }
}

fn run_scene(
    cfg: &ExperimentConfig,
    i: usize,
    max: f64,
    estimators: &[(System, Option<HeadEstimator>)],
) -> Result<Vec<ResultRow>> {
    let dir = cfg.scene_dir(i);
    let (manifest, scene) = read_scene(&dir)?;
    if manifest.seed != cfg.scene_seed(i) || scene.n_nodes() != cfg.scene.config.n_nodes {
        return Err(Error::Data(format!(
            "{} does not match the config (seed {}, {} nodes); regenerate the scenes",
            dir.display(),
            manifest.seed,
            scene.n_nodes()
        )));
    }
    let spec = cfg.condition_spec(manifest.seed, max)?;
    let shifted = apply_async(&scene, &spec)?;
    let mut rows = Vec::new();
    for (system, est) in estimators {
        let est = est.as_ref().map(|e| e as &dyn MaskEstimator);
        for out in run_synchronized(&shifted, &cfg.pipeline, est)? {
            let k = out.node_id;
            let report = out.metrics.report;
            let foreign = out
                .senders
                .iter()
                .enumerate()
                .map(|(j, &s)| ForeignSlot {
                    sender: s + 1,
                    sto_true_ms: spec.sto_ms[s] - spec.sto_ms[k],
                    sto_est_ms: out.sto_est_ms.get(j).copied().flatten(),
                })
                .collect();
            rows.push(ResultRow {
                scene_id: i,
                node_id: k + 1,
                axis: cfg.sweep.axis,
                max_value: max,
                system: *system,
                si_sdr_in: out.metrics.si_sdr_in,
                si_sdr_stage1: out.metrics.si_sdr_stage1,
                si_sdr_out: out.metrics.si_sdr_out,
                sdr: report.map(|r| r.sdr),
                sir: report.map(|r| r.sir),
                sar: report.map(|r| r.sar),
                foreign,
            });
        }
    }
    log::debug!("scene {i} done at {} {max}", cfg.sweep.axis);
    Ok(rows)
}

fn check_head(cfg: &ExperimentConfig, head: &AttnHead, path: &Path) -> Result<()> {
    let per_channel = head.config.attention && !head.config.shared_w;
    if head.n_bins() != cfg.pipeline.stft.n_bins()
        || (per_channel && head.w.len() != cfg.n_foreign())
    {
        return Err(Error::Data(format!("{} does not fit the config", path.display())));
    }
    Ok(())
}

fn load_estimators(cfg: &ExperimentConfig) -> Result<Vec<(System, Option<HeadEstimator>)>> {
    cfg.systems
        .iter()
        .map(|&system| {
            if !system.is_learned() {
                return Ok((system, None));
            }
            let path = cfg.checkpoint_path(system);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "missing checkpoint {} for {system}; run train-attn first",
                    path.display()
                )));
            }
            let head = checkpoint::load(&path)?;
            check_head(cfg, &head, &path)?;
            Ok((system, Some(HeadEstimator { head })))
        })
        .collect()
}

/// Runs every sweep condition on every scene and system. Conditions whose CSV
/// already carries the current config hash are skipped. Returns the path of
/// the merged results.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let hash = cfg.hash();
    for i in 0..cfg.n_scenes {
        let dir = cfg.scene_dir(i);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Data(format!(
                "missing scene {}; run generate first",
                dir.display()
            )));
        }
    }
    let estimators = load_estimators(cfg)?;
    let header = results_header(cfg.n_foreign());
    cfg.install(|| -> Result<()> {
        for &max in &cfg.sweep.max_values {
            let path = cfg.condition_path(max);
            if csv_hash(&path)?.as_deref() == Some(hash.as_str()) {
                log::info!("{} is up to date, skipping", path.display());
                continue;
            }
            let rows: Vec<Vec<ResultRow>> = (0..cfg.n_scenes)
                .into_par_iter()
                .map(|i| run_scene(cfg, i, max, &estimators))
                .collect::<Result<_>>()?;
            let records: Vec<_> = rows.iter().flatten().map(ResultRow::record).collect();
            write_atomic(&path, &csv_bytes(&hash, &header, &records)?)?;
            log::info!("{} {max}: {} rows", cfg.sweep.axis, records.len());
        }
        Ok(())
    })??;
    let mut all = Vec::new();
    for &max in &cfg.sweep.max_values {
        all.extend(read_results(&cfg.condition_path(max))?.iter().map(ResultRow::record));
    }
    let path = cfg.results_path();
    write_atomic(&path, &csv_bytes(&hash, &header, &all)?)?;
    Ok(path)
}

/// Parses a results CSV written by [`cmd_run`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let err = csv_err(path);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(&err)?;
    let header = reader.headers().map_err(&err)?.clone();
    let n_fixed = results_header(0).len();
    if header.len() < n_fixed || (header.len() - n_fixed) % 3 != 0 {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let n_foreign = (header.len() - n_fixed) / 3;
    if header.iter().ne(results_header(n_foreign).iter().map(String::as_str)) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let bad = |line: usize, what: &str| {
        Error::Data(format!("{}: line {line}: bad {what}", path.display()))
    };
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(&err)?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(line, &header[i])) };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let int = |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| bad(line, &header[i])) };
        let foreign = (0..n_foreign)
            .map(|j| {
                let c = n_fixed + 3 * j;
                Ok(ForeignSlot {
                    sender: int(c)?,
                    sto_true_ms: num(c + 1)?,
                    sto_est_ms: opt(c + 2)?,
                })
            })
            .collect::<Result<_>>()?;
        rows.push(ResultRow {
            scene_id: int(0)?,
            node_id: int(1)?,
            axis: parse_axis(&rec[2])?,
            max_value: num(3)?,
            system: rec[4].parse()?,
            si_sdr_in: num(5)?,
            si_sdr_stage1: num(6)?,
            si_sdr_out: num(7)?,
            sdr: opt(8)?,
            sir: opt(9)?,
            sar: opt(10)?,
            foreign,
        });
    }
    Ok(rows)
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Medians of one system under one condition. Degradations are paired
/// differences (zero-offset condition minus this one) over the same scene
/// and node, and are absent when the sweep has no zero condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub axis: SweepAxis,
    pub max_value: f64,
    pub system: System,
    pub n: usize,
    pub si_sdr_in: f64,
    pub si_sdr_stage1: f64,
    pub si_sdr_out: f64,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
    pub si_sdr_degradation: Option<f64>,
    pub sir_degradation: Option<f64>,
    pub sar_degradation: Option<f64>,
}

/// Groups result rows by condition and system, in order of appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<ReportRow> {
    let key = |r: &ResultRow| (r.axis, r.max_value.to_bits(), r.system);
    let mut groups: Vec<((SweepAxis, u64, System), Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(k, _)| *k == key(r)) {
            Some((_, g)) => g.push(r),
            None => groups.push((key(r), vec![r])),
        }
    }
    let baseline = |axis: SweepAxis, system: System| -> BTreeMap<(usize, usize), &ResultRow> {
        rows.iter()
            .filter(|r| r.axis == axis && r.system == system && r.max_value == 0.0)
            .map(|r| ((r.scene_id, r.node_id), r))
            .collect()
    };
    groups
        .into_iter()
        .map(|((axis, max_bits, system), g)| {
            let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<f64> {
                let v: Option<Vec<f64>> = g.iter().map(|r| f(r)).collect();
                median(&v?)
            };
            let base = baseline(axis, system);
            let degradation = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<f64> {
                let v: Option<Vec<f64>> = g
                    .iter()
                    .map(|r| {
                        let b = base.get(&(r.scene_id, r.node_id))?;
                        Some(f(b)? - f(r)?)
                    })
                    .collect();
                median(&v?)
            };
            ReportRow {
                axis,
                max_value: f64::from_bits(max_bits),
                system,
                n: g.len(),
                si_sdr_in: col(&|r| Some(r.si_sdr_in)).unwrap_or(f64::NAN),
                si_sdr_stage1: col(&|r| Some(r.si_sdr_stage1)).unwrap_or(f64::NAN),
                si_sdr_out: col(&|r| Some(r.si_sdr_out)).unwrap_or(f64::NAN),
                sir: col(&|r| r.sir),
                sar: col(&|r| r.sar),
                si_sdr_degradation: degradation(&|r| Some(r.si_sdr_out)),
                sir_degradation: degradation(&|r| r.sir),
                sar_degradation: degradation(&|r| r.sar),
            }
        })
        .collect()
}

/// Writes `report.csv` from `results.csv` and returns its rows.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let path = cfg.results_path();
    if !path.exists() {
        return Err(Error::Data(format!("missing {}; run first", path.display())));
    }
    let hash = csv_hash(&path)?.unwrap_or_default();
    let report = summarize(&read_results(&path)?);
    let header: Vec<String> = [
        "axis",
        "max_value",
        "system",
        "n",
        "median_si_sdr_in",
        "median_si_sdr_stage1",
        "median_si_sdr_out",
        "median_sir",
        "median_sar",
        "median_si_sdr_degradation",
        "median_sir_degradation",
        "median_sar_degradation",
    ]
    .map(String::from)
    .to_vec();
    let records: Vec<Vec<String>> = report
        .iter()
        .map(|r| {
            vec![
                r.axis.to_string(),
                r.max_value.to_string(),
                r.system.to_string(),
                r.n.to_string(),
                r.si_sdr_in.to_string(),
                r.si_sdr_stage1.to_string(),
                r.si_sdr_out.to_string(),
                fmt_opt(r.sir),
                fmt_opt(r.sar),
                fmt_opt(r.si_sdr_degradation),
                fmt_opt(r.sir_degradation),
                fmt_opt(r.sar_degradation),
            ]
        })
        .collect();
    write_atomic(&cfg.report_path(), &csv_bytes(&hash, &header, &records)?)?;
    Ok(report)
}

/// Offset of one foreign channel seen from the analyzed node. Ids are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct StoEstimate {
    pub sender: usize,
    pub sto_true_ms: f64,
    pub sto_est_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoReport {
    pub node: usize,
    /// Unpadded frame at the center of the exported similarity window.
    pub center_frame: usize,
    pub estimates: Vec<StoEstimate>,
    pub files: Vec<PathBuf>,
}

/// Delays every node of the scene at `scene_dir` by `inject_ms[k]`, runs
/// stage 1 and reads the offset of every foreign channel at `node` (0-based)
/// from the head's similarity matrices. Writes the estimates and the
/// similarity matrices of the window around the loudest reference frame
/// under `sto/`.
pub fn cmd_estimate_sto(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    scene_dir: &Path,
    node: usize,
    inject_ms: &[f64],
) -> Result<StoReport> {
    let head = checkpoint::load(checkpoint_path)?;
    let (_, scene) = read_scene(scene_dir)?;
    let n_nodes = scene.n_nodes();
    if node >= n_nodes {
        return Err(Error::Config(format!("node {} of {n_nodes}", node + 1)));
    }
    if inject_ms.len() != n_nodes || inject_ms.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config(format!(
            "{} injected offsets for {n_nodes} nodes",
            inject_ms.len()
        )));
    }
    check_head(cfg, &head, checkpoint_path)?;
    if head.w.is_empty() {
        return Err(Error::Data(format!(
            "{} has no attention weights",
            checkpoint_path.display()
        )));
    }
    // only differences matter; the earliest node serves as clock reference
    let (first, t0) = inject_ms
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least two nodes");
    let spec = AsyncSpec {
        reference_node: first,
        sro_ppm: vec![0.0; n_nodes],
        sto_ms: inject_ms.iter().map(|t| t - t0).collect(),
    };
    let shifted = apply_async(&scene, &spec)?;
    let nodes = cfg.install(|| local_stage(&shifted, &cfg.pipeline))??;
    let stacked = stack(&nodes[node])?;
    let window = head.config.window;
    let feats = stacked_features(&stacked, window);
    let hop_ms = cfg.pipeline.stft.hop_ms(scene.sample_rate());
    let offsets = recording_offsets(&feats, &head)?;
    let estimates: Vec<StoEstimate> = stacked
        .senders
        .iter()
        .zip(&offsets)
        .map(|(&s, d)| StoEstimate {
            sender: s,
            sto_true_ms: inject_ms[s] - inject_ms[node],
            sto_est_ms: d.map(|d| d as f64 * hop_ms),
        })
        .collect();

    let energy = stacked
        .reference()
        .magnitude()
        .mapv(|m| m * m)
        .sum_axis(Axis(1));
    let center_frame = energy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(t, _)| t);
    let dir = cfg.sto_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    let sims = window_similarities(&feats, &head, center_frame)?;
    for (s, sim) in stacked.senders.iter().zip(&sims) {
        let path = dir.join(format!("similarity_node{}_sender{}.csv", node + 1, s + 1));
        sim.write_csv(&path)?;
        files.push(path);
    }
    let header = ["node_id", "sender", "sto_true_ms", "sto_est_ms", "center_frame"]
        .map(String::from)
        .to_vec();
    let records: Vec<Vec<String>> = estimates
        .iter()
        .map(|e| {
            vec![
                (node + 1).to_string(),
                (e.sender + 1).to_string(),
                e.sto_true_ms.to_string(),
                fmt_opt(e.sto_est_ms),
                center_frame.to_string(),
            ]
        })
        .collect();
    let path = dir.join(format!("estimates_node{}.csv", node + 1));
    write_atomic(&path, &csv_bytes(&cfg.hash(), &header, &records)?)?;
    files.push(path);
    Ok(StoReport {
        node,
        center_frame,
        estimates,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"n_scenes": 2, "sweep": {"axis": "sro"}}"#).unwrap();
        assert_eq!(cfg.n_scenes, 2);
        assert_eq!(cfg.sweep.axis, SweepAxis::Sro);
        assert_eq!(cfg.sweep.max_values, Sweep::default().max_values);
        assert_eq!(cfg.training, TrainingConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"n_scene": 2}"#).is_err());
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"pipeline": {"mu": 1.0}}"#).is_err()
        );
    }

    #[test]
    fn hash_ignores_output_dir_and_jobs_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            jobs: 3,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sweep_must_be_sorted_and_non_negative() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.max_values = vec![0.0, 32.0, 16.0];
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.sweep.max_values = vec![-1.0, 0.0];
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.sweep.max_values = vec![8.0, 8.0];
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn duplicate_systems_and_bad_reference_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.systems = vec![System::Oracle, System::Oracle];
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            reference_node: 4,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn conditions_are_paired_across_maxima() {
        let cfg = ExperimentConfig::default();
        let a = cfg.condition_spec(5, 16.0).unwrap();
        let b = cfg.condition_spec(5, 32.0).unwrap();
        for (x, y) in a.sto_ms.iter().zip(&b.sto_ms) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert_eq!(a.sto_ms[cfg.reference_node], 0.0);
        assert!(a.sro_ppm.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn system_names_parse_back() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("cnn".parse::<System>().is_err());
    }

    fn row(scene_id: usize, max_value: f64, si: f64) -> ResultRow {
        ResultRow {
            scene_id,
            node_id: 1,
            axis: SweepAxis::Sto,
            max_value,
            system: System::Oracle,
            si_sdr_in: 0.0,
            si_sdr_stage1: 1.0,
            si_sdr_out: si,
            sdr: None,
            sir: None,
            sar: None,
            foreign: vec![ForeignSlot {
                sender: 2,
                sto_true_ms: 4.5,
                sto_est_ms: None,
            }],
        }
    }

    #[test]
    fn results_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut rows = vec![row(0, 0.0, 10.0), row(1, 8.0, 7.25)];
        rows[1].sir = Some(3.5);
        rows[1].foreign[0].sto_est_ms = Some(-16.0);
        let records: Vec<_> = rows.iter().map(ResultRow::record).collect();
        fs::write(&path, csv_bytes("abc", &results_header(1), &records).unwrap()).unwrap();
        assert_eq!(csv_hash(&path).unwrap().as_deref(), Some("abc"));
        assert_eq!(read_results(&path).unwrap(), rows);
    }

    #[test]
    fn summary_pairs_degradations_by_scene_and_node() {
        let rows = vec![
            row(0, 0.0, 10.0),
            row(1, 0.0, 12.0),
            row(2, 0.0, 8.0),
            row(0, 8.0, 9.0),
            row(1, 8.0, 10.0),
            row(2, 8.0, 5.0),
        ];
        let report = summarize(&rows);
        assert_eq!(report.len(), 2);
        assert_eq!(report[0].si_sdr_out, 10.0);
        assert_eq!(report[0].si_sdr_degradation, Some(0.0));
        assert_eq!(report[1].si_sdr_out, 9.0);
        assert_eq!(report[1].si_sdr_degradation, Some(2.0));
        assert_eq!(report[1].sir, None);
    }

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
