//! Two-stage distributed enhancement.
//!
//! Stage 1 filters each node's own microphones into a compressed signal
//! `z_k = w_kk^H y_k`. The compressed signals are exchanged (in the STFT
//! domain) so that every node holds the `K - 1` foreign ones. Stage 2 filters
//! the stacked input `[y_k, z_-k]` with a second rank-1 GEVD MWF whose
//! reference is the node's first microphone.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asynchrony::{apply_async, AsyncSpec};
use crate::error::{Error, Result};
use crate::metrics::{si_sdr, BssEval, MetricReport, DEFAULT_FILTER_LEN};
use crate::mwf::{
    apply_beamformer, estimate_covariances, ideal_ratio_mask, rank1_gevd_mwf, BeamWeights, TfMask,
    DEFAULT_LOADING,
};
use crate::scene::SceneSignals;
use crate::signal::{istft, stft, Spectrogram, StftConfig, TimeSignal};

/// Supplies the stage-2 mask of a node from its stacked input.
pub trait MaskEstimator: Sync {
    fn estimate(&self, node_id: usize, stacked: &StackedInput) -> Result<TfMask>;

    /// Offset of every foreign channel in ms (positive when it lags the
    /// reference), for estimators that align their inputs. Empty otherwise.
    fn offsets_ms(&self, _stacked: &StackedInput) -> Result<Vec<Option<f64>>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSet {
    SiSdr,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub mu_local: f64,
    pub mu_global: f64,
    pub loading: f64,
    pub metrics: MetricSet,
    pub filter_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            mu_local: 1.0,
            mu_global: 1.0,
            loading: DEFAULT_LOADING,
            metrics: MetricSet::Full,
            filter_len: DEFAULT_FILTER_LEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub n_nodes: usize,
    /// Local microphone spectrograms; channel 0 is the reference.
    pub local_mics: Vec<Spectrogram>,
    /// Ground-truth target and noise images at the reference microphone.
    pub target_ref: Spectrogram,
    pub noise_ref: Spectrogram,
    pub w_local: Option<BeamWeights>,
    pub z_out: Option<Spectrogram>,
    pub inbox: BTreeMap<usize, Spectrogram>,
}

impl NodeState {
    pub fn new(
        node_id: usize,
        n_nodes: usize,
        local_mics: Vec<Spectrogram>,
        target_ref: Spectrogram,
        noise_ref: Spectrogram,
    ) -> Result<Self> {
        if local_mics.is_empty() {
            return Err(Error::Node(node_id, "no microphones".into()));
        }
        Ok(Self {
            node_id,
            n_nodes,
            local_mics,
            target_ref,
            noise_ref,
            w_local: None,
            z_out: None,
            inbox: BTreeMap::new(),
        })
    }

    /// Oracle IRM of the reference microphone.
    pub fn oracle_mask(&self) -> Result<TfMask> {
        ideal_ratio_mask(&self.target_ref, &self.noise_ref)
    }
}

/// `[y_k1 .. y_kM, z_1 .. z_(k-1), z_(k+1) .. z_K]`.
#[derive(Debug, Clone)]
pub struct StackedInput {
    pub channels: Vec<Spectrogram>,
    pub n_local: usize,
    /// Sender id of every foreign channel, in stacking order.
    pub senders: Vec<usize>,
}

impl StackedInput {
    pub fn reference(&self) -> &Spectrogram {
        &self.channels[0]
    }

    pub fn foreign(&self) -> &[Spectrogram] {
        &self.channels[self.n_local..]
    }
}

/// Runs the local MWF with the node's oracle mask and stores `z_k`.
pub fn stage1_local(node: &mut NodeState, mu: f64, loading: f64) -> Result<Spectrogram> {
    let mask = node.oracle_mask()?;
    stage1_with_mask(node, &mask, mu, loading)
}

pub fn stage1_with_mask(
    node: &mut NodeState,
    mask: &TfMask,
    mu: f64,
    loading: f64,
) -> Result<Spectrogram> {
    let cov = estimate_covariances(&node.local_mics, mask, loading)?;
    let w = rank1_gevd_mwf(&cov, mu, 0)?;
    let z = apply_beamformer(&w, &node.local_mics)?;
    node.w_local = Some(w);
    node.z_out = Some(z.clone());
    Ok(z)
}

/// Delivers every node's `z_out` to all other nodes. Returns the number of
/// messages sent, `K (K - 1)`.
pub fn exchange(nodes: &mut [NodeState]) -> Result<usize> {
    let outgoing: Vec<(usize, Spectrogram)> = nodes
        .iter()
        .map(|n| {
            n.z_out
                .clone()
                .map(|z| (n.node_id, z))
                .ok_or_else(|| Error::Node(n.node_id, "stage 1 has not produced z".into()))
        })
        .collect::<Result<_>>()?;
    let mut sent = 0;
    for node in nodes.iter_mut() {
        node.inbox.clear();
        for (sender, z) in &outgoing {
            if *sender != node.node_id {
                node.inbox.insert(*sender, z.clone());
                sent += 1;
            }
        }
    }
    Ok(sent)
}

pub fn stack(node: &NodeState) -> Result<StackedInput> {
    let expected = node.n_nodes.saturating_sub(1);
    if node.inbox.len() != expected {
        return Err(Error::Node(
            node.node_id,
            format!("inbox holds {} of {expected} signals", node.inbox.len()),
        ));
    }
    let mut channels = node.local_mics.clone();
    channels.extend(node.inbox.values().cloned());
    Ok(StackedInput {
        channels,
        n_local: node.local_mics.len(),
        senders: node.inbox.keys().copied().collect(),
    })
}

/// Global MWF on the stacked input; the mask comes from `estimator`, or is the
/// node's oracle IRM when `estimator` is `None`.
pub fn stage2_global(
    node: &NodeState,
    estimator: Option<&dyn MaskEstimator>,
    mu: f64,
    loading: f64,
) -> Result<Spectrogram> {
    filter_stacked(node, &stack(node)?, estimator, mu, loading)
}

fn filter_stacked(
    node: &NodeState,
    stacked: &StackedInput,
    estimator: Option<&dyn MaskEstimator>,
    mu: f64,
    loading: f64,
) -> Result<Spectrogram> {
    let mask = match estimator {
        Some(e) => e.estimate(node.node_id, stacked)?,
        None => node.oracle_mask()?,
    };
    let cov = estimate_covariances(&stacked.channels, &mask, loading)?;
    let w = rank1_gevd_mwf(&cov, mu, 0)?;
    apply_beamformer(&w, &stacked.channels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub si_sdr_in: f64,
    pub si_sdr_stage1: f64,
    pub si_sdr_out: f64,
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct NodeOutput {
    pub node_id: usize,
    pub enhanced: TimeSignal,
    pub compressed: TimeSignal,
    pub metrics: NodeMetrics,
    /// Sender of every foreign channel, in stacking order.
    pub senders: Vec<usize>,
    /// Offsets reported by the estimator, per foreign channel (empty when it
    /// reports none).
    pub sto_est_ms: Vec<Option<f64>>,
}

/// Zeros added before and after every signal so that the first and last
/// samples are covered by full windows.
fn padding(cfg: &StftConfig) -> usize {
    cfg.frame_len
}

fn padded_stft(x: &TimeSignal, cfg: &StftConfig) -> Result<Spectrogram> {
    let pad = padding(cfg);
    let mut samples = vec![0.0; x.len() + 2 * pad];
    samples[pad..pad + x.len()].copy_from_slice(x.samples());
    stft(&TimeSignal::new(samples, x.sample_rate())?, cfg)
}

/// Inverse of the padded analysis, cropped back to `len` samples.
pub fn synthesize(spec: &Spectrogram, cfg: &StftConfig, len: usize) -> Result<TimeSignal> {
    let pad = padding(cfg);
    let y = istft(spec, cfg)?;
    let end = (pad + len).min(y.len());
    let mut out = y.samples()[pad.min(end)..end].to_vec();
    out.resize(len, 0.0);
    TimeSignal::new(out, y.sample_rate())
}

/// STFT-domain view of a (possibly desynchronized) scene, one node per entry.
/// Signals are zero-padded by one frame on both sides before analysis.
pub fn build_nodes(scene: &SceneSignals, cfg: &StftConfig) -> Result<Vec<NodeState>> {
    let k = scene.n_nodes();
    (0..k)
        .into_par_iter()
        .map(|node| {
            let mics = scene
                .mixture(node)
                .iter()
                .map(|x| padded_stft(x, cfg))
                .collect::<Result<Vec<_>>>()?;
            let t = padded_stft(&scene.target(node)[0], cfg)?;
            let n = padded_stft(&scene.noise(node)[0], cfg)?;
            NodeState::new(node, k, mics, t, n)
        })
        .collect()
}

fn node_metrics(
    scene: &SceneSignals,
    node: usize,
    enhanced: &TimeSignal,
    compressed: &TimeSignal,
    cfg: &PipelineConfig,
) -> Result<NodeMetrics> {
    let target = &scene.target(node)[0];
    let noise = &scene.noise(node)[0];
    let mixture = &scene.mixture(node)[0];
    let report = match cfg.metrics {
        MetricSet::SiSdr => None,
        MetricSet::Full => Some(BssEval::new(target, noise, cfg.filter_len)?.evaluate(enhanced)?),
    };
    Ok(NodeMetrics {
        si_sdr_in: si_sdr(mixture, target)?,
        si_sdr_stage1: si_sdr(compressed, target)?,
        si_sdr_out: si_sdr(enhanced, target)?,
        report,
    })
}

/// Analysis, stage 1 with oracle masks at every node, and exchange of the
/// compressed signals.
pub fn local_stage(scene: &SceneSignals, cfg: &PipelineConfig) -> Result<Vec<NodeState>> {
    let mut nodes = build_nodes(scene, &cfg.stft)?;
    nodes
        .par_iter_mut()
        .map(|n| stage1_local(n, cfg.mu_local, cfg.loading).map(|_| ()))
        .collect::<Result<Vec<()>>>()?;
    exchange(&mut nodes)?;
    Ok(nodes)
}

/// Desynchronizes the scene, runs both stages at every node and scores each
/// node against its own reference-microphone target image.
pub fn run_pipeline(
    scene: &SceneSignals,
    spec: &AsyncSpec,
    cfg: &PipelineConfig,
    estimator: Option<&dyn MaskEstimator>,
) -> Result<Vec<NodeOutput>> {
    let scene = apply_async(scene, spec)?;
    run_synchronized(&scene, cfg, estimator)
}

/// Same as [`run_pipeline`] on signals used as given.
pub fn run_synchronized(
    scene: &SceneSignals,
    cfg: &PipelineConfig,
    estimator: Option<&dyn MaskEstimator>,
) -> Result<Vec<NodeOutput>> {
    let len = scene.len();
    let nodes = local_stage(scene, cfg)?;
    nodes
        .par_iter()
        .map(|n| {
            let stacked = stack(n)?;
            let out = filter_stacked(n, &stacked, estimator, cfg.mu_global, cfg.loading)?;
            let sto_est_ms = match estimator {
                Some(e) => e.offsets_ms(&stacked)?,
                None => Vec::new(),
            };
            let enhanced = synthesize(&out, &cfg.stft, len)?;
            let z = n.z_out.as_ref().expect("stage 1 ran");
            let compressed = synthesize(z, &cfg.stft, len)?;
            let metrics = node_metrics(scene, n.node_id, &enhanced, &compressed, cfg)?;
            Ok(NodeOutput {
                node_id: n.node_id,
                enhanced,
                compressed,
                metrics,
                senders: stacked.senders,
                sto_est_ms,
            })
        })
        .collect()
}
