//! Sampling-rate offsets (SRO) and sampling-time offsets (STO) between nodes.
//!
//! Every microphone of a node shares its node's clock, so a node's channels
//! receive the same resampling and the same delay. The reference node is left
//! untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneSignals;
use crate::signal::{resample_fractional, TimeSignal};

/// SRO values, in ppm, used for the robustness sweep.
pub const SRO_GRID_PPM: [f64; 6] = [20.0, 50.0, 100.0, 200.0, 400.0, 800.0];
/// STO values, in ms, used for the robustness sweep.
pub const STO_GRID_MS: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];

/// Which offset a sweep varies; the other one stays zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Sro,
    Sto,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sro => "sro",
            SweepAxis::Sto => "sto",
        }
    }

    /// Offsets of one sweep condition: SRO in ppm or STO in ms up to `max`.
    pub fn spec(
        self,
        n_nodes: usize,
        reference_node: usize,
        max: f64,
        seed: u64,
    ) -> Result<AsyncSpec> {
        match self {
            SweepAxis::Sro => sample_async_spec(n_nodes, reference_node, max, 0.0, seed),
            SweepAxis::Sto => sample_async_spec(n_nodes, reference_node, 0.0, max, seed),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-node clock offsets relative to `reference_node` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsyncSpec {
    pub reference_node: usize,
    pub sro_ppm: Vec<f64>,
    pub sto_ms: Vec<f64>,
}

impl AsyncSpec {
    pub fn synchronous(n_nodes: usize, reference_node: usize) -> Self {
        Self {
            reference_node,
            sro_ppm: vec![0.0; n_nodes],
            sto_ms: vec![0.0; n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.sro_ppm.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sro_ppm.len();
        if self.sto_ms.len() != n || self.reference_node >= n {
            return Err(Error::Shape(format!(
                "async spec with {n} SROs, {} STOs and reference node {}",
                self.sto_ms.len(),
                self.reference_node
            )));
        }
        if self.sro_ppm[self.reference_node] != 0.0 || self.sto_ms[self.reference_node] != 0.0 {
            return Err(Error::InvalidArgument(
                "reference node must have zero offsets".into(),
            ));
        }
        if let Some(t) = self.sto_ms.iter().find(|t| **t < 0.0 || !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid STO {t} ms")));
        }
        Ok(())
    }
}

/// Draws `u * max` per non-reference node with `u ~ U[0, 1]`.
///
/// SRO and STO use separate streams derived from `seed`, so two specs drawn
/// with the same seed but different maxima differ only in scale.
pub fn sample_async_spec(
    n_nodes: usize,
    reference_node: usize,
    sro_max_ppm: f64,
    sto_max_ms: f64,
    seed: u64,
) -> Result<AsyncSpec> {
    if reference_node >= n_nodes {
        return Err(Error::InvalidArgument(format!(
            "reference node {reference_node} out of {n_nodes} nodes"
        )));
    }
    if sro_max_ppm < 0.0 || sto_max_ms < 0.0 {
        return Err(Error::InvalidArgument("negative offset maximum".into()));
    }
    let mut sro_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sto_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4f00);
    let mut spec = AsyncSpec::synchronous(n_nodes, reference_node);
    for k in (0..n_nodes).filter(|k| *k != reference_node) {
        spec.sro_ppm[k] = sro_rng.random::<f64>() * sro_max_ppm;
        spec.sto_ms[k] = sto_rng.random::<f64>() * sto_max_ms;
    }
    Ok(spec)
}

/// Delays by `round(tau_ms * fs / 1000)` samples: zeros are prepended and the
/// tail is cut to keep the length.
pub fn apply_sto(signal: &TimeSignal, tau_ms: f64) -> Result<TimeSignal> {
    if tau_ms < 0.0 || !tau_ms.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid STO {tau_ms} ms")));
    }
    let shift = (tau_ms * signal.sample_rate() as f64 / 1000.0).round() as usize;
    let len = signal.len();
    let mut out = vec![0.0; len];
    if shift < len {
        out[shift..].copy_from_slice(&signal.samples()[..len - shift]);
    }
    TimeSignal::new(out, signal.sample_rate())
}

/// Resamples with ratio `1 + eps_ppm * 1e-6`: the output at sample `t` is the
/// input at `t * ratio`, so a positive offset makes the node run ahead by
/// `t * eps` samples.
pub fn apply_sro(signal: &TimeSignal, eps_ppm: f64) -> Result<TimeSignal> {
    resample_fractional(signal, 1.0 + eps_ppm * 1e-6)
}

fn desync_channel(x: &TimeSignal, sro_ppm: f64, sto_ms: f64) -> Result<TimeSignal> {
    let len = x.len();
    let y = if sro_ppm != 0.0 {
        apply_sro(x, sro_ppm)?.with_len(len)
    } else {
        x.clone()
    };
    if sto_ms != 0.0 {
        apply_sto(&y, sto_ms)
    } else {
        Ok(y)
    }
}

/// Applies SRO then STO to every image of every node. Lengths are preserved
/// and mixtures are rebuilt as the sum of the shifted images.
pub fn apply_async(scene: &SceneSignals, spec: &AsyncSpec) -> Result<SceneSignals> {
    spec.validate()?;
    if spec.n_nodes() != scene.n_nodes() {
        return Err(Error::Shape(format!(
            "async spec for {} nodes, scene has {}",
            spec.n_nodes(),
            scene.n_nodes()
        )));
    }
    let mut target = Vec::with_capacity(scene.n_nodes());
    let mut noise = Vec::with_capacity(scene.n_nodes());
    for k in 0..scene.n_nodes() {
        let (sro, sto) = (spec.sro_ppm[k], spec.sto_ms[k]);
        target.push(
            scene
                .target(k)
                .iter()
                .map(|x| desync_channel(x, sro, sto))
                .collect::<Result<Vec<_>>>()?,
        );
        noise.push(
            scene
                .noise(k)
                .iter()
                .map(|x| desync_channel(x, sro, sto))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    SceneSignals::from_images(target, noise)
}
