//! On-disk scene layout: `manifest.json` plus one mono WAV per microphone for
//! the mixture (`node{k}_mic{m}.wav`, 1-based) and for the target and noise
//! images (`target/…`, `noise/…`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RoomGeometry, ScenePlacement, SceneSignals};
use crate::asynchrony::{AsyncSpec, SweepAxis};
use crate::error::{Error, Result};
use crate::signal::wav::{read_wav_expect, write_wav, WavFormat};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub n_samples: usize,
    pub room: RoomGeometry,
    pub placement: ScenePlacement,
    pub snr_db: Option<f64>,
    pub max_order: usize,
    pub target: SourceSpec,
    pub noise: SourceSpec,
    /// Clock offsets drawn for every sweep condition known at generation time.
    #[serde(default)]
    pub conditions: Vec<ConditionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub axis: SweepAxis,
    pub max_value: f64,
    pub spec: AsyncSpec,
}

/// File name of microphone `mic` of node `node` (both 0-based).
pub fn mic_file_name(node: usize, mic: usize) -> String {
    format!("node{}_mic{}.wav", node + 1, mic + 1)
}

impl SceneManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Writes mixture, target and noise WAVs of every microphone under `dir`.
pub fn write_scene_audio(dir: &Path, signals: &SceneSignals, format: WavFormat) -> Result<()> {
    for sub in ["target", "noise"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for k in 0..signals.n_nodes() {
        for m in 0..signals.n_mics(k) {
            let name = mic_file_name(k, m);
            write_wav(&dir.join(&name), &signals.mixture(k)[m..=m], format)?;
            write_wav(
                &dir.join("target").join(&name),
                &signals.target(k)[m..=m],
                format,
            )?;
            write_wav(
                &dir.join("noise").join(&name),
                &signals.noise(k)[m..=m],
                format,
            )?;
        }
    }
    Ok(())
}

fn read_mono(path: &Path, fs: u32) -> Result<crate::signal::TimeSignal> {
    let mut ch = read_wav_expect(path, fs)?;
    if ch.len() != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            ch.len()
        )));
    }
    Ok(ch.remove(0))
}

/// Loads the manifest and the target/noise images of a scene directory.
pub fn read_scene(dir: &Path) -> Result<(SceneManifest, SceneSignals)> {
    let manifest = SceneManifest::read(dir)?;
    let fs = manifest.sample_rate;
    let mut target = Vec::new();
    let mut noise = Vec::new();
    for (k, mics) in manifest.placement.mic_positions.iter().enumerate() {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for m in 0..mics.len() {
            let name = mic_file_name(k, m);
            t.push(read_mono(&dir.join("target").join(&name), fs)?);
            n.push(read_mono(&dir.join("noise").join(&name), fs)?);
        }
        target.push(t);
        noise.push(n);
    }
    let signals = SceneSignals::from_images(target, noise)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    if signals.len() != manifest.n_samples {
        return Err(Error::Data(format!(
            "{}: {} samples on disk, manifest says {}",
            dir.display(),
            signals.len(),
            manifest.n_samples
        )));
    }
    Ok((manifest, signals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_scene, sample_scene, synth};
    use crate::signal::SAMPLE_RATE;

    #[test]
    fn scene_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (room, placement) = sample_scene(11).unwrap();
        let len = 5 * SAMPLE_RATE as usize;
        let t = synth::speech_like(1, len, SAMPLE_RATE);
        let n = synth::noise_like(2, len, SAMPLE_RATE);
        let signals = render_scene(&placement, &room, &t, &n, Some(2.0), 1).unwrap();
        let manifest = SceneManifest {
            scene_id: 3,
            seed: 11,
            sample_rate: SAMPLE_RATE,
            n_samples: len,
            room,
            placement,
            snr_db: Some(2.0),
            max_order: 1,
            target: SourceSpec::Synthetic { seed: 1 },
            noise: SourceSpec::Synthetic { seed: 2 },
            conditions: vec![ConditionSpec {
                axis: SweepAxis::Sto,
                max_value: 8.0,
                spec: AsyncSpec::synchronous(4, 0),
            }],
        };
        manifest.write(dir.path()).unwrap();
        write_scene_audio(dir.path(), &signals, WavFormat::Float32).unwrap();
        assert!(dir.path().join("node4_mic4.wav").exists());
        let (m2, s2) = read_scene(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        for k in 0..4 {
            for m in 0..4 {
                let a = signals.target(k)[m].samples();
                let b = s2.target(k)[m].samples();
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
    }
}
