//! Magnitude features of a node's stacked input and the mask estimator that
//! runs a trained head over every frame.

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;

use super::{
    estimate_sto_frames, predict, score, similarities, similarity, AttnHead, AttnInput, Recording,
    SimilarityMatrix,
};
use crate::asynchrony::{apply_async, AsyncSpec};
use crate::error::{Error, Result};
use crate::mwf::TfMask;
use crate::scene::SceneSignals;
use crate::tango::{local_stage, stack, MaskEstimator, PipelineConfig, StackedInput};

/// Magnitudes of the reference microphone followed by the foreign compressed
/// signals. Every bin is divided by the mean reference magnitude in that bin,
/// so that features do not depend on level or spectral tilt, and zero-padded by `window / 2` frames at both
/// ends so that every frame is the middle of a full window.
pub fn stacked_features(stacked: &StackedInput, window: usize) -> Vec<Array2<f64>> {
    let mut chans = vec![stacked.reference().magnitude()];
    chans.extend(stacked.foreign().iter().map(|z| z.magnitude()));
    let level = chans[0].mean_axis(Axis(0)).expect("at least one frame");
    let gain = level.mapv(|l| if l > 0.0 { 1.0 / l } else { 1.0 });
    chans.iter().map(|c| pad_frames(&(c * &gain), window / 2)).collect()
}

fn pad_frames(x: &Array2<f64>, pad: usize) -> Array2<f64> {
    let (t, f) = x.dim();
    let mut out = Array2::zeros((t + 2 * pad, f));
    out.slice_mut(s![pad..pad + t, ..]).assign(x);
    out
}

/// Middle-frame masks of every window of padded features.
pub fn predict_frames(channels: &[Array2<f64>], head: &AttnHead) -> Result<Array2<f64>> {
    let window = head.config.window;
    let total = channels
        .first()
        .map(|c| c.nrows())
        .ok_or_else(|| Error::Shape("no feature channels".into()))?;
    if total < window {
        return Err(Error::Shape(format!("{total} padded frames for window {window}")));
    }
    let rows: Vec<_> = (0..=total - window)
        .into_par_iter()
        .map(|t| {
            let views = channels.iter().map(|c| c.slice(s![t..t + window, ..])).collect();
            predict(&AttnInput::new(views)?, head)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Stage-2 masks from a trained head.
#[derive(Debug, Clone)]
pub struct HeadEstimator {
    pub head: AttnHead,
}

impl MaskEstimator for HeadEstimator {
    fn estimate(&self, _node_id: usize, stacked: &StackedInput) -> Result<TfMask> {
        let feats = stacked_features(stacked, self.head.config.window);
        let mask = predict_frames(&feats, &self.head)?;
        TfMask::new(mask.mapv(|m| m.clamp(0.0, 1.0)))
    }

    fn offsets_ms(&self, stacked: &StackedInput) -> Result<Vec<Option<f64>>> {
        if !self.head.config.attention {
            return Ok(Vec::new());
        }
        let r = stacked.reference();
        let hop_ms = 1000.0 * r.hop as f64 / r.sample_rate as f64;
        let feats = stacked_features(stacked, self.head.config.window);
        Ok(recording_offsets(&feats, &self.head)?
            .into_iter()
            .map(|d| d.map(|d| d as f64 * hop_ms))
            .collect())
    }
}

fn mode(values: impl IntoIterator<Item = i64>) -> Option<i64> {
    let mut counts = std::collections::BTreeMap::<i64, usize>::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let mut modes = counts.iter().filter(|(_, c)| **c == top);
    let (v, _) = modes.next()?;
    modes.next().is_none().then_some(*v)
}

/// Offset of every foreign channel in frames over a whole recording: the
/// mode of the per-window read-outs (windows whose read-out is undetermined
/// are skipped). `channels` are padded features, reference first.
pub fn recording_offsets(channels: &[Array2<f64>], head: &AttnHead) -> Result<Vec<Option<i64>>> {
    let window = head.config.window;
    let reference = channels
        .first()
        .ok_or_else(|| Error::Shape("no feature channels".into()))?;
    let total = reference.nrows();
    if total < window {
        return Err(Error::Shape(format!("{total} padded frames for window {window}")));
    }
    channels[1..]
        .iter()
        .enumerate()
        .map(|(j, c)| {
            // scores of all frame pairs at once; windows are diagonal blocks
            let raw = score(reference.view(), c.view(), head.w_for(j)?.view())?;
            let per_window = (0..=total - window).filter_map(|t| {
                let block = raw.slice(s![t..t + window, t..t + window]).to_owned();
                estimate_sto_frames(&similarity(&block))
            });
            Ok(mode(per_window))
        })
        .collect()
}

/// Similarity matrices of the window centered on padded frame `center + window / 2`,
/// i.e. on unpadded frame `center`.
pub fn window_similarities(
    channels: &[Array2<f64>],
    head: &AttnHead,
    center: usize,
) -> Result<Vec<SimilarityMatrix>> {
    let window = head.config.window;
    let total = channels.first().map_or(0, |c| c.nrows());
    if center + window > total {
        return Err(Error::InvalidArgument(format!(
            "frame {center} has no full window in {total} padded frames"
        )));
    }
    let views = channels
        .iter()
        .map(|c| c.slice(s![center..center + window, ..]))
        .collect();
    similarities(&AttnInput::new(views)?, head)
}

/// Desynchronizes `scene`, runs stage 1 with oracle masks and returns one
/// training recording per node: stacked features and the node's oracle
/// reference mask (padded like the features).
pub fn scene_recordings(
    scene: &SceneSignals,
    spec: &AsyncSpec,
    cfg: &PipelineConfig,
    window: usize,
) -> Result<Vec<Recording>> {
    let scene = apply_async(scene, spec)?;
    local_stage(&scene, cfg)?
        .iter()
        .map(|n| {
            let channels = stacked_features(&stack(n)?, window);
            let target = pad_frames(n.oracle_mask()?.values(), window / 2);
            Ok(Recording { channels, target })
        })
        .collect()
}
