//! Synthetic alignment task: a sparse random "target" spectrogram seen by a
//! noisy reference channel and by foreign channels that are cleaner but
//! shifted by whole frames. The label is the reference's ratio mask.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Recording, DEFAULT_WINDOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_bins: usize,
    pub window: usize,
    pub n_foreign: usize,
    /// Frame shifts drawn uniformly per foreign channel; positive delays the
    /// foreign channel.
    pub shifts: Vec<i64>,
    /// Probability that a target bin is active in an active frame.
    pub density: f64,
    /// Probability that a target frame is active at all.
    pub active_prob: f64,
    pub ref_noise: f64,
    pub foreign_noise: f64,
    /// Target confined to the lower half of the bins, noise to the upper half.
    pub separable: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_bins: 32,
            window: DEFAULT_WINDOW,
            n_foreign: 1,
            shifts: (-7..=7).collect(),
            density: 0.3,
            active_prob: 0.85,
            ref_noise: 1.0,
            foreign_noise: 0.1,
            separable: false,
        }
    }
}

fn noise(
    rng: &mut ChaCha8Rng,
    t: usize,
    f: usize,
    bins: std::ops::Range<usize>,
    scale: f64,
) -> Array2<f64> {
    let mut n = Array2::<f64>::zeros((t, f));
    for mut row in n.rows_mut() {
        for b in bins.clone() {
            row[b] = scale * rng.random::<f64>();
        }
    }
    n
}

/// `n_items` independent windows and the shift of every foreign channel.
pub fn toy_dataset(cfg: &ToyConfig, n_items: usize, seed: u64) -> Result<(Dataset, Vec<Vec<i64>>)> {
    if cfg.shifts.is_empty() || cfg.n_bins < 2 || cfg.window == 0 {
        return Err(Error::Config(format!("invalid toy config {cfg:?}")));
    }
    let max_shift = cfg.shifts.iter().map(|d| d.unsigned_abs()).max().unwrap_or(0) as usize;
    let (f, t) = (cfg.n_bins, cfg.window);
    let half = f / 2;
    let target_bins = if cfg.separable { 0..half } else { 0..f };
    let noise_bins = if cfg.separable { half..f } else { 0..f };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::new(t);
    let mut shifts = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let len = t + 2 * max_shift;
        let mut src = Array2::<f64>::zeros((len, f));
        for mut row in src.rows_mut() {
            if rng.random::<f64>() >= cfg.active_prob {
                continue;
            }
            for b in target_bins.clone() {
                if rng.random::<f64>() < cfg.density {
                    row[b] = rng.random_range(0.5..1.5);
                }
            }
        }
        let n_ref = noise(&mut rng, t, f, noise_bins.clone(), cfg.ref_noise);
        let s_ref = src.slice(ndarray::s![max_shift..max_shift + t, ..]).to_owned();
        let reference = &s_ref + &n_ref;
        let target = ndarray::Zip::from(&s_ref)
            .and(&n_ref)
            .map_collect(|s, n| if s + n > 0.0 { s / (s + n) } else { 0.0 });
        let mut channels = vec![reference];
        let mut item_shifts = Vec::with_capacity(cfg.n_foreign);
        for _ in 0..cfg.n_foreign {
            let d = cfg.shifts[rng.random_range(0..cfg.shifts.len())];
            let start = (max_shift as i64 - d) as usize;
            let shifted = src.slice(ndarray::s![start..start + t, ..]).to_owned();
            channels.push(shifted + noise(&mut rng, t, f, noise_bins.clone(), cfg.foreign_noise));
            item_shifts.push(d);
        }
        data.push(Recording { channels, target }, 1)?;
        shifts.push(item_shifts);
    }
    Ok((data, shifts))
}
