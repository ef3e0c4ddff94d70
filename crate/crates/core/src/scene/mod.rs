//! Random shoebox scenes: geometry, image-source room impulse responses and
//! per-microphone target/noise images.
//!
//! Every scene has one target and one noise source, and `n_nodes` nodes of four
//! microphones laid out as a horizontal 5 cm square around the node center.
//! Sources and microphones keep 0.5 m from the walls and from each other.

pub mod manifest;
pub mod synth;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{fft_convolve, sinc, TimeSignal};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_MAX_ORDER: usize = 6;
const MAX_REJECTIONS: usize = 10_000;
/// Half-width in samples of the windowed sinc used to place each arrival.
pub const RIR_KERNEL_HALF_WIDTH: usize = 32;

pub type Point = [f64; 3];

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomGeometry {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Energy absorption coefficient shared by all six surfaces, in (0, 1].
    pub absorption: f64,
}

impl RoomGeometry {
    pub fn dims(&self) -> Point {
        [self.length, self.width, self.height]
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(self.dims()).all(|(x, d)| *x >= 0.0 && *x <= d)
    }

    pub fn wall_distance(&self, p: &Point) -> f64 {
        p.iter()
            .zip(self.dims())
            .map(|(x, d)| x.min(d - x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Pressure reflection coefficient per bounce.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub target_pos: Point,
    pub noise_pos: Point,
    pub node_centers: Vec<Point>,
    /// `mic_positions[node][mic]`.
    pub mic_positions: Vec<Vec<Point>>,
}

impl ScenePlacement {
    pub fn n_nodes(&self) -> usize {
        self.node_centers.len()
    }

    /// Smallest distance involved in the placement constraints.
    pub fn min_clearance(&self, room: &RoomGeometry) -> f64 {
        let sources = [self.target_pos, self.noise_pos];
        let mut d = distance(&sources[0], &sources[1]);
        for p in sources.iter().chain(self.mic_positions.iter().flatten()) {
            d = d.min(room.wall_distance(p));
        }
        for s in &sources {
            for c in &self.node_centers {
                d = d.min(distance(s, c));
            }
            for m in self.mic_positions.iter().flatten() {
                d = d.min(distance(s, m));
            }
        }
        for (i, a) in self.node_centers.iter().enumerate() {
            for b in &self.node_centers[i + 1..] {
                d = d.min(distance(a, b));
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub absorption_range: (f64, f64),
    pub n_nodes: usize,
    pub mics_per_node: usize,
    /// Side of the square microphone layout within a node, in meters.
    pub mic_spacing: f64,
    pub min_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            length_range: (3.0, 8.0),
            width_range: (3.0, 5.0),
            height_range: (2.0, 3.0),
            absorption_range: (0.3, 0.8),
            n_nodes: 4,
            mics_per_node: 4,
            mic_spacing: 0.05,
            min_distance: 0.5,
        }
    }
}

fn mic_offsets(n: usize, spacing: f64) -> Vec<Point> {
    let h = spacing / 2.0;
    let square = [[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]];
    (0..n).map(|m| square[m % 4]).collect()
}

/// Draws a room and a valid placement, deterministically per seed.
pub fn sample_scene(seed: u64) -> Result<(RoomGeometry, ScenePlacement)> {
    sample_scene_with(seed, &SceneConfig::default())
}

pub fn sample_scene_with(seed: u64, cfg: &SceneConfig) -> Result<(RoomGeometry, ScenePlacement)> {
    if cfg.mics_per_node > 4 {
        return Err(Error::InvalidArgument(
            "at most four microphones per node are supported".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = RoomGeometry {
        length: rng.random_range(cfg.length_range.0..=cfg.length_range.1),
        width: rng.random_range(cfg.width_range.0..=cfg.width_range.1),
        height: rng.random_range(cfg.height_range.0..=cfg.height_range.1),
        absorption: rng.random_range(cfg.absorption_range.0..=cfg.absorption_range.1),
    };
    let offsets = mic_offsets(cfg.mics_per_node, cfg.mic_spacing);
    let margin = cfg.min_distance;
    let dims = room.dims();
    let draw = |extra: f64, rng: &mut ChaCha8Rng| -> Point {
        let mut p = [0.0; 3];
        for (i, v) in p.iter_mut().enumerate() {
            let pad = if i < 2 { margin + extra } else { margin };
            *v = rng.random_range(pad..=dims[i] - pad);
        }
        p
    };
    let half_diag = cfg.mic_spacing / 2.0;
    for _ in 0..MAX_REJECTIONS {
        let target_pos = draw(0.0, &mut rng);
        let noise_pos = draw(0.0, &mut rng);
        let node_centers: Vec<Point> = (0..cfg.n_nodes)
            .map(|_| draw(half_diag, &mut rng))
            .collect();
        let mic_positions = node_centers
            .iter()
            .map(|c| {
                offsets
                    .iter()
                    .map(|o| [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
                    .collect()
            })
            .collect();
        let placement = ScenePlacement {
            target_pos,
            noise_pos,
            node_centers,
            mic_positions,
        };
        if placement.min_clearance(&room) >= margin {
            return Ok((room, placement));
        }
    }
    Err(Error::PlacementFailed(MAX_REJECTIONS))
}

/// One propagation path from an image source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub image: Point,
    pub delay_samples: f64,
    pub gain: f64,
    pub order: usize,
}

/// Enumerates image sources up to `max_order` reflections.
///
/// Along each axis the image coordinate is `(1 - 2q) x + 2 n L` with
/// `|n - q| + |n|` reflections.
pub fn image_arrivals(
    room: &RoomGeometry,
    src: &Point,
    mic: &Point,
    max_order: usize,
    sample_rate: u32,
) -> Result<Vec<Arrival>> {
    for p in [src, mic] {
        if !room.contains(p) {
            return Err(Error::OutsideRoom(*p));
        }
    }
    let dims = room.dims();
    let beta = room.reflection();
    let n_max = max_order as i64;
    // per axis: (coordinate, reflections)
    let axis_images: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|a| {
            let mut v = Vec::new();
            for n in -n_max..=n_max {
                for q in 0..=1i64 {
                    let order = ((n - q).abs() + n.abs()) as usize;
                    if order <= max_order {
                        let x = (1 - 2 * q) as f64 * src[a] + 2.0 * n as f64 * dims[a];
                        v.push((x, order));
                    }
                }
            }
            v
        })
        .collect();
    let mut out = Vec::new();
    for &(x, ox) in &axis_images[0] {
        for &(y, oy) in &axis_images[1] {
            if ox + oy > max_order {
                continue;
            }
            for &(z, oz) in &axis_images[2] {
                let order = ox + oy + oz;
                if order > max_order {
                    continue;
                }
                let image = [x, y, z];
                let r = distance(&image, mic);
                let gain = if order == 0 {
                    1.0
                } else {
                    beta.powi(order as i32)
                } / r;
                out.push(Arrival {
                    image,
                    delay_samples: r / SPEED_OF_SOUND * sample_rate as f64,
                    gain,
                    order,
                });
            }
        }
    }
    Ok(out)
}

/// Image-source room impulse response. Each arrival is a Hann-windowed sinc
/// centered on its fractional delay with amplitude `beta^order / r`.
pub fn simulate_rir(
    room: &RoomGeometry,
    src: &Point,
    mic: &Point,
    max_order: usize,
    sample_rate: u32,
) -> Result<TimeSignal> {
    let arrivals = image_arrivals(room, src, mic, max_order, sample_rate)?;
    let hw = RIR_KERNEL_HALF_WIDTH as f64;
    let max_delay = arrivals
        .iter()
        .filter(|a| a.gain != 0.0)
        .map(|a| a.delay_samples)
        .fold(0.0, f64::max);
    let len = max_delay.ceil() as usize + RIR_KERNEL_HALF_WIDTH + 1;
    let mut h = vec![0.0; len];
    for a in arrivals.iter().filter(|a| a.gain != 0.0) {
        let d = a.delay_samples;
        let lo = (d - hw).ceil().max(0.0) as usize;
        let hi = ((d + hw).floor() as usize).min(len - 1);
        for (n, v) in h.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let x = n as f64 - d;
            let w = 0.5 + 0.5 * (PI * x / hw).cos();
            *v += a.gain * sinc(x) * w;
        }
    }
    Ok(TimeSignal::from_parts(h, sample_rate))
}

/// Per-microphone target and noise images and their mixtures, indexed
/// `[node][mic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSignals {
    target: Vec<Vec<TimeSignal>>,
    noise: Vec<Vec<TimeSignal>>,
    mixture: Vec<Vec<TimeSignal>>,
}

impl SceneSignals {
    /// Builds the scene from its images; mixtures are their sample-wise sums.
    pub fn from_images(target: Vec<Vec<TimeSignal>>, noise: Vec<Vec<TimeSignal>>) -> Result<Self> {
        if target.len() != noise.len() || target.iter().zip(&noise).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape(
                "target and noise images differ in layout".into(),
            ));
        }
        let mixture = target
            .iter()
            .zip(&noise)
            .map(|(ts, ns)| ts.iter().zip(ns).map(|(t, n)| t.add(n)).collect())
            .collect::<Result<_>>()?;
        Ok(Self {
            target,
            noise,
            mixture,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mixture.len()
    }

    pub fn n_mics(&self, node: usize) -> usize {
        self.mixture[node].len()
    }

    pub fn len(&self) -> usize {
        self.mixture
            .first()
            .and_then(|n| n.first())
            .map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture[0][0].sample_rate()
    }

    pub fn target(&self, node: usize) -> &[TimeSignal] {
        &self.target[node]
    }

    pub fn noise(&self, node: usize) -> &[TimeSignal] {
        &self.noise[node]
    }

    pub fn mixture(&self, node: usize) -> &[TimeSignal] {
        &self.mixture[node]
    }

    pub fn into_images(self) -> (Vec<Vec<TimeSignal>>, Vec<Vec<TimeSignal>>) {
        (self.target, self.noise)
    }
}

/// Accepted dry-source durations, in seconds.
pub const DRY_DURATION_RANGE: (f64, f64) = (5.0, 10.0);

/// Convolves the dry sources with every source-to-microphone RIR.
///
/// With `snr_db = Some(x)`, the noise images are scaled so that the SNR at the
/// first microphone of the first node equals `x` dB; `None` leaves them as is.
pub fn render_scene(
    placement: &ScenePlacement,
    room: &RoomGeometry,
    target_dry: &TimeSignal,
    noise_dry: &TimeSignal,
    snr_db: Option<f64>,
    max_order: usize,
) -> Result<SceneSignals> {
    if target_dry.len() != noise_dry.len() || target_dry.sample_rate() != noise_dry.sample_rate() {
        return Err(Error::Shape("dry sources differ in length or rate".into()));
    }
    let dur = target_dry.duration_secs();
    if !(DRY_DURATION_RANGE.0..=DRY_DURATION_RANGE.1).contains(&dur) {
        return Err(Error::InvalidArgument(format!(
            "dry sources last {dur:.2} s, expected {}-{} s",
            DRY_DURATION_RANGE.0, DRY_DURATION_RANGE.1
        )));
    }
    if target_dry.energy() == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    if snr_db.is_some() && noise_dry.energy() == 0.0 {
        return Err(Error::ZeroEnergy("noise"));
    }
    let fs = target_dry.sample_rate();
    let len = target_dry.len();
    let image = |dry: &TimeSignal, src: &Point, mic: &Point| -> Result<TimeSignal> {
        let h = simulate_rir(room, src, mic, max_order, fs)?;
        let mut y = fft_convolve(dry.samples(), h.samples());
        y.truncate(len);
        Ok(TimeSignal::from_parts(y, fs))
    };
    let mut target = Vec::with_capacity(placement.n_nodes());
    let mut noise = Vec::with_capacity(placement.n_nodes());
    for mics in &placement.mic_positions {
        target.push(
            mics.iter()
                .map(|m| image(target_dry, &placement.target_pos, m))
                .collect::<Result<Vec<_>>>()?,
        );
        noise.push(
            mics.iter()
                .map(|m| image(noise_dry, &placement.noise_pos, m))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if let Some(snr) = snr_db {
        let es = target[0][0].energy();
        let en = noise[0][0].energy();
        if en == 0.0 {
            return Err(Error::ZeroEnergy("noise image"));
        }
        let gain = (es / (en * 10f64.powf(snr / 10.0))).sqrt();
        for node in noise.iter_mut() {
            for n in node.iter_mut() {
                *n = n.scaled(gain);
            }
        }
    }
    SceneSignals::from_images(target, noise)
}

/// Everything needed to synthesize a scene from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRecipe {
    pub config: SceneConfig,
    pub duration_s: f64,
    /// SNR drawn uniformly from this range at the reference microphone;
    /// `None` keeps the noise unscaled.
    pub snr_range_db: Option<(f64, f64)>,
    pub max_order: usize,
    pub sample_rate: u32,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            config: SceneConfig::default(),
            duration_s: 5.0,
            snr_range_db: Some((0.0, 6.0)),
            max_order: DEFAULT_MAX_ORDER,
            sample_rate: crate::signal::SAMPLE_RATE,
        }
    }
}

/// Geometry, synthetic dry sources and SNR all derived from `seed`.
pub fn synthetic_scene(
    scene_id: usize,
    seed: u64,
    recipe: &SceneRecipe,
) -> Result<(manifest::SceneManifest, SceneSignals)> {
    let n = (recipe.duration_s * recipe.sample_rate as f64).round() as usize;
    let target_seed = seed.wrapping_mul(2).wrapping_add(1);
    let noise_seed = seed.wrapping_mul(2).wrapping_add(2);
    let target = synth::speech_like(target_seed, n, recipe.sample_rate);
    let noise = synth::noise_like(noise_seed, n, recipe.sample_rate);
    scene_from_sources(
        scene_id,
        seed,
        recipe,
        (&target, manifest::SourceSpec::Synthetic { seed: target_seed }),
        (&noise, manifest::SourceSpec::Synthetic { seed: noise_seed }),
    )
}

/// Geometry and SNR derived from `seed`, with given dry sources. Sources of
/// different lengths are cut to the shorter one.
pub fn scene_from_sources(
    scene_id: usize,
    seed: u64,
    recipe: &SceneRecipe,
    target: (&TimeSignal, manifest::SourceSpec),
    noise: (&TimeSignal, manifest::SourceSpec),
) -> Result<(manifest::SceneManifest, SceneSignals)> {
    let n = target.0.len().min(noise.0.len());
    let (target_dry, noise_dry) = (target.0.with_len(n), noise.0.with_len(n));
    if target_dry.sample_rate() != recipe.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: recipe.sample_rate,
            found: target_dry.sample_rate(),
        });
    }
    let (room, placement) = sample_scene_with(seed, &recipe.config)?;
    let snr_db = recipe.snr_range_db.map(|(lo, hi)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x534e_5200);
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    });
    let signals = render_scene(
        &placement,
        &room,
        &target_dry,
        &noise_dry,
        snr_db,
        recipe.max_order,
    )?;
    let manifest = manifest::SceneManifest {
        scene_id,
        seed,
        sample_rate: recipe.sample_rate,
        n_samples: n,
        room,
        placement,
        snr_db,
        max_order: recipe.max_order,
        target: target.1,
        noise: noise.1,
        conditions: Vec::new(),
    };
    Ok((manifest, signals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;

    fn room(l: f64, w: f64, h: f64, a: f64) -> RoomGeometry {
        RoomGeometry {
            length: l,
            width: w,
            height: h,
            absorption: a,
        }
    }

    /// Kolmogorov survival function `P(K > x)`.
    fn kolmogorov_q(x: f64) -> f64 {
        if x < 0.2 {
            return 1.0;
        }
        let mut s = 0.0;
        for k in 1..100 {
            let k = k as f64;
            s += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        }
        s.clamp(0.0, 1.0)
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_scene(42).unwrap(), sample_scene(42).unwrap());
        assert_ne!(sample_scene(42).unwrap(), sample_scene(43).unwrap());
    }

    #[test]
    fn thousand_scenes_respect_constraints_and_ranges() {
        let mut lengths = Vec::new();
        for seed in 0..1000 {
            let (r, p) = sample_scene(seed).unwrap();
            assert!(p.min_clearance(&r) >= 0.5);
            assert_eq!(p.mic_positions.len(), 4);
            assert!(p.mic_positions.iter().all(|m| m.len() == 4));
            assert!((3.0..=8.0).contains(&r.length));
            assert!((3.0..=5.0).contains(&r.width));
            assert!((2.0..=3.0).contains(&r.height));
            lengths.push(r.length);
        }
        lengths.sort_by(f64::total_cmp);
        let n = lengths.len() as f64;
        let d = lengths
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cdf = (x - 3.0) / 5.0;
                (cdf - i as f64 / n)
                    .abs()
                    .max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        let p = kolmogorov_q(d * n.sqrt());
        assert!(p > 0.01, "KS D = {d}, p = {p}");
    }

    #[test]
    fn direct_path_only_at_order_zero() {
        let r = room(4.0, 4.0, 3.0, 0.5);
        let src = [1.0, 2.0, 1.5];
        let mic = [2.0, 2.0, 1.5];
        let arr = image_arrivals(&r, &src, &mic, 0, SAMPLE_RATE).unwrap();
        assert_eq!(arr.len(), 1);
        assert!((arr[0].delay_samples - 16_000.0 / 343.0).abs() < 1e-9);
        assert!((arr[0].gain - 1.0).abs() < 1e-12);

        let h = simulate_rir(&r, &src, &mic, 0, SAMPLE_RATE).unwrap();
        let x = h.samples();
        let (peak, _) = x
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(peak, 47);
        let (a, b, c) = (x[peak - 1], x[peak], x[peak + 1]);
        let refined = peak as f64 + 0.5 * (a - c) / (a - 2.0 * b + c);
        assert!((refined - 46.647).abs() < 0.5);
    }

    #[test]
    fn amplitude_follows_inverse_distance() {
        let r = room(6.0, 4.0, 3.0, 0.5);
        let src = [1.0, 2.0, 1.5];
        let near = simulate_rir(&r, &src, &[2.0, 2.0, 1.5], 0, SAMPLE_RATE).unwrap();
        let far = simulate_rir(&r, &src, &[3.0, 2.0, 1.5], 0, SAMPLE_RATE).unwrap();
        let a1 = image_arrivals(&r, &src, &[2.0, 2.0, 1.5], 0, SAMPLE_RATE).unwrap()[0].gain;
        let a2 = image_arrivals(&r, &src, &[3.0, 2.0, 1.5], 0, SAMPLE_RATE).unwrap()[0].gain;
        assert!((a2 / a1 - 0.5).abs() < 1e-12);
        let ratio = (far.energy() / near.energy()).sqrt();
        assert!((ratio - 0.5).abs() < 0.005, "{ratio}");
    }

    #[test]
    fn first_order_has_seven_arrivals_at_image_positions() {
        let r = room(4.0, 4.0, 3.0, 0.4);
        let src = [1.2, 2.5, 1.1];
        let mic = [3.0, 1.0, 1.7];
        let arr = image_arrivals(&r, &src, &mic, 1, SAMPLE_RATE).unwrap();
        assert_eq!(arr.len(), 7);
        // mirror the source across each wall independently
        let mut expected = vec![src];
        for (axis, d) in r.dims().iter().enumerate() {
            for wall in [0.0, *d] {
                let mut p = src;
                p[axis] = 2.0 * wall - src[axis];
                expected.push(p);
            }
        }
        let mut want: Vec<f64> = expected
            .iter()
            .map(|p| distance(p, &mic) / SPEED_OF_SOUND * SAMPLE_RATE as f64)
            .collect();
        let mut got: Vec<f64> = arr.iter().map(|a| a.delay_samples).collect();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 0.5);
        }
    }

    #[test]
    fn rir_is_causal() {
        let r = room(5.0, 4.0, 2.5, 0.3);
        let src = [1.0, 1.0, 1.0];
        let mic = [4.0, 3.0, 1.5];
        let h = simulate_rir(&r, &src, &mic, 3, SAMPLE_RATE).unwrap();
        let direct = distance(&src, &mic) / SPEED_OF_SOUND * SAMPLE_RATE as f64;
        let first = h.samples().iter().position(|v| *v != 0.0).unwrap();
        assert!(first as f64 >= direct - RIR_KERNEL_HALF_WIDTH as f64);
    }

    #[test]
    fn rir_energy_non_increasing_in_absorption() {
        let src = [1.3, 1.1, 1.2];
        let mic = [3.9, 2.7, 1.6];
        let mut prev = f64::INFINITY;
        for a in [0.05, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let e = simulate_rir(&room(5.0, 4.0, 2.7, a), &src, &mic, 4, SAMPLE_RATE)
                .unwrap()
                .energy();
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn outside_positions_rejected() {
        let r = room(4.0, 4.0, 3.0, 0.5);
        assert!(matches!(
            simulate_rir(&r, &[5.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 1, SAMPLE_RATE),
            Err(Error::OutsideRoom(_))
        ));
    }

    fn dry(seed: u64) -> (TimeSignal, TimeSignal) {
        let len = 5 * SAMPLE_RATE as usize;
        (
            synth::speech_like(seed, len, SAMPLE_RATE),
            synth::noise_like(seed + 1, len, SAMPLE_RATE),
        )
    }

    #[test]
    fn snr_scaling_at_reference_mic() {
        let (r, p) = sample_scene(3).unwrap();
        let (t, n) = dry(3);
        let s = render_scene(&p, &r, &t, &n, Some(0.0), 2).unwrap();
        let ratio = s.target(0)[0].energy() / s.noise(0)[0].energy();
        assert!((ratio - 1.0).abs() < 1e-6);
        for k in 0..s.n_nodes() {
            for m in 0..s.n_mics(k) {
                let y = s.mixture(k)[m].samples();
                let (a, b) = (s.target(k)[m].samples(), s.noise(k)[m].samples());
                assert!((0..y.len()).all(|i| y[i] == a[i] + b[i]));
            }
        }
    }

    #[test]
    fn silent_noise_without_scaling_gives_clean_mixture() {
        let (r, p) = sample_scene(4).unwrap();
        let (t, _) = dry(4);
        let n = TimeSignal::zeros(t.len(), SAMPLE_RATE);
        let s = render_scene(&p, &r, &t, &n, None, 1).unwrap();
        for k in 0..4 {
            for m in 0..4 {
                assert_eq!(s.mixture(k)[m], s.target(k)[m]);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_rejects_silence() {
        let (r, p) = sample_scene(5).unwrap();
        let (t, n) = dry(5);
        let a = render_scene(&p, &r, &t, &n, Some(3.0), 1).unwrap();
        let b = render_scene(&p, &r, &t, &n, Some(3.0), 1).unwrap();
        assert_eq!(a, b);
        let silent = TimeSignal::zeros(t.len(), SAMPLE_RATE);
        assert!(matches!(
            render_scene(&p, &r, &silent, &n, Some(0.0), 1),
            Err(Error::ZeroEnergy("target"))
        ));
    }
}
