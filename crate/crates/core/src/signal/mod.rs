//! Time/frequency primitives shared by every stage of the pipeline.
//!
//! The STFT uses a periodic Hann window of `frame_len` samples with a hop of
//! `frame_len / 2`. Frames are only taken where a full window fits, so a signal
//! of `len` samples yields `1 + (len - frame_len) / hop` frames. Synthesis is a
//! weighted overlap-add normalized by the summed squared window, which gives
//! perfect reconstruction wherever that sum is non-zero.

mod conv;
mod resample;
pub mod wav;

pub use conv::{fft_convolve, fft_xcorr, windowed_lag};
pub use resample::{resample_fractional, MAX_RATIO, MIN_RATIO};

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal sample rate of every signal in the simulator.
pub const SAMPLE_RATE: u32 = 16_000;

/// A sampled waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    /// Internal constructor for outputs of operations that cannot introduce
    /// non-finite values from finite inputs.
    pub(crate) fn from_parts(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|x| x.is_finite()));
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::from_parts(
            self.samples.iter().map(|x| x * gain).collect(),
            self.sample_rate,
        )
    }

    /// Sample-wise sum. Lengths must agree.
    pub fn add(&self, other: &TimeSignal) -> Result<TimeSignal> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::Shape(format!(
                "cannot add signals of length {} @ {} Hz and {} @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(Self::from_parts(
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            self.sample_rate,
        ))
    }

    /// Truncates or zero-extends to `len` samples.
    pub fn with_len(&self, len: usize) -> TimeSignal {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::from_parts(samples, self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window: WindowKind,
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 32 ms frames with 16 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            window: WindowKind::Hann,
            frame_len: 512,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    pub fn hop_ms(&self, sample_rate: u32) -> f64 {
        1000.0 * self.hop as f64 / sample_rate as f64
    }

    /// Periodic window, so that shifted copies tile without a duplicated endpoint.
    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => {
                let n = self.frame_len as f64;
                (0..self.frame_len)
                    .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame length must be even and >= 2, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::InvalidArgument(format!(
                "hop must be in 1..={}, got {}",
                self.frame_len, self.hop
            )));
        }
        Ok(())
    }
}

/// One-sided complex STFT, `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn zeros(n_frames: usize, cfg: &StftConfig, sample_rate: u32) -> Self {
        Self {
            data: Array2::zeros((n_frames, cfg.n_bins())),
            frame_len: cfg.frame_len,
            hop: cfg.hop,
            sample_rate,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    /// A spectrogram with the same framing but different data.
    pub fn with_data(&self, data: Array2<Complex64>) -> Self {
        Self {
            data,
            frame_len: self.frame_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
        }
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.data.dim() == other.data.dim()
            && self.frame_len == other.frame_len
            && self.hop == other.hop
    }
}

/// Checks that all channels share framing and shape; returns `(frames, bins)`.
pub fn check_channels(channels: &[Spectrogram]) -> Result<(usize, usize)> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Shape("no channels".into()))?;
    for (i, ch) in channels.iter().enumerate().skip(1) {
        if !first.same_shape(ch) {
            return Err(Error::Shape(format!(
                "channel {i} has shape {:?}, expected {:?}",
                ch.data.dim(),
                first.data.dim()
            )));
        }
    }
    Ok(first.data.dim())
}

pub fn stft(signal: &TimeSignal, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.frame_len;
    if signal.len() < n {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            needed: n,
        });
    }
    let n_frames = cfg.n_frames(signal.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Array2::zeros((n_frames, n_bins));
    let x = signal.samples();
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (f, v) in data.row_mut(t).iter_mut().enumerate() {
            *v = buf[f];
        }
    }
    Ok(Spectrogram {
        data,
        frame_len: n,
        hop: cfg.hop,
        sample_rate: signal.sample_rate(),
    })
}

/// Relative floor on the overlap-add normalization.
const SYNTHESIS_FLOOR: f64 = 1e-3;

/// Weighted overlap-add synthesis normalized by the summed squared window.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<TimeSignal> {
    cfg.validate()?;
    if spec.frame_len != cfg.frame_len || spec.hop != cfg.hop || spec.n_bins() != cfg.n_bins() {
        return Err(Error::Shape(format!(
            "spectrogram ({} bins, frame {}, hop {}) does not match config (frame {}, hop {})",
            spec.n_bins(),
            spec.frame_len,
            spec.hop,
            cfg.frame_len,
            cfg.hop
        )));
    }
    let n = cfg.frame_len;
    let n_frames = spec.n_frames();
    if n_frames == 0 {
        return Ok(TimeSignal::zeros(0, spec.sample_rate));
    }
    let out_len = (n_frames - 1) * cfg.hop + n;
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut acc = vec![0.0; out_len];
    let mut wsum = vec![0.0; out_len];
    let half = n / 2;
    for t in 0..n_frames {
        let row = spec.data.row(t);
        buf[0] = Complex64::new(row[0].re, 0.0);
        buf[half] = Complex64::new(row[half].re, 0.0);
        for f in 1..half {
            buf[f] = row[f];
            buf[n - f] = row[f].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    // Edge samples covered only by a window tail would otherwise be divided by
    // a near-zero weight and explode on spectrograms that were filtered.
    let floor = SYNTHESIS_FLOOR * wsum.iter().cloned().fold(0.0, f64::max);
    let samples = acc
        .iter()
        .zip(&wsum)
        .map(|(a, w)| if floor > 0.0 { a / w.max(floor) } else { 0.0 })
        .collect();
    Ok(TimeSignal::from_parts(samples, spec.sample_rate))
}

/// Zero-order modified Bessel function of the first kind.
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}
