//! Seeded synthetic dry sources used when no speech corpus is supplied.
//!
//! `speech_like` produces a sequence of voiced syllables (glottal harmonics
//! shaped by three formants), short fricative bursts and pauses. `noise_like`
//! is stationary low-pass colored noise. Both are scaled to RMS 0.1.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::signal::TimeSignal;

const TARGET_RMS: f64 = 0.1;

fn normalize(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= TARGET_RMS / rms);
    }
    x
}

/// Raised-cosine attack and release of `ramp` samples.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

fn voiced(rng: &mut ChaCha8Rng, len: usize, fs: f64, out: &mut [f64]) {
    let f0_start: f64 = rng.random_range(90.0..240.0);
    let f0_end = f0_start * rng.random_range(0.8..1.2);
    let formants = [
        (
            rng.random_range(300.0..900.0),
            rng.random_range(60.0..120.0),
            1.0,
        ),
        (
            rng.random_range(900.0..2500.0),
            rng.random_range(80.0..160.0),
            0.5,
        ),
        (
            rng.random_range(2200.0..3500.0),
            rng.random_range(100.0..200.0),
            0.25,
        ),
    ];
    let shape = |f: f64| -> f64 {
        let peaks: f64 = formants
            .iter()
            .map(|(c, b, a)| a / (1.0 + ((f - c) / b).powi(2)))
            .sum();
        (peaks + 0.02) / (1.0 + f / 1000.0)
    };
    let n_harm = (7000.0 / f0_start.max(f0_end)) as usize;
    let phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let ramp = (0.015 * fs) as usize;
    let mut phase0 = 0.0;
    for (i, o) in out.iter_mut().enumerate().take(len) {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / len as f64;
        phase0 += 2.0 * PI * f0 / fs;
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            v += shape(k * f0) * (k * phase0 + ph).sin();
        }
        *o += v * envelope(i, len, ramp);
    }
}

/// White noise through a two-pole resonator at 2.5-6 kHz.
fn fricative(rng: &mut ChaCha8Rng, len: usize, fs: f64, out: &mut [f64]) {
    let fc = rng.random_range(2500.0..6000.0);
    let r: f64 = 0.9;
    let a1 = 2.0 * r * (2.0 * PI * fc / fs).cos();
    let a2 = -r * r;
    let gain = rng.random_range(0.05..0.2);
    let ramp = (0.01 * fs) as usize;
    let (mut y1, mut y2) = (0.0, 0.0);
    for (i, o) in out.iter_mut().enumerate().take(len) {
        let e: f64 = StandardNormal.sample(rng);
        let y = e + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *o += gain * y * envelope(i, len, ramp);
    }
}

/// Speech-like test signal of `len` samples.
pub fn speech_like(seed: u64, len: usize, sample_rate: u32) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut x = vec![0.0; len];
    let mut pos = (rng.random_range(0.0..0.2) * fs) as usize;
    while pos < len {
        let kind: f64 = rng.random();
        let dur = if kind < 0.7 {
            rng.random_range(0.08..0.3)
        } else {
            rng.random_range(0.04..0.12)
        };
        let n = ((dur * fs) as usize).min(len - pos);
        if kind < 0.7 {
            voiced(&mut rng, n, fs, &mut x[pos..]);
        } else {
            fricative(&mut rng, n, fs, &mut x[pos..]);
        }
        let gap = if rng.random_bool(0.15) {
            rng.random_range(0.3..0.6)
        } else {
            rng.random_range(0.02..0.15)
        };
        pos += n + (gap * fs) as usize;
    }
    TimeSignal::from_parts(normalize(x), sample_rate)
}

/// Stationary noise with a first-order low-pass tilt plus a white floor.
pub fn noise_like(seed: u64, len: usize, sample_rate: u32) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole = 0.9;
    let mut state = 0.0;
    let x: Vec<f64> = (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            state = pole * state + (1.0 - pole) * e;
            let w: f64 = StandardNormal.sample(&mut rng);
            state + 0.05 * w
        })
        .collect();
    TimeSignal::from_parts(normalize(x), sample_rate)
}
