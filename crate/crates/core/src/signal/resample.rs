//! Band-limited fractional resampling for ppm-scale rate offsets.
//!
//! Output sample `t` is the input evaluated at time `t * ratio` through a
//! 32-tap Kaiser-windowed sinc. The kernel is tabulated at 1/512-sample phase
//! steps and linearly interpolated between neighbouring phases.

use std::sync::OnceLock;

use super::{bessel_i0, sinc, TimeSignal};
use crate::error::{Error, Result};

pub const MIN_RATIO: f64 = 0.999;
pub const MAX_RATIO: f64 = 1.001;

const TAPS: usize = 32;
const HALF: isize = (TAPS / 2) as isize;
const PHASES: usize = 512;
const KAISER_BETA: f64 = 8.6;

#[derive(Clone)]
struct PhaseTable {
    // (PHASES + 1) rows of TAPS coefficients; row p is the kernel for a
    // fractional offset of p / PHASES.
    rows: Vec<[f64; TAPS]>,
}

impl PhaseTable {
    fn new(cutoff: f64) -> Self {
        let norm = bessel_i0(KAISER_BETA);
        let rows = (0..=PHASES)
            .map(|p| {
                let frac = p as f64 / PHASES as f64;
                let mut row = [0.0; TAPS];
                for (k, c) in row.iter_mut().enumerate() {
                    // tap k reads input offset k - (HALF - 1) from floor(pos)
                    let x = (k as isize - (HALF - 1)) as f64 - frac;
                    let r = x / HALF as f64;
                    let w = if r.abs() >= 1.0 {
                        0.0
                    } else {
                        bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                    };
                    *c = cutoff * sinc(cutoff * x) * w;
                }
                let dc: f64 = row.iter().sum();
                for c in row.iter_mut() {
                    *c /= dc;
                }
                row
            })
            .collect();
        Self { rows }
    }
}

fn table_for(cutoff: f64) -> std::borrow::Cow<'static, PhaseTable> {
    static FULL_BAND: OnceLock<PhaseTable> = OnceLock::new();
    if cutoff == 1.0 {
        std::borrow::Cow::Borrowed(FULL_BAND.get_or_init(|| PhaseTable::new(1.0)))
    } else {
        std::borrow::Cow::Owned(PhaseTable::new(cutoff))
    }
}

/// Resamples so that output sample `t` corresponds to input time `t * ratio`.
///
/// The output has `round(len / ratio)` samples. `ratio == 1.0` returns the
/// input unchanged.
pub fn resample_fractional(signal: &TimeSignal, ratio: f64) -> Result<TimeSignal> {
    if !(MIN_RATIO..=MAX_RATIO).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::RatioOutOfRange(ratio));
    }
    if ratio == 1.0 {
        return Ok(signal.clone());
    }
    let cutoff = (1.0 / ratio).min(1.0);
    let table = table_for(cutoff);
    let x = signal.samples();
    let n_in = x.len() as isize;
    let out_len = (x.len() as f64 / ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    let mut taps = [0.0; TAPS];
    for t in 0..out_len {
        let pos = t as f64 * ratio;
        let base = pos.floor();
        let phase = (pos - base) * PHASES as f64;
        let p = (phase.floor() as usize).min(PHASES - 1);
        let a = phase - p as f64;
        let (lo, hi) = (&table.rows[p], &table.rows[p + 1]);
        for k in 0..TAPS {
            taps[k] = (1.0 - a) * lo[k] + a * hi[k];
        }
        let start = base as isize - (HALF - 1);
        let mut acc = 0.0;
        if start >= 0 && start + TAPS as isize <= n_in {
            let s = start as usize;
            for k in 0..TAPS {
                acc += taps[k] * x[s + k];
            }
        } else {
            for (k, tap) in taps.iter().enumerate() {
                let i = start + k as isize;
                if (0..n_in).contains(&i) {
                    acc += tap * x[i as usize];
                }
            }
        }
        out.push(acc);
    }
    Ok(TimeSignal::from_parts(out, signal.sample_rate()))
}
