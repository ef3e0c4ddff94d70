//! Objective separation metrics: scale-invariant SDR and the projection-based
//! SDR/SIR/SAR decomposition.
//!
//! The decomposition projects the (zero-padded) estimate onto the span of
//! `filter_len` delayed copies of the target reference, then onto the joint
//! span of delayed target and noise copies:
//!
//! ```text
//! s_target = P_target(e)
//! e_interf = P_all(e) - s_target
//! e_artif  = e - P_all(e)
//! ```
//!
//! The Gram matrices are Toeplitz blocks of auto/cross-correlations, solved by
//! Cholesky with a small relative ridge.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{fft_convolve, fft_xcorr, TimeSignal};

/// Metric values are clamped to `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 100.0;
pub const DEFAULT_FILTER_LEN: usize = 512;
const RIDGE: f64 = 1e-8;

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { CAP_DB } else { -CAP_DB };
    }
    if num <= 0.0 {
        return -CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(estimate: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let (e, r) = (estimate.samples(), reference.samples());
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::ZeroEnergy("SI-SDR reference"));
    }
    let alpha = dot(e, r) / rr;
    let target_energy = alpha * alpha * rr;
    let residual: f64 = e.iter().zip(r).map(|(x, y)| (x - alpha * y).powi(2)).sum();
    Ok(ratio_db(target_energy, residual))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub si_sdr: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// The three components of an estimate, each `len + filter_len - 1` samples.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// Set when the Gram matrix needed extra regularization.
    pub regularized: bool,
}

impl Decomposition {
    pub fn sdr(&self) -> f64 {
        let err: Vec<f64> = self
            .e_interf
            .iter()
            .zip(&self.e_artif)
            .map(|(a, b)| a + b)
            .collect();
        ratio_db(dot(&self.s_target, &self.s_target), dot(&err, &err))
    }

    pub fn sir(&self) -> f64 {
        ratio_db(
            dot(&self.s_target, &self.s_target),
            dot(&self.e_interf, &self.e_interf),
        )
    }

    pub fn sar(&self) -> f64 {
        let src: Vec<f64> = self
            .s_target
            .iter()
            .zip(&self.e_interf)
            .map(|(a, b)| a + b)
            .collect();
        ratio_db(dot(&src, &src), dot(&self.e_artif, &self.e_artif))
    }
}

struct Projector {
    chol: Cholesky<f64, Dyn>,
    regularized: bool,
}

impl Projector {
    fn new(mut gram: DMatrix<f64>) -> Self {
        let n = gram.nrows();
        let scale = (0..n).map(|i| gram[(i, i)]).sum::<f64>() / n as f64;
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut ridge = RIDGE * scale;
        let mut regularized = false;
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        loop {
            if let Some(chol) = Cholesky::new(gram.clone()) {
                return Self { chol, regularized };
            }
            regularized = true;
            let extra = ridge * 9.0;
            for i in 0..n {
                gram[(i, i)] += extra;
            }
            ridge *= 10.0;
            warn!("projection Gram matrix rank-deficient, ridge raised to {ridge:e}");
        }
    }
}

/// Precomputed projection bases for one (target, noise) reference pair, so that
/// several estimates can be scored against the same references cheaply.
pub struct BssEval {
    target: Vec<f64>,
    noise: Vec<f64>,
    filter_len: usize,
    target_proj: Projector,
    joint_proj: Projector,
}

impl BssEval {
    pub fn new(target_ref: &TimeSignal, noise_ref: &TimeSignal, filter_len: usize) -> Result<Self> {
        if target_ref.len() != noise_ref.len() {
            return Err(Error::Shape(
                "target and noise references differ in length".into(),
            ));
        }
        if filter_len == 0 || filter_len > target_ref.len() {
            return Err(Error::InvalidArgument(format!(
                "filter length {filter_len} invalid for {} samples",
                target_ref.len()
            )));
        }
        if target_ref.energy() == 0.0 {
            return Err(Error::ZeroEnergy("target reference"));
        }
        let l = filter_len;
        let s = target_ref.samples();
        let n = noise_ref.samples();
        let max_lag = l - 1;
        let r_ss = fft_xcorr(s, s, max_lag);
        let r_nn = fft_xcorr(n, n, max_lag);
        let r_sn = fft_xcorr(s, n, max_lag);
        // r_*[max_lag + k] holds lag k
        let g_ss = DMatrix::from_fn(l, l, |i, j| r_ss[max_lag + j.abs_diff(i)]);
        let mut joint = DMatrix::zeros(2 * l, 2 * l);
        joint.view_mut((0, 0), (l, l)).copy_from(&g_ss);
        for i in 0..l {
            for j in 0..l {
                joint[(l + i, l + j)] = r_nn[max_lag + j.abs_diff(i)];
                // sum_t s[t - i] n[t - j] = r_sn(i - j)
                let v = r_sn[(max_lag as isize + i as isize - j as isize) as usize];
                joint[(i, l + j)] = v;
                joint[(l + j, i)] = v;
            }
        }
        Ok(Self {
            target: s.to_vec(),
            noise: n.to_vec(),
            filter_len,
            target_proj: Projector::new(g_ss),
            joint_proj: Projector::new(joint),
        })
    }

    pub fn decompose(&self, estimate: &TimeSignal) -> Result<Decomposition> {
        if estimate.len() != self.target.len() {
            return Err(Error::Shape(format!(
                "estimate has {} samples, references {}",
                estimate.len(),
                self.target.len()
            )));
        }
        let l = self.filter_len;
        let e = estimate.samples();
        let out_len = e.len() + l - 1;
        let d_s = &fft_xcorr(&self.target, e, l - 1)[l - 1..];
        let d_n = &fft_xcorr(&self.noise, e, l - 1)[l - 1..];

        let c_s = self
            .target_proj
            .chol
            .solve(&DVector::from_column_slice(d_s));
        let mut s_target = fft_convolve(&self.target, c_s.as_slice());
        s_target.resize(out_len, 0.0);

        let mut rhs = DVector::zeros(2 * l);
        rhs.rows_mut(0, l).copy_from_slice(d_s);
        rhs.rows_mut(l, l).copy_from_slice(d_n);
        let c = self.joint_proj.chol.solve(&rhs);
        let mut p_all = fft_convolve(&self.target, &c.as_slice()[..l]);
        let p_n = fft_convolve(&self.noise, &c.as_slice()[l..]);
        p_all.resize(out_len, 0.0);
        for (a, b) in p_all.iter_mut().zip(&p_n) {
            *a += b;
        }

        let e_interf = p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
        let e_artif = (0..out_len)
            .map(|t| e.get(t).copied().unwrap_or(0.0) - p_all[t])
            .collect();
        Ok(Decomposition {
            s_target,
            e_interf,
            e_artif,
            regularized: self.target_proj.regularized || self.joint_proj.regularized,
        })
    }

    pub fn evaluate(&self, estimate: &TimeSignal) -> Result<MetricReport> {
        let d = self.decompose(estimate)?;
        let target = TimeSignal::from_parts(self.target.clone(), estimate.sample_rate());
        Ok(MetricReport {
            si_sdr: si_sdr(estimate, &target)?,
            sdr: d.sdr(),
            sir: d.sir(),
            sar: d.sar(),
        })
    }
}

/// One-shot SDR/SIR/SAR (plus SI-SDR) of `estimate` against its references.
pub fn bss_eval(
    estimate: &TimeSignal,
    target_ref: &TimeSignal,
    noise_ref: &TimeSignal,
    filter_len: usize,
) -> Result<MetricReport> {
    BssEval::new(target_ref, noise_ref, filter_len)?.evaluate(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn sig(x: Vec<f64>) -> TimeSignal {
        TimeSignal::new(x, SAMPLE_RATE).unwrap()
    }

    /// Removes the component of `n` along `t` and rescales both to unit energy.
    fn orthonormal_pair(t: &[f64], n: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let tn = dot(t, t).sqrt();
        let t: Vec<f64> = t.iter().map(|x| x / tn).collect();
        let proj = dot(n, &t);
        let n: Vec<f64> = n.iter().zip(&t).map(|(a, b)| a - proj * b).collect();
        let nn = dot(&n, &n).sqrt();
        (t, n.iter().map(|x| x / nn).collect())
    }

    #[test]
    fn si_sdr_identity_and_scale() {
        let r = sig(white(1000, 1));
        assert_eq!(si_sdr(&r, &r).unwrap(), CAP_DB);
        assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap(), CAP_DB);
    }

    #[test]
    fn si_sdr_equal_energy_orthogonal_noise_is_zero_db() {
        let (t, n) = orthonormal_pair(&white(4000, 2), &white(4000, 3));
        let est: Vec<f64> = t.iter().zip(&n).map(|(a, b)| a + b).collect();
        let v = si_sdr(&sig(est), &sig(t)).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn si_sdr_rejects_zero_reference_and_length_mismatch() {
        let z = TimeSignal::zeros(10, SAMPLE_RATE);
        assert!(matches!(si_sdr(&z, &z), Err(Error::ZeroEnergy(_))));
        assert!(si_sdr(&z, &TimeSignal::zeros(11, SAMPLE_RATE)).is_err());
    }

    #[test]
    fn si_sdr_scale_invariance() {
        let r = sig(white(2000, 4));
        let e: Vec<f64> = r
            .samples()
            .iter()
            .zip(white(2000, 5))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let e = sig(e);
        let base = si_sdr(&e, &r).unwrap();
        for c in [0.01, 0.5, 3.0, 1e4] {
            assert!((si_sdr(&e.scaled(c), &r).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn clean_target_hits_caps() {
        let t = sig(white(8000, 6));
        let n = sig(white(8000, 7));
        let m = bss_eval(&t, &t, &n, 512).unwrap();
        assert_eq!(m.sir, CAP_DB);
        assert_eq!(m.sar, CAP_DB);
    }

    #[test]
    fn noise_only_estimate_has_very_low_sir() {
        let t = sig(white(160_000, 8));
        let n = sig(white(160_000, 9));
        let m = bss_eval(&n, &t, &n, 512).unwrap();
        assert!(m.sir <= -20.0, "{}", m.sir);
    }

    #[test]
    fn weighted_mixture_sir_matches_energy_ratio() {
        let (t, n) = orthonormal_pair(&white(80_000, 10), &white(80_000, 11));
        let est: Vec<f64> = t.iter().zip(&n).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
        let m = bss_eval(&sig(est), &sig(t), &sig(n), 512).unwrap();
        let expected = 10.0 * (0.49f64 / 0.09).log10();
        assert!((m.sir - expected).abs() <= 0.1, "{} vs {}", m.sir, expected);
    }

    #[test]
    fn decomposition_reconstructs_estimate() {
        let t = white(6000, 12);
        let n = white(6000, 13);
        let a = white(6000, 14);
        let est: Vec<f64> = (0..6000).map(|i| t[i] + 0.5 * n[i] + 0.1 * a[i]).collect();
        let ev = BssEval::new(&sig(t), &sig(n), 64).unwrap();
        let d = ev.decompose(&sig(est.clone())).unwrap();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..d.s_target.len() {
            let e = est.get(i).copied().unwrap_or(0.0);
            err += (d.s_target[i] + d.e_interf[i] + d.e_artif[i] - e).powi(2);
            norm += e * e;
        }
        assert!((err / norm).sqrt() <= 1e-8);
    }

    #[test]
    fn added_white_noise_does_not_raise_sar() {
        let t = white(8000, 15);
        let n = white(8000, 16);
        let a = white(8000, 17);
        let base: Vec<f64> = (0..8000).map(|i| t[i] + 0.3 * n[i] + 0.1 * a[i]).collect();
        let ev = BssEval::new(&sig(t), &sig(n), 128).unwrap();
        let sar0 = ev.evaluate(&sig(base.clone())).unwrap().sar;
        let mut worse = 0;
        for seed in 0..10 {
            let w = white(8000, 100 + seed);
            let noisy: Vec<f64> = base.iter().zip(&w).map(|(a, b)| a + 0.2 * b).collect();
            if ev.evaluate(&sig(noisy)).unwrap().sar <= sar0 {
                worse += 1;
            }
        }
        assert_eq!(worse, 10);
    }
}
