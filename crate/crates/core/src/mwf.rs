//! Time-frequency masks, mask-weighted spatial covariances and the rank-1
//! GEVD speech-distortion-weighted multichannel Wiener filter.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::{check_channels, Spectrogram};

/// Default relative diagonal loading, scaled by `trace(R_yy) / M`.
pub const DEFAULT_LOADING: f64 = 1e-6;

/// Real `frames x bins` mask with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMask {
    values: Array2<f64>,
}

impl TfMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(n_frames: usize, n_bins: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((n_frames, n_bins), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// `|S| / (|S| + |N|)`, with 0/0 mapped to 0.
pub fn ideal_ratio_mask(target: &Spectrogram, noise: &Spectrogram) -> Result<TfMask> {
    if !target.same_shape(noise) {
        return Err(Error::Shape(format!(
            "target {:?} vs noise {:?}",
            target.data.dim(),
            noise.data.dim()
        )));
    }
    let mut values = Array2::zeros(target.data.dim());
    Zip::from(&mut values)
        .and(&target.data)
        .and(&noise.data)
        .for_each(|m, s, n| {
            let (s, n) = (s.norm(), n.norm());
            *m = if s + n > 0.0 { s / (s + n) } else { 0.0 };
        });
    Ok(TfMask { values })
}

/// Per-frequency mixture and noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    pub r_yy: Vec<DMatrix<Complex64>>,
    pub r_nn: Vec<DMatrix<Complex64>>,
    /// `sum_t (1 - m(t, f))` per frequency.
    pub weight_mass: Vec<f64>,
    /// Frequencies whose noise weight was zero and whose `R_nn` is loading only.
    pub fallback_bins: Vec<usize>,
}

impl CovariancePair {
    pub fn n_bins(&self) -> usize {
        self.r_yy.len()
    }

    pub fn n_channels(&self) -> usize {
        self.r_yy.first().map_or(0, |r| r.nrows())
    }
}

fn hermitize(r: &mut DMatrix<Complex64>) {
    let n = r.nrows();
    for i in 0..n {
        r[(i, i)] = Complex64::new(r[(i, i)].re, 0.0);
        for j in i + 1..n {
            let v = (r[(i, j)] + r[(j, i)].conj()) * 0.5;
            r[(i, j)] = v;
            r[(j, i)] = v.conj();
        }
    }
}

/// Batch covariance estimates over all frames.
///
/// `R_nn(f) = sum_t (1 - m) y y^H / sum_t (1 - m)` and
/// `R_yy(f) = sum_t y y^H / T`; both get `loading * trace(R_yy) / M` on the
/// diagonal. A frequency with zero noise weight keeps only that loading in
/// `R_nn` and is listed in `fallback_bins`.
pub fn estimate_covariances(
    inputs: &[Spectrogram],
    mask: &TfMask,
    loading: f64,
) -> Result<CovariancePair> {
    let (n_frames, n_bins) = check_channels(inputs)?;
    if mask.dim() != (n_frames, n_bins) {
        return Err(Error::Shape(format!(
            "mask {:?} vs inputs ({n_frames}, {n_bins})",
            mask.dim()
        )));
    }
    let m = inputs.len();
    let per_bin: Vec<(DMatrix<Complex64>, DMatrix<Complex64>, f64, bool)> = (0..n_bins)
        .into_par_iter()
        .map(|f| {
            let mut r_yy = DMatrix::<Complex64>::zeros(m, m);
            let mut r_nn = DMatrix::<Complex64>::zeros(m, m);
            let mut mass = 0.0;
            let mut y = DVector::<Complex64>::zeros(m);
            for t in 0..n_frames {
                for (c, ch) in inputs.iter().enumerate() {
                    y[c] = ch.data[[t, f]];
                }
                let outer = &y * y.adjoint();
                let w = 1.0 - mask.values[[t, f]];
                r_yy += &outer;
                if w > 0.0 {
                    r_nn += outer * Complex64::new(w, 0.0);
                    mass += w;
                }
            }
            r_yy /= Complex64::new(n_frames.max(1) as f64, 0.0);
            let fallback = mass <= 0.0;
            if fallback {
                r_nn.fill(Complex64::new(0.0, 0.0));
            } else {
                r_nn /= Complex64::new(mass, 0.0);
            }
            let trace: f64 = (0..m).map(|i| r_yy[(i, i)].re).sum();
            let delta = loading * trace / m as f64;
            for i in 0..m {
                r_yy[(i, i)] += delta;
                r_nn[(i, i)] += delta;
            }
            hermitize(&mut r_yy);
            hermitize(&mut r_nn);
            (r_yy, r_nn, mass, fallback)
        })
        .collect();
    let mut pair = CovariancePair {
        r_yy: Vec::with_capacity(n_bins),
        r_nn: Vec::with_capacity(n_bins),
        weight_mass: Vec::with_capacity(n_bins),
        fallback_bins: Vec::new(),
    };
    for (f, (yy, nn, mass, fb)) in per_bin.into_iter().enumerate() {
        pair.r_yy.push(yy);
        pair.r_nn.push(nn);
        pair.weight_mass.push(mass);
        if fb {
            pair.fallback_bins.push(f);
        }
    }
    if !pair.fallback_bins.is_empty() {
        log::debug!("{} bins without noise weight", pair.fallback_bins.len());
    }
    Ok(pair)
}

/// Per-frequency filters `w(f)`; the output is `w^H y`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    pub w: Vec<DVector<Complex64>>,
    pub mu: f64,
    /// Principal generalized eigenvalue per frequency (0 for silent bins).
    pub lambda1: Vec<f64>,
}

impl BeamWeights {
    /// A filter that passes channel `channel` unchanged.
    pub fn selector(n_bins: usize, n_channels: usize, channel: usize) -> Self {
        let mut e = DVector::zeros(n_channels);
        e[channel] = Complex64::new(1.0, 0.0);
        Self {
            w: vec![e; n_bins],
            mu: 0.0,
            lambda1: vec![0.0; n_bins],
        }
    }
}

/// Principal generalized eigenpair of `(r_yy, r_nn)`, normalized so that
/// `q^H R_nn q = 1`. Also returns `R_nn q`.
fn principal_gevd(
    r_yy: &DMatrix<Complex64>,
    r_nn: &DMatrix<Complex64>,
    f: usize,
) -> Result<(f64, DVector<Complex64>, DVector<Complex64>)> {
    let chol = r_nn
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(f))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
        .ok_or(Error::NotPositiveDefinite(f))?;
    let mut a = &l_inv * r_yy * l_inv.adjoint();
    hermitize(&mut a);
    let eig = a.symmetric_eigen();
    let (k, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or(Error::NonFiniteEigen(f))?;
    let v = eig.eigenvectors.column(k).into_owned();
    if !lambda.is_finite() || v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFiniteEigen(f));
    }
    let q = l_inv.adjoint() * &v;
    let rq = l * v;
    Ok((lambda, q, rq))
}

/// Rank-1 GEVD SDW-MWF: `w = (R_ss + mu R_nn)^-1 R_ss e_ref` with
/// `R_ss = max(lambda1 - 1, 0) (R_nn q1)(R_nn q1)^H` and `q1^H R_nn q1 = 1`.
///
/// Since `(R_nn q1)^H R_nn^-1 (R_nn q1) = 1`, this reduces to
/// `w = sigma q1 conj((R_nn q1)_ref) / (mu + sigma)` with `sigma = lambda1 - 1`.
pub fn rank1_gevd_mwf(cov: &CovariancePair, mu: f64, ref_channel: usize) -> Result<BeamWeights> {
    let m = cov.n_channels();
    if ref_channel >= m {
        return Err(Error::InvalidArgument(format!(
            "reference channel {ref_channel} of {m}"
        )));
    }
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid mu {mu}")));
    }
    let per_bin: Vec<(DVector<Complex64>, f64)> = (0..cov.n_bins())
        .into_par_iter()
        .map(|f| {
            let (r_yy, r_nn) = (&cov.r_yy[f], &cov.r_nn[f]);
            let silent = (0..m).all(|i| r_nn[(i, i)].re == 0.0 && r_yy[(i, i)].re == 0.0);
            if silent {
                return Ok((DVector::zeros(m), 0.0));
            }
            let (lambda, q, rq) = principal_gevd(r_yy, r_nn, f)?;
            let sigma = (lambda - 1.0).max(0.0);
            if sigma == 0.0 {
                return Ok((DVector::zeros(m), lambda));
            }
            let scale = rq[ref_channel].conj() * (sigma / (mu + sigma));
            Ok((q * scale, lambda))
        })
        .collect::<Result<_>>()?;
    let (w, lambda1) = per_bin.into_iter().unzip();
    Ok(BeamWeights { w, mu, lambda1 })
}

/// All generalized eigenvalues of `(r_yy, r_nn)`, descending.
pub fn generalized_eigenvalues(
    r_yy: &DMatrix<Complex64>,
    r_nn: &DMatrix<Complex64>,
) -> Result<Vec<f64>> {
    let l = r_nn
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(0))?
        .l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(r_nn.nrows(), r_nn.nrows()))
        .ok_or(Error::NotPositiveDefinite(0))?;
    let mut a = &l_inv * r_yy * l_inv.adjoint();
    hermitize(&mut a);
    let mut ev: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    Ok(ev)
}

/// Rank-1 speech covariance implied by the GEVD of one frequency.
pub fn rank1_speech_covariance(
    r_yy: &DMatrix<Complex64>,
    r_nn: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>> {
    let (lambda, _, rq) = principal_gevd(r_yy, r_nn, 0)?;
    Ok(&rq * rq.adjoint() * Complex64::new((lambda - 1.0).max(0.0), 0.0))
}

/// `z(t, f) = w(f)^H y(t, f)`.
pub fn apply_beamformer(w: &BeamWeights, inputs: &[Spectrogram]) -> Result<Spectrogram> {
    let (n_frames, n_bins) = check_channels(inputs)?;
    if w.w.len() != n_bins || w.w.iter().any(|v| v.len() != inputs.len()) {
        return Err(Error::Shape(format!(
            "{} filters of {} taps for {} bins x {} channels",
            w.w.len(),
            w.w.first().map_or(0, |v| v.len()),
            n_bins,
            inputs.len()
        )));
    }
    let mut out = Array2::<Complex64>::zeros((n_frames, n_bins));
    for (c, ch) in inputs.iter().enumerate() {
        Zip::indexed(&mut out)
            .and(&ch.data)
            .for_each(|(_, f), o, y| {
                *o += w.w[f][c].conj() * y;
            });
    }
    Ok(inputs[0].with_data(out))
}

/// Writes `bin,lambda1` rows.
pub fn write_lambda_csv(path: &Path, w: &BeamWeights) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("bin,lambda1\n");
    for (f, l) in w.lambda1.iter().enumerate() {
        text.push_str(&format!("{f},{l}\n"));
    }
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}
