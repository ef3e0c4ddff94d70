use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn spectra(a: &[f64], b: &[f64], n: usize) -> (Vec<Complex64>, Vec<Complex64>, FftPlanner<f64>) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fft.process(&mut fa);
    fft.process(&mut fb);
    (fa, fb, planner)
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let (mut fa, fb, mut planner) = spectra(a, b, n);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    planner.plan_fft_inverse(n).process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Cross-correlation `r[l] = sum_n x[n] * y[n + l]` for `l` in `-max_lag..=max_lag`.
///
/// Entry `i` of the result holds lag `i - max_lag`. A positive peak lag means
/// `y` is a delayed copy of `x`.
pub fn fft_xcorr(x: &[f64], y: &[f64], max_lag: usize) -> Vec<f64> {
    let n = (x.len() + y.len() + 2 * max_lag).next_power_of_two();
    let (fx, mut fy, mut planner) = spectra(x, y, n);
    for (b, a) in fy.iter_mut().zip(&fx) {
        *b *= a.conj();
    }
    planner.plan_fft_inverse(n).process(&mut fy);
    (0..=2 * max_lag)
        .map(|i| {
            let lag = i as isize - max_lag as isize;
            let idx = lag.rem_euclid(n as isize) as usize;
            fy[idx].re / n as f64
        })
        .collect()
}

/// Delay of `y` relative to `x` measured on `x[start..start + len]` with a
/// Hann-weighted cross-correlation over `-max_lag..=max_lag`, refined to
/// sub-sample precision by parabolic interpolation around the peak.
///
/// Positive when `y` lags `x`. Panics if the search window leaves either signal.
pub fn windowed_lag(x: &[f64], y: &[f64], start: usize, len: usize, max_lag: usize) -> f64 {
    assert!(start >= max_lag && start + len + max_lag <= y.len() && start + len <= x.len());
    let xs: Vec<f64> = (0..len)
        .map(|i| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos();
            x[start + i] * w
        })
        .collect();
    let ys = &y[start - max_lag..start + len + max_lag];
    let r = fft_xcorr(&xs, ys, 2 * max_lag);
    // lag k of the padded segment is lag k - max_lag of y
    let r = &r[2 * max_lag..=4 * max_lag];
    let (i, _) = r
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty correlation");
    let i = i.clamp(1, r.len() - 2);
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 0.0 {
        0.5 * (a - c) / denom
    } else {
        0.0
    };
    i as f64 + delta - max_lag as f64
}
