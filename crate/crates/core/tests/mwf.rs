use adhoc_se::metrics::si_sdr;
use adhoc_se::mwf::{
    apply_beamformer, generalized_eigenvalues, rank1_gevd_mwf, rank1_speech_covariance,
    CovariancePair,
};
use adhoc_se::signal::{istft, Spectrogram, StftConfig, SAMPLE_RATE};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn gauss(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_pair(rng: &mut ChaCha8Rng, m: usize) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let a = DMatrix::from_fn(m, m, |_, _| gauss(rng));
    let r_nn = &a * a.adjoint() + DMatrix::identity(m, m) * c(0.1, 0.0);
    let d = DVector::from_fn(m, |_, _| gauss(rng));
    let p = rng.random_range(0.1..10.0);
    let r_yy = &r_nn + &d * d.adjoint() * c(p, 0.0);
    (r_yy, r_nn)
}

fn single(r_yy: DMatrix<Complex64>, r_nn: DMatrix<Complex64>) -> CovariancePair {
    CovariancePair {
        r_yy: vec![r_yy],
        r_nn: vec![r_nn],
        weight_mass: vec![1.0],
        fallback_bins: vec![],
    }
}

#[test]
fn matches_direct_wiener_solution_on_rank_one_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (r_yy, r_nn) = random_pair(&mut rng, 4);
        for ref_ch in 0..4 {
            let w = &rank1_gevd_mwf(&single(r_yy.clone(), r_nn.clone()), 1.0, ref_ch)
                .unwrap()
                .w[0];
            let mut e = DVector::zeros(4);
            e[ref_ch] = c(1.0, 0.0);
            let direct = r_yy.clone().try_inverse().unwrap() * (&r_yy - &r_nn) * e;
            for i in 0..4 {
                assert!((w[i] - direct[i]).norm() < 1e-8);
            }
        }
    }
}

fn steering(m: usize) -> DVector<Complex64> {
    DVector::from_fn(m, |i, _| Complex64::from_polar(1.0, 0.7 * i as f64 + 0.3))
}

#[test]
fn closed_form_array_gain() {
    let m = 4;
    let (p, s2) = (0.8, 0.3);
    let d = steering(m);
    let r_nn = DMatrix::<Complex64>::identity(m, m) * c(s2, 0.0);
    let r_ss = &d * d.adjoint() * c(p, 0.0);
    let w = &rank1_gevd_mwf(&single(&r_nn + &r_ss, r_nn.clone()), 1.0, 0)
        .unwrap()
        .w[0];
    let out_snr = (w.adjoint() * &r_ss * w)[(0, 0)].re / (w.adjoint() * &r_nn * w)[(0, 0)].re;
    let want = m as f64 * p / s2;
    assert!((out_snr / want - 1.0).abs() < 1e-6, "{out_snr} vs {want}");
    // MWF scaling of the distortionless (MVDR) filter d / M
    let snr = m as f64 * p / s2;
    for i in 0..m {
        let mvdr = d[i] * d[0].conj() / m as f64;
        assert!((w[i] - mvdr * (snr / (1.0 + snr))).norm() < 1e-10);
    }
}

#[test]
fn beamformed_output_beats_reference_mic() {
    let m = 4;
    let cfg = StftConfig::default();
    let (frames, bins) = (300, cfg.n_bins());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let steer: Vec<DVector<Complex64>> = (0..bins)
        .map(|f| DVector::from_fn(m, |i, _| Complex64::from_polar(1.0, 0.013 * (f * i) as f64)))
        .collect();
    let mut clean = Array2::zeros((frames, bins));
    let mut mics = vec![Array2::<Complex64>::zeros((frames, bins)); m];
    for t in 0..frames {
        for f in 0..bins {
            let s = gauss(&mut rng);
            clean[[t, f]] = s * steer[f][0];
            for (i, mic) in mics.iter_mut().enumerate() {
                mic[[t, f]] = s * steer[f][i] + gauss(&mut rng);
            }
        }
    }
    let template = Spectrogram::zeros(frames, &cfg, SAMPLE_RATE);
    let channels: Vec<Spectrogram> = mics.into_iter().map(|d| template.with_data(d)).collect();
    let cov = CovariancePair {
        r_yy: steer
            .iter()
            .map(|d| d * d.adjoint() + DMatrix::identity(m, m))
            .collect(),
        r_nn: vec![DMatrix::identity(m, m); bins],
        weight_mass: vec![1.0; bins],
        fallback_bins: vec![],
    };
    let w = rank1_gevd_mwf(&cov, 1.0, 0).unwrap();
    let z = istft(&apply_beamformer(&w, &channels).unwrap(), &cfg).unwrap();
    let reference = istft(&template.with_data(clean), &cfg).unwrap();
    let noisy = istft(&channels[0], &cfg).unwrap();
    let gain = si_sdr(&z, &reference).unwrap() - si_sdr(&noisy, &reference).unwrap();
    assert!(gain >= 5.0, "array gain {gain} dB");
}

fn arb_pair() -> impl Strategy<Value = (DMatrix<Complex64>, DMatrix<Complex64>)> {
    any::<u64>().prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(2..=5);
        let (_, r_nn) = random_pair(&mut rng, m);
        // general (not rank-1) PSD speech term
        let b = DMatrix::from_fn(m, 2, |_, _| gauss(&mut rng));
        (&r_nn + &b * b.adjoint(), r_nn)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenvalues_at_least_one((r_yy, r_nn) in arb_pair()) {
        let ev = generalized_eigenvalues(&r_yy, &r_nn).unwrap();
        prop_assert!(ev.iter().all(|l| *l >= 1.0 - 1e-9));
    }

    #[test]
    fn invariant_to_common_scaling((r_yy, r_nn) in arb_pair(), scale in 1e-3f64..1e3) {
        let a = rank1_gevd_mwf(&single(r_yy.clone(), r_nn.clone()), 1.0, 0).unwrap();
        let k = c(scale, 0.0);
        let b = rank1_gevd_mwf(&single(r_yy * k, r_nn * k), 1.0, 0).unwrap();
        prop_assert!((&a.w[0] - &b.w[0]).norm() <= 1e-10 * a.w[0].norm().max(1.0));
    }

    #[test]
    fn noise_power_non_increasing_in_mu((r_yy, r_nn) in arb_pair()) {
        let mut prev = f64::INFINITY;
        for mu in [0.0, 0.1, 0.5, 1.0, 2.0, 10.0] {
            let w = &rank1_gevd_mwf(&single(r_yy.clone(), r_nn.clone()), mu, 0).unwrap().w[0];
            let p = (w.adjoint() * &r_nn * w)[(0, 0)].re;
            prop_assert!(p <= prev * (1.0 + 1e-12));
            prev = p;
        }
    }

    #[test]
    fn speech_covariance_is_rank_one((r_yy, r_nn) in arb_pair()) {
        let r_ss = rank1_speech_covariance(&r_yy, &r_nn).unwrap();
        let sv = r_ss.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        prop_assert!(sv[1] <= 1e-8 * sv[0]);
    }
}
