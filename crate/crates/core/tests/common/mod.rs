#![allow(dead_code)]

use adhoc_se::attention::{
    evaluate_loss, loss_and_gradient, perturb, AttnConfig, AttnHead, Dataset, Recording,
    TrainConfig,
};
use adhoc_se::scene::{synthetic_scene, SceneConfig, SceneRecipe, SceneSignals};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn scene_with(seed: u64, snr_db: Option<f64>, n_nodes: usize) -> SceneSignals {
    let recipe = SceneRecipe {
        config: SceneConfig {
            n_nodes,
            ..SceneConfig::default()
        },
        snr_range_db: snr_db.map(|s| (s, s)),
        ..SceneRecipe::default()
    };
    synthetic_scene(seed as usize, seed, &recipe).unwrap().1
}

pub fn scene(seed: u64, snr_db: f64) -> SceneSignals {
    scene_with(seed, Some(snr_db), 4)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, f), |_| rng.random_range(0.0..1.0))
}

pub fn random_head(cfg: AttnConfig, f: usize, n_foreign: usize, rng: &mut ChaCha8Rng) -> AttnHead {
    let mut head = AttnHead::zeros(cfg, f, n_foreign).unwrap();
    for (_, block) in head.blocks_mut() {
        for v in block.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v = 0.5 * g;
        }
    }
    head
}

pub fn random_dataset(rng: &mut ChaCha8Rng, t: usize, f: usize, n_foreign: usize, n: usize) -> Dataset {
    let mut data = Dataset::new(t);
    for _ in 0..n {
        let channels = (0..=n_foreign).map(|_| uniform(rng, t, f)).collect();
        let target = uniform(rng, t, f);
        data.push(Recording { channels, target }, 1).unwrap();
    }
    data
}

/// Largest per-block `max |analytic - numeric| / max |numeric|`.
pub fn gradient_error(head: &AttnHead, data: &Dataset) -> f64 {
    let (_, grad) = loss_and_gradient(head, data).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (name, analytic) in grad.blocks() {
        let mut max_err: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = head.clone();
            perturb(&mut plus, &name, i, h).unwrap();
            let mut minus = head.clone();
            perturb(&mut minus, &name, i, -h).unwrap();
            let num = (evaluate_loss(&plus, data).unwrap() - evaluate_loss(&minus, data).unwrap())
                / (2.0 * h);
            max_err = max_err.max((a - num).abs());
            max_num = max_num.max(num.abs());
        }
        if max_num > 0.0 {
            worst = worst.max(max_err / max_num);
        }
    }
    worst
}

/// Optimizer settings for the toy alignment task.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2.0,
        steps: 1500,
        eval_every: 25,
        patience: Some(20),
        ..TrainConfig::default()
    }
}
