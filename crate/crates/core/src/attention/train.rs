//! Mean-squared-error training of the attention head by clipped gradient
//! descent, with analytic gradients through
//! score -> softmax -> context -> concatenation -> linear -> sigmoid.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward_mid, AttnHead, AttnInput, ContextValues};
use crate::error::{Error, Result};

/// Items per sequential accumulation chunk. Chunks are reduced in index
/// order, so results do not depend on the thread count.
const CHUNK: usize = 16;

/// Full-length magnitude channels (reference first) and the target mask of
/// the reference, all `frames x bins`.
#[derive(Debug, Clone)]
pub struct Recording {
    pub channels: Vec<Array2<f64>>,
    pub target: Array2<f64>,
}

/// Windows over a set of recordings. An item `(r, start)` covers frames
/// `start..start + window` of recording `r`; its label is the target row of
/// the middle frame.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    pub items: Vec<(usize, usize)>,
    pub window: usize,
}

impl Dataset {
    pub fn new(window: usize) -> Self {
        Self {
            recordings: Vec::new(),
            items: Vec::new(),
            window,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Adds a recording and every `stride`-th window of it.
    pub fn push(&mut self, rec: Recording, stride: usize) -> Result<()> {
        let frames = rec.target.nrows();
        if rec.channels.iter().any(|c| c.dim() != rec.target.dim()) {
            return Err(Error::Shape("recording channels differ from target".into()));
        }
        if frames < self.window || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "recording of {frames} frames for window {} and stride {stride}",
                self.window
            )));
        }
        let r = self.recordings.len();
        self.recordings.push(rec);
        self.items
            .extend((0..=frames - self.window).step_by(stride).map(|t| (r, t)));
        Ok(())
    }

    pub fn item(&self, i: usize) -> Result<(AttnInput<'_>, ndarray::ArrayView1<'_, f64>)> {
        let (r, start) = self.items[i];
        let rec = &self.recordings[r];
        let rows = s![start..start + self.window, ..];
        let input = AttnInput::new(rec.channels.iter().map(|c| c.slice(rows)).collect())?;
        Ok((input, rec.target.row(start + self.window / 2)))
    }
}

/// Adds the gradient of `scale * sum_f (mask_f - target_f)^2` to `grad` and
/// returns the unscaled squared error.
fn accumulate_item(
    head: &AttnHead,
    input: &AttnInput,
    target: ndarray::ArrayView1<f64>,
    scale: f64,
    grad: &mut AttnHead,
) -> Result<f64> {
    if target.len() != head.n_bins() {
        return Err(Error::Shape(format!(
            "target of {} bins for a {}-bin head",
            target.len(),
            head.n_bins()
        )));
    }
    let fw = forward_mid(input, head)?;
    let err = &fw.mask - &target;
    let sq = err.dot(&err);
    // d loss / d z through the sigmoid
    let dz: Array1<f64> = ndarray::Zip::from(&err)
        .and(&fw.mask)
        .map_collect(|e, m| 2.0 * scale * e * m * (1.0 - m));
    let mid = fw.mid;
    let reference = input.reference();
    let c_ref = reference.row(mid);
    grad.bias += &dz;
    grad.a_ref += &(&dz * &c_ref);
    let n_foreign = input.foreign().len();
    if n_foreign == 0 {
        return Ok(sq);
    }
    let inv = 1.0 / n_foreign as f64;
    for (j, c) in input.foreign().iter().enumerate() {
        grad.a_chan.scaled_add(inv, &(&dz * &c.row(mid)));
        if !head.config.attention {
            continue;
        }
        let p = &fw.p_mid[j];
        let srow = &fw.s_mid[j];
        grad.a_ctx.scaled_add(inv, &(&dz * p));
        let dp = &dz * &head.a_ctx * inv;
        let values = match head.config.context_values {
            ContextValues::Foreign => *c,
            ContextValues::Reference => input.reference(),
        };
        let ds = values.dot(&dp);
        let inner = srow.dot(&ds);
        let dr = srow * &(&ds - inner);
        let u = c.t().dot(&dr);
        let k = if head.config.shared_w { 0 } else { j };
        let outer = c_ref
            .view()
            .insert_axis(Axis(1))
            .dot(&u.view().insert_axis(Axis(0)));
        grad.w[k] += &outer;
    }
    Ok(sq)
}

fn batch_loss_grad(head: &AttnHead, data: &Dataset, items: &[usize]) -> Result<(f64, AttnHead)> {
    let scale = 1.0 / (items.len().max(1) * head.n_bins()) as f64;
    let parts: Vec<(f64, AttnHead)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = head.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let (input, target) = data.item(i)?;
                loss += accumulate_item(head, &input, target, scale, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = head.zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.axpy(1.0, &g);
    }
    Ok((loss * scale, grad))
}

/// Mean squared error over all items and bins, and its gradient.
pub fn loss_and_gradient(head: &AttnHead, data: &Dataset) -> Result<(f64, AttnHead)> {
    let all: Vec<usize> = (0..data.len()).collect();
    batch_loss_grad(head, data, &all)
}

/// Mean squared error over all items and bins.
pub fn evaluate_loss(head: &AttnHead, data: &Dataset) -> Result<f64> {
    let parts: Vec<f64> = (0..data.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, &i| {
                let (input, target) = data.item(i)?;
                let err = super::predict(&input, head)? - target;
                Ok::<_, Error>(acc + err.dot(&err))
            })
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / (data.len().max(1) * head.n_bins()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Keep `W` at its initial value (ablation).
    pub freeze_w: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            steps: 300,
            batch_size: 64,
            clip_norm: 5.0,
            eval_every: 10,
            patience: Some(10),
            seed: 0,
            freeze_w: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Lowest validation loss so far; non-increasing along the curve.
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters at the lowest validation loss.
    pub head: AttnHead,
    pub best_step: usize,
    pub curve: Vec<CurvePoint>,
}

impl TrainResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss,best_val_loss\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e}\n",
                p.step, p.train_loss, p.val_loss, p.best_val_loss
            ));
        }
        out
    }
}

/// Gradient descent from `init`. Validation loss is checked every
/// `eval_every` steps (and before the first); the best parameters are kept.
/// An empty validation set falls back to the training set.
pub fn train(
    init: AttnHead,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.eval_every == 0 || cfg.learning_rate < 0.0 || cfg.clip_norm <= 0.0 {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    let val = if val_set.is_empty() {
        train_set
    } else {
        val_set
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = if cfg.batch_size == 0 {
        order.len()
    } else {
        cfg.batch_size.min(order.len())
    };
    let mut cursor = order.len();
    let mut head = init;
    let mut best = head.clone();
    let mut best_step = 0;
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut curve = Vec::new();
    let mut last_train = f64::NAN;
    for step in 0..=cfg.steps {
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = evaluate_loss(&head, val)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch: step,
                    loss: v,
                });
            }
            if v < best_val {
                best_val = v;
                best = head.clone();
                best_step = step;
                stale = 0;
            } else {
                stale += 1;
            }
            let train_loss = if step == 0 {
                evaluate_loss(&head, train_set)?
            } else {
                last_train
            };
            curve.push(CurvePoint {
                step,
                train_loss,
                val_loss: v,
                best_val_loss: best_val,
            });
            log::debug!("step {step}: train {train_loss:.5} val {v:.5}");
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
        if step == cfg.steps {
            break;
        }
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let items = &order[cursor..cursor + batch];
        cursor += batch;
        let (loss, mut grad) = batch_loss_grad(&head, train_set, items)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: step, loss });
        }
        last_train = loss;
        if cfg.freeze_w {
            for g in grad.w.iter_mut() {
                g.fill(0.0);
            }
        }
        let norm = grad.norm();
        if norm > cfg.clip_norm {
            grad.scale(cfg.clip_norm / norm);
        }
        head.axpy(-cfg.learning_rate, &grad);
    }
    Ok(TrainResult {
        head: best,
        best_step,
        curve,
    })
}
