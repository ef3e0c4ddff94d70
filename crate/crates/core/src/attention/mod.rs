//! Temporal-alignment attention over magnitude spectrogram windows.
//!
//! For a reference window `C_1` and a foreign window `C_j` (both `T x F`),
//! the raw score of reference frame `m` against foreign frame `n` is the
//! bilinear form `c_1(m) W c_j(n)^T`. A row softmax turns the scores into the
//! similarity matrix `S_j`, whose rows weight frames into a context `P_j`.
//! Each foreign block `[C_j | P_j]` is concatenated with the reference and a
//! per-bin linear head with sigmoid output predicts the middle-frame mask.

pub mod checkpoint;
pub mod features;
pub mod toy;
mod train;

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::{
    evaluate_loss, loss_and_gradient, train, CurvePoint, Dataset, Recording, TrainConfig,
    TrainResult,
};

/// Frames per input window.
pub const DEFAULT_WINDOW: usize = 21;
/// Magnitude of the uniform perturbation added to the identity initialization of `W`.
pub const INIT_NOISE: f64 = 0.01;

/// Magnitude windows of one reference channel followed by foreign channels.
#[derive(Debug, Clone)]
pub struct AttnInput<'a> {
    channels: Vec<ArrayView2<'a, f64>>,
}

impl<'a> AttnInput<'a> {
    pub fn new(channels: Vec<ArrayView2<'a, f64>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Shape("attention input without channels".into()))?;
        let dim = first.dim();
        for (i, c) in channels.iter().enumerate() {
            if c.dim() != dim {
                return Err(Error::Shape(format!(
                    "channel {i} is {:?}, reference is {dim:?}",
                    c.dim()
                )));
            }
            if let Some(v) = c.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "channel {i} holds {v}, magnitudes must be finite and >= 0"
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn reference(&self) -> ArrayView2<'a, f64> {
        self.channels[0]
    }

    pub fn foreign(&self) -> &[ArrayView2<'a, f64>] {
        &self.channels[1..]
    }

    pub fn n_frames(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.channels[0].ncols()
    }
}

/// Raw scores `C_1 W C_j^T`, `T x T`.
pub fn score(
    reference: ArrayView2<f64>,
    other: ArrayView2<f64>,
    w: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let f = reference.ncols();
    if other.ncols() != f || w.dim() != (f, f) || other.nrows() != reference.nrows() {
        return Err(Error::Shape(format!(
            "score of {:?} against {:?} with W {:?}",
            reference.dim(),
            other.dim(),
            w.dim()
        )));
    }
    Ok(reference.dot(&w).dot(&other.t()))
}

/// Row-stochastic `T x T` matrix. Row `m` is the reference frame, column `n`
/// the foreign frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row /= sum;
}

/// Row softmax of raw scores.
pub fn similarity(raw: &Array2<f64>) -> SimilarityMatrix {
    let mut values = raw.clone();
    for row in values.rows_mut() {
        softmax_in_place(row);
    }
    SimilarityMatrix { values }
}

impl SimilarityMatrix {
    /// Wraps a matrix whose rows already sum to one.
    pub fn from_rows(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Shape(format!("similarity of shape {:?}", values.dim())));
        }
        for (m, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("row {m} is not stochastic")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    /// Writes the matrix as CSV: a header `m,n0,n1,...` and one line per
    /// reference frame.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("m");
        for n in 0..self.n_frames() {
            out.push_str(&format!(",n{n}"));
        }
        out.push('\n');
        for (m, row) in self.values.rows().into_iter().enumerate() {
            out.push_str(&m.to_string());
            for v in row {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// `P = S V`: every row of the context is a convex combination of the rows
/// of `values`.
pub fn context(s: &SimilarityMatrix, values: ArrayView2<f64>) -> Result<Array2<f64>> {
    if values.nrows() != s.n_frames() {
        return Err(Error::Shape(format!(
            "similarity over {} frames, values have {}",
            s.n_frames(),
            values.nrows()
        )));
    }
    Ok(s.values.dot(&values))
}

/// Frames that the similarity rows combine into the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextValues {
    /// Foreign frames, re-timed onto the reference frame grid.
    #[default]
    Foreign,
    /// Reference frames.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    /// Without attention the head sees `[C_ref, C_j...]` only.
    pub attention: bool,
    /// One `W` for all foreign channels, or one per channel position.
    pub shared_w: bool,
    pub context_values: ContextValues,
    pub window: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            attention: true,
            shared_w: true,
            context_values: ContextValues::Foreign,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Attention matrices plus the per-bin mask head.
///
/// The mask of bin `f` is
/// `sigmoid(b_f + a_ref_f c_ref(f) + mean_j (a_chan_f c_j(f) + a_ctx_f p_j(f)))`
/// evaluated on the middle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnHead {
    pub config: AttnConfig,
    /// Empty without attention; one entry when shared.
    pub w: Vec<Array2<f64>>,
    pub a_ref: Array1<f64>,
    pub a_chan: Array1<f64>,
    pub a_ctx: Array1<f64>,
    pub bias: Array1<f64>,
}

impl AttnHead {
    /// All-zero parameters (mask 0.5 everywhere, `W = 0`).
    pub fn zeros(config: AttnConfig, n_bins: usize, n_foreign: usize) -> Result<Self> {
        let n_w = match (config.attention, config.shared_w) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => n_foreign,
        };
        if config.window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        if config.attention && !config.shared_w && n_foreign == 0 {
            return Err(Error::Config(
                "per-channel W needs at least one foreign channel".into(),
            ));
        }
        Ok(Self {
            config,
            w: vec![Array2::zeros((n_bins, n_bins)); n_w],
            a_ref: Array1::zeros(n_bins),
            a_chan: Array1::zeros(n_bins),
            a_ctx: Array1::zeros(n_bins),
            bias: Array1::zeros(n_bins),
        })
    }

    /// `W = I + U(-0.01, 0.01)` and a zero head.
    pub fn init(config: AttnConfig, n_bins: usize, n_foreign: usize, seed: u64) -> Result<Self> {
        let mut head = Self::zeros(config, n_bins, n_foreign)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in head.w.iter_mut() {
            for ((i, j), v) in w.indexed_iter_mut() {
                let noise = rng.random_range(-INIT_NOISE..INIT_NOISE);
                *v = if i == j { 1.0 } else { 0.0 } + noise;
            }
        }
        Ok(head)
    }

    pub fn n_bins(&self) -> usize {
        self.bias.len()
    }

    /// `W` used for foreign channel `j` (0-based among foreign channels).
    pub fn w_for(&self, j: usize) -> Result<&Array2<f64>> {
        if self.w.is_empty() {
            return Err(Error::Config("head has no attention".into()));
        }
        if self.config.shared_w {
            Ok(&self.w[0])
        } else {
            self.w.get(j).ok_or_else(|| {
                Error::Shape(format!(
                    "foreign channel {j} but only {} per-channel matrices",
                    self.w.len()
                ))
            })
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            w: self.w.iter().map(|w| Array2::zeros(w.dim())).collect(),
            a_ref: Array1::zeros(self.a_ref.len()),
            a_chan: Array1::zeros(self.a_chan.len()),
            a_ctx: Array1::zeros(self.a_ctx.len()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    /// Named parameter blocks, flattened in row-major order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .w
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("w{i}"), w.as_slice().expect("standard layout")))
            .collect();
        out.push(("a_ref".into(), self.a_ref.as_slice().expect("contiguous")));
        out.push(("a_chan".into(), self.a_chan.as_slice().expect("contiguous")));
        out.push(("a_ctx".into(), self.a_ctx.as_slice().expect("contiguous")));
        out.push(("bias".into(), self.bias.as_slice().expect("contiguous")));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .w
            .iter_mut()
            .enumerate()
            .map(|(i, w)| (format!("w{i}"), w.as_slice_mut().expect("standard layout")))
            .collect();
        out.push(("a_ref".into(), self.a_ref.as_slice_mut().expect("contiguous")));
        out.push(("a_chan".into(), self.a_chan.as_slice_mut().expect("contiguous")));
        out.push(("a_ctx".into(), self.a_ctx.as_slice_mut().expect("contiguous")));
        out.push(("bias".into(), self.bias.as_slice_mut().expect("contiguous")));
        out
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        for (w, o) in self.w.iter_mut().zip(&other.w) {
            w.scaled_add(alpha, o);
        }
        self.a_ref.scaled_add(alpha, &other.a_ref);
        self.a_chan.scaled_add(alpha, &other.a_chan);
        self.a_ctx.scaled_add(alpha, &other.a_ctx);
        self.bias.scaled_add(alpha, &other.bias);
    }

    pub(crate) fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for w in self.w.iter_mut() {
            *w *= k;
        }
        self.a_ref *= k;
        self.a_chan *= k;
        self.a_ctx *= k;
        self.bias *= k;
    }

    fn check_input(&self, input: &AttnInput) -> Result<()> {
        if input.n_bins() != self.n_bins() {
            return Err(Error::Shape(format!(
                "input has {} bins, head expects {}",
                input.n_bins(),
                self.n_bins()
            )));
        }
        if self.config.attention && !self.config.shared_w && input.foreign().len() != self.w.len()
        {
            return Err(Error::Shape(format!(
                "{} foreign channels for {} per-channel matrices",
                input.foreign().len(),
                self.w.len()
            )));
        }
        Ok(())
    }
}

fn context_values<'a>(head: &AttnHead, input: &AttnInput<'a>, j: usize) -> ArrayView2<'a, f64> {
    match head.config.context_values {
        ContextValues::Foreign => input.foreign()[j],
        ContextValues::Reference => input.reference(),
    }
}

/// Similarity matrix of every foreign channel against the reference.
pub fn similarities(input: &AttnInput, head: &AttnHead) -> Result<Vec<SimilarityMatrix>> {
    head.check_input(input)?;
    input
        .foreign()
        .iter()
        .enumerate()
        .map(|(j, c)| Ok(similarity(&score(input.reference(), *c, head.w_for(j)?.view())?)))
        .collect()
}

/// `[C_ref | C_1 | P_1 | C_2 | P_2 | ...]` along the frequency axis, or
/// `[C_ref | C_1 | C_2 | ...]` without attention.
pub fn assemble(input: &AttnInput, head: &AttnHead) -> Result<Array2<f64>> {
    head.check_input(input)?;
    let mut blocks = vec![input.reference().to_owned()];
    let sims = if head.config.attention {
        similarities(input, head)?
    } else {
        Vec::new()
    };
    for (j, c) in input.foreign().iter().enumerate() {
        blocks.push(c.to_owned());
        if let Some(s) = sims.get(j) {
            blocks.push(context(s, context_values(head, input, j))?);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn head_output(
    head: &AttnHead,
    reference: ArrayView1<f64>,
    foreign: &[(ArrayView1<f64>, Option<ArrayView1<f64>>)],
) -> Array1<f64> {
    let n = head.n_bins();
    let mut z = &head.bias + &(&head.a_ref * &reference);
    if !foreign.is_empty() {
        let inv = 1.0 / foreign.len() as f64;
        for (c, p) in foreign {
            z.scaled_add(inv, &(&head.a_chan * c));
            if let Some(p) = p {
                z.scaled_add(inv, &(&head.a_ctx * p));
            }
        }
    }
    debug_assert_eq!(z.len(), n);
    z.mapv_into(sigmoid)
}

/// Middle-frame mask from an assembled feature block.
pub fn head_forward(features: ArrayView2<f64>, head: &AttnHead) -> Result<Array1<f64>> {
    let f = head.n_bins();
    let per_foreign = if head.config.attention { 2 * f } else { f };
    let width = features.ncols();
    if width < f || (width - f) % per_foreign != 0 || features.nrows() == 0 {
        return Err(Error::Shape(format!(
            "feature block {:?} does not match {f} bins",
            features.dim()
        )));
    }
    let mid = features.row(features.nrows() / 2);
    let foreign: Vec<_> = (0..(width - f) / per_foreign)
        .map(|j| {
            let start = f + j * per_foreign;
            let c = mid.slice(s![start..start + f]);
            let p = head
                .config
                .attention
                .then(|| mid.slice(s![start + f..start + 2 * f]));
            (c, p)
        })
        .collect();
    Ok(head_output(head, mid.slice(s![..f]), &foreign))
}

/// Intermediate values of the middle-frame forward pass of one window.
pub(crate) struct MidForward {
    pub mid: usize,
    /// Softmax row of the middle reference frame, per foreign channel.
    pub s_mid: Vec<Array1<f64>>,
    /// Context row of the middle frame, per foreign channel.
    pub p_mid: Vec<Array1<f64>>,
    pub mask: Array1<f64>,
}

/// Same result as `head_forward(assemble(..))`, computing only the middle row.
pub(crate) fn forward_mid(input: &AttnInput, head: &AttnHead) -> Result<MidForward> {
    head.check_input(input)?;
    let mid = input.n_frames() / 2;
    let reference = input.reference();
    let c_ref = reference.row(mid);
    let mut s_mid = Vec::new();
    let mut p_mid = Vec::new();
    if head.config.attention {
        for (j, c) in input.foreign().iter().enumerate() {
            let q = c_ref.dot(head.w_for(j)?);
            let mut row = c.dot(&q);
            softmax_in_place(row.view_mut());
            p_mid.push(row.dot(&context_values(head, input, j)));
            s_mid.push(row);
        }
    }
    let foreign: Vec<_> = input
        .foreign()
        .iter()
        .enumerate()
        .map(|(j, c)| (c.row(mid), p_mid.get(j).map(|p| p.view())))
        .collect();
    let mask = head_output(head, c_ref, &foreign);
    Ok(MidForward {
        mid,
        s_mid,
        p_mid,
        mask,
    })
}

/// Mask for the middle frame of `input`.
pub fn predict(input: &AttnInput, head: &AttnHead) -> Result<Array1<f64>> {
    Ok(forward_mid(input, head)?.mask)
}

/// First row included in the offset read-out; the same number of rows is
/// skipped at the end, where the window truncates the diagonal.
pub const STO_EDGE_ROWS: usize = 3;

/// Offset of the foreign channel relative to the reference, in ms. Positive
/// when the foreign channel lags.
///
/// Takes the mode of `argmax_n S(m, n) - m` over rows away from the window
/// edges. Returns `None` when every such row is flat or when the mode is tied.
pub fn estimate_sto(s: &SimilarityMatrix, hop_ms: f64) -> Option<f64> {
    estimate_sto_frames(s).map(|d| d as f64 * hop_ms)
}

/// [`estimate_sto`] in frames.
pub fn estimate_sto_frames(s: &SimilarityMatrix) -> Option<i64> {
    let t = s.n_frames();
    if t <= 2 * STO_EDGE_ROWS {
        return None;
    }
    let mut counts = std::collections::BTreeMap::<i64, usize>::new();
    for m in STO_EDGE_ROWS..t - STO_EDGE_ROWS {
        let row = s.values.row(m);
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if hi - lo <= 1e-12 * hi.abs().max(1e-300) {
            continue;
        }
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |best, (n, &v)| if v > row[best] { n } else { best });
        *counts.entry(arg as i64 - m as i64).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let mut modes = counts.iter().filter(|(_, c)| **c == top);
    let (d, _) = modes.next()?;
    if modes.next().is_some() {
        return None;
    }
    Some(*d)
}

/// `T x T` similarity whose row `m` concentrates on column `m + d` (clamped
/// to the window). Rows whose target falls outside are uniform.
pub fn shifted_diagonal(t: usize, d: i64, peak: f64) -> Result<SimilarityMatrix> {
    if t < 2 || !(0.0..=1.0).contains(&peak) {
        return Err(Error::InvalidArgument(format!(
            "diagonal of size {t} with peak {peak}"
        )));
    }
    let rest = (1.0 - peak) / (t - 1) as f64;
    let mut v = Array2::from_elem((t, t), 1.0 / t as f64);
    for m in 0..t {
        let n = m as i64 + d;
        if (0..t as i64).contains(&n) {
            v.row_mut(m).fill(rest);
            v[[m, n as usize]] = peak;
        }
    }
    SimilarityMatrix::from_rows(v)
}

/// Every foreign channel's similarity and offset estimate for one window.
pub fn window_offsets(
    input: &AttnInput,
    head: &AttnHead,
    hop_ms: f64,
) -> Result<Vec<(SimilarityMatrix, Option<f64>)>> {
    Ok(similarities(input, head)?
        .into_iter()
        .map(|s| {
            let est = estimate_sto(&s, hop_ms);
            (s, est)
        })
        .collect())
}

/// Adds `delta` to entry `index` of the named parameter block.
pub fn perturb(head: &mut AttnHead, block: &str, index: usize, delta: f64) -> Result<()> {
    for (name, b) in head.blocks_mut() {
        if name == block {
            let v = b.get_mut(index).ok_or_else(|| {
                Error::InvalidArgument(format!("{block}[{index}] out of range"))
            })?;
            *v += delta;
            return Ok(());
        }
    }
    Err(Error::InvalidArgument(format!("no parameter block {block}")))
}
