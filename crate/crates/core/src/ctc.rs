//! Connectionist temporal classification: collapse map, log-space
//! forward-backward loss, greedy decoding and an enumeration oracle.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grad::{Array, Tape, Var};

/// Index of the blank symbol.
pub const BLANK: usize = 0;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest alignment space [`brute_force_prob`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// `T x V` per-frame label distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    frames: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl ProbGrid {
    /// Validates that every row is a probability distribution (sum within 1e-6).
    pub fn new(frames: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || vocab < 2 || data.len() != frames * vocab {
            return Err(Error::Shape {
                op: "ProbGrid::new",
                detail: format!("{frames} x {vocab} grid with {} values", data.len()),
            });
        }
        for (t, row) in data.chunks(vocab).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::NonFinite("probability grid"));
            }
            let s: f64 = row.iter().sum();
            if libm::fabs(s - 1.0) > 1e-6 {
                return Err(Error::Config(format!("row {t} sums to {s}")));
            }
        }
        Ok(Self {
            frames,
            vocab,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    #[inline]
    fn log_prob(&self, t: usize, k: usize) -> f64 {
        libm::log(self.data[t * self.vocab + k].max(PROB_FLOOR))
    }
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Number of adjacent equal pairs in `label`.
pub fn repeats(label: &[usize]) -> usize {
    label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frame count admitting an alignment of `label`.
pub fn required_frames(label: &[usize]) -> usize {
    label.len() + repeats(label)
}

fn check_label(label: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = label.iter().find(|&&k| k == BLANK || k >= vocab) {
        return Err(Error::Config(format!(
            "label index {bad} outside [1, {}]",
            vocab - 1
        )));
    }
    Ok(())
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

/// CTC loss and its gradient with respect to every grid probability.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    /// `-ln p(label | grid)`.
    pub loss: f64,
    /// `d loss / d y[t][k]`, row-major `T x V`.
    pub grad: Vec<f64>,
}

/// Log-space forward-backward over the blank-interleaved label.
///
/// Returns [`Error::InfeasibleAlignment`] when the grid has fewer frames
/// than [`required_frames`].
pub fn ctc_loss_and_grad(grid: &ProbGrid, label: &[usize]) -> Result<CtcResult> {
    check_label(label, grid.vocab)?;
    let t_len = grid.frames;
    let required = required_frames(label);
    if t_len < required {
        return Err(Error::InfeasibleAlignment {
            label_len: label.len(),
            required,
            frames: t_len,
        });
    }
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK } else { label[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = grid.log_prob(0, ext[0]);
    if s_len > 1 {
        alpha[1] = grid.log_prob(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg {
                neg
            } else {
                acc + grid.log_prob(t, ext[s])
            };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = grid.log_prob(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = grid.log_prob(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc == neg {
                neg
            } else {
                acc + grid.log_prob(t, ext[s])
            };
        }
    }

    let end = (t_len - 1) * s_len;
    let mut log_p = alpha[end + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[end + s_len - 2]);
    }

    // alpha_t(s) + beta_t(s) counts y_t(ext[s]) twice:
    // dp/dy_t(k) = sum_{s: ext[s]=k} exp(alpha + beta) / y_t(k)^2
    let v = grid.vocab;
    let mut grad = vec![0.0; t_len * v];
    let mut acc = vec![neg; v];
    for t in 0..t_len {
        acc.fill(neg);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            acc[ext[s]] = log_add(acc[ext[s]], ab);
        }
        for k in 0..v {
            let y = grid.data[t * v + k];
            if acc[k] == neg || y < PROB_FLOOR {
                continue;
            }
            grad[t * v + k] = -libm::exp(acc[k] - log_p - 2.0 * libm::log(y));
        }
    }
    Ok(CtcResult { loss: -log_p, grad })
}

/// `-ln p(label | grid)`; `+inf` when no alignment fits in the grid.
pub fn ctc_loss(grid: &ProbGrid, label: &[usize]) -> Result<f64> {
    match ctc_loss_and_grad(grid, label) {
        Ok(r) => Ok(r.loss),
        Err(Error::InfeasibleAlignment { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Records the CTC loss of a `[T, V]` probability node on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, probs: Var, label: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "ctc_loss",
            detail: format!("expected [T, V], got {shape:?}"),
        });
    }
    let grid = ProbGrid::new(shape[0], shape[1], tape.value(probs).data().to_vec())?;
    let r = ctc_loss_and_grad(&grid, label)?;
    tape.custom_scalar(probs, r.loss, Array::new(shape, r.grad)?)
}

/// Sums the probability of every alignment in `A^T` whose collapse equals
/// `label`. Exponential; limited to [`BRUTE_FORCE_LIMIT`] alignments.
pub fn brute_force_prob(grid: &ProbGrid, label: &[usize]) -> Result<f64> {
    let (t_len, v) = (grid.frames, grid.vocab);
    let total = (v as u64).checked_pow(t_len as u32).unwrap_or(u64::MAX);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(total));
    }
    let mut path = vec![0usize; t_len];
    let mut sum = 0.0;
    loop {
        if collapse(&path) == label {
            sum += path
                .iter()
                .enumerate()
                .map(|(t, &k)| grid.data[t * v + k])
                .product::<f64>();
        }
        // odometer increment
        let mut i = t_len;
        loop {
            if i == 0 {
                return Ok(sum);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Per-frame argmax (lowest index on ties), then [`collapse`].
pub fn best_path(grid: &ProbGrid) -> Vec<usize> {
    (0..grid.frames)
        .map(|t| {
            let row = grid.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode(grid: &ProbGrid) -> Vec<usize> {
    collapse(&best_path(grid))
}
