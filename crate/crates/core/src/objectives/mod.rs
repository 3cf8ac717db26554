//! Training losses: label-smoothed negative log-likelihood for
//! classification, and the log-depth normalization with scale-invariant and
//! multi-scale gradient losses for dense depth.
//!
//! Depth losses operate on the residual `R = target - prediction` in
//! normalized log-depth space and skip invalid pixels entirely.

use thiserror::Error;

use crate::nn::{ShapeError, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Default label-smoothing mass.
pub const LABEL_SMOOTHING: f64 = 0.1;

/// Smoothed target distribution: `1-ε` on the true class, `ε/(C-1)`
/// elsewhere.
pub fn smoothed_target(
    classes: usize,
    target: usize,
    eps: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    if target >= classes {
        return Err(ObjectiveError::TargetOutOfRange { target, classes });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(ObjectiveError::Config(format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    let off = if classes > 1 {
        eps / (classes - 1) as f64
    } else {
        0.0
    };
    let mut q = vec![off; classes];
    q[target] = if classes > 1 { 1.0 - eps } else { 1.0 };
    Ok(q)
}

/// Cross-entropy between `log_softmax(logits)` and the smoothed target.
pub fn nll_label_smoothing(logits: &[f64], target: usize, eps: f64) -> Result<f64, ObjectiveError> {
    let q = smoothed_target(logits.len(), target, eps)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(-q
        .iter()
        .zip(logits)
        .map(|(q, l)| if *q == 0.0 { 0.0 } else { q * (l - lse) })
        .sum::<f64>())
}

/// Differentiable [`nll_label_smoothing`] for a `1 × C` logits node.
pub fn nll_label_smoothing_on(
    tape: &mut Tape<'_>,
    logits: Var,
    target: usize,
    eps: f64,
) -> Result<Var, ObjectiveError> {
    let q = smoothed_target(tape.value(logits).len(), target, eps)?;
    let lp = tape.log_softmax_rows(logits);
    let weighted = tape.mul_const(lp, q)?;
    let s = tape.sum_all(weighted);
    Ok(tape.scale(s, -1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLossConfig {
    /// Lower clip bound in meters.
    pub min_depth: f64,
    /// Upper clip bound in meters.
    pub max_depth: f64,
    /// Weight of the multi-scale gradient term.
    pub lambda: f64,
    /// Number of resolutions for the gradient term (full resolution
    /// included).
    pub scales: usize,
    /// Weight of the squared mean residual. Both other terms ignore a
    /// constant log-depth offset, so with 0 the absolute depth level is
    /// left to drift.
    pub level_weight: f64,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        Self {
            min_depth: 2.0,
            max_depth: 80.0,
            lambda: 0.25,
            scales: 4,
            level_weight: 0.0,
        }
    }
}

impl DepthLossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(ObjectiveError::Config(format!(
                "depth range [{}, {}] must satisfy 0 < min < max",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(ObjectiveError::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        if !(self.level_weight >= 0.0) {
            return Err(ObjectiveError::Config(format!(
                "level weight {} must be non-negative",
                self.level_weight
            )));
        }
        if self.scales == 0 {
            return Err(ObjectiveError::Config(
                "at least one scale is required".into(),
            ));
        }
        Ok(())
    }
}

/// Clips `depth` to the configured range and maps its logarithm linearly
/// onto `[0, 1]`. NaN (invalid) passes through.
pub fn log_depth_normalize(depth: f64, cfg: &DepthLossConfig) -> Result<f64, ObjectiveError> {
    if depth.is_nan() {
        return Ok(f64::NAN);
    }
    if depth <= 0.0 {
        return Err(ObjectiveError::NonPositiveDepth(depth));
    }
    let d = depth.clamp(cfg.min_depth, cfg.max_depth);
    Ok((d.ln() - cfg.min_depth.ln()) / (cfg.max_depth.ln() - cfg.min_depth.ln()))
}

/// Inverse of [`log_depth_normalize`] on the valid range.
pub fn log_depth_denormalize(value: f64, cfg: &DepthLossConfig) -> f64 {
    (cfg.min_depth.ln() + value * (cfg.max_depth.ln() - cfg.min_depth.ln())).exp()
}

/// Normalizes a depth map; invalid pixels become NaN.
pub fn normalize_depth_map(
    depths: &[f32],
    cfg: &DepthLossConfig,
) -> Result<Vec<f64>, ObjectiveError> {
    depths
        .iter()
        .map(|&d| log_depth_normalize(d as f64, cfg))
        .collect()
}

fn check_sizes(r: &[f64], mask: &[bool], h: usize, w: usize) -> Result<usize, ObjectiveError> {
    if r.len() != mask.len() || r.len() != h * w {
        return Err(ObjectiveError::Size(format!(
            "{} residuals, {} mask bits, {h}x{w} map",
            r.len(),
            mask.len()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(ObjectiveError::NoValidPixels),
        n => Ok(n),
    }
}

/// Scale-invariant loss `(1/n)ΣR² - (1/n²)(ΣR)²` over valid pixels, with
/// its gradient with respect to `R` (zero at invalid pixels).
///
/// Evaluated as the variance of `R` about its mean in two passes, which
/// avoids the cancellation of the textbook form when `R` is nearly constant.
pub fn scale_invariant_loss(r: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let n = check_sizes(r, mask, r.len(), 1)? as f64;
    let valid = || r.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v);
    let mean = valid().sum::<f64>() / n;
    let (mut s, mut s2) = (0.0, 0.0);
    for d in valid().map(|v| v - mean) {
        s += d;
        s2 += d * d;
    }
    let value = ((s2 - s * s / n) / n).max(0.0);
    let shift = mean + s / n;
    let grad = r
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { 2.0 * (v - shift) / n } else { 0.0 })
        .collect();
    Ok((value, grad))
}

struct Level {
    h: usize,
    w: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    /// Number of valid sources pooled into each cell.
    counts: Vec<usize>,
}

fn pool(prev: &Level) -> Level {
    let (h, w) = (prev.h.div_ceil(2), prev.w.div_ceil(2));
    let mut values = vec![0.0; h * w];
    let mut counts = vec![0; h * w];
    for y in 0..prev.h {
        for x in 0..prev.w {
            let i = y * prev.w + x;
            if prev.valid[i] {
                let c = (y / 2) * w + x / 2;
                values[c] += prev.values[i];
                counts[c] += 1;
            }
        }
    }
    for (v, &c) in values.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    let valid = counts.iter().map(|&c| c > 0).collect();
    Level {
        h,
        w,
        values,
        valid,
        counts,
    }
}

/// Multi-scale gradient loss: `(1/n) Σ_k Σ_i |∇x R_i^k| + |∇y R_i^k|` with
/// forward differences on `scales` successively 2×-average-pooled copies of
/// `R` (pooling ignores invalid sources; a cell with none is invalid).
/// Differences touching an invalid pixel are skipped. `n` is the
/// full-resolution valid count. Returns the value and `d/dR`.
pub fn multiscale_gradient_loss(
    r: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    scales: usize,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let n = check_sizes(r, mask, h, w)? as f64;
    let base = Level {
        h,
        w,
        values: r
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
        valid: mask.to_vec(),
        counts: vec![1; h * w],
    };
    let mut levels = vec![base];
    for _ in 1..scales {
        let next = pool(levels.last().expect("non-empty"));
        levels.push(next);
    }

    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.h * l.w]).collect();
    for (lvl, g) in levels.iter().zip(grads.iter_mut()) {
        for y in 0..lvl.h {
            for x in 0..lvl.w {
                let i = y * lvl.w + x;
                if !lvl.valid[i] {
                    continue;
                }
                let mut diff = |j: usize| {
                    if lvl.valid[j] {
                        let d = lvl.values[j] - lvl.values[i];
                        total += d.abs();
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[j] += s;
                        g[i] -= s;
                    }
                };
                if x + 1 < lvl.w {
                    diff(i + 1);
                }
                if y + 1 < lvl.h {
                    diff(i + lvl.w);
                }
            }
        }
    }
    // Push coarse gradients back through the pooling to full resolution.
    for k in (1..levels.len()).rev() {
        let (fine, coarse) = (&levels[k - 1], &levels[k]);
        let gc = grads[k].clone();
        let gf = &mut grads[k - 1];
        for y in 0..fine.h {
            for x in 0..fine.w {
                let i = y * fine.w + x;
                if fine.valid[i] {
                    let c = (y / 2) * coarse.w + x / 2;
                    gf[i] += gc[c] / coarse.counts[c] as f64;
                }
            }
        }
    }
    let grad = grads.swap_remove(0).into_iter().map(|g| g / n).collect();
    Ok((total / n, grad))
}

/// `L_si + λ·L_msi + μ·mean(R)²` for normalized log-depth `target` and
/// `prediction` (`h × w`, row-major), `μ` being the level weight. Returns the value and its gradient with respect to
/// the prediction.
pub fn combined_depth_loss(
    target: &[f64],
    prediction: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    cfg: &DepthLossConfig,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    cfg.validate()?;
    if target.len() != prediction.len() {
        return Err(ObjectiveError::Size(format!(
            "{} targets vs {} predictions",
            target.len(),
            prediction.len()
        )));
    }
    let r: Vec<f64> = target
        .iter()
        .zip(prediction)
        .zip(mask)
        .map(|((t, p), &m)| if m { t - p } else { 0.0 })
        .collect();
    let (si, gsi) = scale_invariant_loss(&r, mask)?;
    let (mut value, mut grad_r) = if cfg.lambda == 0.0 {
        (si, gsi)
    } else {
        let (msi, gmsi) = multiscale_gradient_loss(&r, mask, h, w, cfg.scales)?;
        (
            si + cfg.lambda * msi,
            gsi.iter()
                .zip(&gmsi)
                .map(|(a, b)| a + cfg.lambda * b)
                .collect(),
        )
    };
    if cfg.level_weight > 0.0 {
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let mean = r.iter().sum::<f64>() / n;
        value += cfg.level_weight * mean * mean;
        let g = 2.0 * cfg.level_weight * mean / n;
        for (gr, &m) in grad_r.iter_mut().zip(mask) {
            if m {
                *gr += g;
            }
        }
    }
    Ok((value, grad_r.into_iter().map(|g| -g).collect()))
}

/// Differentiable [`combined_depth_loss`] on a prediction node with `h·w`
/// elements.
pub fn combined_depth_loss_on(
    tape: &mut Tape<'_>,
    prediction: Var,
    target: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    cfg: &DepthLossConfig,
) -> Result<Var, ObjectiveError> {
    let (value, grad) =
        combined_depth_loss(target, tape.value(prediction).data(), mask, h, w, cfg)?;
    Ok(tape.custom_scalar(prediction, value, grad)?)
}
