//! Student/teacher loss kernel: temperature softmax with teacher centering,
//! the image-level, patch-level, adjacent-slice and KoLeo terms, their
//! weighted total, student-side gradients and the center/EMA updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clip applied to student probabilities before the log.
pub const LOG_FLOOR: f64 = 1e-30;
/// Distance guard inside the KoLeo log.
pub const KOLEO_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for LogitVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Patch logits on a `rows x cols` token grid, `k` prototypes per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLogits {
    rows: usize,
    cols: usize,
    k: usize,
    data: Vec<f64>,
}

impl PatchLogits {
    pub fn new(rows: usize, cols: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols * k != data.len() {
            return Err(Error::DimensionMismatch {
                left: data.len(),
                right: rows * cols * k,
            });
        }
        Ok(Self { rows, cols, k, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn prototypes(&self) -> usize {
        self.k
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.k;
        &self.data[start..start + self.k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub c: Vec<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn zeros(k: usize, momentum: f64) -> Self {
        Self {
            c: vec![0.0; k],
            momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub tau_s: f64,
    pub tau_t: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dino_m: f64,
    pub ibot_m: f64,
    pub dino_adj: f64,
    pub koleo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dino_m: 1.0,
            ibot_m: 1.0,
            dino_adj: 1.0,
            koleo: 0.1,
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn softmax_scaled(z: &[f64], shift: Option<&[f64]>, tau: f64) -> Result<ProbVector> {
    check_temperature(tau)?;
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let scaled: Vec<f64> = match shift {
        Some(c) => z.iter().zip(c).map(|(v, c)| (v - c) / tau).collect(),
        None => z.iter().map(|v| v / tau).collect(),
    };
    let peak = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `softmax(z / tau_s)`.
pub fn student_probs(z: &LogitVector, tau_s: f64) -> Result<ProbVector> {
    softmax_scaled(&z.0, None, tau_s)
}

/// `softmax((z - c) / tau_t)`.
pub fn teacher_probs(z: &LogitVector, center: &CenterState, tau_t: f64) -> Result<ProbVector> {
    if center.c.len() != z.len() {
        return Err(Error::DimensionMismatch {
            left: z.len(),
            right: center.c.len(),
        });
    }
    if center.c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    softmax_scaled(&z.0, Some(&center.c), tau_t)
}

/// `-sum_k p_t[k] ln max(p_s[k], 1e-30)`.
pub fn cross_entropy(p_t: &ProbVector, p_s: &ProbVector) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(Error::DimensionMismatch {
            left: p_t.len(),
            right: p_s.len(),
        });
    }
    Ok(-p_t
        .0
        .iter()
        .zip(&p_s.0)
        .map(|(t, s)| t * s.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Mean cross-entropy over every (student view, teacher view) pair.
pub fn dino_m_loss(
    student_logits: &[LogitVector],
    teacher_logits: &[LogitVector],
    temps: &Temperatures,
    center: &CenterState,
) -> Result<f64> {
    if student_logits.is_empty() || teacher_logits.is_empty() {
        return Err(Error::EmptyViewSet);
    }
    let ps = student_logits
        .iter()
        .map(|z| student_probs(z, temps.tau_s))
        .collect::<Result<Vec<_>>>()?;
    let pt = teacher_logits
        .iter()
        .map(|z| teacher_probs(z, center, temps.tau_t))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for s in &ps {
        for t in &pt {
            total += cross_entropy(t, s)?;
        }
    }
    Ok(total / (ps.len() * pt.len()) as f64)
}

/// Mean token cross-entropy restricted to the masked set `omega`.
pub fn ibot_m_loss(
    student_patches: &PatchLogits,
    teacher_patches: &PatchLogits,
    omega: &[(usize, usize)],
    temps: &Temperatures,
    center: &CenterState,
) -> Result<f64> {
    if omega.is_empty() {
        return Err(Error::EmptyMask);
    }
    if (student_patches.rows, student_patches.cols, student_patches.k)
        != (teacher_patches.rows, teacher_patches.cols, teacher_patches.k)
    {
        return Err(Error::DimensionMismatch {
            left: student_patches.data.len(),
            right: teacher_patches.data.len(),
        });
    }
    let mut total = 0.0;
    for &(row, col) in omega {
        if row >= student_patches.rows || col >= student_patches.cols {
            return Err(Error::IndexOutOfBounds {
                row,
                col,
                rows: student_patches.rows,
                cols: student_patches.cols,
            });
        }
        let ps = student_probs(&LogitVector(student_patches.token(row, col).to_vec()), temps.tau_s)?;
        let pt = teacher_probs(
            &LogitVector(teacher_patches.token(row, col).to_vec()),
            center,
            temps.tau_t,
        )?;
        total += cross_entropy(&pt, &ps)?;
    }
    Ok(total / omega.len() as f64)
}

/// Single-pair cross-entropy between the centered, sharpened teacher on one
/// slice and the student on its neighbour.
pub fn dino_adj_loss(c_s: &LogitVector, c_t: &LogitVector, temps: &Temperatures, center: &CenterState) -> Result<f64> {
    if c_s.len() != c_t.len() {
        return Err(Error::DimensionMismatch {
            left: c_s.len(),
            right: c_t.len(),
        });
    }
    let pt = teacher_probs(c_t, center, temps.tau_t)?;
    let ps = student_probs(c_s, temps.tau_s)?;
    cross_entropy(&pt, &ps)
}

fn l2_normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        (v.iter().map(|x| x / norm).collect(), norm)
    } else {
        (v.to_vec(), norm)
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<()> {
    if features.len() < 2 {
        return Err(Error::NeedTwoPoints);
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            left: dim,
            right: bad.len(),
        });
    }
    Ok(())
}

/// Nearest neighbour of every normalized point and its distance.
fn nearest(normed: &[Vec<f64>]) -> Vec<(usize, f64)> {
    (0..normed.len())
        .map(|i| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, other) in normed.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = normed[i]
                    .iter()
                    .zip(other)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// `-(1/n) sum_i ln(min_{j != i} |x_i - x_j| + delta)` on ℓ2-normalized
/// features.
pub fn koleo_loss(features: &[Vec<f64>]) -> Result<f64> {
    check_features(features)?;
    let normed: Vec<Vec<f64>> = features.iter().map(|f| l2_normalized(f).0).collect();
    let n = normed.len() as f64;
    Ok(-nearest(&normed)
        .iter()
        .map(|&(_, d)| (d + KOLEO_DELTA).ln())
        .sum::<f64>()
        / n)
}

/// KoLeo value and its gradient with respect to the raw (unnormalized)
/// features, holding each point's nearest neighbour fixed.
pub fn koleo_loss_grad(features: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_features(features)?;
    let dim = features[0].len();
    let normalized: Vec<(Vec<f64>, f64)> = features.iter().map(|f| l2_normalized(f)).collect();
    let normed: Vec<Vec<f64>> = normalized.iter().map(|(v, _)| v.clone()).collect();
    let n = features.len() as f64;
    let pairs = nearest(&normed);
    let mut value = 0.0;
    // gradient with respect to the normalized points
    let mut grad_y = vec![vec![0.0; dim]; features.len()];
    for (i, &(j, d)) in pairs.iter().enumerate() {
        value -= (d + KOLEO_DELTA).ln() / n;
        if d <= 0.0 {
            continue;
        }
        let scale = -1.0 / (n * (d + KOLEO_DELTA) * d);
        for t in 0..dim {
            let g = scale * (normed[i][t] - normed[j][t]);
            grad_y[i][t] += g;
            grad_y[j][t] -= g;
        }
    }
    // back through y = x / |x|: dx = (g - y (y·g)) / |x|
    let grad_x = grad_y
        .into_iter()
        .zip(&normalized)
        .map(|(g, (y, norm))| {
            if *norm <= 0.0 {
                return vec![0.0; dim];
            }
            let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            g.iter().zip(y).map(|(gt, yt)| (gt - yt * dot) / norm).collect()
        })
        .collect();
    Ok((value, grad_x))
}

pub fn total_loss(l_dino_m: f64, l_ibot_m: f64, l_adj: f64, l_koleo: f64, weights: &LossWeights) -> f64 {
    weights.dino_m * l_dino_m + weights.ibot_m * l_ibot_m + weights.dino_adj * l_adj + weights.koleo * l_koleo
}

/// Gradient of `cross_entropy(p_t, softmax(z / tau_s))` with respect to `z`.
pub fn ce_grad_student(p_s: &ProbVector, p_t: &ProbVector, tau_s: f64) -> Result<Vec<f64>> {
    check_temperature(tau_s)?;
    if p_s.len() != p_t.len() {
        return Err(Error::DimensionMismatch {
            left: p_s.len(),
            right: p_t.len(),
        });
    }
    Ok(p_s.0.iter().zip(&p_t.0).map(|(s, t)| (s - t) / tau_s).collect())
}

/// `c <- momentum * c + (1 - momentum) * mean(batch)`.
pub fn update_center(state: &CenterState, teacher_logit_batch: &[LogitVector]) -> Result<CenterState> {
    if teacher_logit_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = state.c.len();
    let mut mean = vec![0.0; k];
    for z in teacher_logit_batch {
        if z.len() != k {
            return Err(Error::DimensionMismatch {
                left: k,
                right: z.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&z.0) {
            *m += v;
        }
    }
    let n = teacher_logit_batch.len() as f64;
    let m = state.momentum;
    Ok(CenterState {
        c: state
            .c
            .iter()
            .zip(&mean)
            .map(|(c, s)| m * c + (1.0 - m) * (s / n))
            .collect(),
        momentum: m,
    })
}

/// `momentum * teacher + (1 - momentum) * student`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], momentum: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum {momentum} outside [0, 1]"
        )));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
        .collect())
}
