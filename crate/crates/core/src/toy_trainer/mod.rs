//! Desk-scale student/teacher training on phantoms with the four-term
//! objective. Gradients are analytic: loss gradients with respect to logits
//! are chained through the linear head and patch embedding by hand.

pub mod encoder;
pub mod phantom;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use encoder::{PatchForward, ToyEncoder};
pub use phantom::{generate_phantom, Phantom, PhantomSpec};

use crate::crop_sampler::{sample_view_sets, CropSpec, PairViews, ScaleRange, ViewSet};
use crate::dbt_pairs::{make_pair_views, sample_slice_pair};
use crate::error::{Error, Result};
use crate::mim_masker::{sample_block_mask, view_token_coverage, MaskSpec, TokenMask};
use crate::rng::item_rng;
use crate::ssl_losses::{
    ce_grad_student, cross_entropy, dino_adj_loss, dino_m_loss, ema_update, koleo_loss_grad, student_probs,
    teacher_probs, total_loss, update_center, CenterState, LogitVector, LossWeights, ProbVector, Temperatures,
};
use crate::tissue_mask::{build_mask, MaskParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rescales the student gradient to at most this ℓ2 norm; 0 disables.
    pub grad_clip: f64,
    pub patch: usize,
    pub embed_dim: usize,
    pub prototypes: usize,
    /// Gain on the fan-in scaled uniform weight initialization.
    pub init_gain: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    /// Masked fraction of each global view's token grid.
    pub mask_ratio: f64,
    pub d_max: usize,
    pub temperatures: Temperatures,
    pub weights: LossWeights,
    pub phantom: PhantomSpec,
    pub crop: CropSpec,
    pub tissue: MaskParams,
    pub mim: MaskSpec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 200,
            batch_size: 4,
            lr: 0.1,
            grad_clip: 3.0,
            patch: 4,
            embed_dim: 16,
            prototypes: 32,
            init_gain: 0.5,
            center_momentum: 0.9,
            ema_momentum: 0.9,
            mask_ratio: 0.3,
            d_max: 4,
            temperatures: Temperatures::default(),
            weights: LossWeights::default(),
            phantom: PhantomSpec::default(),
            crop: CropSpec {
                n_local: 4,
                out_size_global: 16,
                out_size_local: 8,
                ..CropSpec::default()
            },
            tissue: MaskParams::default(),
            mim: MaskSpec {
                m_min: 1,
                m_max: 4,
                ..MaskSpec::default()
            },
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let p = "toy";
        if self.batch_size < 1 {
            return Err(Error::config(format!("{p}.batch_size"), "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{p}.lr"), "must be finite and non-negative"));
        }
        if self.patch < 1 || self.embed_dim < 1 || self.prototypes < 1 {
            return Err(Error::config(
                format!("{p}.patch"),
                "patch, embed_dim and prototypes must be at least 1",
            ));
        }
        for (name, m) in [
            ("center_momentum", self.center_momentum),
            ("ema_momentum", self.ema_momentum),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::config(format!("{p}.{name}"), "must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("{p}.mask_ratio"), "must lie in [0, 1]"));
        }
        if self.d_max < 1 {
            return Err(Error::config(format!("{p}.d_max"), "must be at least 1"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config(
                format!("{p}.grad_clip"),
                "must be finite and non-negative",
            ));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::config(format!("{p}.init_gain"), "must be positive"));
        }
        if !(self.temperatures.tau_s > 0.0 && self.temperatures.tau_t > 0.0) {
            return Err(Error::config(format!("{p}.temperatures"), "must be positive"));
        }
        self.phantom.validate(&format!("{p}.phantom"))?;
        self.crop.validate(&format!("{p}.crop"))?;
        for (name, size) in [
            ("out_size_global", self.crop.out_size_global),
            ("out_size_local", self.crop.out_size_local),
        ] {
            if size % self.patch != 0 {
                return Err(Error::config(
                    format!("{p}.crop.{name}"),
                    "must be a multiple of the patch size",
                ));
            }
        }
        Ok(())
    }

    fn tokens_per_side(&self) -> usize {
        self.crop.out_size_global / self.patch
    }
}

/// One phantom's sampled inputs.
#[derive(Debug, Clone)]
pub struct ItemInputs {
    pub views: ViewSet,
    /// One token mask per teacher (global) view.
    pub token_masks: Vec<TokenMask>,
    pub pair: PairViews,
}

#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub items: Vec<ItemInputs>,
}

pub fn prepare_item<R: rand::Rng + ?Sized>(phantom: &Phantom, cfg: &ToyConfig, rng: &mut R) -> Result<ItemInputs> {
    let tissue = build_mask(&phantom.image, &cfg.tissue)?;
    let index = tissue.coverage_index();
    let views = sample_view_sets(&phantom.image, &index, &cfg.crop, rng)?;
    let side = cfg.tokens_per_side();
    let mim = MaskSpec {
        m: (cfg.mask_ratio * (side * side) as f64).round() as usize,
        ..cfg.mim.clone()
    };
    let token_masks = views
        .teacher_views
        .iter()
        .map(|v| {
            let cov = view_token_coverage(&index, &v.crop.window, side, side)?;
            sample_block_mask(&cov, &mim, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let pair = sample_slice_pair(&phantom.volume, cfg.d_max, rng)?;
    let pair = make_pair_views(&phantom.volume, &pair, &cfg.tissue, &cfg.crop, rng)?;
    Ok(ItemInputs {
        views,
        token_masks,
        pair,
    })
}

pub fn prepare_batch<R: rand::Rng + ?Sized>(phantoms: &[Phantom], cfg: &ToyConfig, rng: &mut R) -> Result<BatchInputs> {
    if phantoms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let items = phantoms
        .iter()
        .map(|p| prepare_item(p, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchInputs { items })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dino_m: f64,
    pub ibot_m: f64,
    pub dino_adj: f64,
    pub koleo: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    /// Gradient of the weighted total with respect to the student parameters.
    pub grad: Vec<f64>,
    /// Teacher image-level logits, the input to the center update.
    pub teacher_logits: Vec<LogitVector>,
    pub teacher_entropy: f64,
    /// Entropy of the batch-mean teacher distribution.
    pub teacher_mean_entropy: f64,
}

fn mean_probs(ps: &[ProbVector]) -> Vec<f64> {
    let mut out = vec![0.0; ps[0].len()];
    for p in ps {
        for (o, v) in out.iter_mut().zip(&p.0) {
            *o += v / ps.len() as f64;
        }
    }
    out
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

/// Batch objective and its student gradient. Each term is a mean over
/// items; the iBOT term averages over every (item, global view) pair with a
/// non-empty mask. Terms with zero weight contribute no gradient.
pub fn evaluate(
    student: &ToyEncoder,
    teacher: &ToyEncoder,
    center: &CenterState,
    batch: &BatchInputs,
    temps: &Temperatures,
    weights: &LossWeights,
) -> Result<Evaluation> {
    if !student.same_shape(teacher) {
        return Err(Error::ShapeMismatch("student and teacher encoders differ".into()));
    }
    if batch.items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.items.len() as f64;
    let mut grad = vec![0.0; student.params().len()];
    let mut losses = LossBreakdown::default();
    let mut teacher_logits = Vec::new();
    let mut entropy = 0.0;
    let mut koleo_points = Vec::with_capacity(batch.items.len());
    let mut koleo_fwd = Vec::with_capacity(batch.items.len());
    let ibot_count = batch
        .items
        .iter()
        .flat_map(|it| &it.token_masks)
        .filter(|m| m.count() > 0)
        .count();

    for item in &batch.items {
        // image-level self-distillation across all (student, teacher) views
        let t_fwd = item
            .views
            .teacher_views
            .iter()
            .map(|v| teacher.embed(&v.pixels, v.size, &[]))
            .collect::<Result<Vec<_>>>()?;
        let t_logits: Vec<LogitVector> = t_fwd.iter().map(|f| teacher.head(&f.pooled)).collect();
        let t_probs = t_logits
            .iter()
            .map(|z| teacher_probs(z, center, temps.tau_t))
            .collect::<Result<Vec<_>>>()?;
        let s_fwd = item
            .views
            .student_views
            .iter()
            .map(|v| student.embed(&v.pixels, v.size, &[]))
            .collect::<Result<Vec<_>>>()?;
        let s_logits: Vec<LogitVector> = s_fwd.iter().map(|f| student.head(&f.pooled)).collect();
        losses.dino_m += dino_m_loss(&s_logits, &t_logits, temps, center)? / n;
        if weights.dino_m != 0.0 {
            let target = ProbVector(mean_probs(&t_probs));
            let s = weights.dino_m / (n * s_logits.len() as f64);
            for (f, z) in s_fwd.iter().zip(&s_logits) {
                let g = scaled(
                    ce_grad_student(&student_probs(z, temps.tau_s)?, &target, temps.tau_s)?,
                    s,
                );
                student.backward_into(&f.pooled_input, &f.pooled, Some(&g), None, &mut grad);
            }
        }

        // masked-token distillation on each global view
        for ((mask, sv), tf) in item.token_masks.iter().zip(&item.views.student_views).zip(&t_fwd) {
            if mask.count() == 0 {
                continue;
            }
            let sf = student.embed(&sv.pixels, sv.size, mask.bits())?;
            if sf.grid * sf.grid != mask.bits().len() {
                return Err(Error::ShapeMismatch("token mask does not match the view grid".into()));
            }
            let per_token = 1.0 / (ibot_count as f64 * mask.count() as f64);
            for &(r, c) in mask.omega() {
                let t = r * sf.grid + c;
                let ps = student_probs(&student.head(&sf.embeddings[t]), temps.tau_s)?;
                let pt = teacher_probs(&teacher.head(&tf.embeddings[t]), center, temps.tau_t)?;
                losses.ibot_m += cross_entropy(&pt, &ps)? * per_token;
                if weights.ibot_m != 0.0 {
                    let g = scaled(ce_grad_student(&ps, &pt, temps.tau_s)?, weights.ibot_m * per_token);
                    student.backward_into(&sf.inputs[t], &sf.embeddings[t], Some(&g), None, &mut grad);
                }
            }
        }

        // adjacent-slice distillation: teacher on slice k, student on k'
        let ta = teacher.forward(&item.pair.view_a.pixels, item.pair.view_a.size)?;
        let sb = student.embed(&item.pair.view_b.pixels, item.pair.view_b.size, &[])?;
        let zb = student.head(&sb.pooled);
        losses.dino_adj += dino_adj_loss(&zb, &ta, temps, center)? / n;
        if weights.dino_adj != 0.0 {
            let pt = teacher_probs(&ta, center, temps.tau_t)?;
            let g = scaled(
                ce_grad_student(&student_probs(&zb, temps.tau_s)?, &pt, temps.tau_s)?,
                weights.dino_adj / n,
            );
            student.backward_into(&sb.pooled_input, &sb.pooled, Some(&g), None, &mut grad);
        }

        for z in t_logits.iter().chain(std::iter::once(&ta)) {
            entropy += teacher_probs(z, center, temps.tau_t)?.entropy();
        }
        teacher_logits.extend(t_logits);
        teacher_logits.push(ta);
        koleo_points.push(s_fwd[0].pooled.clone());
        koleo_fwd.push(s_fwd.into_iter().next().expect("at least one student view"));
    }

    // spread of pooled student embeddings of the first global view
    if koleo_points.len() >= 2 {
        let (value, g) = koleo_loss_grad(&koleo_points)?;
        losses.koleo = value;
        if weights.koleo != 0.0 {
            for (f, gi) in koleo_fwd.iter().zip(g) {
                let gi = scaled(gi, weights.koleo);
                student.backward_into(&f.pooled_input, &f.pooled, None, Some(&gi), &mut grad);
            }
        }
    }

    losses.total = total_loss(losses.dino_m, losses.ibot_m, losses.dino_adj, losses.koleo, weights);
    let teacher_entropy = entropy / teacher_logits.len() as f64;
    let all_probs = teacher_logits
        .iter()
        .map(|z| teacher_probs(z, center, temps.tau_t))
        .collect::<Result<Vec<_>>>()?;
    let teacher_mean_entropy = ProbVector(mean_probs(&all_probs)).entropy();
    Ok(Evaluation {
        losses,
        grad,
        teacher_logits,
        teacher_entropy,
        teacher_mean_entropy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ToyEncoder,
    pub teacher: ToyEncoder,
    pub center: CenterState,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
}

impl TrainState {
    /// Random student; the teacher starts as an exact copy.
    pub fn init(cfg: &ToyConfig) -> Self {
        let mut rng = item_rng(cfg.seed, u64::MAX);
        let student = ToyEncoder::random_scaled(cfg.patch, cfg.embed_dim, cfg.prototypes, cfg.init_gain, &mut rng);
        Self {
            teacher: student.clone(),
            student,
            center: CenterState::zeros(cfg.prototypes, cfg.center_momentum),
            step: 0,
            seed: cfg.seed,
            lr: cfg.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based step number.
    pub step: u64,
    pub dino_m: f64,
    pub ibot_m: f64,
    pub dino_adj: f64,
    pub koleo: f64,
    pub total: f64,
    pub teacher_entropy: f64,
    pub teacher_mean_entropy: f64,
}

/// One update on prepared inputs: SGD on the student, EMA on the teacher,
/// then the center update. Metrics are the pre-update losses.
pub fn train_step_on(state: &TrainState, batch: &BatchInputs, cfg: &ToyConfig) -> Result<(TrainState, StepMetrics)> {
    let eval = evaluate(
        &state.student,
        &state.teacher,
        &state.center,
        batch,
        &cfg.temperatures,
        &cfg.weights,
    )?;
    let norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let factor = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let mut student = state.student.clone();
    for (p, g) in student.params_mut().iter_mut().zip(&eval.grad) {
        *p -= state.lr * factor * g;
    }
    let teacher_params = ema_update(state.teacher.params(), student.params(), cfg.ema_momentum)?;
    let teacher = ToyEncoder::from_params(
        state.teacher.patch(),
        state.teacher.embed_dim(),
        state.teacher.prototypes(),
        teacher_params,
    )?;
    let center = update_center(&state.center, &eval.teacher_logits)?;
    let step = state.step + 1;
    let l = eval.losses;
    let metrics = StepMetrics {
        step,
        dino_m: l.dino_m,
        ibot_m: l.ibot_m,
        dino_adj: l.dino_adj,
        koleo: l.koleo,
        total: l.total,
        teacher_entropy: eval.teacher_entropy,
        teacher_mean_entropy: eval.teacher_mean_entropy,
    };
    Ok((
        TrainState {
            student,
            teacher,
            center,
            step,
            seed: state.seed,
            lr: state.lr,
        },
        metrics,
    ))
}

/// Samples views, masks and slice pairs for `phantoms` from the state's
/// per-step stream, then takes one step.
pub fn train_step(state: &TrainState, phantoms: &[Phantom], cfg: &ToyConfig) -> Result<(TrainState, StepMetrics)> {
    let mut rng = item_rng(state.seed, 2 * state.step + 1);
    let batch = prepare_batch(phantoms, cfg, &mut rng)?;
    train_step_on(state, &batch, cfg)
}

pub fn phantom_batch(cfg: &ToyConfig, step: u64) -> Result<Vec<Phantom>> {
    let mut rng = item_rng(cfg.seed, 2 * step);
    (0..cfg.batch_size)
        .map(|_| generate_phantom(&cfg.phantom, &mut rng))
        .collect()
}

/// Runs `cfg.steps` steps and returns the per-step metrics.
pub fn run_toy_training(cfg: &ToyConfig) -> Result<Vec<StepMetrics>> {
    run_toy_training_with(cfg, |_| Ok(()))
}

/// As [`run_toy_training`], also writing one JSON record per step.
pub fn run_toy_training_to<W: Write>(cfg: &ToyConfig, out: &mut W) -> Result<Vec<StepMetrics>> {
    run_toy_training_with(cfg, |m| {
        serde_json::to_writer(&mut *out, m).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    })
}

fn run_toy_training_with(
    cfg: &ToyConfig,
    mut sink: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let mut state = TrainState::init(cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let phantoms = phantom_batch(cfg, state.step)?;
        let (next, metrics) = train_step(&state, &phantoms, cfg)?;
        sink(&metrics)?;
        trace.push(metrics);
        state = next;
    }
    Ok(trace)
}

/// Tiny configuration for gradient checks: 6x6 global views of 3x3 patches
/// (a 2x2 token grid) and 3x3 local views (one token).
pub fn micro_config(seed: u64) -> ToyConfig {
    ToyConfig {
        seed,
        steps: 1,
        batch_size: 2,
        patch: 3,
        embed_dim: 3,
        prototypes: 5,
        mask_ratio: 0.5,
        phantom: PhantomSpec {
            size: 24,
            slices: 3,
            ..PhantomSpec::default()
        },
        crop: CropSpec {
            global_scale: ScaleRange::new(0.32, 1.0),
            local_scale: ScaleRange::new(0.05, 0.32),
            n_global: 2,
            n_local: 2,
            out_size_global: 6,
            out_size_local: 3,
            ..CropSpec::default()
        },
        tissue: MaskParams { tau: 50.0, kernel: 3 },
        mim: MaskSpec {
            m_min: 1,
            m_max: 2,
            ..MaskSpec::default()
        },
        ..ToyConfig::default()
    }
}
