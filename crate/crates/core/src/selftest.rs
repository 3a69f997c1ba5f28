//! Runtime self-check of the loss kernel and the toy encoder gradients.
//! Each property reports pass/fail with the worst measured deviation.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::rng::item_rng;
use crate::ssl_losses::{
    ce_grad_student, cross_entropy, dino_adj_loss, dino_m_loss, ibot_m_loss, koleo_loss, koleo_loss_grad,
    student_probs, teacher_probs, total_loss, update_center, CenterState, LogitVector, LossWeights, PatchLogits,
    ProbVector, Temperatures, KOLEO_DELTA,
};
use crate::toy_trainer::{evaluate, micro_config, phantom_batch, prepare_batch, ToyEncoder, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst deviation seen, or the offending value.
    pub worst: f64,
    pub tolerance: f64,
}

fn check(name: &'static str, worst: f64, tolerance: f64) -> Check {
    Check {
        name,
        passed: worst <= tolerance,
        worst,
        tolerance,
    }
}

fn random_logits<R: Rng>(rng: &mut R, k: usize, scale: f64) -> LogitVector {
    LogitVector((0..k).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn random_probs<R: Rng>(rng: &mut R, k: usize) -> ProbVector {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let s: f64 = w.iter().sum();
    ProbVector(w.into_iter().map(|v| v / s).collect())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn fixtures() -> Result<Vec<Check>> {
    let k4 = CenterState::zeros(4, 0.9);
    let unit = Temperatures { tau_s: 1.0, tau_t: 1.0 };
    let ln4 = 4f64.ln();
    let zeros4 = LogitVector(vec![0.0; 4]);
    let mut out = Vec::new();

    let p = student_probs(&zeros4, 1.0)?;
    out.push(check(
        "softmax_uniform_at_zero",
        p.0.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max),
        1e-15,
    ));
    let p = student_probs(&LogitVector(vec![1.0, 0.0]), 1.0)?;
    let e = std::f64::consts::E;
    out.push(check("softmax_two_point", (p.0[0] - e / (e + 1.0)).abs(), 1e-15));
    let p = teacher_probs(&LogitVector(vec![10.0, 0.0, 0.0, 0.0]), &k4, 0.04)?;
    out.push(check("teacher_sharpening", (1.0 - 1e-10) - p.0[0], 0.0));
    let z = LogitVector(vec![0.3, -1.2, 2.0, 0.5]);
    let c = CenterState {
        c: z.0.clone(),
        momentum: 0.9,
    };
    let p = teacher_probs(&z, &c, 0.04)?;
    out.push(check(
        "teacher_centered_uniform",
        p.0.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max),
        1e-15,
    ));

    let u = ProbVector::uniform(4);
    out.push(check("ce_uniform_is_ln_k", (cross_entropy(&u, &u)? - ln4).abs(), 1e-15));
    let one_hot = ProbVector(vec![0.0, 1.0, 0.0, 0.0]);
    out.push(check(
        "ce_one_hot_vs_uniform",
        (cross_entropy(&one_hot, &u)? - ln4).abs(),
        1e-15,
    ));
    out.push(check(
        "dino_m_zero_logits",
        (dino_m_loss(std::slice::from_ref(&zeros4), std::slice::from_ref(&zeros4), &unit, &k4)? - ln4).abs(),
        1e-15,
    ));
    let flat = PatchLogits::new(1, 1, 4, vec![0.0; 4])?;
    out.push(check(
        "ibot_single_token",
        (ibot_m_loss(&flat, &flat, &[(0, 0)], &unit, &k4)? - ln4).abs(),
        1e-15,
    ));
    out.push(check(
        "dino_adj_zero_logits",
        (dino_adj_loss(&zeros4, &zeros4, &unit, &k4)? - ln4).abs(),
        1e-15,
    ));
    let sharp = Temperatures {
        tau_s: 1.0,
        tau_t: 1e-3,
    };
    let adj = dino_adj_loss(&zeros4, &LogitVector(vec![0.0, 1.0, 0.0, 0.0]), &sharp, &k4)?;
    out.push(check("dino_adj_one_hot_teacher", (adj - ln4).abs(), 1e-12));

    let antipodal = koleo_loss(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
    out.push(check(
        "koleo_antipodal",
        (antipodal + (2.0 + KOLEO_DELTA).ln()).abs(),
        1e-12,
    ));
    let same = koleo_loss(&[vec![0.6, 0.8], vec![0.6, 0.8]])?;
    out.push(check("koleo_identical", (same + KOLEO_DELTA.ln()).abs(), 1e-9));

    let w = LossWeights {
        dino_m: 1.0,
        ibot_m: 1.0,
        dino_adj: 1.0,
        koleo: 1.0,
    };
    out.push(check(
        "total_unit_weights",
        (total_loss(1.0, 2.0, 3.0, 4.0, &w) - 10.0).abs(),
        0.0,
    ));
    let zero_w = LossWeights {
        dino_m: 0.0,
        ibot_m: 0.0,
        dino_adj: 0.0,
        koleo: 0.0,
    };
    out.push(check(
        "total_zero_weights",
        total_loss(1.0, 2.0, 3.0, 4.0, &zero_w).abs(),
        0.0,
    ));

    let moved = update_center(
        &CenterState {
            c: vec![1.0, -1.0],
            momentum: 0.9,
        },
        &[LogitVector(vec![2.0, 0.0]), LogitVector(vec![4.0, 2.0])],
    )?;
    // 0.9 * (1, -1) + 0.1 * (3, 1)
    out.push(check(
        "center_convex_combination",
        (moved.c[0] - 1.2).abs().max((moved.c[1] + 0.8).abs()),
        1e-15,
    ));
    Ok(out)
}

fn random_properties(seed: u64) -> Result<Vec<Check>> {
    let mut rng = item_rng(seed, 0x5e1f);
    let mut simplex = 0.0f64;
    let mut shift = 0.0f64;
    let mut ce_gap = 0.0f64;
    let mut grad_fd = 0.0f64;
    let mut grad_sum = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..12);
        let tau = rng.gen_range(0.05..2.0);
        let z = random_logits(&mut rng, k, 5.0);
        let p = student_probs(&z, tau)?;
        simplex = simplex.max((p.0.iter().sum::<f64>() - 1.0).abs());
        let a = rng.gen_range(-50.0..50.0);
        let shifted = student_probs(&LogitVector(z.0.iter().map(|v| v + a).collect()), tau)?;
        shift = shift.max(
            p.0.iter()
                .zip(&shifted.0)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );
        let pt = random_probs(&mut rng, k);
        // CE(p_t, p_s) >= H(p_t), checked as a deficit
        ce_gap = ce_gap.max(pt.entropy() - cross_entropy(&pt, &p)?);
    }
    for _ in 0..100 {
        let k = rng.gen_range(2..10);
        let tau = rng.gen_range(0.1..1.5);
        let z = random_logits(&mut rng, k, 2.0);
        let pt = random_probs(&mut rng, k);
        let analytic = ce_grad_student(&student_probs(&z, tau)?, &pt, tau)?;
        grad_sum = grad_sum.max(analytic.iter().sum::<f64>().abs());
        let h = 1e-5;
        let mut num = vec![0.0; k];
        for (i, n) in num.iter_mut().enumerate() {
            let mut plus = z.clone();
            plus.0[i] += h;
            let mut minus = z.clone();
            minus.0[i] -= h;
            *n = (cross_entropy(&pt, &student_probs(&plus, tau)?)? - cross_entropy(&pt, &student_probs(&minus, tau)?)?)
                / (2.0 * h);
        }
        grad_fd = grad_fd.max(rel_err(&analytic, &num));
    }
    let mut koleo_fd = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(3..7);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| random_logits(&mut rng, 4, 1.0).0).collect();
        let (_, grads) = koleo_loss_grad(&feats)?;
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut num = Vec::new();
        for i in 0..n {
            for d in 0..4 {
                let mut plus = feats.clone();
                plus[i][d] += h;
                let mut minus = feats.clone();
                minus[i][d] -= h;
                analytic.push(grads[i][d]);
                num.push((koleo_loss(&plus)? - koleo_loss(&minus)?) / (2.0 * h));
            }
        }
        koleo_fd = koleo_fd.max(rel_err(&analytic, &num));
    }
    Ok(vec![
        check("probs_on_simplex", simplex, 1e-9),
        check("softmax_shift_invariance", shift, 1e-12),
        check("ce_at_least_entropy", ce_gap, 1e-9),
        check("ce_grad_sums_to_zero", grad_sum, 1e-12),
        check("ce_grad_finite_differences", grad_fd, 1e-6),
        check("koleo_grad_finite_differences", koleo_fd, 1e-5),
    ])
}

/// End-to-end gradient of the toy objective against central differences on
/// micro configurations, with a teacher distinct from the student.
fn toy_gradients(seed: u64, fixtures: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for f in 0..fixtures {
        let cfg = micro_config(seed.wrapping_add(f));
        let mut state = TrainState::init(&cfg);
        state.teacher = ToyEncoder::random(cfg.patch, cfg.embed_dim, cfg.prototypes, &mut item_rng(cfg.seed, 77));
        state.center.c = (0..cfg.prototypes).map(|k| 0.05 * k as f64).collect();
        let phantoms = phantom_batch(&cfg, 0)?;
        let batch = prepare_batch(&phantoms, &cfg, &mut item_rng(cfg.seed, 1))?;
        let total = |s: &ToyEncoder| -> Result<f64> {
            Ok(evaluate(
                s,
                &state.teacher,
                &state.center,
                &batch,
                &cfg.temperatures,
                &cfg.weights,
            )?
            .losses
            .total)
        };
        let analytic = evaluate(
            &state.student,
            &state.teacher,
            &state.center,
            &batch,
            &cfg.temperatures,
            &cfg.weights,
        )?
        .grad;
        let h = 1e-6;
        let mut num = vec![0.0; analytic.len()];
        for (i, n) in num.iter_mut().enumerate() {
            let mut plus = state.student.clone();
            plus.params_mut()[i] += h;
            let mut minus = state.student.clone();
            minus.params_mut()[i] -= h;
            *n = (total(&plus)? - total(&minus)?) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &num));
    }
    Ok(check("toy_encoder_grad_finite_differences", worst, 1e-5))
}

pub fn run_selftest(seed: u64) -> Result<Vec<Check>> {
    let mut checks = fixtures()?;
    checks.extend(random_properties(seed)?);
    checks.push(toy_gradients(seed, 10)?);
    Ok(checks)
}
