//! Forward computation of the self-distillation objectives on prototype
//! scores: teacher/student distributions, the cross-entropy `H`, the
//! class-token (DINO) and patch-token (iBOT) losses, EMA and center updates.
//!
//! Teacher distributions are `softmax((h - center) / τ_t)`; students are
//! scored through `log_softmax(h / τ_s)`. Everything goes through
//! max-subtraction or log-sum-exp, so 131,072-way logits with large entries
//! stay finite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("momentum must lie in [0, 1], got {0}")]
    Momentum(f64),
    #[error("loss weights must be finite and non-negative")]
    Weight,
    #[error("probabilities sum to {0}, not 1")]
    NotADistribution(f64),
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch needs at least one patch")]
    NoPatches,
}

type Result<T> = std::result::Result<T, DistillError>;

/// Optimization, model and head settings of the distilled model, plus the
/// loss temperatures and momenta. Only the last group affects the losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub n_prototypes: usize,
    pub teacher_temperature: f64,
    pub student_temperature: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub loss_weight_dino: f64,
    pub loss_weight_ibot: f64,

    pub warmup_epochs: u32,
    pub teacher_temp_warmup_epochs: u32,
    pub weight_decay_end: f64,
    pub batch_size: u32,
    pub iterations: u32,
    pub patch_size: u32,
    pub register_tokens: u32,
    pub embed_dim: u32,
    pub layers: u32,
    pub heads: u32,
    pub mlp_ratio: u32,
    pub dino_bottleneck: u32,
    pub ibot_bottleneck: u32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_prototypes: 131_072,
            teacher_temperature: 0.07,
            student_temperature: 0.1,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            loss_weight_dino: 1.0,
            loss_weight_ibot: 1.0,
            warmup_epochs: 16,
            teacher_temp_warmup_epochs: 30,
            weight_decay_end: 0.4,
            batch_size: 2048,
            iterations: 105_000,
            patch_size: 14,
            register_tokens: 4,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            dino_bottleneck: 384,
            ibot_bottleneck: 256,
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DistillError::Temperature(t))
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(DistillError::Momentum(m))
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.teacher_temperature)?;
        check_temperature(self.student_temperature)?;
        check_momentum(self.center_momentum)?;
        check_momentum(self.ema_momentum)?;
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.loss_weight_dino) || !ok(self.loss_weight_ibot) {
            return Err(DistillError::Weight);
        }
        Ok(())
    }
}

/// Prototype scores of two augmented views. Patch scores are indexed
/// `[view][patch]`, each a `K`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillViewBatch {
    pub teacher_class: [Vec<f64>; 2],
    pub student_class: [Vec<f64>; 2],
    pub teacher_patch: [Vec<Vec<f64>>; 2],
    pub student_patch: [Vec<Vec<f64>>; 2],
    /// Teacher center; `None` means zero.
    pub center: Option<Vec<f64>>,
}

impl DistillViewBatch {
    pub fn n_prototypes(&self) -> usize {
        self.teacher_class[0].len()
    }

    pub fn n_patches(&self) -> usize {
        self.teacher_patch[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_prototypes();
        let p = self.n_patches();
        if p == 0 {
            return Err(DistillError::NoPatches);
        }
        let class = self.teacher_class.iter().chain(&self.student_class);
        let patch = self.teacher_patch.iter().chain(&self.student_patch);
        for patches in patch.clone() {
            if patches.len() != p {
                return Err(DistillError::Length(patches.len(), p));
            }
        }
        for v in class.chain(patch.flatten()).chain(self.center.iter()) {
            if v.len() != k {
                return Err(DistillError::Length(v.len(), k));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DistillError::NonFinite("logits"));
            }
        }
        Ok(())
    }

    /// The same batch with views 1 and 2 exchanged.
    pub fn swapped(&self) -> Self {
        let swap = |[a, b]: [Vec<f64>; 2]| [b, a];
        let swap_p = |[a, b]: [Vec<Vec<f64>>; 2]| [b, a];
        Self {
            teacher_class: swap(self.teacher_class.clone()),
            student_class: swap(self.student_class.clone()),
            teacher_patch: swap_p(self.teacher_patch.clone()),
            student_patch: swap_p(self.student_patch.clone()),
            center: self.center.clone(),
        }
    }
}

fn log_sum_exp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = x.clone().fold(f64::NEG_INFINITY, f64::max);
    max + x.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `softmax((logits - center) / temperature)`.
pub fn prototype_distribution(logits: &[f64], temperature: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("logits"));
    }
    let scaled: Vec<f64> = match center {
        Some(c) => {
            if c.len() != logits.len() {
                return Err(DistillError::Length(c.len(), logits.len()));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(DistillError::NonFinite("center"));
            }
            logits.iter().zip(c).map(|(l, c)| (l - c) / temperature).collect()
        }
        None => logits.iter().map(|l| l / temperature).collect(),
    };
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if let Some(&neg) = p.iter().find(|&&v| v.is_nan() || v < 0.0) {
        return Err(DistillError::NegativeProbability(neg));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DistillError::NotADistribution(sum));
    }
    Ok(())
}

/// `-Σ_k p[k] · log_softmax(student / τ_s)[k]`.
pub fn cross_entropy_h(p_teacher: &[f64], student_logits: &[f64], student_temperature: f64) -> Result<f64> {
    check_temperature(student_temperature)?;
    if p_teacher.len() != student_logits.len() {
        return Err(DistillError::Length(p_teacher.len(), student_logits.len()));
    }
    check_distribution(p_teacher)?;
    if student_logits.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("student logits"));
    }
    let scaled = student_logits.iter().map(|s| s / student_temperature);
    let lse = log_sum_exp(scaled.clone());
    // Zero-probability terms contribute nothing even where log q underflows.
    Ok(p_teacher.iter().zip(scaled).filter(|(p, _)| **p > 0.0).map(|(p, s)| p * (lse - s)).sum())
}

/// Gradient of [`cross_entropy_h`] in the student logits:
/// `(softmax(s / τ_s) - p) / τ_s`.
pub fn cross_entropy_grad(p_teacher: &[f64], student_logits: &[f64], student_temperature: f64) -> Result<Vec<f64>> {
    check_distribution(p_teacher)?;
    if p_teacher.len() != student_logits.len() {
        return Err(DistillError::Length(p_teacher.len(), student_logits.len()));
    }
    let q = prototype_distribution(student_logits, student_temperature, None)?;
    Ok(q.iter().zip(p_teacher).map(|(q, p)| (q - p) / student_temperature).collect())
}

fn teacher(batch: &DistillViewBatch, cfg: &DistillConfig, logits: &[f64]) -> Result<Vec<f64>> {
    prototype_distribution(logits, cfg.teacher_temperature, batch.center.as_deref())
}

/// Class-token loss: `(H(t1, s2) + H(t2, s1)) / 2`.
pub fn dino_loss(batch: &DistillViewBatch, cfg: &DistillConfig) -> Result<f64> {
    batch.validate()?;
    let tau = cfg.student_temperature;
    let a = cross_entropy_h(&teacher(batch, cfg, &batch.teacher_class[0])?, &batch.student_class[1], tau)?;
    let b = cross_entropy_h(&teacher(batch, cfg, &batch.teacher_class[1])?, &batch.student_class[0], tau)?;
    Ok((a + b) / 2.0)
}

/// Patch-token loss over every (view, patch) pair, unmasked:
/// `(1 / 2P) Σ_p Σ_j H(t_{j,p}, s_{j,p})`.
pub fn ibot_loss(batch: &DistillViewBatch, cfg: &DistillConfig) -> Result<f64> {
    batch.validate()?;
    // Per-view sums added last, so exchanging the views is exact.
    let mut view = [0.0; 2];
    for (j, sum) in view.iter_mut().enumerate() {
        for (t, s) in batch.teacher_patch[j].iter().zip(&batch.student_patch[j]) {
            *sum += cross_entropy_h(&teacher(batch, cfg, t)?, s, cfg.student_temperature)?;
        }
    }
    Ok((view[0] + view[1]) / (2 * batch.n_patches()) as f64)
}

pub fn total_loss(batch: &DistillViewBatch, cfg: &DistillConfig) -> Result<f64> {
    cfg.validate()?;
    let mut total = 0.0;
    if cfg.loss_weight_dino != 0.0 {
        total += cfg.loss_weight_dino * dino_loss(batch, cfg)?;
    }
    if cfg.loss_weight_ibot != 0.0 {
        total += cfg.loss_weight_ibot * ibot_loss(batch, cfg)?;
    }
    Ok(total)
}

/// `λ · ema + (1 - λ) · student`, elementwise.
pub fn ema_update(ema: &[f64], student: &[f64], momentum: f64) -> Result<Vec<f64>> {
    check_momentum(momentum)?;
    if ema.len() != student.len() {
        return Err(DistillError::Length(ema.len(), student.len()));
    }
    if ema.iter().chain(student).any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("parameters"));
    }
    Ok(ema.iter().zip(student).map(|(e, s)| momentum * e + (1.0 - momentum) * s).collect())
}

/// `m_c · center + (1 - m_c) · mean over rows of teacher_logits`.
pub fn update_center(center: &[f64], teacher_logits: &[Vec<f64>], momentum: f64) -> Result<Vec<f64>> {
    check_momentum(momentum)?;
    if teacher_logits.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let mut mean = vec![0.0; center.len()];
    for row in teacher_logits {
        if row.len() != center.len() {
            return Err(DistillError::Length(row.len(), center.len()));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let b = teacher_logits.len() as f64;
    let out: Vec<f64> = center.iter().zip(&mean).map(|(c, m)| momentum * c + (1.0 - momentum) * m / b).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("center"));
    }
    Ok(out)
}

/// Outcome of one property in [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Worst deviation observed.
    pub worst: f64,
    pub tolerance: f64,
}

fn normal_vec(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// A random batch with `K = k` prototypes and `P = p` patches per view.
pub fn random_batch(rng: &mut ChaCha8Rng, k: usize, p: usize, scale: f64) -> DistillViewBatch {
    let mut vec = || normal_vec(rng, k, scale);
    let teacher_class = [vec(), vec()];
    let student_class = [vec(), vec()];
    let mut patches = || [(0..p).map(|_| vec()).collect(), (0..p).map(|_| vec()).collect()];
    let teacher_patch = patches();
    let student_patch = patches();
    let center = Some(vec());
    DistillViewBatch { teacher_class, student_class, teacher_patch, student_patch, center }
}

fn one_hot(k: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[j] = 1.0;
    v
}

/// Runs the loss properties on `n_batches` seeded random batches.
pub fn check(seed: u64, n_batches: usize) -> Result<Vec<PropertyCheck>> {
    let cfg = DistillConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift = 0.0f64;
    let mut swap = 0.0f64;
    let mut matched = 0.0f64;
    let mut grad = 0.0f64;
    let mut ln2 = 0.0f64;
    let mut negative = 0.0f64;
    let mut lower = 0.0f64;
    let mut perm = 0.0f64;
    let mut sums = 0.0f64;
    let kdist = Uniform::new_inclusive(2usize, 16).expect("valid range");
    let pdist = Uniform::new_inclusive(1usize, 6).expect("valid range");
    for _ in 0..n_batches {
        let k = kdist.sample(&mut rng);
        let p = pdist.sample(&mut rng);
        let batch = random_batch(&mut rng, k, p, 1.0);
        let dino = dino_loss(&batch, &cfg)?;
        let ibot = ibot_loss(&batch, &cfg)?;
        negative = negative.max(-dino).max(-ibot);

        // Shift one vector at a time by a large constant.
        let c: f64 = 50.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let shifted = |f: &dyn Fn(&mut DistillViewBatch)| -> Result<f64> {
            let mut b = batch.clone();
            f(&mut b);
            Ok((dino_loss(&b, &cfg)? - dino).abs().max((ibot_loss(&b, &cfg)? - ibot).abs()))
        };
        let add = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x += c);
        shift = shift
            .max(shifted(&|b| add(&mut b.teacher_class[0]))?)
            .max(shifted(&|b| add(&mut b.student_class[1]))?)
            .max(shifted(&|b| add(&mut b.teacher_patch[1][0]))?)
            .max(shifted(&|b| add(&mut b.student_patch[0][p - 1]))?);

        let s = batch.swapped();
        swap = swap.max((dino_loss(&s, &cfg)? - dino).abs()).max((ibot_loss(&s, &cfg)? - ibot).abs());

        let mut order: Vec<usize> = (0..p).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut permuted = batch.clone();
        for j in 0..2 {
            permuted.teacher_patch[j] = order.iter().map(|&i| batch.teacher_patch[j][i].clone()).collect();
            permuted.student_patch[j] = order.iter().map(|&i| batch.student_patch[j][i].clone()).collect();
        }
        perm = perm.max((ibot_loss(&permuted, &cfg)? - ibot).abs());

        let probs = prototype_distribution(&batch.teacher_class[0], cfg.teacher_temperature, batch.center.as_deref())?;
        sums = sums.max((probs.iter().sum::<f64>() - 1.0).abs());

        // Matched one-hot teachers and sharply peaked students.
        let j = Uniform::new(0, k).expect("k >= 2").sample(&mut rng);
        let peaked: Vec<f64> = (0..k).map(|i| if i == j { 40.0 } else { -40.0 }).collect();
        let h = cross_entropy_h(&one_hot(k, j), &peaked, 1.0)?;
        matched = matched.max(h);

        // Central differences of H.
        let pt = prototype_distribution(&normal_vec(&mut rng, k, 1.0), 1.0, None)?;
        let logits = normal_vec(&mut rng, k, 1.0);
        let tau = cfg.student_temperature;
        let g = cross_entropy_grad(&pt, &logits, tau)?;
        let step = 1e-5;
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..k {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += step;
            down[i] -= step;
            let fd = (cross_entropy_h(&pt, &up, tau)? - cross_entropy_h(&pt, &down, tau)?) / (2.0 * step);
            diff += (fd - g[i]).powi(2);
            norm += g[i].powi(2);
        }
        grad = grad.max(diff.sqrt() / norm.sqrt().max(1e-12));

        // H(p, log p) equals the entropy of p and is the minimum.
        let entropy: f64 = -pt.iter().map(|q| q * q.ln()).sum::<f64>();
        let at_p: Vec<f64> = pt.iter().map(|q| q.ln()).collect();
        let h_min = cross_entropy_h(&pt, &at_p, 1.0)?;
        lower = lower.max((h_min - entropy).abs()).max(h_min - cross_entropy_h(&pt, &logits, 1.0)?);
    }

    let half = [0.5, 0.5];
    let cases = [
        cross_entropy_h(&[1.0, 0.0], &[0.0, 0.0], 1.0)?,
        cross_entropy_h(&half, &[0.0, 0.0], 1.0)?,
        dino_loss(&two_way_batch(1), &cfg)?,
        ibot_loss(&two_way_batch(1), &cfg)?,
    ];
    for h in cases {
        ln2 = ln2.max((h - std::f64::consts::LN_2).abs());
    }

    let large = random_batch(&mut rng, cfg.n_prototypes, 1, 1e3);
    let big = total_loss(&large, &cfg)?;

    let prop = |name, worst: f64, tolerance| PropertyCheck { name, passed: worst <= tolerance, worst, tolerance };
    Ok(vec![
        prop("distribution_sums_to_one", sums, 1e-9),
        prop("logit_shift_invariance", shift, 1e-6),
        prop("view_swap_symmetry", swap, 0.0),
        prop("patch_permutation_invariance", perm, 1e-12),
        prop("non_negative", negative, 1e-9),
        prop("matched_one_hot", matched, 1e-10),
        prop("gradient_vs_finite_differences", grad, 1e-5),
        prop("entropy_lower_bound", lower, 1e-12),
        prop("ln2_closed_forms", ln2, 1e-9),
        PropertyCheck {
            name: "large_k_finite",
            passed: big.is_finite() && big >= 0.0,
            worst: if big.is_finite() { 0.0 } else { f64::INFINITY },
            tolerance: 0.0,
        },
    ])
}

/// `K = 2`, one-hot teachers at index 0 on both views (logits far apart so the
/// sharp teacher temperature rounds to exactly one-hot) and uniform students.
fn two_way_batch(p: usize) -> DistillViewBatch {
    let t = vec![1e3, -1e3];
    let s = vec![0.0, 0.0];
    DistillViewBatch {
        teacher_class: [t.clone(), t.clone()],
        student_class: [s.clone(), s.clone()],
        teacher_patch: [vec![t.clone(); p], vec![t; p]],
        student_patch: [vec![s.clone(); p], vec![s; p]],
        center: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(prototype_distribution(&[0.0, 0.0], 1.0, None).unwrap(), vec![0.5, 0.5]);
        for c in [-300.0, 0.0, 7.5, 1e4] {
            let p = prototype_distribution(&[c, c + 3f64.ln()], 1.0, None).unwrap();
            close(p[0], 0.25, 1e-12);
            close(p[1], 0.75, 1e-12);
        }
        assert!(prototype_distribution(&[1.0, 0.0], 0.01, None).unwrap()[0] > 1.0 - 1e-10);
        assert_eq!(prototype_distribution(&[1.0], 0.0, None), Err(DistillError::Temperature(0.0)));
        assert_eq!(prototype_distribution(&[f64::NAN], 1.0, None), Err(DistillError::NonFinite("logits")));
        let centered = prototype_distribution(&[2.0, 1.0], 1.0, Some(&[1.0, 0.0])).unwrap();
        close(centered[0], 0.5, 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy_h(&[1.0, 0.0], &[40.0, -40.0], 1.0).unwrap() < 1e-10);
        close(cross_entropy_h(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), LN_2, 1e-15);
        close(cross_entropy_h(&[0.5, 0.5], &[0.0, 0.0], 1.0).unwrap(), LN_2, 1e-15);
        assert_eq!(cross_entropy_h(&[0.5, 0.4], &[0.0, 0.0], 1.0), Err(DistillError::NotADistribution(0.9)));
        // No overflow with huge logits.
        let h = cross_entropy_h(&[0.0, 1.0], &[1e300, 0.0], 1.0).unwrap();
        assert_eq!(h, 1e300);
    }

    #[test]
    fn loss_examples() {
        let cfg = DistillConfig::default();
        close(dino_loss(&two_way_batch(1), &cfg).unwrap(), LN_2, 1e-12);
        close(ibot_loss(&two_way_batch(1), &cfg).unwrap(), LN_2, 1e-12);
        close(ibot_loss(&two_way_batch(4), &cfg).unwrap(), LN_2, 1e-12);

        // Perfect match: one-hot teacher, sharply peaked student.
        let peak = vec![40.0, -40.0];
        let mut b = two_way_batch(3);
        b.student_class = [peak.clone(), peak.clone()];
        b.student_patch = [vec![peak.clone(); 3], vec![peak.clone(); 3]];
        assert!(dino_loss(&b, &cfg).unwrap() < 1e-10);
        assert!(ibot_loss(&b, &cfg).unwrap() < 1e-10);

        // One mismatched (view, patch) term out of six.
        b.student_patch[1][2] = vec![0.0, 0.0];
        let c = cross_entropy_h(&[1.0, 0.0], &[0.0, 0.0], cfg.student_temperature).unwrap();
        close(ibot_loss(&b, &cfg).unwrap(), c / 6.0, 1e-10);
    }

    #[test]
    fn total_loss_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(&mut rng, 8, 2, 1.0);
        let cfg = DistillConfig::default();
        let (d, i) = (dino_loss(&b, &cfg).unwrap(), ibot_loss(&b, &cfg).unwrap());
        assert_eq!(total_loss(&b, &cfg).unwrap(), d + i);
        let only_dino = DistillConfig { loss_weight_ibot: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(&b, &only_dino).unwrap(), d);
        let weighted = DistillConfig { loss_weight_dino: 2.0, ..cfg.clone() };
        assert_eq!(total_loss(&b, &weighted).unwrap(), 2.0 * d + i);
        let bad = DistillConfig { loss_weight_dino: -1.0, ..cfg };
        assert_eq!(total_loss(&b, &bad), Err(DistillError::Weight));
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(&[0.3, -1.0], &[5.0, 5.0], 1.0).unwrap(), vec![0.3, -1.0]);
        assert_eq!(ema_update(&[0.3, -1.0], &[5.0, 5.0], 0.0).unwrap(), vec![5.0, 5.0]);
        assert_eq!(ema_update(&[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
        assert_eq!(ema_update(&[0.0], &[2.0, 1.0], 0.5), Err(DistillError::Length(1, 2)));
        assert_eq!(ema_update(&[0.0], &[2.0], 1.5), Err(DistillError::Momentum(1.5)));
    }

    #[test]
    fn center_examples() {
        let rows = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        assert_eq!(update_center(&[4.0, 5.0], &rows, 1.0).unwrap(), vec![4.0, 5.0]);
        assert_eq!(update_center(&[4.0, 5.0], &rows, 0.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(update_center(&[1.0, 1.0], &[vec![3.0, 3.0]], 0.5).unwrap(), vec![2.0, 2.0]);
        assert_eq!(update_center(&[1.0], &[], 0.5), Err(DistillError::EmptyBatch));
    }

    #[test]
    fn batch_validation() {
        let mut b = two_way_batch(2);
        b.student_patch[1].pop();
        assert_eq!(b.validate(), Err(DistillError::Length(1, 2)));
        let mut b = two_way_batch(1);
        b.teacher_class[1].push(0.0);
        assert_eq!(b.validate(), Err(DistillError::Length(3, 2)));
        let mut b = two_way_batch(1);
        b.teacher_patch = [vec![], vec![]];
        b.student_patch = [vec![], vec![]];
        assert_eq!(b.validate(), Err(DistillError::NoPatches));
    }

    #[test]
    fn property_suite_passes() {
        for seed in [0, 1, 2] {
            for c in check(seed, 20).unwrap() {
                assert!(c.passed, "{c:?}");
            }
        }
    }

    #[test]
    fn default_config() {
        let cfg = DistillConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_prototypes, 131_072);
        assert_eq!((cfg.batch_size, cfg.iterations), (2048, 105_000));
        assert_eq!((cfg.dino_bottleneck, cfg.ibot_bottleneck), (384, 256));
    }
}
