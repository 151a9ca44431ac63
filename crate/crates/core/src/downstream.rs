//! Downstream evaluation protocols on frozen embeddings.
//!
//! * Slide classification: mean-pooled tile features, L2-regularized logistic
//!   regression, AUC per test subcohort, and Lin's concordance between the
//!   predictions two subcohorts give for the same tumor blocks.
//! * Spot regression: PCA fitted on the training split, ridge regression on
//!   the standardized projections, Pearson correlation per target.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::store::EmbeddingMatrix;

/// Dense `f64` matrix used for design matrices and targets.
pub type Matrix = DMatrix<f64>;

pub const PCA_MAX_COMPONENTS: usize = 256;
pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum DownstreamError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("labels must be 0 or 1, found {0}")]
    NonBinary(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("constant vector has no correlation")]
    Constant,
    #[error("concordance undefined: both vectors constant with equal means")]
    CccUndefined,
    #[error("singular system; use a positive ridge penalty")]
    Singular,
    #[error("subcohorts {0} and {1} share no tumor blocks")]
    NoSharedBlocks(String, String),
    #[error("group id {0} appears twice in subcohort {1}")]
    DuplicateGroup(String, String),
}

type Result<T> = std::result::Result<T, DownstreamError>;

/// Design matrix with targets. `y` is `n × G`; classification uses one
/// column of 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Tumor block or spot identifier per row.
    pub group_ids: Option<Vec<String>>,
}

impl LabeledFeatures {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, group_ids: Option<Vec<String>>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(DownstreamError::Shape(format!("need at least 2 rows, got {}", x.nrows())));
        }
        if y.nrows() != x.nrows() || y.ncols() == 0 {
            return Err(DownstreamError::Shape(format!(
                "{} feature rows but {}x{} targets",
                x.nrows(),
                y.nrows(),
                y.ncols()
            )));
        }
        if let Some(g) = &group_ids {
            if g.len() != x.nrows() {
                return Err(DownstreamError::Shape(format!("{} group ids for {} rows", g.len(), x.nrows())));
            }
        }
        check_finite(&x, "features")?;
        check_finite(&y, "targets")?;
        Ok(Self { x, y, group_ids })
    }

    pub fn classification(x: DMatrix<f64>, labels: &[bool], group_ids: Option<Vec<String>>) -> Result<Self> {
        let y = DMatrix::from_iterator(labels.len(), 1, labels.iter().map(|&l| l as u8 as f64));
        Self::new(x, y, group_ids)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// First target column as binary labels.
    pub fn binary_labels(&self) -> Result<Vec<bool>> {
        self.y
            .column(0)
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(DownstreamError::NonBinary(other)),
            })
            .collect()
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DownstreamError::NonFinite(what))
    }
}

/// Column means of `x`, accumulated in row order.
pub fn mean_pool(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(DownstreamError::Empty);
    }
    let mut sums = DVector::zeros(x.ncols());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            sums[c] += x[(r, c)];
        }
    }
    Ok(sums / x.nrows() as f64)
}

/// Slide embedding as the mean of its tile embeddings.
pub fn mean_pool_slide(slide: &EmbeddingMatrix) -> DVector<f64> {
    let mut sums = DVector::zeros(slide.dim());
    for row in slide.rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    sums / slide.n_tiles() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Ridge,
}

/// `d × G` weights and `G` biases acting on raw (unstandardized) features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub kind: ModelKind,
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub regularization: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LinearModel {
    /// `n × G` outputs: probabilities for logistic models, values for ridge.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.weights.nrows() {
            return Err(DownstreamError::Shape(format!(
                "model expects {} features, got {}",
                self.weights.nrows(),
                x.ncols()
            )));
        }
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        if self.kind == ModelKind::Logistic {
            out.apply(|v| *v = sigmoid(*v));
        }
        Ok(out)
    }
}

/// First output column of `model` on `x`.
pub fn predict_scores(model: &LinearModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(model.predict(x)?.column(0).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticOptions {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient's Euclidean norm is at most `tol`.
    pub tol: f64,
    /// Fit on z-scored features; weights are mapped back to raw features.
    pub standardize: bool,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self { l2: 1e-2, max_iter: 10_000, tol: 1e-8, standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub model: LinearModel,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective after each accepted step, starting at the zero model.
    pub objective_trace: Vec<f64>,
}

/// Per-column mean and scale; zero-variance columns get scale 1.
fn column_scaling(x: &DMatrix<f64>, standardize: bool) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let scale = DVector::from_iterator(
        x.ncols(),
        x.column_iter().zip(mean.iter()).map(|(c, m)| {
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if standardize && sd > 0.0 {
                sd
            } else {
                1.0
            }
        }),
    );
    (mean, scale)
}

fn scaled(x: &DMatrix<f64>, mean: &DVector<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.apply(|v| *v = (*v - mean[j]) / scale[j]);
    }
    out
}

struct LogisticProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    l2: f64,
}

impl LogisticProblem<'_> {
    /// Objective and gradient at `theta = [w; b]`.
    fn eval(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = self.x.ncols();
        let n = self.x.nrows() as f64;
        let w = theta.rows(0, d);
        let b = theta[d];
        let z = self.x * w + DVector::repeat(self.x.nrows(), b);
        let mut loss = 0.0;
        let mut resid = DVector::zeros(z.len());
        for i in 0..z.len() {
            loss += softplus(z[i]) - self.y[i] * z[i];
            resid[i] = sigmoid(z[i]) - self.y[i];
        }
        let mut grad = DVector::zeros(d + 1);
        grad.rows_mut(0, d).copy_from(&(self.x.tr_mul(&resid) / n + w * self.l2));
        grad[d] = resid.sum() / n;
        (loss / n + 0.5 * self.l2 * w.norm_squared(), grad)
    }
}

/// Minimizes mean logistic loss plus `(l2/2)‖w‖²` (bias unpenalized) by
/// gradient descent with Barzilai–Borwein steps and Armijo backtracking,
/// from the zero model. With standardization the penalty applies to the
/// weights of the z-scored features.
pub fn fit_logistic(data: &LabeledFeatures, opts: &LogisticOptions) -> Result<LogisticFit> {
    if !(opts.l2 > 0.0 && opts.l2.is_finite()) {
        return Err(DownstreamError::Parameter(format!("l2 must be positive, got {}", opts.l2)));
    }
    let labels = data.binary_labels()?;
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(DownstreamError::SingleClass);
    }
    let (mean, scale) = column_scaling(&data.x, opts.standardize);
    let xs = scaled(&data.x, &mean, &scale);
    let y = DVector::from_iterator(labels.len(), labels.iter().map(|&l| l as u8 as f64));
    let problem = LogisticProblem { x: &xs, y: &y, l2: opts.l2 };
    let d = xs.ncols();

    let mut theta = DVector::zeros(d + 1);
    let (mut f, mut g) = problem.eval(&theta);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    while g.norm() > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        if let Some((t0, g0)) = &prev {
            let s = &theta - t0;
            let yk = &g - g0;
            let sy = s.dot(&yk);
            if sy > 0.0 {
                step = s.norm_squared() / sy;
            }
        }
        let gg = g.norm_squared();
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &theta - &g * step;
            let (fc, gc) = problem.eval(&cand);
            // Near the optimum the decrease drops below rounding of `f`.
            let roundoff = 8.0 * f64::EPSILON * f.abs();
            if fc <= f - 1e-4 * step * gg || (fc - f).abs() <= roundoff && gc.norm() < g.norm() {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        prev = Some((std::mem::replace(&mut theta, cand), std::mem::replace(&mut g, gc)));
        f = fc;
        trace.push(f);
    }
    let grad_norm = g.norm();
    let converged = grad_norm <= opts.tol;
    if !converged {
        log::warn!("logistic regression stopped after {iterations} iterations with gradient norm {grad_norm:e}");
    }

    let w_std = theta.rows(0, d);
    let weights = DVector::from_iterator(d, (0..d).map(|j| w_std[j] / scale[j]));
    let bias = theta[d] - weights.dot(&mean);
    Ok(LogisticFit {
        model: LinearModel {
            kind: ModelKind::Logistic,
            weights: DMatrix::from_column_slice(d, 1, weights.as_slice()),
            bias: DVector::from_element(1, bias),
            regularization: opts.l2,
        },
        converged,
        iterations,
        grad_norm,
        objective_trace: trace,
    })
}

/// Area under the ROC curve: `P(s+ > s-) + P(s+ = s-)/2` over all
/// positive–negative pairs, computed from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DownstreamError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DownstreamError::NonFinite("scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DownstreamError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        pos_rank_sum += avg * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean and orthonormal principal axes (rows of `components`), by
/// decreasing explained variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: DVector<f64>,
    pub components: DMatrix<f64>,
    /// Sample variance (`n - 1` denominator) along each component.
    pub explained_variance: Vec<f64>,
}

impl PcaProjection {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// `(x - mean) · componentsᵀ`.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(DownstreamError::Shape(format!("PCA expects {} features, got {}", self.mean.len(), x.ncols())));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.components.transpose())
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * &self.components;
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }
}

/// Principal components of `x`, keeping at most `min(q, 256, d, n - 1)` and
/// only directions with positive variance. Each component's largest-magnitude
/// entry is positive.
pub fn pca_fit(x: &DMatrix<f64>, q: usize) -> Result<PcaProjection> {
    let (n, d) = x.shape();
    if n < 2 || d == 0 {
        return Err(DownstreamError::Shape(format!("PCA needs at least 2 rows and 1 column, got {n}x{d}")));
    }
    if q == 0 {
        return Err(DownstreamError::Parameter("q must be at least 1".into()));
    }
    check_finite(x, "features")?;
    let limit = q.min(PCA_MAX_COMPONENTS).min(d).min(n - 1);
    if limit < q {
        log::info!("PCA components clamped from {q} to {limit} for {n}x{d} data");
    }
    let mean = mean_pool(x)?;
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let top = eig.eigenvalues[order[0]];
    if top <= 0.0 {
        return Err(DownstreamError::ZeroVariance);
    }
    let floor = top * d as f64 * f64::EPSILON * 16.0;
    let kept: Vec<usize> = order.into_iter().take(limit).filter(|&i| eig.eigenvalues[i] > floor).collect();
    if kept.len() < limit {
        log::info!("PCA keeps {} positive-variance components of {limit} requested", kept.len());
    }
    let mut components = DMatrix::zeros(kept.len(), d);
    for (r, &i) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let lead = v.iter().enumerate().fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.neg_mut();
        }
        components.row_mut(r).copy_from(&v.transpose());
    }
    let explained_variance = kept.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(PcaProjection { mean, components, explained_variance })
}

/// Closed-form ridge regression of `y` on `z`: with centered `Z_c`, `Y_c`,
/// `W = (Z_cᵀZ_c + αI)⁻¹ Z_cᵀ Y_c` and `b = ȳ - z̄ᵀW`. For centered inputs
/// (such as PCA scores) the bias is the target mean.
pub fn ridge_fit(z: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<LinearModel> {
    if z.nrows() != y.nrows() || z.nrows() == 0 {
        return Err(DownstreamError::Shape(format!("{} rows of inputs, {} of targets", z.nrows(), y.nrows())));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(DownstreamError::Parameter(format!("alpha must be non-negative, got {alpha}")));
    }
    check_finite(z, "inputs")?;
    check_finite(y, "targets")?;
    let zm = mean_pool(z)?;
    let ym = mean_pool(y)?;
    let mut zc = z.clone();
    for mut row in zc.row_iter_mut() {
        row -= zm.transpose();
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= ym.transpose();
    }
    let mut gram = zc.tr_mul(&zc);
    for i in 0..gram.nrows() {
        gram[(i, i)] += alpha;
    }
    let rhs = zc.tr_mul(&yc);
    let weights = gram.cholesky().ok_or(DownstreamError::Singular)?.solve(&rhs);
    let bias = ym - weights.tr_mul(&zm);
    Ok(LinearModel { kind: ModelKind::Ridge, weights, bias, regularization: alpha })
}

fn moments(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(DownstreamError::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(DownstreamError::Shape(format!("need at least 2 values, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(DownstreamError::NonFinite("vector"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    Ok((mx, my, sxx / n, syy / n, sxy / n))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (_, _, vx, vy, cxy) = moments(x, y)?;
    if vx == 0.0 || vy == 0.0 {
        return Err(DownstreamError::Constant);
    }
    Ok((cxy / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Lin's concordance correlation with population moments:
/// `2 s_xy / (s_x² + s_y² + (x̄ - ȳ)²)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my, vx, vy, cxy) = moments(x, y)?;
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Err(DownstreamError::CccUndefined);
    }
    Ok(2.0 * cxy / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HestResult {
    /// Pearson correlation per target; `None` where the test target is constant.
    pub per_target: Vec<Option<f64>>,
    /// Mean over defined targets.
    pub mean: f64,
    pub n_components: usize,
}

/// PCA on the training features, ridge on standardized training scores,
/// Pearson per target on the test split.
pub fn run_hest_protocol(train: &LabeledFeatures, test: &LabeledFeatures, q: usize, alpha: f64) -> Result<HestResult> {
    if train.x.ncols() != test.x.ncols() || train.y.ncols() != test.y.ncols() {
        return Err(DownstreamError::Shape("train and test disagree on features or targets".into()));
    }
    let pca = pca_fit(&train.x, q)?;
    let z_train = pca.transform(&train.x)?;
    let (zero, scale) = column_scaling(&z_train, true);
    let model = ridge_fit(&scaled(&z_train, &zero, &scale), &train.y, alpha)?;
    let pred = model.predict(&scaled(&pca.transform(&test.x)?, &zero, &scale))?;
    let mut per_target = Vec::with_capacity(test.y.ncols());
    for g in 0..test.y.ncols() {
        let truth: Vec<f64> = test.y.column(g).iter().copied().collect();
        let guess: Vec<f64> = pred.column(g).iter().copied().collect();
        match pearson(&guess, &truth) {
            Ok(r) => per_target.push(Some(r)),
            Err(DownstreamError::Constant) => {
                log::warn!("target {g} is constant on the test split or predicted as constant; excluded from the mean");
                per_target.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_target.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(DownstreamError::Constant);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(HestResult { per_target, mean, n_components: pca.n_components() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcordanceRow {
    pub subcohort_a: String,
    pub subcohort_b: String,
    pub ccc: f64,
    pub n_shared: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreastBmResult {
    pub auc: BTreeMap<String, f64>,
    /// Every unordered subcohort pair, sorted by name.
    pub concordance: Vec<ConcordanceRow>,
    pub fit: LogisticFit,
}

/// One logistic model fitted on the pooled training slides; AUC on each test
/// subcohort and CCC between subcohort predictions on shared tumor blocks.
pub fn run_breastbm_protocol(
    train: &LabeledFeatures,
    subcohorts: &BTreeMap<String, LabeledFeatures>,
    opts: &LogisticOptions,
) -> Result<BreastBmResult> {
    let fit = fit_logistic(train, opts)?;
    let mut aucs = BTreeMap::new();
    let mut by_group: BTreeMap<&str, HashMap<&str, f64>> = BTreeMap::new();
    for (name, sub) in subcohorts {
        let scores = predict_scores(&fit.model, &sub.x)?;
        aucs.insert(name.clone(), auc(&scores, &sub.binary_labels()?)?);
        let groups = sub
            .group_ids
            .as_ref()
            .ok_or_else(|| DownstreamError::Shape(format!("subcohort {name} has no group ids")))?;
        let entry = by_group.entry(name).or_default();
        for (g, s) in groups.iter().zip(scores) {
            if entry.insert(g, s).is_some() {
                return Err(DownstreamError::DuplicateGroup(g.clone(), name.clone()));
            }
        }
    }
    let names: Vec<&str> = by_group.keys().copied().collect();
    let mut concordance = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (pa, pb) = (&by_group[a], &by_group[b]);
            let mut shared: Vec<&str> = pa.keys().filter(|g| pb.contains_key(*g)).copied().collect();
            shared.sort_unstable();
            if shared.is_empty() {
                return Err(DownstreamError::NoSharedBlocks(a.to_string(), b.to_string()));
            }
            let xa: Vec<f64> = shared.iter().map(|g| pa[g]).collect();
            let xb: Vec<f64> = shared.iter().map(|g| pb[g]).collect();
            concordance.push(ConcordanceRow {
                subcohort_a: a.to_string(),
                subcohort_b: b.to_string(),
                ccc: ccc(&xa, &xb)?,
                n_shared: shared.len(),
            });
        }
    }
    Ok(BreastBmResult { auc: aucs, concordance, fit })
}

/// Seeded regression task `Y = X W* + noise` on features with a low-rank
/// structure: `X = L A + ε E` with `latent` factors, so most feature variance
/// lies in a subspace that a few hundred principal components capture.
/// Per-target noise has standard deviation `noise` times the signal's.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRegression {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub n_targets: usize,
    pub latent: usize,
    pub feature_noise: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticRegression {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            dim: 512,
            n_targets: 50,
            latent: 64,
            feature_noise: 0.05,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticRegression {
    /// Train and test splits.
    pub fn generate(&self) -> Result<(LabeledFeatures, LabeledFeatures)> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        if self.latent == 0 || self.dim == 0 || self.n_targets == 0 {
            return Err(DownstreamError::Parameter("latent, dim and n_targets must be positive".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |r: usize, c: usize, scale: f64| {
            DMatrix::from_fn(r, c, |_, _| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let n = self.n_train + self.n_test;
        let mixing = normal(self.latent, self.dim, (self.latent as f64).sqrt().recip());
        let w_star = normal(self.dim, self.n_targets, (self.dim as f64).sqrt().recip());
        let x = normal(n, self.latent, 1.0) * mixing + normal(n, self.dim, self.feature_noise);
        let signal = &x * w_star;
        let mut y = signal.clone();
        let noise = normal(n, self.n_targets, 1.0);
        for g in 0..self.n_targets {
            let col = signal.column(g);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            for i in 0..n {
                y[(i, g)] += self.noise * sd * noise[(i, g)];
            }
        }
        let split = |start: usize, len: usize| {
            LabeledFeatures::new(x.rows(start, len).into_owned(), y.rows(start, len).into_owned(), None)
        };
        Ok((split(0, self.n_train)?, split(self.n_train, self.n_test)?))
    }
}
