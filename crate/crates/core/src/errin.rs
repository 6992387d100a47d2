//! In-sample error by parametric bootstrap of the covariance penalty, with a
//! random-forest estimate of the noise level.

use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::expr::{ExprError, ExpressionTree};
use crate::optfit::{refit_from, FitConfig};
use crate::rng::substream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErrInError {
    #[error("random forest needs at least 10 samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("all input rows are identical; nothing to split on")]
    DegenerateInputs,
    #[error("bootstrap needs B >= 2, got {b}")]
    TooFewReplicates { b: usize },
    #[error("all {b} bootstrap refits failed")]
    AllReplicatesFailed { b: usize },
    #[error("length mismatch: {got} values for {n} samples")]
    LengthMismatch { got: usize, n: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 100, min_leaf: 5, max_features: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

struct Grower<'a, R> {
    data: &'a Dataset,
    min_leaf: usize,
    mtry: usize,
    rng: &'a mut R,
    nodes: Vec<TreeNode>,
}

impl<R: Rng> Grower<'_, R> {
    fn grow(&mut self, mut idx: Vec<usize>) -> usize {
        let y = &self.data.y;
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| y[i]).sum();
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(total / n as f64));
        if n < 2 * self.min_leaf || idx.iter().all(|&i| y[i] == y[idx[0]]) {
            return at;
        }
        let dim = self.data.dim;
        let x = &self.data.x;
        // Maximising sL^2/nL + sR^2/nR is maximising the variance reduction.
        let mut best_score = total * total / n as f64;
        let mut best = None;
        for feature in sample(self.rng, dim, self.mtry) {
            idx.sort_by(|&a, &b| x[a * dim + feature].total_cmp(&x[b * dim + feature]));
            let mut left = 0.0;
            for k in 1..n {
                left += y[idx[k - 1]];
                if k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let lo = x[idx[k - 1] * dim + feature];
                let hi = x[idx[k] * dim + feature];
                if lo == hi {
                    continue;
                }
                let right = total - left;
                let score = left * left / k as f64 + right * right / (n - k) as f64;
                if score > best_score * (1.0 + 1e-12) {
                    best_score = score;
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some((feature, if mid < hi { mid } else { lo }));
                }
            }
        }
        let Some((feature, threshold)) = best else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i * dim + feature] <= threshold);
        let left = self.grow(l);
        let right = self.grow(r);
        self.nodes[at] = TreeNode::Split { feature, threshold, left, right };
        at
    }
}

/// Bagged regression trees; the prediction is the mean over trees.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<RegressionTree>,
    config: ForestConfig,
    dim: usize,
}

impl ForestModel {
    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Predictions for row-major `x` with this forest's input width.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        x.chunks_exact(self.dim).map(|row| self.predict_row(row)).collect()
    }
}

/// Fits a forest; tree `t` draws its bootstrap rows and feature subsets
/// from its own substream of a seed taken from `rng`.
pub fn fit_forest<R: RngCore + ?Sized>(
    train: &Dataset,
    config: &ForestConfig,
    rng: &mut R,
) -> Result<ForestModel, ErrInError> {
    let n = train.n();
    if n < 10 {
        return Err(ErrInError::TooFewSamples { n });
    }
    let first = train.row(0);
    if (1..n).all(|i| train.row(i) == first) {
        return Err(ErrInError::DegenerateInputs);
    }
    let dim = train.dim;
    let mtry = config.max_features.unwrap_or(dim.div_ceil(3)).clamp(1, dim.max(1));
    let base = rng.next_u64();
    let trees = (0..config.n_trees)
        .map(|t| {
            let mut r = substream(base, "forest-tree", t as u64);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let mut g = Grower { data: train, min_leaf: config.min_leaf.max(1), mtry, rng: &mut r, nodes: Vec::new() };
            g.grow(idx);
            RegressionTree { nodes: g.nodes }
        })
        .collect();
    Ok(ForestModel { trees, config: *config, dim })
}

/// Mean squared residual of the forest's fitted values on `train`.
pub fn estimate_noise(train: &Dataset, forest: &ForestModel) -> f64 {
    let fitted = forest.predict(&train.x);
    fitted.iter().zip(&train.y).map(|(f, y)| (y - f).powi(2)).sum::<f64>() / train.n() as f64
}

/// Reference distribution shared by every candidate of one dataset:
/// replicate targets are `ybar + N(0, sigma2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub ybar: Vec<f64>,
    pub sigma2: f64,
}

impl NoiseModel {
    pub fn fit<R: RngCore + ?Sized>(train: &Dataset, config: &ForestConfig, rng: &mut R) -> Result<Self, ErrInError> {
        let forest = fit_forest(train, config, rng)?;
        Ok(NoiseModel { ybar: forest.predict(&train.x), sigma2: estimate_noise(train, &forest) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Replicate count B.
    pub b: usize,
    /// Settings of the single warm-started refit per replicate; `restarts`
    /// is ignored.
    pub refit: FitConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { b: 200, refit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePenalty {
    pub cov: Vec<f64>,
    /// Replicates whose refit failed and reused `theta_hat`.
    pub failed_replicates: usize,
}

impl CovariancePenalty {
    pub fn sum(&self) -> f64 {
        self.cov.iter().sum()
    }
}

/// Per-point bootstrap covariance between refitted predictions and
/// replicate targets. Replicate `b` draws its noise from substream `b` of a
/// seed taken from `rng`, so candidates sharing that seed see identical
/// replicate targets.
pub fn covariance_penalty<R: RngCore + ?Sized>(
    tree: &ExpressionTree,
    theta_hat: &[f64],
    train: &Dataset,
    noise: &NoiseModel,
    config: &BootstrapConfig,
    rng: &mut R,
) -> Result<CovariancePenalty, ErrInError> {
    let n = train.n();
    if config.b < 2 {
        return Err(ErrInError::TooFewReplicates { b: config.b });
    }
    if noise.ybar.len() != n {
        return Err(ErrInError::LengthMismatch { got: noise.ybar.len(), n });
    }
    let prog = tree.compile();
    prog.check_inputs(theta_hat, &train.x, train.dim)?;
    let mut ws = prog.workspace(&train.x, train.dim);
    let eps = Normal::new(0.0, noise.sigma2.max(0.0).sqrt()).expect("finite non-negative sd");
    let base = rng.next_u64();

    let b_count = config.b;
    let mut mu = Vec::with_capacity(b_count * n);
    let mut ystar = Vec::with_capacity(b_count * n);
    let mut failed = 0;
    for b in 0..b_count {
        let mut r = substream(base, "bootstrap", b as u64);
        let y: Vec<f64> = noise.ybar.iter().map(|m| m + eps.sample(&mut r)).collect();
        let theta = if theta_hat.is_empty() {
            Vec::new()
        } else {
            match refit_from(tree, &train.x, train.dim, &y, theta_hat, &config.refit) {
                Ok(fit) if fit.mse.is_finite() => fit.theta,
                _ => {
                    failed += 1;
                    theta_hat.to_vec()
                }
            }
        };
        mu.extend_from_slice(ws.predict(&prog, &theta));
        ystar.extend_from_slice(&y);
    }
    if failed == b_count {
        return Err(ErrInError::AllReplicatesFailed { b: b_count });
    }

    let mut mean = vec![0.0; n];
    for row in mu.chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= b_count as f64);
    let mut cov = vec![0.0; n];
    for (mrow, yrow) in mu.chunks_exact(n).zip(ystar.chunks_exact(n)) {
        for i in 0..n {
            cov[i] += (mrow[i] - mean[i]) * (yrow[i] - noise.ybar[i]);
        }
    }
    cov.iter_mut().for_each(|c| *c /= (b_count - 1) as f64);
    Ok(CovariancePenalty { cov, failed_replicates: failed })
}

/// `mse_train + (2 / n) * sum(cov)`.
pub fn err_in(mse_train: f64, cov: &[f64], n: usize) -> Result<f64, ErrInError> {
    if cov.len() != n {
        return Err(ErrInError::LengthMismatch { got: cov.len(), n });
    }
    Ok(mse_train + 2.0 / n as f64 * cov.iter().sum::<f64>())
}

/// Per-candidate audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrInDiagnostics {
    pub candidate_id: usize,
    pub sigma2: f64,
    pub b: usize,
    pub failed_replicates: usize,
    pub cov_sum: f64,
    pub err_in: f64,
    /// Wall clock per criterion in nanoseconds; zero when timing is off.
    pub t_aic_ns: u64,
    pub t_bic_ns: u64,
    pub t_mdl_ns: u64,
    pub t_errin_ns: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetKind;
    use crate::expr::parse;
    use rand_distr::StandardNormal;

    fn dataset(x: Vec<f64>, dim: usize, y: Vec<f64>) -> Dataset {
        Dataset { x, dim, y, kind: DatasetKind::TrainNoisy, sigma_y: 1.0 }
    }

    fn line_data(n: usize, sd: f64, seed: u64) -> Dataset {
        let mut r = substream(seed, "line", 0);
        let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let y = x.iter().map(|v| v + sd * r.sample::<f64, _>(StandardNormal)).collect();
        dataset(x, 1, y)
    }

    #[test]
    fn forest_on_constant_target_is_constant() {
        let d = dataset((0..20).map(|k| k as f64).collect(), 1, vec![3.25; 20]);
        let f = fit_forest(&d, &ForestConfig::default(), &mut substream(1, "rf", 0)).unwrap();
        assert_eq!(f.n_trees(), 100);
        assert!(f.predict(&d.x).iter().all(|&v| v == 3.25));
        assert_eq!(estimate_noise(&d, &f), 0.0);
    }

    #[test]
    fn forest_is_seeded() {
        let d = line_data(60, 0.1, 2);
        let a = fit_forest(&d, &ForestConfig::default(), &mut substream(3, "rf", 0)).unwrap();
        let b = fit_forest(&d, &ForestConfig::default(), &mut substream(3, "rf", 0)).unwrap();
        assert_eq!(a.predict(&d.x), b.predict(&d.x));
    }

    #[test]
    fn forest_fits_noisy_line() {
        let d = line_data(200, 0.1, 4);
        let f = fit_forest(&d, &ForestConfig::default(), &mut substream(5, "rf", 0)).unwrap();
        let pred = f.predict(&d.x);
        let rmse = (pred.iter().zip(&d.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / 200.0).sqrt();
        assert!(rmse < 0.15, "rmse {rmse}");
        assert!(pred.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forest_rejects_degenerate_inputs() {
        let d = dataset(vec![1.0; 12], 1, (0..12).map(|k| k as f64).collect());
        assert_eq!(fit_forest(&d, &ForestConfig::default(), &mut substream(0, "rf", 0)), Err(ErrInError::DegenerateInputs));
        let d = dataset(vec![1.0; 9], 1, vec![0.0; 9]);
        assert_eq!(
            fit_forest(&d, &ForestConfig::default(), &mut substream(0, "rf", 0)),
            Err(ErrInError::TooFewSamples { n: 9 })
        );
    }

    #[test]
    fn leaves_respect_min_size() {
        let d = line_data(50, 0.3, 8);
        let f = fit_forest(&d, &ForestConfig { n_trees: 1, ..ForestConfig::default() }, &mut substream(1, "rf", 0)).unwrap();
        // a single tree predicts at most n / min_leaf distinct values
        let mut v = f.predict(&d.x);
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert!(v.len() <= 10, "{}", v.len());
    }

    #[test]
    fn estimate_noise_examples() {
        // a forest fitted to a constant reproduces it exactly; shifting the
        // targets by c then leaves residuals of exactly c
        let x: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let d = dataset(x.clone(), 1, vec![2.0; 20]);
        let f = fit_forest(&d, &ForestConfig::default(), &mut substream(2, "rf", 0)).unwrap();
        assert_eq!(estimate_noise(&d, &f), 0.0);
        let c = 0.5;
        let shifted = dataset(x, 1, vec![2.0 + c; 20]);
        assert!((estimate_noise(&shifted, &f) - c * c).abs() < 1e-12);
    }

    #[test]
    fn err_in_arithmetic() {
        let cov = vec![0.005; 100];
        assert!((err_in(1.0, &cov, 100).unwrap() - 1.01).abs() < 1e-12);
        assert_eq!(err_in(0.7, &[0.0; 4], 4).unwrap(), 0.7);
        assert!(err_in(0.7, &[0.1; 4], 4).unwrap() > 0.7);
        assert_eq!(err_in(0.7, &[0.0; 3], 4), Err(ErrInError::LengthMismatch { got: 3, n: 4 }));
    }

    #[test]
    fn constant_tree_has_no_covariance() {
        let d = line_data(100, 0.1, 6);
        let noise = NoiseModel::fit(&d, &ForestConfig::default(), &mut substream(6, "rf", 0)).unwrap();
        let t = parse("(cos x0)").unwrap();
        let cfg = BootstrapConfig::default();
        let pen = covariance_penalty(&t, &[], &d, &noise, &cfg, &mut substream(6, "boot", 0)).unwrap();
        let bound = 3.0 * noise.sigma2 / (cfg.b as f64).sqrt();
        assert!(pen.cov.iter().all(|c| c.abs() < bound));
        assert_eq!(pen.failed_replicates, 0);
    }

    #[test]
    fn ols_line_penalty_and_determinism() {
        let d = line_data(100, 0.1, 7);
        let noise = NoiseModel::fit(&d, &ForestConfig::default(), &mut substream(7, "rf", 0)).unwrap();
        let t = parse("(+ 0.0 (* 1.0 x0))").unwrap();
        let cfg = BootstrapConfig::default();
        let a = covariance_penalty(&t, t.theta(), &d, &noise, &cfg, &mut substream(7, "boot", 0)).unwrap();
        let b = covariance_penalty(&t, t.theta(), &d, &noise, &cfg, &mut substream(7, "boot", 0)).unwrap();
        assert_eq!(a, b);
        let ratio = a.sum() / (2.0 * noise.sigma2);
        assert!((0.5..1.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn too_few_replicates() {
        let d = line_data(20, 0.1, 1);
        let noise = NoiseModel { ybar: d.y.clone(), sigma2: 0.01 };
        let t = parse("(* 1.0 x0)").unwrap();
        let cfg = BootstrapConfig { b: 1, ..BootstrapConfig::default() };
        assert_eq!(
            covariance_penalty(&t, t.theta(), &d, &noise, &cfg, &mut substream(1, "b", 0)),
            Err(ErrInError::TooFewReplicates { b: 1 })
        );
    }

    #[test]
    fn noise_estimate_envelope_on_smooth_data() {
        use crate::datagen::sample_sd;
        for seed in 0..50 {
            let mut r = substream(seed, "envelope", 0);
            let x: Vec<f64> = (0..100).map(|_| 3.0 * r.random::<f64>()).collect();
            let clean: Vec<f64> = x.iter().map(|v| (2.0 * v).sin()).collect();
            let s = 0.1 * sample_sd(&clean);
            let y = clean.iter().map(|c| c + s * r.sample::<f64, _>(StandardNormal)).collect();
            let d = dataset(x, 1, y);
            let noise = NoiseModel::fit(&d, &ForestConfig::default(), &mut substream(seed, "rf", 0)).unwrap();
            let ratio = noise.sigma2.sqrt() / s;
            assert!((0.5..=2.0).contains(&ratio), "seed {seed}: {ratio}");
        }
    }
}
