//! Closed-form selection criteria on a fitted candidate.
//!
//! All criteria are "lower is better" and measured in nats. The Gaussian
//! log-likelihood uses a fixed noise scale `sigma_hat` supplied by the
//! caller rather than one estimated from the residuals.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::expr::{ExprError, ExpressionTree, Program};
use crate::poolgen::FittedCandidate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriteriaError {
    #[error("noise scale must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("Fisher information needs at least one parameter")]
    NoParameters,
    #[error("log-likelihood is not finite")]
    NonFinite,
    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionId {
    MseTrain,
    Aic,
    Aicc,
    Bic,
    Mdl,
    ErrIn,
}

impl CriterionId {
    pub const ALL: [CriterionId; 6] = [
        CriterionId::MseTrain,
        CriterionId::Aic,
        CriterionId::Aicc,
        CriterionId::Bic,
        CriterionId::Mdl,
        CriterionId::ErrIn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionId::MseTrain => "mse_train",
            CriterionId::Aic => "aic",
            CriterionId::Aicc => "aicc",
            CriterionId::Bic => "bic",
            CriterionId::Mdl => "mdl",
            CriterionId::ErrIn => "err_in",
        }
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionId {
    type Err = CriteriaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CriterionId::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CriteriaError::UnknownCriterion(s.to_string()))
    }
}

fn check_sigma(sigma_hat: f64) -> Result<(), CriteriaError> {
    if sigma_hat > 0.0 && sigma_hat.is_finite() {
        Ok(())
    } else {
        Err(CriteriaError::InvalidSigma(sigma_hat))
    }
}

/// Gaussian log-likelihood of `n` residuals with sum of squares `sse`.
pub fn log_likelihood_from_sse(sse: f64, n: usize, sigma_hat: f64) -> Result<f64, CriteriaError> {
    check_sigma(sigma_hat)?;
    let var = sigma_hat * sigma_hat;
    Ok(-(n as f64) / 2.0 * (2.0 * std::f64::consts::PI * var).ln() - sse / (2.0 * var))
}

pub fn log_likelihood(
    tree: &ExpressionTree,
    theta_hat: &[f64],
    data: &Dataset,
    sigma_hat: f64,
) -> Result<f64, CriteriaError> {
    check_sigma(sigma_hat)?;
    let prog = tree.compile();
    prog.check_inputs(theta_hat, &data.x, data.dim)?;
    let sse = prog.sse(theta_hat, &data.x, data.dim, &data.y);
    log_likelihood_from_sse(sse, data.n(), sigma_hat)
}

pub fn aic(ll: f64, p: usize) -> f64 {
    -2.0 * ll + 2.0 * p as f64
}

/// Small-sample corrected AIC; `+inf` when `n <= p + 1`.
pub fn aicc(aic_value: f64, p: usize, n: usize) -> f64 {
    if n <= p + 1 {
        return f64::INFINITY;
    }
    let p = p as f64;
    aic_value + 2.0 * p * (p + 1.0) / (n as f64 - p - 1.0)
}

pub fn bic(ll: f64, p: usize, n: usize) -> f64 {
    -2.0 * ll + p as f64 * (n as f64).ln()
}

fn fisher_step(theta_i: f64) -> f64 {
    (1e-4 * theta_i.abs()).max(1e-4)
}

/// Diagonal of the observed Fisher information at `theta_hat`.
///
/// Each entry is the second central difference of the negative
/// log-likelihood. Entries that come out non-positive or non-finite are
/// replaced by the Gauss-Newton value `sum_k (d mu_k / d theta_i)^2 / sigma^2`.
pub fn fisher_diag(
    tree: &ExpressionTree,
    theta_hat: &[f64],
    data: &Dataset,
    sigma_hat: f64,
) -> Result<Vec<f64>, CriteriaError> {
    Ok(fisher_diag_flagged(tree, theta_hat, data, sigma_hat)?.0)
}

/// As [`fisher_diag`], also reporting which entries used the fallback.
pub fn fisher_diag_flagged(
    tree: &ExpressionTree,
    theta_hat: &[f64],
    data: &Dataset,
    sigma_hat: f64,
) -> Result<(Vec<f64>, Vec<bool>), CriteriaError> {
    check_sigma(sigma_hat)?;
    let p = theta_hat.len();
    if p == 0 {
        return Err(CriteriaError::NoParameters);
    }
    let prog = tree.compile();
    prog.check_inputs(theta_hat, &data.x, data.dim)?;
    let var = sigma_hat * sigma_hat;
    let ws = std::cell::RefCell::new(prog.workspace(&data.x, data.dim));
    let sse = |t: &[f64]| ws.borrow_mut().sse(&prog, t, &data.y);
    let sse0 = sse(theta_hat);
    let mut t = theta_hat.to_vec();
    let mut values = Vec::with_capacity(p);
    let mut fallback = Vec::with_capacity(p);
    for i in 0..p {
        let h = fisher_step(theta_hat[i]);
        t[i] = theta_hat[i] + h;
        let sp = sse(&t);
        t[i] = theta_hat[i] - h;
        let sm = sse(&t);
        t[i] = theta_hat[i];
        // The constant part of -log L cancels in the second difference.
        let second = (sp - 2.0 * sse0 + sm) / (2.0 * var * h * h);
        if second > 0.0 && second.is_finite() {
            values.push(second);
            fallback.push(false);
        } else {
            values.push(gauss_newton_entry(&prog, theta_hat, data, i, h) / var);
            fallback.push(true);
        }
    }
    Ok((values, fallback))
}

fn gauss_newton_entry(prog: &Program, theta: &[f64], data: &Dataset, i: usize, h: f64) -> f64 {
    let mut t = theta.to_vec();
    t[i] = theta[i] + h;
    let up = prog.evaluate(&t, &data.x, data.dim).expect("inputs checked");
    t[i] = theta[i] - h;
    let down = prog.evaluate(&t, &data.x, data.dim).expect("inputs checked");
    let s: f64 = up.iter().zip(&down).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum();
    if s.is_finite() {
        s
    } else {
        0.0
    }
}

/// Term-by-term description length in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdlBreakdown {
    pub neg_log_like: f64,
    /// `size * ln(distinct symbols)`
    pub structure_term: f64,
    /// `-(p/2) ln 3`
    pub param_const_term: f64,
    /// Always zero: every numeric literal is a fitted parameter.
    pub constants_term: f64,
    /// `sum_i max(0, ln(I_ii)/2 + ln|theta_i|)`
    pub param_precision_term: f64,
    pub total: f64,
    /// Parameters whose precision term was negative or undefined and clamped to 0.
    pub clamped: Vec<bool>,
}

pub fn mdl(
    tree: &ExpressionTree,
    theta_hat: &[f64],
    data: &Dataset,
    sigma_hat: f64,
) -> Result<MdlBreakdown, CriteriaError> {
    let ll = log_likelihood(tree, theta_hat, data, sigma_hat)?;
    let p = theta_hat.len();
    let structure_term = tree.size() as f64 * (tree.distinct_symbols() as f64).ln();
    let param_const_term = -(p as f64) / 2.0 * 3f64.ln();
    let constants_term = 0.0;
    let mut param_precision_term = 0.0;
    let mut clamped = Vec::with_capacity(p);
    if p > 0 {
        let info = fisher_diag(tree, theta_hat, data, sigma_hat)?;
        for (i_ii, theta) in info.iter().zip(theta_hat) {
            let term = 0.5 * i_ii.ln() + theta.abs().ln();
            if term.is_finite() && term >= 0.0 {
                param_precision_term += term;
                clamped.push(false);
            } else {
                clamped.push(true);
            }
        }
    }
    let neg_log_like = -ll;
    let total = neg_log_like + structure_term + param_const_term + constants_term + param_precision_term;
    Ok(MdlBreakdown {
        neg_log_like,
        structure_term,
        param_const_term,
        constants_term,
        param_precision_term,
        total,
        clamped,
    })
}

/// One candidate's scores. `err_in` and `mse_test` are filled in by later
/// stages; timings are wall-clock nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub candidate_id: usize,
    pub is_ground_truth: bool,
    pub size: usize,
    pub p: usize,
    pub log_likelihood: f64,
    pub mse_train: f64,
    pub aic: f64,
    pub aicc: f64,
    pub bic: f64,
    pub mdl: f64,
    pub err_in: Option<f64>,
    pub mse_test: Option<f64>,
    pub t_aic_ns: u64,
    pub t_bic_ns: u64,
    pub t_mdl_ns: u64,
    pub t_errin_ns: Option<u64>,
}

impl ScoreRow {
    pub fn value(&self, c: CriterionId) -> Option<f64> {
        match c {
            CriterionId::MseTrain => Some(self.mse_train),
            CriterionId::Aic => Some(self.aic),
            CriterionId::Aicc => Some(self.aicc),
            CriterionId::Bic => Some(self.bic),
            CriterionId::Mdl => Some(self.mdl),
            CriterionId::ErrIn => self.err_in,
        }
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    u64::try_from(start.elapsed().as_nanos()).unwrap_or(u64::MAX)
}

/// Scores a fitted candidate under every closed-form criterion.
///
/// The AIC family and BIC take the likelihood from the fit's own training
/// error, so that in floating point they are non-decreasing functions of
/// `mse_train` at fixed `p` (a fresh residual sum can differ in the last bit
/// and reorder near-identical fits). Its cost is charged to both timings.
pub fn score_all(
    candidate: &FittedCandidate,
    train: &Dataset,
    sigma_hat: f64,
) -> Result<ScoreRow, CriteriaError> {
    let tree = &candidate.tree;
    let theta = &candidate.fit.theta_hat;
    let n = train.n();
    let p = theta.len();

    let start = Instant::now();
    let ll = log_likelihood_from_sse(candidate.fit.mse_train * n as f64, n, sigma_hat)?;
    if !ll.is_finite() {
        return Err(CriteriaError::NonFinite);
    }
    let t_ll = elapsed_ns(start);

    let start = Instant::now();
    let aic_v = aic(ll, p);
    let aicc_v = aicc(aic_v, p, n);
    let t_aic_ns = t_ll + elapsed_ns(start);

    let start = Instant::now();
    let bic_v = bic(ll, p, n);
    let t_bic_ns = t_ll + elapsed_ns(start);

    let start = Instant::now();
    let mdl_v = mdl(tree, theta, train, sigma_hat)?.total;
    let t_mdl_ns = elapsed_ns(start);

    Ok(ScoreRow {
        candidate_id: candidate.candidate_id,
        is_ground_truth: candidate.is_ground_truth,
        size: tree.size(),
        p,
        log_likelihood: ll,
        mse_train: candidate.fit.mse_train,
        aic: aic_v,
        aicc: aicc_v,
        bic: bic_v,
        mdl: mdl_v,
        err_in: None,
        mse_test: None,
        t_aic_ns,
        t_bic_ns,
        t_mdl_ns,
        t_errin_ns: None,
    })
}

pub const SCORE_TABLE_COLUMNS: [&str; 15] = [
    "candidate_id",
    "is_ground_truth",
    "size",
    "p",
    "mse_train",
    "aic",
    "aicc",
    "bic",
    "mdl",
    "err_in",
    "mse_test",
    "t_aic_ns",
    "t_bic_ns",
    "t_mdl_ns",
    "t_errin_ns",
];

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the score table CSV. With `timings = false` the timing columns
/// are written as 0 so the file depends only on config and seed.
pub fn write_score_table<W: Write>(rows: &[ScoreRow], w: W, timings: bool) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCORE_TABLE_COLUMNS)?;
    let t = |v: u64| if timings { v } else { 0 };
    for r in rows {
        out.write_record([
            r.candidate_id.to_string(),
            r.is_ground_truth.to_string(),
            r.size.to_string(),
            r.p.to_string(),
            r.mse_train.to_string(),
            r.aic.to_string(),
            r.aicc.to_string(),
            r.bic.to_string(),
            r.mdl.to_string(),
            fmt_opt(r.err_in),
            fmt_opt(r.mse_test),
            t(r.t_aic_ns).to_string(),
            t(r.t_bic_ns).to_string(),
            t(r.t_mdl_ns).to_string(),
            fmt_opt(r.t_errin_ns.map(t)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetKind;
    use crate::expr::parse;
    use crate::optfit::FitResult;
    use std::f64::consts::PI;

    fn data(x: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset { x, dim: 1, y, kind: DatasetKind::TrainNoisy, sigma_y: 10.0 }
    }

    #[test]
    fn log_likelihood_examples() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        assert!((log_likelihood_from_sse(0.0, 1, 1.0).unwrap() + half_log_2pi).abs() < 1e-15);
        assert!((log_likelihood_from_sse(4.0, 1, 1.0).unwrap() + half_log_2pi + 2.0).abs() < 1e-15);
        assert!((log_likelihood_from_sse(0.0, 1, 1.0).unwrap() + 0.91894).abs() < 1e-5);
        let one = log_likelihood_from_sse(0.0, 5, 0.3).unwrap();
        let two = log_likelihood_from_sse(0.0, 10, 0.3).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert_eq!(log_likelihood_from_sse(0.0, 1, 0.0), Err(CriteriaError::InvalidSigma(0.0)));
        assert!(log_likelihood_from_sse(0.0, 1, -1.0).is_err());
    }

    #[test]
    fn information_criteria_examples() {
        assert_eq!(aic(0.0, 0), 0.0);
        assert_eq!(aic(-10.0, 3), 26.0);
        assert!((aicc(26.0, 3, 100) - 26.25).abs() < 1e-12);
        assert_eq!(aicc(26.0, 3, 4), f64::INFINITY);
        assert!(aicc(26.0, 3, 1_000_000) - 26.0 < 1e-4);
        assert!((bic(0.0, 2, 100) - 9.21034).abs() < 1e-5);
        assert_eq!(bic(-3.5, 0, 100), aic(-3.5, 0));
        for n in 8..200 {
            for p in 1..6 {
                let d = bic(-1.0, p, n) - aic(-1.0, p);
                assert!(d > 0.0);
                assert!((d - p as f64 * ((n as f64).ln() - 2.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fisher_linear_model() {
        let tree = parse("(* (p 0) x0)").unwrap();
        let d = data(vec![1.0, 2.0], vec![0.3, -0.7]);
        let i = fisher_diag(&tree, &[0.8], &d, 1.0).unwrap();
        assert!((i[0] - 5.0).abs() < 1e-3 * 5.0);
        let scaled = fisher_diag(&tree, &[0.8], &d, 3.0).unwrap();
        assert!((scaled[0] - 5.0 / 9.0).abs() < 1e-3 * 5.0 / 9.0);
    }

    #[test]
    fn fisher_constant_model() {
        let tree = parse("(p 0)").unwrap();
        let y: Vec<f64> = (0..7).map(|k| k as f64 * 0.5).collect();
        let d = Dataset { x: vec![0.0; 7], dim: 1, y, kind: DatasetKind::TrainNoisy, sigma_y: 1.0 };
        let i = fisher_diag(&tree, &[1.5], &d, 0.5).unwrap();
        assert!((i[0] - 7.0 / 0.25).abs() < 1e-3 * 28.0);
        assert_eq!(fisher_diag(&parse("x0").unwrap(), &[], &d, 1.0), Err(CriteriaError::NoParameters));
    }

    #[test]
    fn fisher_falls_back_on_non_positive_curvature() {
        // sin(theta) at theta = pi/2 with targets far below the curve: the
        // likelihood curvature is negative there.
        let tree = parse("(sin (p 0))").unwrap();
        let d = data(vec![0.0, 0.0], vec![-5.0, -5.0]);
        let (i, fb) = fisher_diag_flagged(&tree, &[PI / 2.0], &d, 1.0).unwrap();
        assert!(fb[0]);
        assert!(i[0] >= 0.0 && i[0] < 1e-6);
    }

    #[test]
    fn mdl_hand_evaluated() {
        // mu = theta * x on x = (1,2,3), y = (2,4,6), sigma = 1, theta = 2.
        let tree = parse("(* (p 0) x0)").unwrap();
        let d = data(vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]);
        let b = mdl(&tree, &[2.0], &d, 1.0).unwrap();
        let neg_ll = 1.5 * (2.0 * PI).ln();
        let structure = 3.0 * 3f64.ln();
        let param_const = -0.5 * 3f64.ln();
        let precision = 0.5 * 14f64.ln() + 2f64.ln();
        assert!((b.neg_log_like - neg_ll).abs() < 1e-12);
        assert!((b.structure_term - structure).abs() < 1e-12);
        assert!((b.param_const_term - param_const).abs() < 1e-12);
        assert_eq!(b.constants_term, 0.0);
        assert!((b.param_precision_term - precision).abs() < 1e-9);
        assert!((b.total - (neg_ll + structure + param_const + precision)).abs() < 1e-9);
        assert_eq!(b.clamped, vec![false]);
    }

    #[test]
    fn mdl_without_parameters_and_with_zero_parameter() {
        let d = data(vec![1.0, 2.0, 3.0], vec![1.0, 2.5, 3.0]);
        let tree = parse("(sin x0)").unwrap();
        let b = mdl(&tree, &[], &d, 1.0).unwrap();
        let ll = log_likelihood(&tree, &[], &d, 1.0).unwrap();
        assert!((b.total - (-ll + 2.0 * 2f64.ln())).abs() < 1e-12);

        let tree = parse("(+ x0 (p 0))").unwrap();
        let b = mdl(&tree, &[0.0], &d, 1.0).unwrap();
        assert_eq!(b.clamped, vec![true]);
        assert_eq!(b.param_precision_term, 0.0);
        let sum = b.neg_log_like + b.structure_term + b.param_const_term + b.constants_term + b.param_precision_term;
        assert!((b.total - sum).abs() < 1e-12);
    }

    fn candidate(src: &str, theta: Vec<f64>, d: &Dataset) -> FittedCandidate {
        let tree = parse(src).unwrap().with_theta(theta.clone()).unwrap();
        let pred = tree.evaluate_embedded(&d.x, d.dim).unwrap();
        let mse_train = crate::optfit::mse(&pred, &d.y).unwrap();
        FittedCandidate {
            candidate_id: 3,
            is_ground_truth: false,
            fit: FitResult { theta_hat: theta, mse_train, restarts_run: 1, best_restart: 0 },
            tree,
        }
    }

    #[test]
    fn score_row_for_parameter_free_candidate() {
        let d = data(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1.0, 0.1, -0.7]);
        let c = candidate("(sin x0)", vec![], &d);
        let row = score_all(&c, &d, 0.5).unwrap();
        assert_eq!(row.aic, -2.0 * row.log_likelihood);
        assert_eq!(row.aicc, row.aic);
        assert_eq!(row.bic, row.aic);
        let direct = log_likelihood(&c.tree, &[], &d, 0.5).unwrap();
        assert!((row.log_likelihood - direct).abs() < 1e-12 * direct.abs());
        let again = score_all(&c, &d, 0.5).unwrap();
        assert_eq!(
            (row.aic, row.aicc, row.bic, row.mdl, row.mse_train),
            (again.aic, again.aicc, again.bic, again.mdl, again.mse_train)
        );
    }

    #[test]
    fn score_table_schema() {
        let d = data(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1.0, 0.1, -0.7]);
        let c = candidate("(* (p 0) x0)", vec![0.1], &d);
        let row = score_all(&c, &d, 0.5).unwrap();
        let mut buf = Vec::new();
        write_score_table(&[row], &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SCORE_TABLE_COLUMNS.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 15);
        assert_eq!(&fields[9..], &["", "", "0", "0", "0", ""]);
    }

    #[test]
    fn criterion_names_parse() {
        for c in CriterionId::ALL {
            assert_eq!(c.name().parse::<CriterionId>().unwrap(), c);
        }
        assert!("cv".parse::<CriterionId>().is_err());
    }
}
