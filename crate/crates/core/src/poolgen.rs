//! Candidate pool: mutants of the generating expression that fit the
//! training data strictly better than the generating expression itself.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::expr::{parse_with_theta, ExprError, ExpressionTree, Node, Operator};
use crate::optfit::{fit_parameters, FitConfig, FitResult};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error(
        "accepted only {accepted} of {target} mutants in {attempts} attempts \
         (acceptance rate {rate:.4})"
    )]
    Exhausted {
        attempts: usize,
        accepted: usize,
        target: usize,
        rate: f64,
    },
    #[error("pool file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A tree with its fitted parameters. `tree` carries `fit.theta_hat` as its
/// embedded parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCandidate {
    pub candidate_id: usize,
    pub is_ground_truth: bool,
    pub tree: ExpressionTree,
    pub fit: FitResult,
}

impl FittedCandidate {
    pub fn new(candidate_id: usize, is_ground_truth: bool, tree: &ExpressionTree, fit: FitResult) -> Self {
        let tree = tree
            .with_theta(fit.theta_hat.clone())
            .expect("fit returns one value per parameter");
        FittedCandidate { candidate_id, is_ground_truth, tree, fit }
    }
}

/// Random-subtree shape parameters for the grow method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowConfig {
    pub min_depth: usize,
    pub max_depth: usize,
    /// Probability of placing an operator below the root and above the
    /// target depth.
    pub p_operator: f64,
    /// Probability that a leaf is a variable rather than a parameter.
    pub p_variable: f64,
    /// Standard deviation of new parameter values (mean 0).
    pub param_sd: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig { min_depth: 2, max_depth: 10, p_operator: 0.7, p_variable: 0.5, param_sd: 2.0 }
    }
}

/// Grows a random tree with its own parameter vector. The root is always an
/// operator and the depth never exceeds the sampled target depth.
pub fn random_subtree<R: Rng + ?Sized>(dim: usize, config: &GrowConfig, rng: &mut R) -> ExpressionTree {
    assert!(dim >= 1, "need at least one feature");
    assert!(config.min_depth >= 2 && config.min_depth <= config.max_depth);
    let target = rng.random_range(config.min_depth..=config.max_depth);
    let init = Normal::new(0.0, config.param_sd).expect("param_sd is finite and non-negative");
    let mut theta = Vec::new();
    let root = grow(1, target, dim, config, &init, rng, &mut theta);
    ExpressionTree::new(root, theta).expect("grown slots are contiguous")
}

fn grow<R: Rng + ?Sized>(
    level: usize,
    target: usize,
    dim: usize,
    config: &GrowConfig,
    init: &Normal<f64>,
    rng: &mut R,
    theta: &mut Vec<f64>,
) -> Node {
    let operator = level == 1 || (level < target && rng.random_bool(config.p_operator));
    if operator {
        let op = Operator::ALL[rng.random_range(0..Operator::ALL.len())];
        let children = (0..op.arity())
            .map(|_| grow(level + 1, target, dim, config, init, rng, theta))
            .collect();
        Node::Op(op, children)
    } else if rng.random_bool(config.p_variable) {
        Node::Var(rng.random_range(0..dim))
    } else {
        theta.push(init.sample(rng));
        Node::Param(theta.len() - 1)
    }
}

/// Replaces one uniformly chosen node (root and leaves included) with a
/// random subtree. Parameters are renumbered in pre-order.
pub fn mutate<R: Rng + ?Sized>(
    tree: &ExpressionTree,
    dim: usize,
    config: &GrowConfig,
    rng: &mut R,
) -> ExpressionTree {
    let index = rng.random_range(0..tree.size());
    mutate_at(tree, index, &random_subtree(dim, config, rng))
}

/// Replaces the node at pre-order `index` with `sub`.
pub fn mutate_at(tree: &ExpressionTree, index: usize, sub: &ExpressionTree) -> ExpressionTree {
    let offset = tree.num_params();
    let shifted = shift_params(sub.root(), offset);
    let root = tree.root().replaced(index, &shifted).expect("index within tree");
    let mut theta = tree.theta().to_vec();
    theta.extend_from_slice(sub.theta());
    ExpressionTree::canonicalized(&root, &theta).expect("slots come from the two trees")
}

fn shift_params(node: &Node, offset: usize) -> Node {
    match node {
        Node::Param(s) => Node::Param(s + offset),
        Node::Var(i) => Node::Var(*i),
        Node::Op(op, c) => Node::Op(*op, c.iter().map(|c| shift_params(c, offset)).collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Number of accepted mutants.
    pub target: usize,
    pub max_attempts: usize,
    pub grow: GrowConfig,
    pub fit: FitConfig,
    /// Attempts evaluated concurrently; 0 means one per available core.
    /// Results do not depend on it.
    #[serde(default)]
    pub workers: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            target: 100,
            max_attempts: 100_000,
            grow: GrowConfig::default(),
            fit: FitConfig::default(),
            workers: 0,
        }
    }
}

impl PoolConfig {
    fn worker_count(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            w => w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pool {
    /// Ground truth first (id 0), then mutants in acceptance order.
    pub members: Vec<FittedCandidate>,
    pub attempts: usize,
    /// Attempts whose fit failed outright (non-finite everywhere).
    pub fit_failures: usize,
}

/// Mutate-then-fit until `target` mutants beat the ground truth's training
/// MSE. Attempt `i` draws from its own substream of a base seed taken from
/// `rng`, so the pool is a pure function of that seed.
pub fn generate_pool<R: RngCore + ?Sized>(
    gt: &FittedCandidate,
    train: &Dataset,
    config: &PoolConfig,
    rng: &mut R,
) -> Result<Pool, PoolError> {
    let base = rng.next_u64();
    let mut gt_member = gt.clone();
    gt_member.candidate_id = 0;
    gt_member.is_ground_truth = true;
    let threshold = gt.fit.mse_train;
    let mut members = vec![gt_member];
    let mut fit_failures = 0;
    let mut attempts = 0;
    let workers = config.worker_count().max(1);
    let attempt = |i: usize| {
        let mut r = substream(base, "pool-attempt", i as u64);
        let mutant = mutate(&gt.tree, train.dim, &config.grow, &mut r);
        let fit = fit_parameters(&mutant, train, &config.fit, &mut r);
        (mutant, fit)
    };
    while members.len() <= config.target {
        if attempts >= config.max_attempts {
            let accepted = members.len() - 1;
            return Err(PoolError::Exhausted {
                attempts,
                accepted,
                target: config.target,
                rate: accepted as f64 / attempts.max(1) as f64,
            });
        }
        // Speculative batch; outcomes are committed in attempt order and
        // anything past the target is discarded.
        let batch = workers.min(config.max_attempts - attempts);
        let outcomes: Vec<_> = if batch == 1 {
            vec![attempt(attempts)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (attempts..attempts + batch).map(|i| s.spawn(move || attempt(i))).collect();
                handles.into_iter().map(|h| h.join().expect("pool worker panicked")).collect()
            })
        };
        for (mutant, fit) in outcomes {
            if members.len() > config.target {
                break;
            }
            attempts += 1;
            match fit {
                Ok(fit) if fit.mse_train < threshold => {
                    let id = members.len();
                    members.push(FittedCandidate::new(id, false, &mutant, fit));
                }
                Ok(_) => {}
                Err(_) => fit_failures += 1,
            }
        }
    }
    Ok(Pool { members, attempts, fit_failures })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRecord {
    id: usize,
    is_ground_truth: bool,
    sexpr: String,
    theta: Vec<f64>,
    mse_train: f64,
    #[serde(default)]
    restarts_run: usize,
    #[serde(default)]
    best_restart: usize,
}

/// One JSON object per line:
/// `{id, is_ground_truth, sexpr, theta, mse_train, restarts_run, best_restart}`.
/// `sexpr` uses `(p k)` references into `theta`.
pub fn write_pool_jsonl<W: Write>(members: &[FittedCandidate], mut w: W) -> Result<(), PoolError> {
    for m in members {
        let rec = PoolRecord {
            id: m.candidate_id,
            is_ground_truth: m.is_ground_truth,
            sexpr: m.tree.to_slot_sexpr(),
            theta: m.fit.theta_hat.clone(),
            mse_train: m.fit.mse_train,
            restarts_run: m.fit.restarts_run,
            best_restart: m.fit.best_restart,
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pool_jsonl<R: BufRead>(r: R) -> Result<Vec<FittedCandidate>, PoolError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord =
            serde_json::from_str(&line).map_err(|e| PoolError::Format { line: i + 1, msg: e.to_string() })?;
        let tree = parse_with_theta(&rec.sexpr, &rec.theta)?;
        out.push(FittedCandidate {
            candidate_id: rec.id,
            is_ground_truth: rec.is_ground_truth,
            tree,
            fit: FitResult {
                theta_hat: rec.theta,
                mse_train: rec.mse_train,
                restarts_run: rec.restarts_run,
                best_restart: rec.best_restart,
            },
        });
    }
    Ok(out)
}
