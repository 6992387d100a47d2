//! Synthetic benchmarks, input sampling and the train/test split.
//!
//! Training targets carry Gaussian noise with standard deviation
//! `noise_scale * sd(y)`, where `sd(y)` is the sample standard deviation of
//! the noise-free training targets. Test targets are noise-free.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse, ExprError, ExpressionTree};
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown benchmark `{0}` (expected f1..f7)")]
    UnknownBenchmark(String),
    #[error("noise-free targets have zero standard deviation")]
    DegenerateTargets,
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("malformed dataset CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
}

// The f3 kernel, reused by f4 with x0 as its argument.
const F3_BODY: &str = "(* (* (* (* (exp (* -1 x0)) (pow x0 3)) (cos x0)) (sin x0)) \
                       (- (* (cos x0) (pow (sin x0) 2)) 1))";

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::F1,
        Benchmark::F2,
        Benchmark::F3,
        Benchmark::F4,
        Benchmark::F5,
        Benchmark::F6,
        Benchmark::F7,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Benchmark::F1 => "f1",
            Benchmark::F2 => "f2",
            Benchmark::F3 => "f3",
            Benchmark::F4 => "f4",
            Benchmark::F5 => "f5",
            Benchmark::F6 => "f6",
            Benchmark::F7 => "f7",
        }
    }

    pub fn dim(self) -> usize {
        self.intervals().len()
    }

    /// Uniform sampling interval per feature.
    pub fn intervals(self) -> Vec<(f64, f64)> {
        match self {
            Benchmark::F1 => vec![(0.0, 1.0); 10],
            Benchmark::F2 => vec![(0.0, 4.0); 2],
            Benchmark::F3 => vec![(0.0, 10.0)],
            Benchmark::F4 => vec![(0.0, 10.0); 2],
            Benchmark::F5 => vec![(0.05, 2.0), (1.0, 2.0), (0.05, 2.0)],
            Benchmark::F6 | Benchmark::F7 => vec![(0.0, 6.0); 2],
        }
    }

    /// Generating expression with every numeric literal as a parameter.
    ///
    /// Odd powers of bases that can go negative are written as products so
    /// refitting the exponent cannot flip the sign of the term.
    pub fn ground_truth_sexpr(self) -> String {
        match self {
            Benchmark::F1 => "(+ (+ (+ (* 10 (sin (* (* 3.141592653589793 x0) x1))) \
                              (* 20 (pow (- x2 0.5) 2))) (* 10 x3)) (* 5 x4))"
                .into(),
            Benchmark::F2 => "(/ (exp (* -1 (pow (- x0 1) 2))) (+ 1.2 (pow (- x1 2.5) 2)))".into(),
            Benchmark::F3 => F3_BODY.into(),
            Benchmark::F4 => format!("(* {F3_BODY} (- x1 5))"),
            Benchmark::F5 => "(/ (* (* 30 (- x0 1)) (- x2 1)) \
                              (- (* x0 (pow x1 2)) (* 10 (pow x1 2))))"
                .into(),
            Benchmark::F6 => "(/ (- (+ (pow (- x0 3) 4) (* (pow (- x1 3) 2) (- x1 3))) (- x1 3)) \
                              (+ (pow (- x1 2) 4) 10))"
                .into(),
            Benchmark::F7 => "(+ (* (- x0 3) (- x1 3)) (* 2 (sin (* (- x0 4) (- x1 4)))))".into(),
        }
    }

    pub fn ground_truth(self) -> ExpressionTree {
        parse(&self.ground_truth_sexpr()).expect("built-in benchmark expressions parse")
    }

    pub fn spec(self) -> BenchmarkSpec {
        BenchmarkSpec {
            id: self,
            intervals: self.intervals(),
            ground_truth: self.ground_truth(),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Benchmark {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.id().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DataError::UnknownBenchmark(s.to_string()))
    }
}

/// Looks up a ground-truth expression by benchmark id.
pub fn ground_truth(id: &str) -> Result<ExpressionTree, DataError> {
    Ok(id.parse::<Benchmark>()?.ground_truth())
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub id: Benchmark,
    pub intervals: Vec<(f64, f64)>,
    pub ground_truth: ExpressionTree,
}

impl BenchmarkSpec {
    pub fn dim(&self) -> usize {
        self.intervals.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TrainNoisy,
    TestClean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n x dim` inputs.
    pub x: Vec<f64>,
    pub dim: usize,
    pub y: Vec<f64>,
    pub kind: DatasetKind,
    /// Sample sd of the noise-free training targets of this benchmark.
    pub sigma_y: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        out.write_record(&header)?;
        for i in 0..self.n() {
            let rec: Vec<String> = self
                .row(i)
                .iter()
                .chain(std::iter::once(&self.y[i]))
                .map(|v| v.to_string())
                .collect();
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads `x0..x{d-1},y` CSV. When `sigma_y` is `None` it is taken as the
    /// sample sd of the file's targets.
    pub fn read_csv<R: Read>(r: R, kind: DatasetKind, sigma_y: Option<f64>) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let dim = header.len().checked_sub(1).ok_or_else(|| DataError::Format("empty header".into()))?;
        for (j, h) in header.iter().enumerate() {
            let expected = if j == dim { "y".to_string() } else { format!("x{j}") };
            if h.trim() != expected {
                return Err(DataError::Format(format!("column {j} is `{h}`, expected `{expected}`")));
            }
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Format(format!("bad number `{field}`")))?;
                if j == dim {
                    y.push(v);
                } else {
                    x.push(v);
                }
            }
        }
        let sigma_y = sigma_y.unwrap_or_else(|| sample_sd(&y));
        Ok(Dataset { x, dim, y, kind, sigma_y })
    }
}

pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// i.i.d. uniform inputs, row-major.
pub fn sample_inputs<R: Rng + ?Sized>(spec: &BenchmarkSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let dists: Vec<Uniform<f64>> = spec
        .intervals
        .iter()
        .map(|&(lo, hi)| Uniform::new(lo, hi).expect("benchmark intervals are non-empty"))
        .collect();
    let mut x = Vec::with_capacity(n * dists.len());
    for _ in 0..n {
        for d in &dists {
            x.push(d.sample(rng));
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 100,
            n_test: 10_000,
            noise_scale: 0.1,
        }
    }
}

/// Train and test datasets for one benchmark. Train inputs, train noise and
/// test inputs come from separate substreams of `seed`.
pub fn make_datasets(
    spec: &BenchmarkSpec,
    seed: u64,
    config: &DataConfig,
) -> Result<(Dataset, Dataset), DataError> {
    for n in [config.n_train, config.n_test] {
        if n < 2 {
            return Err(DataError::TooFewSamples { min: 2, got: n });
        }
    }
    let id = spec.id.id();
    let dim = spec.dim();
    let prog = spec.ground_truth.compile();
    let theta = spec.ground_truth.theta();

    let x_train = sample_inputs(spec, config.n_train, &mut rng::substream(seed, &format!("dataset-train/{id}"), 0));
    let clean = prog.evaluate(theta, &x_train, dim)?;
    let sigma_y = sample_sd(&clean);
    if !(sigma_y > 0.0) {
        return Err(DataError::DegenerateTargets);
    }
    let noise_sd = config.noise_scale * sigma_y;
    let mut noise_rng = rng::substream(seed, &format!("noise/{id}"), 0);
    let y_train = clean
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            v + noise_sd * z
        })
        .collect();

    let x_test = sample_inputs(spec, config.n_test, &mut rng::substream(seed, &format!("dataset-test/{id}"), 0));
    let y_test = prog.evaluate(theta, &x_test, dim)?;

    let train = Dataset {
        x: x_train,
        dim,
        y: y_train,
        kind: DatasetKind::TrainNoisy,
        sigma_y,
    };
    let test = Dataset {
        x: x_test,
        dim,
        y: y_test,
        kind: DatasetKind::TestClean,
        sigma_y,
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn f1_at_half() {
        let t = Benchmark::F1.ground_truth();
        let y = t.evaluate_embedded(&[0.5; 10], 10).unwrap()[0];
        let expected = 10.0 * (PI * 0.25).sin() + 7.5;
        assert!((y - expected).abs() < 1e-9, "{y}");
        assert!((y - 14.5711).abs() < 1e-4);
    }

    #[test]
    fn f7_at_three() {
        let t = Benchmark::F7.ground_truth();
        let y = t.evaluate_embedded(&[3.0, 3.0], 2).unwrap()[0];
        assert!((y - 2.0 * 1f64.sin()).abs() < 1e-12);
        assert!((y - 1.6829).abs() < 1e-4);
    }

    #[test]
    fn f3_at_zero() {
        let y = Benchmark::F3.ground_truth().evaluate_embedded(&[0.0], 1).unwrap()[0];
        assert!(y.abs() < 1e-30);
    }

    #[test]
    fn f7_canonical_size_by_hand() {
        // (+ (* (- x0 3) (- x1 3)) (* 2 (sin (* (- x0 4) (- x1 4)))))
        // root 1; left product 1 + 3 + 3; right: * 2 sin * (3) (3) = 1+1+1+1+3+3
        let t = Benchmark::F7.ground_truth();
        assert_eq!(t.size(), 1 + 7 + 10);
        assert_eq!(t.num_params(), 5);
        // {+, *, -, sin} + {x0, x1} + parameter symbol
        assert_eq!(t.distinct_symbols(), 7);
    }

    #[test]
    fn ids_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(b.id().parse::<Benchmark>().unwrap(), b);
            assert!(b.ground_truth().min_dim() <= b.dim());
        }
        assert!(matches!(ground_truth("f8"), Err(DataError::UnknownBenchmark(_))));
        assert_eq!(Benchmark::F1.dim(), 10);
        assert_eq!(Benchmark::F1.ground_truth().min_dim(), 5);
    }

    #[test]
    fn sampling_is_seeded_and_in_range() {
        let spec = Benchmark::F2.spec();
        let a = sample_inputs(&spec, 3, &mut rng::substream(1, "s", 0));
        let b = sample_inputs(&spec, 3, &mut rng::substream(1, "s", 0));
        assert_eq!(a, b);
        let spec = Benchmark::F5.spec();
        let x = sample_inputs(&spec, 2000, &mut rng::substream(2, "s", 0));
        for row in x.chunks(3) {
            assert!((1.0..=2.0).contains(&row[1]));
            assert!((0.05..=2.0).contains(&row[0]) && (0.05..=2.0).contains(&row[2]));
        }
    }

    #[test]
    fn f3_samples_span_interval() {
        let spec = Benchmark::F3.spec();
        let x = sample_inputs(&spec, 100_000, &mut rng::substream(3, "s", 0));
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.0 && lo <= 0.01);
        assert!(hi <= 10.0 && hi >= 9.99);
    }

    #[test]
    fn zero_noise_keeps_clean_targets() {
        let spec = Benchmark::F7.spec();
        let cfg = DataConfig { noise_scale: 0.0, ..Default::default() };
        let (train, test) = make_datasets(&spec, 5, &cfg).unwrap();
        let clean = spec.ground_truth.evaluate_embedded(&train.x, 2).unwrap();
        assert_eq!(train.y, clean);
        assert_eq!(test.kind, DatasetKind::TestClean);
        assert_eq!(test.n(), 10_000);
        assert_eq!(train.n(), 100);
        assert_eq!(train.sigma_y, test.sigma_y);
    }

    #[test]
    fn noise_lands_only_on_train_targets() {
        let spec = Benchmark::F2.spec();
        let (train, test) = make_datasets(&spec, 9, &DataConfig::default()).unwrap();
        let clean_train = spec.ground_truth.evaluate_embedded(&train.x, 2).unwrap();
        let clean_test = spec.ground_truth.evaluate_embedded(&test.x, 2).unwrap();
        assert_ne!(train.y, clean_train);
        assert_eq!(test.y, clean_test);
        assert!((sample_sd(&clean_train) - train.sigma_y).abs() < 1e-15);
    }

    #[test]
    fn f1_keeps_distractor_columns() {
        let (train, test) = make_datasets(&Benchmark::F1.spec(), 0, &DataConfig::default()).unwrap();
        assert_eq!(train.dim, 10);
        assert_eq!(test.x.len(), 10 * 10_000);
    }

    #[test]
    fn rejects_tiny_datasets_and_degenerate_targets() {
        let cfg = DataConfig { n_train: 1, ..Default::default() };
        assert!(matches!(
            make_datasets(&Benchmark::F3.spec(), 0, &cfg),
            Err(DataError::TooFewSamples { .. })
        ));
        let spec = BenchmarkSpec {
            id: Benchmark::F3,
            intervals: vec![(0.0, 1.0)],
            ground_truth: parse("(* 0 x0)").unwrap(),
        };
        assert!(matches!(
            make_datasets(&spec, 0, &DataConfig::default()),
            Err(DataError::DegenerateTargets)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = make_datasets(&Benchmark::F5.spec(), 4, &DataConfig::default()).unwrap();
        let mut buf = Vec::new();
        train.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,x2,y\n"));
        let back = Dataset::read_csv(buf.as_slice(), DatasetKind::TrainNoisy, Some(train.sigma_y)).unwrap();
        assert_eq!(back, train);
        assert!(Dataset::read_csv("a,y\n1,2\n".as_bytes(), DatasetKind::TestClean, None).is_err());
    }
}
