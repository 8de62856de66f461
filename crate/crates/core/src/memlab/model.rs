use serde::{Deserialize, Serialize};

use super::dataset::KvDataset;
use crate::adapter::LowRankPair;
use crate::error::{Error, Result};
use crate::matcore::{Matrix, Rng};
use crate::scalar::Scalar;

/// Digit positions in a phone number.
pub const DIGITS: usize = 10;
/// Classes per digit position.
pub const CLASSES: usize = 10;
pub const D_OUT: usize = DIGITS * CLASSES;
pub const DEFAULT_D_IN: usize = 128;
/// Standard deviation of the frozen base map.
pub const BASE_STDDEV: f64 = 0.01;

const BASE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

/// Hyper-parameters of one training run.
///
/// `batch_size >= n` means full-batch descent. The per-step loss is the
/// batch mean of the per-record loss (sum of ten cross-entropies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_stddev: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            learning_rate: 1.0,
            steps: 1500,
            batch_size: 4096,
            seed: 0,
            init_stddev: 0.0625,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("rank, steps and batch_size must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.init_stddev > 0.0) || !self.init_stddev.is_finite() {
            return Err(Error::invalid("init_stddev must be positive"));
        }
        Ok(())
    }

    /// Same config at another rank, keeping `alpha / rank` fixed.
    pub fn at_rank(&self, rank: usize) -> Self {
        Self {
            rank,
            alpha: self.alpha / self.rank as f64 * rank as f64,
            ..self.clone()
        }
    }
}

/// Frozen `(D_OUT, d_in)` base map for a seed.
pub fn frozen_base<T: Scalar>(d_in: usize, seed: u64) -> Matrix<T> {
    Matrix::fill_gaussian(&mut Rng::stream(seed, BASE_STREAM), D_OUT, d_in, T::of(BASE_STDDEV))
        .expect("non-negative stddev")
}

/// Base map plus a low-rank delta. `w0` is never modified.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryModel<T> {
    w0: Matrix<T>,
    pub pair: LowRankPair<T>,
}

impl<T: Scalar> MemoryModel<T> {
    pub fn new(w0: Matrix<T>, pair: LowRankPair<T>) -> Result<Self> {
        if w0.rows() != D_OUT || pair.d_out() != D_OUT || pair.d_in() != w0.cols() {
            return Err(Error::ShapeMismatch {
                op: "memory model",
                left: w0.shape(),
                right: (pair.d_out(), pair.d_in()),
            });
        }
        Ok(Self { w0, pair })
    }

    /// Fresh model: `A` Gaussian, `B` zero, so the delta starts at zero.
    pub fn init(d_in: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(config.seed, INIT_STREAM);
        let a = Matrix::fill_gaussian(&mut rng, config.rank, d_in, T::of(config.init_stddev))?;
        let b = Matrix::zeros(D_OUT, config.rank);
        Self::new(frozen_base(d_in, config.seed), LowRankPair::new(a, b, T::of(config.alpha))?)
    }

    pub fn w0(&self) -> &Matrix<T> {
        &self.w0
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    /// `(n, D_OUT)` logits for the rows of `keys`.
    pub fn logits(&self, keys: &Matrix<T>) -> Result<Matrix<T>> {
        let z = keys.matmul_nt(self.pair.a())?;
        let mut out = keys.matmul_nt(&self.w0)?;
        out.axpy(self.pair.scaling(), &z.matmul_nt(self.pair.b())?)?;
        Ok(out)
    }
}

/// Per-position argmax, or `None` where the maximum is not unique.
pub fn predict_digits<T: Scalar>(logits: &[T]) -> [Option<u8>; DIGITS] {
    let mut out = [None; DIGITS];
    for (pos, slot) in out.iter_mut().enumerate() {
        let block = &logits[pos * CLASSES..(pos + 1) * CLASSES];
        let mut best = 0;
        let mut tied = false;
        for c in 1..CLASSES {
            if block[c] > block[best] {
                best = c;
                tied = false;
            } else if block[c] == block[best] {
                tied = true;
            }
        }
        if !tied {
            *slot = Some(best as u8);
        }
    }
    out
}

/// Fraction of rows whose ten argmaxes all reproduce the label exactly.
pub fn exact_match<T: Scalar>(logits: &Matrix<T>, labels: &[[u8; DIGITS]]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, label)| {
            predict_digits(logits.row(*i))
                .iter()
                .zip(label.iter())
                .all(|(p, &d)| *p == Some(d))
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate<T: Scalar>(model: &MemoryModel<T>, dataset: &KvDataset<T>) -> Result<f64> {
    Ok(exact_match(&model.logits(&dataset.keys)?, &dataset.labels))
}

/// EM of `w0 + delta` (or `w0` alone) on a dataset.
pub fn evaluate_with_delta<T: Scalar>(w0: &Matrix<T>, delta: Option<&Matrix<T>>, dataset: &KvDataset<T>) -> Result<f64> {
    let weights = match delta {
        Some(d) => w0.add(d)?,
        None => w0.clone(),
    };
    Ok(exact_match(&dataset.keys.matmul_nt(&weights)?, &dataset.labels))
}

/// Gradients of the summed loss with respect to both factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// Summed per-position cross-entropy over `keys` and its gradients.
///
/// `base_logits` is `keys * w0^T`, precomputed since `w0` is frozen.
pub fn objective<T: Scalar>(
    base_logits: &Matrix<T>,
    keys: &Matrix<T>,
    labels: &[[u8; DIGITS]],
    pair: &LowRankPair<T>,
) -> Result<(T, Gradients<T>)> {
    let s = pair.scaling();
    let z = keys.matmul_nt(pair.a())?;
    let mut g = base_logits.clone();
    g.axpy(s, &z.matmul_nt(pair.b())?)?;
    let mut loss = T::zero();
    for (i, label) in labels.iter().enumerate() {
        let row = g.row_mut(i);
        for (pos, &digit) in label.iter().enumerate() {
            let block = &mut row[pos * CLASSES..(pos + 1) * CLASSES];
            let max = block.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let total: T = block.iter().map(|&x| (x - max).exp()).sum();
            let log_norm = max + total.ln();
            loss += log_norm - block[digit as usize];
            for x in block.iter_mut() {
                *x = (*x - log_norm).exp();
            }
            block[digit as usize] -= T::one();
        }
    }
    // g now holds dLoss/dLogits
    let grad_b = g.matmul_tn(&z)?.scale(s);
    let grad_a = g.matmul(pair.b())?.matmul_tn(keys)?.scale(s);
    Ok((loss, Gradients { a: grad_a, b: grad_b }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: MemoryModel<T>,
    /// Batch-mean loss before each update.
    pub losses: Vec<f64>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn pair(&self) -> &LowRankPair<T> {
        &self.model.pair
    }
}

/// Plain fixed-step gradient descent on `A` and `B`.
pub fn train<T: Scalar>(dataset: &KvDataset<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let model = MemoryModel::init(dataset.d_in(), config)?;
    let n = dataset.len();
    let full_batch = config.batch_size >= n;
    let base_all = dataset.keys.matmul_nt(model.w0())?;
    let (mut a, mut b, alpha) = model.pair.clone().into_parts();
    let w0 = model.w0;

    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = Rng::stream(config.seed, BATCH_STREAM);
    let mut cursor = n;
    let lr = T::of(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let pair = LowRankPair::new(a, b, alpha)?;
        let (loss, grads, m) = if full_batch {
            let (loss, grads) = objective(&base_all, &dataset.keys, &dataset.labels, &pair)?;
            (loss, grads, n)
        } else {
            if cursor + config.batch_size > n {
                batch_rng.shuffle(&mut order);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + config.batch_size];
            cursor += config.batch_size;
            let keys = dataset.keys.select_rows(idx.iter().copied());
            let base = base_all.select_rows(idx.iter().copied());
            let labels: Vec<[u8; DIGITS]> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, grads) = objective(&base, &keys, &labels, &pair)?;
            (loss, grads, idx.len())
        };
        let mean = loss.as_f64() / m as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, loss: mean });
        }
        losses.push(mean);
        (a, b, _) = pair.into_parts();
        let step_size = lr / T::of(m as f64);
        a.axpy(-step_size, &grads.a)?;
        b.axpy(-step_size, &grads.b)?;
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome {
        model: MemoryModel::new(w0, LowRankPair::new(a, b, alpha)?)?,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memlab::{gen_phonebook, KvDataset};

    fn dataset(n: usize, d_in: usize, seed: u64) -> KvDataset<f64> {
        KvDataset::from_records(gen_phonebook(n, seed).unwrap(), d_in).unwrap()
    }

    fn random_pair(d_in: usize, rank: usize, seed: u64) -> LowRankPair<f64> {
        let mut rng = Rng::new(seed);
        LowRankPair::new(
            Matrix::fill_gaussian(&mut rng, rank, d_in, 0.5).unwrap(),
            Matrix::fill_gaussian(&mut rng, D_OUT, rank, 0.5).unwrap(),
            (2 * rank) as f64,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let ds = dataset(3, 12, 7);
        let w0 = frozen_base::<f64>(12, 3);
        let base = ds.keys.matmul_nt(&w0).unwrap();
        let pair = random_pair(12, 3, 1);
        let (_, grads) = objective(&base, &ds.keys, &ds.labels, &pair).unwrap();
        let eps = 1e-5;
        let loss_at = |a: &Matrix<f64>, b: &Matrix<f64>| {
            let p = LowRankPair::new(a.clone(), b.clone(), pair.alpha()).unwrap();
            objective(&base, &ds.keys, &ds.labels, &p).unwrap().0
        };
        for idx in 0..pair.a().data().len() {
            let mut plus = pair.a().clone();
            plus.data_mut()[idx] += eps;
            let mut minus = pair.a().clone();
            minus.data_mut()[idx] -= eps;
            let fd = (loss_at(&plus, pair.b()) - loss_at(&minus, pair.b())) / (2.0 * eps);
            let an = grads.a.data()[idx];
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-4, "A[{idx}] fd {fd} analytic {an}");
        }
        for idx in 0..pair.b().data().len() {
            let mut plus = pair.b().clone();
            plus.data_mut()[idx] += eps;
            let mut minus = pair.b().clone();
            minus.data_mut()[idx] -= eps;
            let fd = (loss_at(pair.a(), &plus) - loss_at(pair.a(), &minus)) / (2.0 * eps);
            let an = grads.b.data()[idx];
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-4, "B[{idx}] fd {fd} analytic {an}");
        }
    }

    #[test]
    fn single_record_is_memorized() {
        let ds = dataset(1, 64, 2);
        let config = TrainConfig { rank: 8, alpha: 8.0, steps: 300, ..TrainConfig::default() };
        let out = train(&ds, &config).unwrap();
        assert_eq!(evaluate(&out.model, &ds).unwrap(), 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_factors() {
        let ds = dataset(5, 16, 1);
        let config = TrainConfig { learning_rate: 0.0, steps: 5, ..TrainConfig::default() };
        let out = train(&ds, &config).unwrap();
        let init = MemoryModel::<f64>::init(16, &config).unwrap();
        assert_eq!(out.model, init);
        assert!(out.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn small_step_loss_is_non_increasing() {
        let ds = dataset(10, 32, 4);
        let config = TrainConfig { learning_rate: 1e-3, steps: 50, ..TrainConfig::default() };
        let out = train(&ds, &config).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
        assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = dataset(20, 32, 5);
        let config = TrainConfig { steps: 40, batch_size: 8, ..TrainConfig::default() };
        let a = train(&ds, &config).unwrap();
        let b = train(&ds, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn divergence_reports_step() {
        let ds = dataset(10, 16, 1);
        let config = TrainConfig { learning_rate: 1e200, steps: 20, ..TrainConfig::default() };
        match train(&ds, &config) {
            Err(Error::Divergence { step, .. }) => assert!(step > 0 && step <= 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn untrained_model_recalls_nothing() {
        let ds = dataset(1000, 64, 6);
        let model = MemoryModel::<f64>::init(64, &TrainConfig::default()).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn exact_match_agrees_with_string_comparison() {
        let ds = dataset(50, 16, 8);
        let mut rng = Rng::new(3);
        // half the rows get a planted perfect answer, the rest random logits
        let logits = Matrix::from_fn(50, D_OUT, |i, j| {
            let (pos, class) = (j / CLASSES, j % CLASSES);
            if i % 2 == 0 {
                if ds.labels[i][pos] as usize == class { 5.0 } else { 0.0 }
            } else {
                rng.gaussian()
            }
        });
        let mut hits = 0;
        for i in 0..50 {
            let row = logits.row(i);
            let mut s = String::new();
            for pos in 0..DIGITS {
                let block = &row[pos * CLASSES..(pos + 1) * CLASSES];
                let best = (0..CLASSES).max_by(|&x, &y| block[x].partial_cmp(&block[y]).unwrap()).unwrap();
                s.push((b'0' + best as u8) as char);
                if pos == 2 || pos == 5 {
                    s.push('-');
                }
            }
            if s == ds.records[i].number {
                hits += 1;
            }
        }
        assert_eq!(exact_match(&logits, &ds.labels), hits as f64 / 50.0);
        assert!(hits >= 25);
    }

    #[test]
    fn tied_argmax_counts_as_wrong() {
        let mut logits = vec![0.0f64; D_OUT];
        for pos in 0..DIGITS {
            logits[pos * CLASSES] = 1.0;
        }
        let m = Matrix::new(1, D_OUT, logits.clone()).unwrap();
        assert_eq!(exact_match(&m, &[[0; DIGITS]]), 1.0);
        logits[1] = 1.0;
        let m = Matrix::new(1, D_OUT, logits).unwrap();
        assert_eq!(exact_match(&m, &[[0; DIGITS]]), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { rank: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        let c = TrainConfig::default().at_rank(32);
        assert_eq!(c.alpha / c.rank as f64, 1.0);
    }

    #[test]
    fn f32_training_runs() {
        let ds = KvDataset::<f32>::from_records(gen_phonebook(4, 1).unwrap(), 32).unwrap();
        let out = train(&ds, &TrainConfig { steps: 200, ..TrainConfig::default() }).unwrap();
        assert!(evaluate(&out.model, &ds).unwrap() > 0.0);
    }
}
