//! Adapter composition: linear averaging, rank concatenation, TIES and DARE.
//!
//! Everything except concatenation works entrywise on dense deltas. TIES trims
//! per target, and DARE masks each adapter's delta before any weighting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, LowRankPair, MergedDelta, MergedTarget};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Linear,
    Cat,
    Ties,
    DareLinear,
    DareTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Linear,
        MergeMethod::Cat,
        MergeMethod::Ties,
        MergeMethod::DareLinear,
        MergeMethod::DareTies,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Cat => "cat",
            MergeMethod::Ties => "ties",
            MergeMethod::DareLinear => "dare-linear",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    fn uses_weights(&self) -> bool {
        !matches!(self, MergeMethod::Cat)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown merge method {s:?}")))
    }
}

/// Merge algorithm plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Per-adapter weights; empty means uniform.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// TIES keep fraction, `(0, 1]`.
    #[serde(default = "default_density")]
    pub density: f64,
    /// DARE drop probability, `[0, 1)`.
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_density() -> f64 {
    1.0
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            weights: Vec::new(),
            density: 1.0,
            drop_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.density = density;
        self
    }

    pub fn with_drop_rate(mut self, drop_rate: f64) -> Self {
        self.drop_rate = drop_rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Effective weights for `n` adapters, validated.
    pub fn resolved_weights<T: Scalar>(&self, n: usize) -> Result<Vec<T>> {
        if self.weights.is_empty() {
            return Ok(vec![T::one() / T::of(n as f64); n]);
        }
        check_weights(&self.weights, n)?;
        Ok(self.weights.iter().map(|&w| T::of(w)).collect())
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("merge needs at least one adapter"));
        }
        if self.method.uses_weights() && !self.weights.is_empty() {
            check_weights(&self.weights, n)?;
        }
        check_density(self.density)?;
        check_drop_rate(self.drop_rate)
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::invalid(format!(
            "{} weights for {n} adapters",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} outside (0, 1]")));
    }
    Ok(())
}

fn check_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("drop rate {p} outside [0, 1)")));
    }
    Ok(())
}

fn same_shapes<T: Scalar>(deltas: &[&Matrix<T>]) -> Result<(usize, usize)> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one delta"))?
        .shape();
    for d in deltas {
        if d.shape() != first {
            return Err(Error::ShapeMismatch {
                op: "merge",
                left: first,
                right: d.shape(),
            });
        }
    }
    Ok(first)
}

/// `sum_i w_i * delta_i`.
pub fn linear_dense<T: Scalar>(deltas: &[&Matrix<T>], weights: &[T]) -> Result<Matrix<T>> {
    let (rows, cols) = same_shapes(deltas)?;
    if weights.len() != deltas.len() {
        return Err(Error::invalid("one weight per delta required"));
    }
    let mut out = Matrix::zeros(rows, cols);
    for (d, &w) in deltas.iter().zip(weights) {
        out.axpy(w, d)?;
    }
    Ok(out)
}

/// Number of entries TIES keeps out of `n`: `ceil(density * n)`, at least 1.
pub fn keep_count(density: f64, n: usize) -> usize {
    // the epsilon absorbs products like 0.3 * 10 = 3.0000000000000004
    let k = (density * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Zeroes all but the `ceil(density * n)` largest-magnitude entries. Equal
/// magnitudes are kept in index order.
pub fn trim_top_k<T: Scalar>(delta: &Matrix<T>, density: f64) -> Result<Matrix<T>> {
    check_density(density)?;
    let values = delta.data();
    let k = keep_count(density, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .expect("finite deltas")
            .then(i.cmp(&j))
    });
    let mut out = Matrix::zeros(delta.rows(), delta.cols());
    for &i in &order[..k] {
        out.data_mut()[i] = values[i];
    }
    Ok(out)
}

fn sign<T: Scalar>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

/// Sign election plus disjoint weighted mean on already-trimmed deltas.
fn elect_and_merge<T: Scalar>(trimmed: &[Matrix<T>], weights: &[T]) -> Matrix<T> {
    let (rows, cols) = trimmed[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for pos in 0..rows * cols {
        let mass: T = trimmed
            .iter()
            .zip(weights)
            .map(|(m, &w)| w * m.data()[pos])
            .sum();
        let elected = sign(mass);
        if elected == 0 {
            continue;
        }
        let mut num = T::zero();
        let mut den = T::zero();
        for (m, &w) in trimmed.iter().zip(weights) {
            let v = m.data()[pos];
            if sign(v) == elected {
                num += w * v;
                den += w;
            }
        }
        if den > T::zero() {
            out.data_mut()[pos] = num / den;
        }
    }
    out
}

/// TIES on dense deltas: trim, elect sign by weighted mass, disjoint mean.
pub fn ties_dense<T: Scalar>(deltas: &[&Matrix<T>], weights: &[T], density: f64) -> Result<Matrix<T>> {
    same_shapes(deltas)?;
    if weights.len() != deltas.len() {
        return Err(Error::invalid("one weight per delta required"));
    }
    let trimmed = deltas
        .iter()
        .map(|d| trim_top_k(d, density))
        .collect::<Result<Vec<_>>>()?;
    Ok(elect_and_merge(&trimmed, weights))
}

/// Drops each entry with probability `drop_rate` and rescales survivors by
/// `1 / (1 - drop_rate)`.
pub fn dare_sparsify<T: Scalar>(delta: &Matrix<T>, drop_rate: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    check_drop_rate(drop_rate)?;
    let keep = 1.0 - drop_rate;
    let rescale = T::one() / T::of(keep);
    let data = delta
        .data()
        .iter()
        .map(|&v| if rng.next_f64() < keep { v * rescale } else { T::zero() })
        .collect();
    Matrix::new(delta.rows(), delta.cols(), data)
}

/// Mask stream for the adapter at `index` within a merge.
pub fn dare_stream(seed: u64, index: usize) -> Rng {
    Rng::stream(seed, index as u64)
}

fn dense_with_rngs<T: Scalar>(deltas: &[&Matrix<T>], spec: &MergeSpec, rngs: &mut [Rng]) -> Result<Matrix<T>> {
    spec.validate(deltas.len())?;
    let weights = spec.resolved_weights::<T>(deltas.len())?;
    match spec.method {
        MergeMethod::Linear => linear_dense(deltas, &weights),
        // densified concatenation is the plain sum of the parts
        MergeMethod::Cat => linear_dense(deltas, &vec![T::one(); deltas.len()]),
        MergeMethod::Ties => ties_dense(deltas, &weights, spec.density),
        MergeMethod::DareLinear | MergeMethod::DareTies => {
            let sparse = deltas
                .iter()
                .zip(rngs.iter_mut())
                .map(|(d, rng)| dare_sparsify(d, spec.drop_rate, rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Matrix<T>> = sparse.iter().collect();
            if spec.method == MergeMethod::DareLinear {
                linear_dense(&refs, &weights)
            } else {
                ties_dense(&refs, &weights, spec.density)
            }
        }
    }
}

/// Merges one target's dense deltas according to `spec`.
pub fn merge_dense<T: Scalar>(deltas: &[&Matrix<T>], spec: &MergeSpec) -> Result<Matrix<T>> {
    let mut rngs: Vec<Rng> = (0..deltas.len()).map(|i| dare_stream(spec.seed, i)).collect();
    dense_with_rngs(deltas, spec, &mut rngs)
}

/// Checks that all adapters carry the same target ids with equal shapes;
/// returns the ids in the first adapter's order.
fn shared_targets<T: Scalar>(adapters: &[&Adapter<T>], require_same_shape: bool) -> Result<Vec<String>> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one adapter"))?;
    let ids: Vec<String> = first.target_ids().map(str::to_string).collect();
    for (n, adapter) in adapters.iter().enumerate().skip(1) {
        if adapter.targets().len() != ids.len() {
            return Err(Error::TargetMismatch(format!(
                "adapter {n} ({}) has {} targets, adapter 0 has {}",
                adapter.name,
                adapter.targets().len(),
                ids.len()
            )));
        }
        for id in &ids {
            let theirs = adapter.target(id).ok_or_else(|| {
                Error::TargetMismatch(format!("adapter {n} ({}) lacks target {id:?}", adapter.name))
            })?;
            let ours = first.target(id).expect("id taken from first adapter");
            let ok = if require_same_shape {
                theirs.a().shape() == ours.a().shape() && theirs.b().shape() == ours.b().shape()
            } else {
                theirs.d_in() == ours.d_in() && theirs.d_out() == ours.d_out()
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "merge target",
                    left: (ours.d_out(), ours.d_in()),
                    right: (theirs.d_out(), theirs.d_in()),
                });
            }
        }
    }
    Ok(ids)
}

fn dense_merge<T: Scalar>(adapters: &[&Adapter<T>], spec: &MergeSpec) -> Result<MergedDelta<T>> {
    spec.validate(adapters.len())?;
    let ids = shared_targets(adapters, false)?;
    // one mask stream per adapter, consumed across targets in order
    let mut rngs: Vec<Rng> = (0..adapters.len()).map(|i| dare_stream(spec.seed, i)).collect();
    let mut merged = MergedDelta::default();
    for id in ids {
        let deltas: Vec<Matrix<T>> = adapters
            .iter()
            .map(|a| a.target(&id).expect("checked").delta())
            .collect();
        let refs: Vec<&Matrix<T>> = deltas.iter().collect();
        let out = dense_with_rngs(&refs, spec, &mut rngs)?;
        merged.targets.insert(id, MergedTarget::Dense(out));
    }
    Ok(merged)
}

/// Weighted average of dense deltas; weights must sum to 1.
pub fn merge_linear<T: Scalar>(adapters: &[&Adapter<T>], weights: &[f64]) -> Result<MergedDelta<T>> {
    check_weights(weights, adapters.len())?;
    dense_merge(adapters, &MergeSpec::new(MergeMethod::Linear).with_weights(weights.to_vec()))
}

/// Concatenates factors along the rank axis. Each `alpha_i / r_i` is folded
/// into its `B` block and the result carries `alpha == rank`, so its delta is
/// exactly the sum of the input deltas.
pub fn merge_cat<T: Scalar>(adapters: &[&Adapter<T>]) -> Result<MergedDelta<T>> {
    let ids = shared_targets(adapters, false)?;
    let mut merged = MergedDelta::default();
    for id in ids {
        let pairs: Vec<&LowRankPair<T>> = adapters.iter().map(|a| a.target(&id).expect("checked")).collect();
        let rank: usize = pairs.iter().map(|p| p.rank()).sum();
        let d_in = pairs[0].d_in();
        let d_out = pairs[0].d_out();
        let mut a_data = Vec::with_capacity(rank * d_in);
        for p in &pairs {
            a_data.extend_from_slice(p.a().data());
        }
        let mut b = Matrix::zeros(d_out, rank);
        let mut col = 0;
        for p in &pairs {
            let s = p.scaling();
            for i in 0..d_out {
                for k in 0..p.rank() {
                    b.set(i, col + k, s * p.b().get(i, k));
                }
            }
            col += p.rank();
        }
        let pair = LowRankPair::new(Matrix::new(rank, d_in, a_data)?, b, T::of(rank as f64))?;
        merged.targets.insert(id, MergedTarget::Factorized(pair));
    }
    Ok(merged)
}

pub fn merge_ties<T: Scalar>(adapters: &[&Adapter<T>], weights: &[f64], density: f64) -> Result<MergedDelta<T>> {
    check_weights(weights, adapters.len())?;
    check_density(density)?;
    dense_merge(
        adapters,
        &MergeSpec::new(MergeMethod::Ties)
            .with_weights(weights.to_vec())
            .with_density(density),
    )
}

/// DARE preprocessing followed by linear (`DareLinear`) or TIES (`DareTies`).
pub fn merge_dare<T: Scalar>(adapters: &[&Adapter<T>], spec: &MergeSpec) -> Result<MergedDelta<T>> {
    if !matches!(spec.method, MergeMethod::DareLinear | MergeMethod::DareTies) {
        return Err(Error::invalid(format!("merge_dare called with {}", spec.method)));
    }
    dense_merge(adapters, spec)
}

/// Dispatches on `spec.method`.
pub fn merge<T: Scalar>(adapters: &[&Adapter<T>], spec: &MergeSpec) -> Result<MergedDelta<T>> {
    spec.validate(adapters.len())?;
    match spec.method {
        MergeMethod::Cat => merge_cat(adapters),
        _ => dense_merge(adapters, spec),
    }
}
