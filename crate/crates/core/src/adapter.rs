//! Adapter data model: factorized low-rank deltas keyed by target id.
//!
//! Orientation: `a` is `rank x d_in` and maps the input, `b` is `d_out x rank`
//! and maps back to the output, so `delta = (alpha / rank) * b * a` has the
//! shape `(d_out, d_in)` of the weight it modifies. Checkpoints that store
//! `A` as `d x r` and `B` as `r x k` correspond to `b^T` and `a^T` here.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::scalar::Scalar;

/// One factorized low-rank update `(alpha / rank) * b * a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    alpha: T,
}

impl<T: Scalar> LowRankPair<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self> {
        if a.rows() == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "low-rank pair (b.cols must equal a.rows)",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if !(alpha > T::zero()) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    /// Exact rank-`min(d_in, d_out)` factorization of a dense delta: one factor
    /// is the identity and `alpha == rank`, so the scale is exactly 1.
    pub fn thin_from_dense(delta: &Matrix<T>) -> Result<Self> {
        let (d_out, d_in) = delta.shape();
        if d_out == 0 || d_in == 0 {
            return Err(Error::invalid("cannot factorize an empty delta"));
        }
        if d_out <= d_in {
            Self::new(delta.clone(), Matrix::identity(d_out), T::of(d_out as f64))
        } else {
            Self::new(Matrix::identity(d_in), delta.clone(), T::of(d_in as f64))
        }
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> T {
        self.alpha / T::of(self.rank() as f64)
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    /// Dense `(d_out, d_in)` update.
    pub fn delta(&self) -> Matrix<T> {
        self.b
            .matmul(&self.a)
            .expect("pair invariants guarantee conforming factors")
            .scale(self.scaling())
    }

    pub fn into_parts(self) -> (Matrix<T>, Matrix<T>, T) {
        (self.a, self.b, self.alpha)
    }
}

/// Named collection of low-rank pairs, one per target weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub name: String,
    targets: IndexMap<String, LowRankPair<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            targets: IndexMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert_target(&mut self, id: impl Into<String>, pair: LowRankPair<T>) -> Result<()> {
        let id = id.into();
        if self.targets.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate target id {id:?}")));
        }
        self.targets.insert(id, pair);
        Ok(())
    }

    pub fn with_target(mut self, id: impl Into<String>, pair: LowRankPair<T>) -> Result<Self> {
        self.insert_target(id, pair)?;
        Ok(self)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn targets(&self) -> &IndexMap<String, LowRankPair<T>> {
        &self.targets
    }

    pub fn target(&self, id: &str) -> Option<&LowRankPair<T>> {
        self.targets.get(id)
    }

    pub fn target_ids(&self) -> impl Iterator<Item = &str> {
        self.targets.keys().map(String::as_str)
    }

    /// Trainable parameter count: sum of `rank * (d_in + d_out)` over targets.
    pub fn count_params(&self) -> usize {
        self.targets.values().map(LowRankPair::param_count).sum()
    }

    /// Every target densified, in target order.
    pub fn deltas(&self) -> IndexMap<String, Matrix<T>> {
        self.targets
            .iter()
            .map(|(id, pair)| (id.clone(), pair.delta()))
            .collect()
    }

    /// Adapter with every factor rounded through `f32`, i.e. what a save/load
    /// round trip yields.
    pub fn quantized(&self) -> Self {
        let round = |m: &Matrix<T>| {
            Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                T::of(f64::from(m.get(i, j).as_f64() as f32))
            })
        };
        let targets = self
            .targets
            .iter()
            .map(|(id, p)| {
                let pair = LowRankPair {
                    a: round(&p.a),
                    b: round(&p.b),
                    alpha: p.alpha,
                };
                (id.clone(), pair)
            })
            .collect();
        Self {
            name: self.name.clone(),
            targets,
            metadata: self.metadata.clone(),
        }
    }
}

/// One merged target: either still factorized or a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum MergedTarget<T> {
    Factorized(LowRankPair<T>),
    Dense(Matrix<T>),
}

impl<T: Scalar> MergedTarget<T> {
    pub fn densify(&self) -> Matrix<T> {
        match self {
            MergedTarget::Factorized(pair) => pair.delta(),
            MergedTarget::Dense(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MergedTarget::Factorized(pair) => (pair.d_out(), pair.d_in()),
            MergedTarget::Dense(m) => m.shape(),
        }
    }
}

/// Result of composing several adapters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergedDelta<T> {
    pub targets: IndexMap<String, MergedTarget<T>>,
}

impl<T: Scalar> MergedDelta<T> {
    pub fn densify(&self, id: &str) -> Option<Matrix<T>> {
        self.targets.get(id).map(MergedTarget::densify)
    }

    /// Converts to an adapter; dense targets become exact thin factorizations.
    pub fn into_adapter(self, name: impl Into<String>) -> Result<Adapter<T>> {
        let mut adapter = Adapter::new(name);
        for (id, target) in self.targets {
            let pair = match target {
                MergedTarget::Factorized(pair) => pair,
                MergedTarget::Dense(m) => LowRankPair::thin_from_dense(&m)?,
            };
            adapter.insert_target(id, pair)?;
        }
        Ok(adapter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::Rng;
    use proptest::prelude::*;

    fn random_pair(rng: &mut Rng, d_out: usize, d_in: usize, rank: usize, alpha: f64) -> LowRankPair<f64> {
        LowRankPair::new(
            Matrix::fill_gaussian(rng, rank, d_in, 1.0).unwrap(),
            Matrix::fill_gaussian(rng, d_out, rank, 1.0).unwrap(),
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let pair = LowRankPair::new(Matrix::<f64>::ones(2, 3), Matrix::zeros(4, 2), 1.0).unwrap();
        assert_eq!(pair.delta(), Matrix::zeros(4, 3));
    }

    #[test]
    fn rank_one_outer_product() {
        let pair = LowRankPair::new(
            Matrix::new(1, 2, vec![3.0, 1.0]).unwrap(),
            Matrix::new(2, 1, vec![2.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap();
        assert_eq!(pair.delta().data(), &[6.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn delta_matches_direct_composition() {
        let mut rng = Rng::new(11);
        let pair = random_pair(&mut rng, 5, 7, 3, 6.0);
        let mut oracle = Matrix::<f64>::zeros(5, 7);
        for i in 0..5 {
            for j in 0..7 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += pair.b().get(i, k) * pair.a().get(k, j);
                }
                oracle.set(i, j, acc * 6.0 / 3.0);
            }
        }
        assert!(pair.delta().max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(LowRankPair::new(Matrix::<f64>::zeros(2, 3), Matrix::zeros(4, 3), 1.0).is_err());
        assert!(LowRankPair::new(Matrix::<f64>::zeros(2, 3), Matrix::zeros(4, 2), 0.0).is_err());
        assert!(LowRankPair::new(Matrix::<f64>::zeros(0, 3), Matrix::zeros(4, 0), 1.0).is_err());
    }

    #[test]
    fn param_counts() {
        let mut rng = Rng::new(2);
        let pair = random_pair(&mut rng, 100, 256, 4, 4.0);
        let one = Adapter::new("x").with_target("t", pair.clone()).unwrap();
        assert_eq!(one.count_params(), 1424);
        assert_eq!(Adapter::<f64>::new("empty").count_params(), 0);
        let two = one.clone().with_target("u", pair).unwrap();
        assert_eq!(two.count_params(), 2 * 1424);
        assert!(two.clone().with_target("t", random_pair(&mut rng, 1, 1, 1, 1.0)).is_err());
    }

    #[test]
    fn zero_padding_rank_with_fixed_alpha_halves_delta() {
        let mut rng = Rng::new(4);
        let pair = random_pair(&mut rng, 3, 4, 2, 2.0);
        let a = Matrix::from_fn(4, 4, |i, j| if i < 2 { pair.a().get(i, j) } else { 0.0 });
        let b = Matrix::from_fn(3, 4, |i, j| if j < 2 { pair.b().get(i, j) } else { 0.0 });
        let padded = LowRankPair::new(a, b, 2.0).unwrap();
        assert_eq!(padded.delta(), pair.delta().scale(0.5));
        // restoring alpha/rank restores the delta
        let (a, b, _) = padded.into_parts();
        let rescaled = LowRankPair::new(a, b, 4.0).unwrap();
        assert_eq!(rescaled.delta(), pair.delta());
    }

    #[test]
    fn thin_factorization_is_exact() {
        let mut rng = Rng::new(8);
        for (r, c) in [(3, 5), (5, 3), (4, 4)] {
            let dense = Matrix::<f64>::fill_gaussian(&mut rng, r, c, 1.0).unwrap();
            let pair = LowRankPair::thin_from_dense(&dense).unwrap();
            assert_eq!(pair.rank(), r.min(c));
            assert_eq!(pair.delta(), dense);
        }
    }

    proptest! {
        #[test]
        fn delta_is_linear_in_b(seed in any::<u64>(), d_out in 1usize..6, d_in in 1usize..6, rank in 1usize..4) {
            let mut rng = Rng::new(seed);
            let a = Matrix::<f64>::fill_gaussian(&mut rng, rank, d_in, 1.0).unwrap();
            let b1 = Matrix::fill_gaussian(&mut rng, d_out, rank, 1.0).unwrap();
            let b2 = Matrix::fill_gaussian(&mut rng, d_out, rank, 1.0).unwrap();
            let sum = LowRankPair::new(a.clone(), b1.add(&b2).unwrap(), 2.0).unwrap().delta();
            let parts = LowRankPair::new(a.clone(), b1, 2.0).unwrap().delta()
                .add(&LowRankPair::new(a, b2, 2.0).unwrap().delta()).unwrap();
            prop_assert!(sum.max_abs_diff(&parts).unwrap() < 1e-12);
        }
    }
}
