//! Low-rank adapters as swappable parametric memory: factor algebra, the
//! LMEM container, merging, a synthetic memorization lab, capacity sweeps,
//! routing over memory modules and a serving harness.

pub mod adapter;
pub mod analysis;
pub mod error;
pub mod lmem;
pub mod matcore;
pub mod memlab;
pub mod merge;
pub mod multimem;
pub mod router;
pub mod scalar;
pub mod servebench;

pub use adapter::{Adapter, LowRankPair, MergedDelta, MergedTarget};
pub use error::{Error, FormatError, Result};
pub use matcore::{Matrix, Rng};
pub use merge::{MergeMethod, MergeSpec};
pub use scalar::Scalar;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Adapter64 = Adapter<f64>;
pub type Adapter32 = Adapter<f32>;
pub type LowRankPair64 = LowRankPair<f64>;
pub type LowRankPair32 = LowRankPair<f32>;
