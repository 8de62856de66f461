//! Desk-scale associative memory: a frozen random base map plus a trainable
//! low-rank delta that learns name -> phone-number lookups.

mod dataset;
mod model;
mod phonebook;

pub use dataset::{encode_key, slice_by_budget, KvDataset};
pub use model::{
    evaluate, evaluate_with_delta, exact_match, frozen_base, objective, predict_digits, train, Gradients,
    MemoryModel, TrainConfig, TrainOutcome, BASE_STDDEV, CLASSES, DEFAULT_D_IN, DIGITS, D_OUT,
};
pub use phonebook::{gen_phonebook, is_valid_number, token_count, PhonebookRecord};
