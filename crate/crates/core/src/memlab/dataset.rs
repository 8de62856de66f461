use std::collections::HashMap;
use std::ops::Range;

use super::phonebook::PhonebookRecord;
use crate::error::{Error, Result};
use crate::matcore::{Matrix, Rng};
use crate::scalar::Scalar;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Unit-norm key for a name: 64-bit hash seeds a Gaussian draw.
pub fn encode_key<T: Scalar>(name: &str, d_in: usize) -> Vec<T> {
    let mut rng = Rng::new(fnv1a64(name.as_bytes()));
    let raw: Vec<f64> = (0..d_in).map(|_| rng.gaussian()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| T::of(v / norm)).collect()
}

/// Encoded phonebook slice: keys, per-digit labels and its token count.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDataset<T> {
    pub records: Vec<PhonebookRecord>,
    pub keys: Matrix<T>,
    pub labels: Vec<[u8; 10]>,
    pub token_count: usize,
}

impl<T: Scalar> KvDataset<T> {
    /// Encodes records with `d_in`-dimensional keys. Names must be unique and
    /// their hashes collision-free.
    pub fn from_records(records: Vec<PhonebookRecord>, d_in: usize) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::invalid("d_in must be positive"));
        }
        let mut hashes = HashMap::with_capacity(records.len());
        for r in &records {
            if let Some(prev) = hashes.insert(fnv1a64(r.name.as_bytes()), &r.name) {
                let what = if *prev == r.name { "duplicate name" } else { "key hash collision" };
                return Err(Error::invalid(format!("{what}: {prev:?} / {:?}", r.name)));
            }
        }
        let mut data = Vec::with_capacity(records.len() * d_in);
        for r in &records {
            data.extend(encode_key::<T>(&r.name, d_in));
        }
        let keys = Matrix::new(records.len(), d_in, data)?;
        let labels = records.iter().map(PhonebookRecord::digits).collect();
        let token_count = records.iter().map(PhonebookRecord::tokens).sum();
        Ok(Self {
            records,
            keys,
            labels,
            token_count,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.keys.cols()
    }

    /// Contiguous sub-dataset.
    pub fn subset(&self, range: Range<usize>) -> Self {
        let records = self.records[range.clone()].to_vec();
        let token_count = records.iter().map(PhonebookRecord::tokens).sum();
        Self {
            keys: self.keys.select_rows(range.clone()),
            labels: self.labels[range].to_vec(),
            records,
            token_count,
        }
    }
}

/// Takes records in order until the running token total first exceeds
/// `budget`; the record that crosses the budget is included.
pub fn slice_by_budget<T: Scalar>(records: &[PhonebookRecord], budget: usize, d_in: usize) -> Result<KvDataset<T>> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no records to slice"))?;
    if budget < first.tokens() {
        return Err(Error::invalid(format!(
            "budget {budget} is smaller than one record ({} tokens)",
            first.tokens()
        )));
    }
    let mut total = 0;
    let mut taken = 0;
    for r in records {
        total += r.tokens();
        taken += 1;
        if total > budget {
            break;
        }
    }
    KvDataset::from_records(records[..taken].to_vec(), d_in)
}
