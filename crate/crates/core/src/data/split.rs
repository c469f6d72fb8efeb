use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Case-level partition; slices of one case never straddle partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn partition(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sorts ids, shuffles with `seed`, then takes `floor(f·n)` for train and
/// val; the remainder goes to test.
pub fn split_cases(case_ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    let before = ids.len();
    ids.dedup();
    if ids.len() != before {
        return Err(Error::Data("duplicate case ids".into()));
    }
    ids.shuffle(&mut crate::rng::stream(seed, "split", 0));
    let n = ids.len() as f64;
    let n_train = (a * n + 1e-9).floor() as usize;
    let n_val = (b * n + 1e-9).floor() as usize;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split { train: ids, val, test })
}
