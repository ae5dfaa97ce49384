use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Disjoint train/validation/test partition of item ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles `ids` under `seed` and cuts 8:1:1 (train gets ⌊0.8n⌋,
/// validation ⌊0.1n⌋, test the rest).
pub fn split_8_1_1(ids: &[String], seed: u64) -> Split {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Split { train: order, validation, test }
}
