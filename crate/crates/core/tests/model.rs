mod common;

use common::*;
use mhl_core::model::{LossWeights, Params};

#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = toy_config(64, 4, 64);
    let params = Params::init(&cfg, 11);
    let batch = toy_batch(&cfg, 5);
    let check = finite_difference_check(&cfg, &params, &batch, LossWeights::default(), 200, 1e-5, 3);
    println!("checked {} entries, max rel error {:e} at {}", check.checked, check.max_rel_error, check.worst);
    assert!(check.max_rel_error < 1e-4, "{}", check.worst);
}
