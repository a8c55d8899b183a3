//! A program whose set of random choices depends on earlier draws.

use crate::distributions::Distribution;
use crate::effects::Context;
use crate::error::{PplError, Result};

/// Iteration cap after which the loop gives up.
pub const MAX_TRIALS: usize = 1_000_000;

/// Draws `Bernoulli(p)` at "b_0", "b_1", ... until the first success and
/// returns the number of failures.
pub fn branching_model(ctx: &mut Context, p: &f64) -> Result<usize> {
    if !(*p > 0.0 && *p <= 1.0) {
        return Err(PplError::InvalidArgument(format!("success probability must be in (0, 1], got {p}")));
    }
    let coin = Distribution::bernoulli(*p)?;
    for i in 0..MAX_TRIALS {
        if ctx.draw(&format!("b_{i}"), &coin)?.item() == 1.0 {
            return Ok(i);
        }
    }
    Err(PplError::DynamicStructure(format!("no success in {MAX_TRIALS} trials")))
}
