use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Dropout,
    Zoneout,
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("regularizer rate must be in [0, 1), got {rate}")))
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
/// Identity when `frozen` or `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(
    g: &Graph,
    x: Var,
    rate: f64,
    rng: &mut R,
    frozen: bool,
) -> Result<Var> {
    check_rate(rate)?;
    if frozen || rate == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul(x, g.constant(mask, rows, cols)?)
}

/// Zoneout: each unit keeps its previous value with probability `rate`.
/// Takes the new value everywhere when `frozen`.
///
/// Unlike dropout, `rate == 1` is allowed and copies `prev` entirely.
pub fn zoneout<R: Rng + ?Sized>(
    g: &Graph,
    new: Var,
    prev: Var,
    rate: f64,
    rng: &mut R,
    frozen: bool,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("zoneout rate must be in [0, 1], got {rate}")));
    }
    if g.shape(new) != g.shape(prev) {
        return Err(Error::shape(
            "zoneout",
            format!("{:?} vs previous {:?}", g.shape(new), g.shape(prev)),
        ));
    }
    if frozen || rate == 0.0 {
        return Ok(new);
    }
    if rate == 1.0 {
        return Ok(prev);
    }
    let (rows, cols) = g.shape(new);
    let carry: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 1.0 } else { 0.0 })
        .collect();
    let fresh = carry.iter().map(|c| 1.0 - c).collect();
    let kept = g.mul(prev, g.constant(carry, rows, cols)?)?;
    let updated = g.mul(new, g.constant(fresh, rows, cols)?)?;
    g.add(kept, updated)
}

/// Dispatches to [`dropout`] or [`zoneout`]; zoneout requires `prev`.
pub fn stochastic_regularizer<R: Rng + ?Sized>(
    g: &Graph,
    x: Var,
    kind: Regularizer,
    rate: f64,
    rng: &mut R,
    frozen: bool,
    prev: Option<Var>,
) -> Result<Var> {
    match kind {
        Regularizer::Dropout => dropout(g, x, rate, rng, frozen),
        Regularizer::Zoneout => {
            let prev = prev.ok_or_else(|| {
                Error::Config("zoneout needs the previous recurrent state".into())
            })?;
            zoneout(g, x, prev, rate, rng, frozen)
        }
    }
}
