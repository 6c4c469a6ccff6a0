use rayon::prelude::*;

use super::graph::{Gradients, Graph, Var};
use crate::error::Result;

/// Builds one tape per item (in parallel), back-propagates each scalar loss and
/// sums the gradient maps in item order, so the result does not depend on the
/// number of worker threads.
///
/// Returns the per-item loss values and the summed gradients.
pub fn accumulate<T, F>(items: &[T], loss: F) -> Result<(Vec<f64>, Gradients)>
where
    T: Sync,
    F: Fn(&Graph, usize, &T) -> Result<Option<Var>> + Sync,
{
    let parts: Vec<Result<Option<(f64, Gradients)>>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let g = Graph::new();
            match loss(&g, i, item)? {
                Some(l) => Ok(Some((g.scalar(l), g.backward(l)?))),
                None => Ok(None),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(items.len());
    let mut total = Gradients::default();
    for part in parts {
        if let Some((v, g)) = part? {
            values.push(v);
            total.merge(g);
        }
    }
    Ok((values, total))
}
