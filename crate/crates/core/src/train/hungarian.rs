//! Minimum-cost assignment with row and column potentials.

use crate::error::{Error, Result};

/// Assigns each of the `g` rows of a row-major `[g, n]` cost matrix to a
/// distinct column, minimising the total. Returns `(row, column)` pairs in
/// row order.
pub fn assign(cost: &[f64], g: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if g > n {
        return Err(Error::Contract(format!(
            "{g} targets cannot be matched to {n} predictions"
        )));
    }
    if cost.len() != g * n {
        return Err(Error::dim(
            "hungarian",
            format!("{} costs for a {g}x{n} matrix", cost.len()),
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    if g == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is a virtual start column.
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=g {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn total_cost(cost: &[f64], n: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * n + c]).sum()
}
