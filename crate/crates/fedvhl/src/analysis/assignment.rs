use ndarray::Array2;

use crate::error::{Error, Result};

/// Exact minimum-cost perfect matching on a square cost matrix via the
/// Hungarian algorithm with potentials, O(n^3). Returns the matched column
/// for each row and the total cost.
///
/// Kept in-tree because the instances are tiny (n <= 10) and exactness
/// matters more than speed; the tests pin it against permutation
/// enumeration.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "assignment needs a non-empty square matrix, got {}x{}",
            cost.nrows(),
            cost.ncols()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("assignment costs must be finite".into()));
    }

    // 1-indexed arrays; column 0 is the virtual unmatched column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Augment along the alternating path back to the virtual column.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        let row = matched_row[j] - 1;
        assignment[row] = j - 1;
        total += cost[[row, j - 1]];
    }
    Ok((assignment, total))
}
