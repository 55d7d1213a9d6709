//! Rectangular assignment with forbidden edges.

/// Returns, for every row, its matched column.
///
/// The matching has maximum cardinality over the allowed (`Some`) edges and,
/// among those, minimum total cost. Ties resolve deterministically.
pub fn min_cost_matching(cost: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.iter().map(Vec::len).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // Each allowed edge earns a bonus larger than any cost difference, so
    // adding an edge always beats rearranging costs.
    let spread: f64 = cost.iter().flatten().flatten().map(|c| c.abs()).sum();
    let bonus = 2.0 * spread + 1.0;
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        match cost.get(i).and_then(|r| r.get(j)).copied().flatten() {
            Some(c) => c - bonus,
            None => 0.0,
        }
    };
    let col_of = solve_square(n, at);
    (0..rows)
        .map(|i| {
            let j = col_of[i];
            (j < cols && cost[i].get(j).copied().flatten().is_some()).then_some(j)
        })
        .collect()
}

// Potentials-based Hungarian method on an n x n matrix, O(n^3).
fn solve_square(n: usize, at: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}
