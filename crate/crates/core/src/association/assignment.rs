/// Maximum-weight bipartite assignment (Hungarian method) on a dense
/// `rows x cols` matrix of non-negative weights.
///
/// Returns, for each row, the matched column (if any, with positive weight)
/// and the total weight.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> (Vec<Option<usize>>, i64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (vec![None; rows], 0);
    }
    let n = rows.max(cols);
    let top = weights.iter().flatten().copied().max().unwrap_or(0);
    let cost = |i: usize, j: usize| -> i64 {
        let w = if i < rows && j < cols { weights[i][j] } else { 0 };
        top - w
    };

    // 1-based potentials and matching, following the classic O(n^3) formulation
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    let mut total = 0;
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i <= rows && j <= cols && weights[i - 1][j - 1] > 0 {
            assignment[i - 1] = Some(j - 1);
            total += weights[i - 1][j - 1];
        }
    }
    (assignment, total)
}
