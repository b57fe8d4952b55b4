//! Linear sum assignment and cross-epoch alignment of reconstructions.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::psnr;

/// A row-to-column bijection: row `i` is assigned column `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub objective: f64,
}

/// `M[i][j] = PSNR(a_i, b_j)` for two `[N, C, H, W]` image sets.
pub fn similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Vec<Vec<f64>>> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::Config(format!("similarity needs equal [N, C, H, W] sets, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    let per = a.numel() / n.max(1);
    let img = |t: &Tensor, i: usize| t.data()[i * per..(i + 1) * per].to_vec();
    Ok((0..n)
        .map(|i| {
            let ai = img(a, i);
            (0..n).map(|j| psnr(&ai, &img(b, j))).collect()
        })
        .collect())
}

/// Optimal assignment of a square matrix. Among optimal permutations the
/// lexicographically smallest `perm` is returned.
pub fn linear_sum_assignment(m: &[Vec<f64>], maximize: bool) -> Result<Assignment> {
    let n = m.len();
    if m.iter().any(|row| row.len() != n) {
        return Err(Error::Config("assignment matrix must be square".into()));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("assignment matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment { perm: Vec::new(), objective: 0.0 });
    }
    let cost: Vec<Vec<f64>> = if maximize {
        m.iter().map(|r| r.iter().map(|v| -v).collect()).collect()
    } else {
        m.to_vec()
    };
    let (u, v) = hungarian(&cost);
    let scale = cost.iter().flatten().fold(1.0f64, |a, c| a.max(c.abs()));
    let eps = 1e-9 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| cost[i][j] - u[i] - v[j] <= eps).collect())
        .collect();
    let perm = lexicographic_matching(&tight).expect("the optimal dual admits a perfect tight matching");
    let objective = perm.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
    Ok(Assignment { perm, objective })
}

/// Shortest-augmenting-path Hungarian method, O(n³). Returns row and column
/// potentials of an optimal dual for minimization.
fn hungarian(cost: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching in a bipartite graph, fixing
/// rows in order and keeping each choice only if the rest stays matchable.
fn lexicographic_matching(edges: &[Vec<bool>]) -> Option<Vec<usize>> {
    let n = edges.len();
    let mut fixed: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let choice = (0..n).find(|&j| {
            edges[i][j] && !fixed.iter().any(|&f| f == Some(j)) && {
                fixed[i] = Some(j);
                let ok = completable(edges, &fixed);
                fixed[i] = None;
                ok
            }
        })?;
        fixed[i] = Some(choice);
    }
    fixed.into_iter().collect()
}

/// Whether the unfixed rows can be matched to the unused columns (Kuhn).
fn completable(edges: &[Vec<bool>], fixed: &[Option<usize>]) -> bool {
    let n = edges.len();
    let mut col_owner: Vec<Option<usize>> = vec![None; n];
    let mut blocked = vec![false; n];
    for &j in fixed.iter().flatten() {
        blocked[j] = true;
    }
    fn augment(i: usize, edges: &[Vec<bool>], blocked: &[bool], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for j in 0..edges.len() {
            if edges[i][j] && !blocked[j] && !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, edges, blocked, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    (0..n).filter(|&i| fixed[i].is_none()).all(|i| {
        let mut seen = vec![false; n];
        augment(i, edges, &blocked, &mut seen, &mut col_owner)
    })
}

/// Reorders `later` (`[N, C, H, W]`) so that position `i` holds the image
/// best matched to `reference[i]`.
pub fn reorder_epoch(reference: &Tensor, later: &Tensor) -> Result<Tensor> {
    let m = similarity_matrix(reference, later)?;
    let assignment = linear_sum_assignment(&m, true)?;
    let n = reference.shape()[0];
    let per = later.numel() / n;
    let mut data = Vec::with_capacity(later.numel());
    for &j in &assignment.perm {
        data.extend_from_slice(&later.data()[j * per..(j + 1) * per]);
    }
    Ok(Tensor::new(later.shape().to_vec(), data)?)
}

/// Aligns epochs `2..E` to epoch 1 and averages position-wise.
pub fn match_epoch(epochs: &[Tensor]) -> Result<Tensor> {
    let Some(first) = epochs.first() else {
        return Err(Error::Config("no epochs to match".into()));
    };
    let mut sum = first.data().to_vec();
    for later in &epochs[1..] {
        let aligned = reorder_epoch(first, later)?;
        for (s, v) in sum.iter_mut().zip(aligned.data()) {
            *s += v;
        }
    }
    let e = epochs.len() as f64;
    Ok(Tensor::new(first.shape().to_vec(), sum.into_iter().map(|s| s / e).collect())?)
}
