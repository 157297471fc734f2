//! Activation-correlation analysis: Pearson correlation between the units
//! of two adjacent layers over a dataset, block-diagonal reordering of the
//! correlation matrix, and extraction of the implied routed (selection)
//! structure.

use crate::data::Dataset;
use crate::forward::forward;
use crate::graph::{ArchSpec, CompiledArch, NodeKind, NodeSpec, RoutingPolicy, INPUT_ID};
use crate::tape::ParamStore;
use crate::tensor::{ActivationKind, Scalar, Tensor};
use crate::{Error, Result};

/// Pearson correlations between the units of two layers, rows = layer i
/// units, columns = layer j units.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub lambda: Tensor<f64>,
    pub layer_i: String,
    pub layer_j: String,
}

/// Matched row/column clusters of a correlation matrix. Block `c` pairs
/// `row_blocks[c]` with `col_blocks[c]`; permutations order units block
/// by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAssignment {
    pub row_blocks: Vec<Vec<usize>>,
    pub col_blocks: Vec<Vec<usize>>,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

/// Pearson correlation matrix between the columns of `a` (`[n, ua]`) and
/// the columns of `b` (`[n, ub]`), population normalization. Zero-variance
/// units correlate 0 with everything. Accumulation order is canonicalized
/// by sorting samples on content, so the result is exactly invariant to
/// the sample order of the inputs.
pub fn pearson_matrix(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, ua) = a.dims2()?;
    let (nb, ub) = b.dims2()?;
    if n != nb {
        return Err(Error::Shape(format!(
            "activation sets disagree on sample count: {n} vs {nb}"
        )));
    }
    if n == 0 {
        return Err(Error::Argument("correlation over an empty dataset".into()));
    }
    let order = canonical_order(a, b);
    let inv_n = 1.0 / n as f64;
    let mut mean_a = vec![0.0f64; ua];
    let mut mean_b = vec![0.0f64; ub];
    for &s in &order {
        for (u, m) in mean_a.iter_mut().enumerate() {
            *m += a.data()[s * ua + u];
        }
        for (u, m) in mean_b.iter_mut().enumerate() {
            *m += b.data()[s * ub + u];
        }
    }
    mean_a.iter_mut().for_each(|m| *m *= inv_n);
    mean_b.iter_mut().for_each(|m| *m *= inv_n);
    let mut var_a = vec![0.0f64; ua];
    let mut var_b = vec![0.0f64; ub];
    let mut cross = vec![0.0f64; ua * ub];
    for &s in &order {
        for i in 0..ua {
            let da = a.data()[s * ua + i] - mean_a[i];
            var_a[i] += da * da;
            for j in 0..ub {
                cross[i * ub + j] += da * (b.data()[s * ub + j] - mean_b[j]);
            }
        }
        for (j, v) in var_b.iter_mut().enumerate() {
            let db = b.data()[s * ub + j] - mean_b[j];
            *v += db * db;
        }
    }
    let mut lambda = Tensor::zeros(&[ua, ub]);
    for i in 0..ua {
        for j in 0..ub {
            let denom2 = var_a[i] * var_b[j];
            let scale_i = 1.0 + mean_a[i] * mean_a[i];
            let scale_j = 1.0 + mean_b[j] * mean_b[j];
            // constant units (dead ReLUs included) are defined to correlate 0
            let dead = var_a[i] <= 1e-12 * n as f64 * scale_i
                || var_b[j] <= 1e-12 * n as f64 * scale_j;
            lambda.data_mut()[i * ub + j] = if dead {
                0.0
            } else {
                (cross[i * ub + j] / denom2.sqrt()).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(lambda)
}

/// Content-sorted sample order: identical multisets of samples sum in the
/// same order regardless of how the caller arranged them.
fn canonical_order(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<usize> {
    let (n, ua) = a.dims2().expect("validated by caller");
    let ub = b.shape()[1];
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| {
        let ax = &a.data()[x * ua..(x + 1) * ua];
        let ay = &a.data()[y * ua..(y + 1) * ua];
        for (p, q) in ax.iter().zip(ay) {
            match p.total_cmp(q) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        let bx = &b.data()[x * ub..(x + 1) * ub];
        let by = &b.data()[y * ub..(y + 1) * ub];
        for (p, q) in bx.iter().zip(by) {
            match p.total_cmp(q) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

/// Correlation of post-activation values between two adjacent nodes of an
/// evaluated network, over the whole dataset. Node outputs are flattened
/// to per-sample unit vectors.
pub fn activation_correlation<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    data: &Dataset<T>,
    layer_i: &str,
    layer_j: &str,
) -> Result<CorrelationMatrix> {
    data.validate()?;
    let ni = arch
        .node_index(layer_i)
        .ok_or_else(|| Error::Argument(format!("unknown node '{layer_i}'")))?;
    let nj = arch
        .node_index(layer_j)
        .ok_or_else(|| Error::Argument(format!("unknown node '{layer_j}'")))?;
    if !arch.plan(nj).data_inputs.contains(&ni) {
        return Err(Error::Argument(format!(
            "'{layer_j}' does not directly consume '{layer_i}'; correlation is \
             defined between adjacent layers"
        )));
    }
    let n = data.len();
    let ua: usize = arch.plan(ni).out_shape.iter().product();
    let ub: usize = arch.plan(nj).out_shape.iter().product();
    let mut acts_a = Tensor::zeros(&[n, ua]);
    let mut acts_b = Tensor::zeros(&[n, ub]);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let x = data.batch(chunk);
        let fwd = forward(arch, params, &x, &RoutingPolicy::soft())?;
        let va = fwd.node_values[ni]
            .ok_or_else(|| Error::State(format!("node '{layer_i}' was not evaluated")))?;
        let vb = fwd.node_values[nj]
            .ok_or_else(|| Error::State(format!("node '{layer_j}' was not evaluated")))?;
        let ta = fwd.tape.value(va);
        let tb = fwd.tape.value(vb);
        for (row, &i) in chunk.iter().enumerate() {
            for u in 0..ua {
                acts_a.data_mut()[i * ua + u] = ta.data()[row * ua + u].as_f64();
            }
            for u in 0..ub {
                acts_b.data_mut()[i * ub + u] = tb.data()[row * ub + u].as_f64();
            }
        }
    }
    Ok(CorrelationMatrix {
        lambda: pearson_matrix(&acts_a, &acts_b)?,
        layer_i: layer_i.to_string(),
        layer_j: layer_j.to_string(),
    })
}

/// Cluster rows and columns of Λ into `k` matched groups that concentrate
/// |Λ| mass on the block diagonal. Deterministic: greedy agglomerative
/// clustering with lowest-index tie-breaking.
pub fn reorder_block_diagonal(lambda: &Tensor<f64>, k: usize) -> Result<BlockAssignment> {
    let (rows, cols) = lambda.dims2()?;
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Argument(format!(
            "block count {k} out of range for a {rows}x{cols} matrix"
        )));
    }
    let row_profiles: Vec<Vec<f64>> = (0..rows)
        .map(|r| (0..cols).map(|c| lambda.data()[r * cols + c].abs()).collect())
        .collect();
    let col_profiles: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| lambda.data()[r * cols + c].abs()).collect())
        .collect();
    let row_clusters = agglomerate(&row_profiles, k);
    let col_clusters = agglomerate(&col_profiles, k);

    // match row clusters to column clusters, largest shared mass first
    let mass = |rc: &Vec<usize>, cc: &Vec<usize>| -> f64 {
        rc.iter()
            .map(|&r| cc.iter().map(|&c| lambda.data()[r * cols + c].abs()).sum::<f64>())
            .sum()
    };
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut row_used = vec![false; k];
    let mut col_used = vec![false; k];
    for _ in 0..k {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ri, rc) in row_clusters.iter().enumerate() {
            if row_used[ri] {
                continue;
            }
            for (ci, cc) in col_clusters.iter().enumerate() {
                if col_used[ci] {
                    continue;
                }
                let m = mass(rc, cc);
                let better = match best {
                    None => true,
                    Some((bm, bri, bci)) => {
                        m > bm || (m == bm && (ri, ci) < (bri, bci))
                    }
                };
                if better {
                    best = Some((m, ri, ci));
                }
            }
        }
        let (_, ri, ci) = best.expect("k clusters remain");
        row_used[ri] = true;
        col_used[ci] = true;
        pairs.push((ri, ci));
    }

    let row_blocks: Vec<Vec<usize>> = pairs.iter().map(|&(ri, _)| row_clusters[ri].clone()).collect();
    let col_blocks: Vec<Vec<usize>> = pairs.iter().map(|&(_, ci)| col_clusters[ci].clone()).collect();
    let row_perm: Vec<usize> = row_blocks.iter().flatten().copied().collect();
    let col_perm: Vec<usize> = col_blocks.iter().flatten().copied().collect();
    Ok(BlockAssignment {
        row_blocks,
        col_blocks,
        row_perm,
        col_perm,
    })
}

/// Average-linkage agglomerative clustering on cosine distance between
/// profiles. Members stay sorted; merges tie-break to the lowest pair.
fn agglomerate(profiles: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = profiles.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&profiles[i], &profiles[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        sum += dist[a * n + b];
                    }
                }
                let avg = sum / (clusters[i].len() * clusters[j].len()) as f64;
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => avg < bd || (avg == bd && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((avg, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("more than k clusters remain");
        let merged = clusters.remove(j);
        clusters[i].extend(merged);
        clusters[i].sort_unstable();
    }
    clusters
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Zero the off-block entries of Λ. Returns the zeroed matrix and the
/// fraction of |Λ| mass retained inside the blocks.
pub fn zero_off_diagonal(
    lambda: &Tensor<f64>,
    blocks: &BlockAssignment,
) -> Result<(Tensor<f64>, f64)> {
    let (rows, cols) = lambda.dims2()?;
    let mut col_block = vec![usize::MAX; cols];
    for (bi, cb) in blocks.col_blocks.iter().enumerate() {
        for &c in cb {
            col_block[c] = bi;
        }
    }
    let mut row_block = vec![usize::MAX; rows];
    for (bi, rb) in blocks.row_blocks.iter().enumerate() {
        for &r in rb {
            row_block[r] = bi;
        }
    }
    let mut zeroed = lambda.clone();
    let mut total = 0.0f64;
    let mut kept = 0.0f64;
    for r in 0..rows {
        for c in 0..cols {
            let v = lambda.data()[r * cols + c];
            total += v.abs();
            if row_block[r] == col_block[c] && row_block[r] != usize::MAX {
                kept += v.abs();
            } else {
                zeroed.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
    let fraction = if total == 0.0 { 0.0 } else { kept / total };
    Ok((zeroed, fraction))
}

/// Materialize the routed perceptron implied by a block assignment: per
/// block, select the input units and project them to that block's output
/// units, then concatenate blocks. Outputs appear in `col_perm` order.
pub fn blocks_to_routed_fc(
    blocks: &BlockAssignment,
    in_features: usize,
    act: ActivationKind,
) -> Result<ArchSpec> {
    if blocks.row_perm.iter().any(|&r| r >= in_features) {
        return Err(Error::Argument(format!(
            "block assignment references input unit beyond {in_features}"
        )));
    }
    let mut nodes = Vec::new();
    let mut cat_inputs = Vec::new();
    for (b, (rb, cb)) in blocks
        .row_blocks
        .iter()
        .zip(&blocks.col_blocks)
        .enumerate()
    {
        let sel = format!("select{b}");
        let proj = format!("project{b}");
        nodes.push(NodeSpec {
            id: sel.clone(),
            kind: NodeKind::Selection { rows: rb.clone() },
            inputs: vec![INPUT_ID.into()],
            route_tag: Some((0, b)),
        });
        nodes.push(NodeSpec {
            id: proj.clone(),
            kind: NodeKind::Transform {
                op: crate::graph::LayerOp::Fc {
                    out_features: cb.len(),
                    homogeneous: false,
                },
                act,
            },
            inputs: vec![sel],
            route_tag: Some((1, b)),
        });
        cat_inputs.push(proj);
    }
    nodes.push(NodeSpec {
        id: "routed-out".into(),
        kind: NodeKind::Concat,
        inputs: cat_inputs,
        route_tag: None,
    });
    Ok(ArchSpec {
        name: "routed-perceptron".into(),
        input_shape: vec![in_features],
        nodes,
        output: "routed-out".into(),
    })
}

/// Route-j weights for [`blocks_to_routed_fc`], extracted from a dense
/// `[units_j, units_i]` projection.
pub fn block_weights<T: Scalar>(
    dense: &Tensor<T>,
    blocks: &BlockAssignment,
    block: usize,
) -> Result<Tensor<T>> {
    let (_, cols) = dense.dims2()?;
    let rb = &blocks.row_blocks[block];
    let cb = &blocks.col_blocks[block];
    let mut w = Tensor::zeros(&[cb.len(), rb.len()]);
    for (o, &cu) in cb.iter().enumerate() {
        for (i, &ru) in rb.iter().enumerate() {
            w.data_mut()[o * rb.len() + i] = dense.data()[cu * cols + ru];
        }
    }
    Ok(w)
}

/// Pairwise recall of a recovered clustering against ground truth: of all
/// same-block unit pairs, the fraction kept together.
pub fn pair_recall(truth: &[usize], blocks: &[Vec<usize>]) -> f64 {
    let n = truth.len();
    let mut assign = vec![usize::MAX; n];
    for (b, members) in blocks.iter().enumerate() {
        for &m in members {
            assign[m] = b;
        }
    }
    let mut same = 0usize;
    let mut kept = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if truth[i] == truth[j] {
                same += 1;
                if assign[i] == assign[j] {
                    kept += 1;
                }
            }
        }
    }
    if same == 0 {
        1.0
    } else {
        kept as f64 / same as f64
    }
}
