//! Densification of implicitly routed architectures: grouped convolutions
//! and selection-split route patterns become single dense transforms whose
//! weights embed the routed weights block-diagonally (zeros across
//! routes). Outputs are preserved on every input.

use crate::graph::{ArchSpec, CompiledArch, LayerOp, NodeKind, NodeSpec};
use crate::tape::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;

/// Build the unrouted equivalent of an implicitly routed architecture.
///
/// Two rewrites run to a fixed point:
/// * a grouped convolution becomes a dense convolution whose weights are
///   zero at every cross-group position;
/// * a `selection → transform chain → concat` route bundle collapses into
///   a single chain of dense transforms with block-embedded weights.
///
/// Explicitly routed graphs (router nodes) have no dense equivalent.
pub fn equivalent_dense<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
) -> Result<(ArchSpec, ParamStore<T>)> {
    for node in &arch.spec.nodes {
        if matches!(node.kind, NodeKind::Router { .. }) {
            return Err(Error::Unsupported(format!(
                "architecture contains explicit router '{}'; only implicit \
                 routing has a dense equivalent",
                node.id
            )));
        }
    }
    let mut nodes = arch.spec.nodes.clone();
    let mut weights: HashMap<String, Tensor<T>> = params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();

    expand_grouped_convs(arch, &mut nodes, &mut weights)?;
    loop {
        let spec = ArchSpec {
            nodes: nodes.clone(),
            ..arch.spec.clone()
        };
        let compiled = spec.compile()?;
        if !merge_one_bundle(&compiled, &mut nodes, &mut weights)? {
            break;
        }
    }

    let spec = ArchSpec {
        nodes,
        ..arch.spec.clone()
    };
    let compiled = spec.compile()?;
    let mut out_params = ParamStore::new();
    for &i in &compiled.order {
        let id = &compiled.node(i).id;
        if compiled.plan(i).param_shape.is_some() {
            let w = weights.remove(id).ok_or_else(|| {
                Error::State(format!("densification lost weights for node '{id}'"))
            })?;
            out_params.add(id, w)?;
        }
    }
    Ok((spec, out_params))
}

/// Rewrite every conv with groups > 1 in place to groups = 1 with
/// block-diagonally embedded weights.
fn expand_grouped_convs<T: Scalar>(
    arch: &CompiledArch,
    nodes: &mut [NodeSpec],
    weights: &mut HashMap<String, Tensor<T>>,
) -> Result<()> {
    for node in nodes.iter_mut() {
        let NodeKind::Transform {
            op:
                LayerOp::Conv {
                    out_channels,
                    kernel,
                    groups,
                    ..
                },
            ..
        } = &node.kind
        else {
            continue;
        };
        let g = *groups;
        if g == 1 {
            continue;
        }
        let (ky, kx) = *kernel;
        let c_out = *out_channels;
        let idx = arch
            .node_index(&node.id)
            .expect("node ids unchanged by expansion");
        let c_in = g * arch.plan(idx).param_shape.as_ref().unwrap()[1];
        let w = weights
            .get(&node.id)
            .ok_or_else(|| Error::State(format!("no weights for conv node '{}'", node.id)))?;
        let cg_in = c_in / g;
        let cg_out = c_out / g;
        let kk = ky * kx;
        let mut dense = Tensor::zeros(&[c_out, c_in, ky, kx]);
        for o in 0..c_out {
            let gi = o / cg_out;
            for ci in 0..cg_in {
                let c = gi * cg_in + ci;
                let src = &w.data()[(o * cg_in + ci) * kk..(o * cg_in + ci + 1) * kk];
                dense.data_mut()[(o * c_in + c) * kk..(o * c_in + c + 1) * kk]
                    .copy_from_slice(src);
            }
        }
        weights.insert(node.id.clone(), dense);
        if let NodeKind::Transform {
            op: LayerOp::Conv { groups, .. },
            ..
        } = &mut node.kind
        {
            *groups = 1;
        }
    }
    Ok(())
}

/// One route chain of a concat bundle, walked source → concat.
struct Chain {
    /// Flattened source columns each selected channel expands to.
    src_cols: Vec<usize>,
    /// Source channel rows kept by the selection.
    src_rows: Vec<usize>,
    /// Transform node indices in source → concat order.
    levels: Vec<usize>,
    /// Nodes consumed by the merge (selection when present, then transforms).
    consumed: Vec<usize>,
}

/// Find one mergeable `selection → transforms → concat` bundle and
/// collapse it. Returns whether a rewrite happened.
fn merge_one_bundle<T: Scalar>(
    arch: &CompiledArch,
    nodes: &mut Vec<NodeSpec>,
    weights: &mut HashMap<String, Tensor<T>>,
) -> Result<bool> {
    // consumer counts over the current graph
    let mut consumers: HashMap<usize, usize> = HashMap::new();
    for (i, _) in arch.spec.nodes.iter().enumerate() {
        for &j in &arch.plan(i).data_inputs {
            *consumers.entry(j).or_insert(0) += 1;
        }
        if let Some(m) = &arch.plan(i).merge {
            *consumers.entry(m.router).or_insert(0) += 1;
        }
    }

    'concats: for &ci in &arch.order {
        if !matches!(arch.node(ci).kind, NodeKind::Concat) {
            continue;
        }
        let mut chains = Vec::new();
        for &tail in &arch.plan(ci).data_inputs {
            match walk_chain(arch, tail, &consumers) {
                Some(chain) => chains.push(chain),
                None => continue 'concats,
            }
        }
        if chains.len() < 2 {
            continue;
        }
        // all chains must share the source and the per-level structure
        let src_node = chain_src_node(arch, &chains[0]);
        if chains.iter().any(|c| chain_src_node(arch, c) != src_node) {
            continue;
        }
        let depth = chains[0].levels.len();
        if chains.iter().any(|c| c.levels.len() != depth) {
            continue;
        }

        if depth == 0 {
            // pure selection bundle: concat of selections is one selection
            let mut rows = Vec::new();
            for c in &chains {
                rows.extend_from_slice(&c.src_rows);
            }
            let src_name = node_name(arch, src_node);
            let concat_id = arch.node(ci).id.clone();
            let consumed: Vec<usize> = chains.iter().flat_map(|c| c.consumed.clone()).collect();
            remove_and_replace(
                nodes,
                arch,
                ci,
                &consumed,
                vec![NodeSpec {
                    id: concat_id,
                    kind: NodeKind::Selection { rows },
                    inputs: vec![src_name],
                    route_tag: arch.node(ci).route_tag,
                }],
            );
            return Ok(true);
        }

        // per-level compatibility and merged-node construction
        let mut merged: Vec<NodeSpec> = Vec::with_capacity(depth);
        let mut merged_weights: Vec<Option<Tensor<T>>> = Vec::with_capacity(depth);
        let concat_id = arch.node(ci).id.clone();
        let src_name = node_name(arch, src_node);
        // per-route feature widths entering the current level
        let mut in_cols: Vec<Vec<usize>> = chains.iter().map(|c| c.src_cols.clone()).collect();
        let mut in_rows: Vec<usize> = chains.iter().map(|c| c.src_rows.len()).collect();
        let mut level_is_first = true;
        for lvl in 0..depth {
            let level_nodes: Vec<usize> = chains.iter().map(|c| c.levels[lvl]).collect();
            let Some((spec, w)) = merge_level(
                arch,
                &level_nodes,
                level_is_first,
                &in_cols,
                &in_rows,
                weights,
            )?
            else {
                continue 'concats;
            };
            // next level reads block-diagonal outputs
            let widths: Vec<usize> = level_nodes
                .iter()
                .map(|&l| feature_width(arch, l))
                .collect();
            in_rows = level_nodes
                .iter()
                .map(|&l| arch.plan(l).out_shape[0])
                .collect();
            in_cols = widths.iter().map(|&w| (0..w).collect()).collect();
            level_is_first = false;
            let id = if lvl + 1 == depth {
                concat_id.clone()
            } else {
                fresh_name(nodes, &format!("{concat_id}-dense{}", lvl + 1))
            };
            let inputs = if lvl == 0 {
                vec![src_name.clone()]
            } else {
                vec![merged[lvl - 1].id.clone()]
            };
            merged.push(NodeSpec {
                id,
                kind: spec,
                inputs,
                route_tag: arch.node(level_nodes[0]).route_tag.map(|(l, _)| (l, 0)),
            });
            merged_weights.push(w);
        }
        for (node, w) in merged.iter().zip(&merged_weights) {
            if let Some(w) = w {
                weights.insert(node.id.clone(), w.clone());
            }
        }
        let consumed: Vec<usize> = chains.iter().flat_map(|c| c.consumed.clone()).collect();
        for c in &chains {
            for &l in &c.levels {
                weights.remove(&arch.node(l).id);
            }
        }
        remove_and_replace(nodes, arch, ci, &consumed, merged);
        return Ok(true);
    }
    Ok(false)
}

fn node_name(arch: &CompiledArch, idx: usize) -> String {
    if idx == crate::graph::INPUT_NODE {
        crate::graph::INPUT_ID.to_string()
    } else {
        arch.node(idx).id.clone()
    }
}

fn chain_src_node(arch: &CompiledArch, chain: &Chain) -> usize {
    // the source feeds the chain's bottom-most node
    arch.plan(chain.consumed[0]).data_inputs[0]
}

/// Walk up from a concat operand through single-consumer transforms to an
/// optional selection. Returns `None` when the pattern does not hold.
fn walk_chain(arch: &CompiledArch, tail: usize, consumers: &HashMap<usize, usize>) -> Option<Chain> {
    if tail == crate::graph::INPUT_NODE {
        return None;
    }
    let mut levels_rev = Vec::new();
    let mut cur = tail;
    loop {
        if consumers.get(&cur).copied().unwrap_or(0) != 1 {
            return None;
        }
        match &arch.node(cur).kind {
            NodeKind::Transform { .. } => {
                if arch.plan(cur).merge.is_some() || arch.plan(cur).data_inputs.len() != 1 {
                    return None;
                }
                levels_rev.push(cur);
                cur = arch.plan(cur).data_inputs[0];
                if cur == crate::graph::INPUT_NODE {
                    // transforms read the network input directly: treat the
                    // full input as an identity selection
                    let shape = &arch.spec.input_shape;
                    return Some(identity_chain(levels_rev, shape));
                }
            }
            NodeKind::Selection { rows } => {
                let src = arch.plan(cur).data_inputs[0];
                let src_shape = if src == crate::graph::INPUT_NODE {
                    arch.spec.input_shape.clone()
                } else {
                    arch.plan(src).out_shape.clone()
                };
                let tail_sz: usize = src_shape.iter().skip(1).product();
                let mut src_cols = Vec::with_capacity(rows.len() * tail_sz);
                for &r in rows {
                    for t in 0..tail_sz {
                        src_cols.push(r * tail_sz + t);
                    }
                }
                let mut consumed = vec![cur];
                let mut levels = levels_rev.clone();
                levels.reverse();
                consumed.extend(levels.iter().copied());
                return Some(Chain {
                    src_cols,
                    src_rows: rows.clone(),
                    levels,
                    consumed,
                });
            }
            _ => return None,
        }
    }
}

fn identity_chain(mut levels_rev: Vec<usize>, src_shape: &[usize]) -> Chain {
    let tail_sz: usize = src_shape.iter().skip(1).product();
    let channels = src_shape[0];
    levels_rev.reverse();
    Chain {
        src_cols: (0..channels * tail_sz).collect(),
        src_rows: (0..channels).collect(),
        consumed: levels_rev.clone(),
        levels: levels_rev,
    }
}

fn feature_width(arch: &CompiledArch, node: usize) -> usize {
    arch.plan(node).out_shape.iter().product()
}

/// Merge one level of parallel route transforms into a dense transform.
/// Returns `None` when the level is structurally incompatible.
#[allow(clippy::too_many_arguments)]
fn merge_level<T: Scalar>(
    arch: &CompiledArch,
    level_nodes: &[usize],
    first_level: bool,
    in_cols: &[Vec<usize>],
    in_rows: &[usize],
    weights: &HashMap<String, Tensor<T>>,
) -> Result<Option<(NodeKind, Option<Tensor<T>>)>> {
    let kinds: Vec<&NodeKind> = level_nodes.iter().map(|&l| &arch.node(l).kind).collect();
    let NodeKind::Transform { op: op0, act: act0 } = kinds[0] else {
        return Ok(None);
    };
    match op0 {
        LayerOp::Fc { homogeneous, .. } => {
            if *act0 == crate::tensor::ActivationKind::Softmax {
                return Ok(None);
            }
            let mut total_out = 0usize;
            let mut per_route: Vec<(usize, usize)> = Vec::new(); // (out, in)
            for (r, &l) in level_nodes.iter().enumerate() {
                let NodeKind::Transform {
                    op:
                        LayerOp::Fc {
                            out_features,
                            homogeneous: h,
                        },
                    act,
                } = &arch.node(l).kind
                else {
                    return Ok(None);
                };
                if act != act0 || h != homogeneous {
                    return Ok(None);
                }
                let m = if first_level {
                    in_cols[r].len()
                } else {
                    feature_in(arch, l)
                };
                per_route.push((*out_features, m));
                total_out += *out_features;
            }
            let total_in: usize = if first_level {
                // columns index the shared source; width = source features
                source_width(arch, level_nodes[0])
            } else {
                per_route.iter().map(|&(_, m)| m).sum()
            };
            let cols = if *homogeneous { total_in + 1 } else { total_in };
            let mut dense = Tensor::zeros(&[total_out, cols]);
            let mut row_off = 0usize;
            let mut col_off = 0usize;
            for (r, &l) in level_nodes.iter().enumerate() {
                let (n_out, m_in) = per_route[r];
                let w = weights
                    .get(&arch.node(l).id)
                    .ok_or_else(|| Error::State(format!("missing fc weights '{}'", arch.node(l).id)))?;
                let wcols = w.shape()[1];
                for o in 0..n_out {
                    for i in 0..m_in {
                        let col = if first_level { in_cols[r][i] } else { col_off + i };
                        dense.data_mut()[(row_off + o) * cols + col] = w.data()[o * wcols + i];
                    }
                    if *homogeneous {
                        dense.data_mut()[(row_off + o) * cols + total_in] =
                            w.data()[o * wcols + m_in];
                    }
                }
                row_off += n_out;
                if !first_level {
                    col_off += m_in;
                }
            }
            Ok(Some((
                NodeKind::Transform {
                    op: LayerOp::Fc {
                        out_features: total_out,
                        homogeneous: *homogeneous,
                    },
                    act: *act0,
                },
                Some(dense),
            )))
        }
        LayerOp::Conv {
            kernel,
            stride,
            padding,
            ..
        } => {
            let mut total_out = 0usize;
            let mut per_route: Vec<(usize, usize)> = Vec::new(); // (c_out, c_in)
            for (r, &l) in level_nodes.iter().enumerate() {
                let NodeKind::Transform {
                    op:
                        LayerOp::Conv {
                            out_channels,
                            kernel: k,
                            stride: s,
                            padding: p,
                            groups,
                        },
                    act,
                } = &arch.node(l).kind
                else {
                    return Ok(None);
                };
                if act != act0 || k != kernel || s != stride || p != padding || *groups != 1 {
                    return Ok(None);
                }
                let c_in = if first_level {
                    in_rows[r]
                } else {
                    arch.plan(l).param_shape.as_ref().unwrap()[1]
                };
                per_route.push((*out_channels, c_in));
                total_out += *out_channels;
            }
            let total_in: usize = if first_level {
                source_channels(arch, level_nodes[0])
            } else {
                per_route.iter().map(|&(_, c)| c).sum()
            };
            let (ky, kx) = *kernel;
            let kk = ky * kx;
            let mut dense = Tensor::zeros(&[total_out, total_in, ky, kx]);
            let mut row_off = 0usize;
            let mut col_off = 0usize;
            for (r, &l) in level_nodes.iter().enumerate() {
                let (c_out, c_in) = per_route[r];
                let w = weights.get(&arch.node(l).id).ok_or_else(|| {
                    Error::State(format!("missing conv weights '{}'", arch.node(l).id))
                })?;
                for o in 0..c_out {
                    for ci in 0..c_in {
                        let c = if first_level {
                            // selection rows index source channels
                            chain_row(in_cols, in_rows, r, ci)
                        } else {
                            col_off + ci
                        };
                        let src = &w.data()[(o * c_in + ci) * kk..(o * c_in + ci + 1) * kk];
                        dense.data_mut()
                            [((row_off + o) * total_in + c) * kk..((row_off + o) * total_in + c + 1) * kk]
                            .copy_from_slice(src);
                    }
                }
                row_off += c_out;
                if !first_level {
                    col_off += c_in;
                }
            }
            Ok(Some((
                NodeKind::Transform {
                    op: LayerOp::Conv {
                        out_channels: total_out,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        groups: 1,
                    },
                    act: *act0,
                },
                Some(dense),
            )))
        }
        LayerOp::MaxPool { kernel, stride } => {
            for &l in level_nodes {
                let NodeKind::Transform {
                    op: LayerOp::MaxPool { kernel: k, stride: s },
                    ..
                } = &arch.node(l).kind
                else {
                    return Ok(None);
                };
                if k != kernel || s != stride {
                    return Ok(None);
                }
            }
            Ok(Some((
                NodeKind::Transform {
                    op: LayerOp::MaxPool {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    act: *act0,
                },
                None,
            )))
        }
        LayerOp::GlobalMaxPool => {
            for &l in level_nodes {
                if !matches!(
                    &arch.node(l).kind,
                    NodeKind::Transform {
                        op: LayerOp::GlobalMaxPool,
                        ..
                    }
                ) {
                    return Ok(None);
                }
            }
            Ok(Some((
                NodeKind::Transform {
                    op: LayerOp::GlobalMaxPool,
                    act: *act0,
                },
                None,
            )))
        }
    }
}

fn feature_in(arch: &CompiledArch, node: usize) -> usize {
    let cols = arch.plan(node).param_shape.as_ref().unwrap()[1];
    match arch.node(node).kind {
        NodeKind::Transform {
            op: LayerOp::Fc { homogeneous: true, .. },
            ..
        } => cols - 1,
        _ => cols,
    }
}

fn source_width(arch: &CompiledArch, first_level_node: usize) -> usize {
    source_of_bottom(arch, first_level_node).iter().product()
}

fn source_channels(arch: &CompiledArch, first_level_node: usize) -> usize {
    source_of_bottom(arch, first_level_node)[0]
}

/// Shape of the node feeding the chain's bottom node (selection input or
/// the network input).
fn source_of_bottom(arch: &CompiledArch, first_level_node: usize) -> Vec<usize> {
    let below = arch.plan(first_level_node).data_inputs[0];
    if below == crate::graph::INPUT_NODE {
        return arch.spec.input_shape.clone();
    }
    match &arch.node(below).kind {
        NodeKind::Selection { .. } => {
            let src = arch.plan(below).data_inputs[0];
            if src == crate::graph::INPUT_NODE {
                arch.spec.input_shape.clone()
            } else {
                arch.plan(src).out_shape.clone()
            }
        }
        _ => arch.plan(below).out_shape.clone(),
    }
}

fn chain_row(in_cols: &[Vec<usize>], in_rows: &[usize], route: usize, ci: usize) -> usize {
    // first-level conv: recover the source channel from the selection rows
    let tail = in_cols[route].len() / in_rows[route];
    in_cols[route][ci * tail] / tail
}

fn fresh_name(nodes: &[NodeSpec], base: &str) -> String {
    if !nodes.iter().any(|n| n.id == base) {
        return base.to_string();
    }
    let mut k = 2;
    loop {
        let cand = format!("{base}-{k}");
        if !nodes.iter().any(|n| n.id == cand) {
            return cand;
        }
        k += 1;
    }
}

/// Drop the concat plus all consumed chain nodes and splice in the merged
/// replacements at the concat's position.
fn remove_and_replace(
    nodes: &mut Vec<NodeSpec>,
    arch: &CompiledArch,
    concat: usize,
    consumed: &[usize],
    replacements: Vec<NodeSpec>,
) {
    let mut drop: Vec<String> = consumed
        .iter()
        .map(|&i| arch.node(i).id.clone())
        .collect();
    drop.push(arch.node(concat).id.clone());
    nodes.retain(|n| !drop.contains(&n.id));
    nodes.extend(replacements);
}
