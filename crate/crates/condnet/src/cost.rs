//! Exact multiply-accumulate (MAC) and parameter counting.
//!
//! MACs count multiply-accumulates only: activation functions, pooling and
//! softmax cost 0. Router projections are parameterized nodes and are
//! charged like any other; under routed inference the router is always
//! charged because it always runs.

use crate::forward::forward;
use crate::graph::{CompiledArch, NodeKind, RoutingPolicy};
use rayon::prelude::*;
use crate::tape::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// MACs of one grouped convolution: `c_out * (c_in/g) * k_x * k_y * W * H`
/// with `W, H` the output spatial dims.
pub fn mac_count_conv(
    c_in: usize,
    c_out: usize,
    k_x: usize,
    k_y: usize,
    w_out: usize,
    h_out: usize,
    g: usize,
) -> Result<u64> {
    if g == 0 || c_in % g != 0 || c_out % g != 0 {
        return Err(Error::Config(format!(
            "groups {g} must divide in-channels {c_in} and out-channels {c_out}"
        )));
    }
    Ok((c_out as u64)
        * ((c_in / g) as u64)
        * (k_x as u64)
        * (k_y as u64)
        * (w_out as u64)
        * (h_out as u64))
}

/// MACs of one projection; `m_in` includes the homogeneous coordinate when
/// the layer carries a bias.
pub fn mac_count_fc(m_in: usize, n_out: usize) -> u64 {
    (n_out as u64) * (m_in as u64)
}

/// Per-node cost line: `(id, kind, macs, params)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCost {
    pub id: String,
    pub kind: &'static str,
    pub macs: u64,
    pub params: u64,
}

/// Whole-architecture cost summary. `amortized_macs` is only present for
/// routed inference over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub per_node: Vec<NodeCost>,
    pub total_macs: u64,
    pub total_params: u64,
    pub amortized_macs: Option<f64>,
}

/// One point of an error/cost trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Classification error in [0, 1].
    pub error: f64,
    /// Expected (possibly amortized) MACs per sample.
    pub expected_cost: f64,
    /// Total parameter count of the model.
    pub model_size: u64,
}

pub fn kind_label(kind: &NodeKind) -> &'static str {
    use crate::graph::LayerOp;
    match kind {
        NodeKind::Transform { op, .. } => match op {
            LayerOp::Fc { .. } => "fc",
            LayerOp::Conv { .. } => "conv",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::GlobalMaxPool => "gmp",
        },
        NodeKind::Identity => "identity",
        NodeKind::Selection { .. } => "selection",
        NodeKind::Concat => "concat",
        NodeKind::Router { .. } => "router",
    }
}

/// Static per-node costs and totals, every node counted once.
pub fn static_report(arch: &CompiledArch) -> CostReport {
    let mut per_node = Vec::with_capacity(arch.spec.nodes.len());
    let mut total_macs = 0u64;
    let mut total_params = 0u64;
    for &i in &arch.order {
        let plan = arch.plan(i);
        let params = plan
            .param_shape
            .as_ref()
            .map(|s| s.iter().product::<usize>() as u64)
            .unwrap_or(0);
        per_node.push(NodeCost {
            id: arch.node(i).id.clone(),
            kind: kind_label(&arch.node(i).kind),
            macs: plan.macs,
            params,
        });
        total_macs += plan.macs;
        total_params += params;
    }
    CostReport {
        per_node,
        total_macs,
        total_params,
        amortized_macs: None,
    }
}

/// Total parameter count (weight-tensor elements of transform and router
/// nodes).
pub fn param_count(arch: &CompiledArch) -> u64 {
    static_report(arch).total_params
}

/// Realized MACs of a single forward pass: the sum over nodes actually
/// visited. Routers that ran are included.
pub fn realized_macs(arch: &CompiledArch, visited: &[bool]) -> u64 {
    visited
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| arch.plan(i).macs)
        .sum()
}

/// Amortized cost: the dataset mean of realized per-image MACs under a
/// routing policy. Images are evaluated one at a time so the visited set
/// is per-image.
pub fn amortized_cost<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    policy: &RoutingPolicy,
) -> Result<CostReport> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Argument(
            "amortized cost needs a non-empty dataset".into(),
        ));
    }
    let feat: usize = images.shape().iter().skip(1).product();
    let mut sample_shape = vec![1usize];
    sample_shape.extend_from_slice(&images.shape()[1..]);
    // images are independent; per-image MACs are integers, so the summed
    // result is identical for any thread count
    let per_image: Vec<u64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let x = Tensor::new(
                sample_shape.clone(),
                images.data()[i * feat..(i + 1) * feat].to_vec(),
            )?;
            let fwd = forward(arch, params, &x, policy)?;
            Ok(realized_macs(arch, &fwd.visited))
        })
        .collect::<Result<Vec<u64>>>()?;
    let total: u64 = per_image.iter().sum();
    let mut report = static_report(arch);
    report.amortized_macs = Some(total as f64 / n as f64);
    Ok(report)
}

/// Ordered per-layer MAC histogram. Nodes aggregate by effective layer
/// (route tag layer when present, otherwise graph depth).
pub fn layer_breakdown(arch: &CompiledArch) -> Vec<(usize, u64)> {
    let mut acc: std::collections::BTreeMap<usize, u64> = std::collections::BTreeMap::new();
    for &i in &arch.order {
        *acc.entry(arch.effective_layer(i)).or_insert(0) += arch.plan(i).macs;
    }
    acc.into_iter().collect()
}

/// [`layer_breakdown`] scaled so the largest bar is 1.0.
pub fn layer_breakdown_normalized(arch: &CompiledArch) -> Vec<(usize, f64)> {
    let raw = layer_breakdown(arch);
    let max = raw.iter().map(|&(_, m)| m).max().unwrap_or(0);
    if max == 0 {
        return raw.into_iter().map(|(l, _)| (l, 0.0)).collect();
    }
    raw.into_iter()
        .map(|(l, m)| (l, m as f64 / max as f64))
        .collect()
}
