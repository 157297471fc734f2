//! Conditional-network graphs: DAGs of transform, identity, selection,
//! concatenation and router nodes, plus the routing policies applied at
//! inference time.
//!
//! A routed merge is expressed through a node's input list: when the first
//! input names a router node, the remaining inputs are that router's
//! routes and the node consumes their per-sample weighted combination.
//! The router node itself outputs the length-R weight vector.

use crate::kernels::Window;
use crate::tensor::ActivationKind;
use crate::{Error, Result};
use std::collections::HashMap;

/// Reserved id referring to the network input inside node input lists.
pub const INPUT_ID: &str = "input";

/// Spatial padding of a convolution or pooling transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so stride-1 output keeps the input dims
    /// (odd kernels only).
    Same,
    Explicit(usize, usize),
}

impl Padding {
    pub fn resolve(&self, kernel: (usize, usize)) -> Result<(usize, usize)> {
        match *self {
            Padding::Explicit(py, px) => Ok((py, px)),
            Padding::Same => {
                if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
                    return Err(Error::Config(format!(
                        "'same' padding requires odd kernel dims, got {kernel:?}"
                    )));
                }
                Ok(((kernel.0 - 1) / 2, (kernel.1 - 1) / 2))
            }
        }
    }
}

/// The data-transformation primitive carried by a Transform node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// Projection to `out_features`; with `homogeneous`, the weight gains
    /// a bias column fed by an implicit constant-1 input.
    Fc {
        out_features: usize,
        homogeneous: bool,
    },
    /// Grouped 2-D convolution (no bias term).
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        groups: usize,
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalMaxPool,
}

/// What a router reads before projecting to route weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterInput {
    /// Global-max-pooled summary of a convolutional input (feature
    /// vectors pass through unchanged). Keeps router cost small.
    #[default]
    Pooled,
    /// The flattened node input as-is.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Transform {
        op: LayerOp,
        act: ActivationKind,
    },
    /// Copies its input: changes neither shape nor values.
    Identity,
    /// Row-selection matrix: output channel/feature `i` is input `rows[i]`
    /// (exactly one 1 per row of S).
    Selection {
        rows: Vec<usize>,
    },
    /// Channel/feature concatenation of its inputs, order preserved.
    Concat,
    /// Trainable router: softmax-normalized projection of its (summarized)
    /// input to `routes` weights.
    Router {
        routes: usize,
        input: RouterInput,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    /// Producing nodes; [`INPUT_ID`] refers to the network input. A
    /// non-concat node listing a router first consumes the weighted
    /// combination of the remaining (route) inputs.
    pub inputs: Vec<String>,
    /// Optional (layer, route) tag used for cost breakdowns and reports.
    pub route_tag: Option<(usize, usize)>,
}

/// Declarative architecture: nodes, their wiring, and the per-sample input
/// shape (`[features]` or `[channels, h, w]`, batch excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
    pub output: String,
}

/// How route weights select routes at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// All routes, fractionally weighted. The only trainable mode.
    Soft,
    /// Argmax route only, as in a decision tree.
    HardTop1,
    /// The τ most probable routes.
    TopTau(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingPolicy {
    pub mode: PolicyMode,
    /// Rescale surviving weights to sum 1 (keeps the combination convex).
    pub renormalize: bool,
}

impl RoutingPolicy {
    pub fn soft() -> Self {
        RoutingPolicy {
            mode: PolicyMode::Soft,
            renormalize: true,
        }
    }

    pub fn hard_top1() -> Self {
        RoutingPolicy {
            mode: PolicyMode::HardTop1,
            renormalize: true,
        }
    }

    pub fn top_tau(tau: usize) -> Self {
        RoutingPolicy {
            mode: PolicyMode::TopTau(tau),
            renormalize: true,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.mode {
            PolicyMode::Soft => "soft",
            PolicyMode::HardTop1 => "hard top-1",
            PolicyMode::TopTau(_) => "top-tau",
        }
    }

    pub fn is_soft(&self) -> bool {
        self.mode == PolicyMode::Soft
    }
}

/// Resolved routed merge of a node: router plus its route producers.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub router: usize,
    pub routes: Vec<usize>,
}

/// Per-node facts derived at validation time.
#[derive(Debug, Clone)]
pub struct NodePlan {
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
    /// Weight shape for Transform(Fc/Conv) and Router nodes.
    pub param_shape: Option<Vec<usize>>,
    /// Multiply-accumulates for one sample through this node.
    pub macs: u64,
    /// Direct data inputs (node indices, [`INPUT_NODE`] for the network
    /// input), routed merge already resolved to its route producers.
    pub data_inputs: Vec<usize>,
    pub merge: Option<MergePlan>,
    /// Longest path from the network input, for per-layer grouping.
    pub depth: usize,
}

/// Sentinel node index standing for the network input.
pub const INPUT_NODE: usize = usize::MAX;

/// A validated architecture: topological order, static shapes, parameter
/// shapes and per-node MAC counts all precomputed.
#[derive(Debug, Clone)]
pub struct CompiledArch {
    pub spec: ArchSpec,
    pub index: HashMap<String, usize>,
    pub order: Vec<usize>,
    pub plans: Vec<NodePlan>,
    pub output: usize,
}

impl ArchSpec {
    /// Validate the graph (acyclicity, shape consistency, router/route
    /// wiring, reachability) and derive the static per-node plans. Every
    /// error is reported before any tensor work happens.
    pub fn compile(&self) -> Result<CompiledArch> {
        if self.input_shape.is_empty() {
            return Err(Error::Validation("input shape must be non-empty".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id == INPUT_ID {
                return Err(Error::Validation(format!(
                    "node id '{INPUT_ID}' is reserved for the network input"
                )));
            }
            if n.id.is_empty()
                || !n
                    .id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Validation(format!(
                    "node id '{}' must be non-empty and [A-Za-z0-9_-]",
                    n.id
                )));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate node id '{}'", n.id)));
            }
        }
        let output = *index
            .get(&self.output)
            .ok_or_else(|| Error::Validation(format!("output node '{}' not found", self.output)))?;

        // resolve input name lists into node indices
        let mut resolved: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if n.inputs.is_empty() {
                return Err(Error::Validation(format!("node '{}' has no inputs", n.id)));
            }
            let mut ids = Vec::with_capacity(n.inputs.len());
            for name in &n.inputs {
                if name == INPUT_ID {
                    ids.push(INPUT_NODE);
                } else {
                    ids.push(*index.get(name).ok_or_else(|| {
                        Error::Validation(format!(
                            "node '{}' references unknown input '{name}'",
                            n.id
                        ))
                    })?);
                }
            }
            resolved.push(ids);
        }

        let order = self.topo_order(&resolved)?;

        // shape/merge planning in topological order
        let mut plans: Vec<Option<NodePlan>> = vec![None; self.nodes.len()];
        for &i in &order {
            let plan = self.plan_node(i, &resolved[i], &plans)?;
            plans[i] = Some(plan);
        }
        let plans: Vec<NodePlan> = plans.into_iter().map(|p| p.unwrap()).collect();

        // every node must contribute to the output, otherwise static cost
        // totals and visited-set accounting drift apart
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![output];
        while let Some(i) = stack.pop() {
            if live[i] {
                continue;
            }
            live[i] = true;
            for &j in &resolved[i] {
                if j != INPUT_NODE {
                    stack.push(j);
                }
            }
        }
        if let Some(dead) = live.iter().position(|&l| !l) {
            return Err(Error::Validation(format!(
                "node '{}' is unreachable from the output",
                self.nodes[dead].id
            )));
        }

        Ok(CompiledArch {
            spec: self.clone(),
            index,
            order,
            plans,
            output,
        })
    }

    fn topo_order(&self, resolved: &[Vec<usize>]) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, inputs) in resolved.iter().enumerate() {
            for &j in inputs {
                if j != INPUT_NODE {
                    indeg[i] += 1;
                    consumers[j].push(i);
                }
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|&i| indeg[i] > 0)
                .map(|i| self.nodes[i].id.as_str())
                .collect();
            return Err(Error::Validation(format!(
                "graph contains a cycle through: {}",
                stuck.join(", ")
            )));
        }
        Ok(order)
    }

    fn shape_of(&self, idx: usize, plans: &[Option<NodePlan>]) -> Vec<usize> {
        if idx == INPUT_NODE {
            self.input_shape.clone()
        } else {
            plans[idx].as_ref().unwrap().out_shape.clone()
        }
    }

    fn plan_node(
        &self,
        i: usize,
        inputs: &[usize],
        plans: &[Option<NodePlan>],
    ) -> Result<NodePlan> {
        let node = &self.nodes[i];
        let is_router =
            |idx: usize| idx != INPUT_NODE && matches!(self.nodes[idx].kind, NodeKind::Router { .. });

        // resolve routed merges and the effective data-input shape
        let (merge, data_inputs, in_shape): (Option<MergePlan>, Vec<usize>, Vec<usize>) =
            match &node.kind {
                NodeKind::Concat => {
                    if inputs.iter().any(|&x| is_router(x)) {
                        return Err(Error::Validation(format!(
                            "concat node '{}' cannot take a router input",
                            node.id
                        )));
                    }
                    let mut seen = std::collections::HashSet::new();
                    for &x in inputs {
                        if !seen.insert(x) {
                            return Err(Error::Validation(format!(
                                "concat node '{}' lists the same input twice",
                                node.id
                            )));
                        }
                    }
                    let first = self.shape_of(inputs[0], plans);
                    let mut dim0 = 0usize;
                    for &x in inputs {
                        let s = self.shape_of(x, plans);
                        if s.len() != first.len() || s[1..] != first[1..] {
                            return Err(Error::Validation(format!(
                                "concat node '{}' operand shapes differ outside the \
                                 channel dim: {:?} vs {:?}",
                                node.id, first, s
                            )));
                        }
                        dim0 += s[0];
                    }
                    let mut out = first.clone();
                    out[0] = dim0;
                    (None, inputs.to_vec(), out)
                }
                _ if inputs.len() > 1 => {
                    // routed merge: router first, routes after
                    if !is_router(inputs[0]) {
                        return Err(Error::Validation(format!(
                            "node '{}' has multiple inputs but the first is not a \
                             router (only concat and routed merges take several inputs)",
                            node.id
                        )));
                    }
                    if !matches!(node.kind, NodeKind::Transform { .. } | NodeKind::Identity) {
                        return Err(Error::Validation(format!(
                            "node '{}' cannot consume a routed merge; only transform \
                             and identity nodes can",
                            node.id
                        )));
                    }
                    let router = inputs[0];
                    let routes: Vec<usize> = inputs[1..].to_vec();
                    let NodeKind::Router { routes: r, .. } = self.nodes[router].kind else {
                        unreachable!()
                    };
                    if routes.len() != r {
                        return Err(Error::Validation(format!(
                            "node '{}' wires {} routes to router '{}' which emits {r} weights",
                            node.id,
                            routes.len(),
                            self.nodes[router].id
                        )));
                    }
                    if routes.iter().any(|&x| is_router(x)) {
                        return Err(Error::Validation(format!(
                            "node '{}' lists a router as a route",
                            node.id
                        )));
                    }
                    let first = self.shape_of(routes[0], plans);
                    for &x in &routes {
                        let s = self.shape_of(x, plans);
                        if s != first {
                            return Err(Error::Validation(format!(
                                "route outputs merged by '{}' differ in shape: {:?} vs {:?}",
                                node.id, first, s
                            )));
                        }
                    }
                    (
                        Some(MergePlan {
                            router,
                            routes: routes.clone(),
                        }),
                        routes,
                        first,
                    )
                }
                _ => {
                    if is_router(inputs[0]) {
                        return Err(Error::Validation(format!(
                            "node '{}' consumes a router's weight vector directly",
                            node.id
                        )));
                    }
                    let s = self.shape_of(inputs[0], plans);
                    (None, vec![inputs[0]], s)
                }
            };

        // per-kind output shape, parameter shape and MAC count
        let (out_shape, param_shape, macs): (Vec<usize>, Option<Vec<usize>>, u64) =
            match &node.kind {
                NodeKind::Identity => (in_shape, None, 0),
                NodeKind::Concat => (in_shape, None, 0),
                NodeKind::Selection { rows } => {
                    if rows.is_empty() {
                        return Err(Error::Validation(format!(
                            "selection node '{}' keeps no rows",
                            node.id
                        )));
                    }
                    let c = in_shape[0];
                    if let Some(&bad) = rows.iter().find(|&&r| r >= c) {
                        return Err(Error::Validation(format!(
                            "selection node '{}' row {bad} out of range for {c} channels",
                            node.id
                        )));
                    }
                    let mut out = in_shape.clone();
                    out[0] = rows.len();
                    (out, None, 0)
                }
                NodeKind::Router { routes, input } => {
                    if *routes < 2 {
                        return Err(Error::Config(format!(
                            "router '{}' must have >= 2 routes, got {routes}",
                            node.id
                        )));
                    }
                    let summary = match input {
                        RouterInput::Pooled => in_shape[0],
                        RouterInput::Raw => in_shape.iter().product(),
                    };
                    let param = vec![*routes, summary + 1];
                    let macs = (*routes as u64) * (summary as u64 + 1);
                    (vec![*routes], Some(param), macs)
                }
                NodeKind::Transform { op, act } => match op {
                    LayerOp::Fc {
                        out_features,
                        homogeneous,
                    } => {
                        let m: usize = in_shape.iter().product();
                        let cols = if *homogeneous { m + 1 } else { m };
                        let macs = (*out_features as u64) * (cols as u64);
                        (vec![*out_features], Some(vec![*out_features, cols]), macs)
                    }
                    LayerOp::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        groups,
                    } => {
                        if *act == ActivationKind::Softmax {
                            return Err(Error::Validation(format!(
                                "conv node '{}' cannot use softmax activation",
                                node.id
                            )));
                        }
                        let [c, h, w] = in_shape.as_slice() else {
                            return Err(Error::Validation(format!(
                                "conv node '{}' needs a [channels, h, w] input, got {:?}",
                                node.id, in_shape
                            )));
                        };
                        if *groups == 0 || c % groups != 0 || out_channels % groups != 0 {
                            return Err(Error::Config(format!(
                                "conv node '{}': groups {groups} must divide in-channels {c} \
                                 and out-channels {out_channels}",
                                node.id
                            )));
                        }
                        let pad = padding.resolve(*kernel)?;
                        let win = Window {
                            kernel: *kernel,
                            stride: *stride,
                            pad,
                        };
                        let (ho, wo) = win.out_dims(*h, *w).ok_or_else(|| {
                            Error::Validation(format!(
                                "conv node '{}': window {win:?} does not fit {h}x{w}",
                                node.id
                            ))
                        })?;
                        let param = vec![*out_channels, c / groups, kernel.0, kernel.1];
                        let macs = crate::cost::mac_count_conv(
                            *c,
                            *out_channels,
                            kernel.1,
                            kernel.0,
                            wo,
                            ho,
                            *groups,
                        )?;
                        (vec![*out_channels, ho, wo], Some(param), macs)
                    }
                    LayerOp::MaxPool { kernel, stride } => {
                        let [c, h, w] = in_shape.as_slice() else {
                            return Err(Error::Validation(format!(
                                "max-pool node '{}' needs a [channels, h, w] input, got {:?}",
                                node.id, in_shape
                            )));
                        };
                        let win = Window {
                            kernel: *kernel,
                            stride: *stride,
                            pad: (0, 0),
                        };
                        let (ho, wo) = win.out_dims(*h, *w).ok_or_else(|| {
                            Error::Validation(format!(
                                "max-pool node '{}': window {win:?} does not fit {h}x{w}",
                                node.id
                            ))
                        })?;
                        (vec![*c, ho, wo], None, 0)
                    }
                    LayerOp::GlobalMaxPool => {
                        if in_shape.len() != 3 {
                            return Err(Error::Validation(format!(
                                "global-max-pool node '{}' needs a [channels, h, w] input, \
                                 got {:?}",
                                node.id, in_shape
                            )));
                        }
                        (vec![in_shape[0]], None, 0)
                    }
                },
            };

        let mut depth = 0usize;
        for &x in inputs {
            if x != INPUT_NODE {
                depth = depth.max(plans[x].as_ref().unwrap().depth + 1);
            }
        }

        Ok(NodePlan {
            out_shape,
            param_shape,
            macs,
            data_inputs,
            merge,
            depth,
        })
    }
}

impl CompiledArch {
    pub fn node(&self, idx: usize) -> &NodeSpec {
        &self.spec.nodes[idx]
    }

    pub fn plan(&self, idx: usize) -> &NodePlan {
        &self.plans[idx]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Indices of nodes that own parameters, in topological order. This is
    /// the parameter-store layout used by initialization and checkpoints.
    pub fn param_nodes(&self) -> Vec<usize> {
        self.order
            .iter()
            .copied()
            .filter(|&i| self.plans[i].param_shape.is_some())
            .collect()
    }

    /// `(node id, route count)` of every router, in topological order.
    pub fn routers(&self) -> Vec<(String, usize)> {
        self.order
            .iter()
            .filter_map(|&i| match self.spec.nodes[i].kind {
                NodeKind::Router { routes, .. } => Some((self.spec.nodes[i].id.clone(), routes)),
                _ => None,
            })
            .collect()
    }

    /// Effective layer index of a node: its route tag's layer when
    /// present, otherwise its depth. Nodes sharing an index aggregate in
    /// per-layer breakdowns.
    pub fn effective_layer(&self, idx: usize) -> usize {
        self.spec.nodes[idx]
            .route_tag
            .map(|(layer, _)| layer)
            .unwrap_or(self.plans[idx].depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(id: &str, from: &str, n: usize) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            kind: NodeKind::Transform {
                op: LayerOp::Fc {
                    out_features: n,
                    homogeneous: true,
                },
                act: ActivationKind::Sigmoid,
            },
            inputs: vec![from.into()],
            route_tag: None,
        }
    }

    #[test]
    fn compile_simple_chain() {
        let arch = ArchSpec {
            name: "chain".into(),
            input_shape: vec![4],
            nodes: vec![fc("h", INPUT_ID, 8), fc("out", "h", 2)],
            output: "out".into(),
        };
        let c = arch.compile().unwrap();
        assert_eq!(c.plan(c.node_index("h").unwrap()).out_shape, vec![8]);
        assert_eq!(c.plan(c.node_index("h").unwrap()).macs, 8 * 5);
        assert_eq!(
            c.plan(c.node_index("out").unwrap()).param_shape,
            Some(vec![2, 9])
        );
    }

    #[test]
    fn cycle_is_rejected_before_compute() {
        let a = fc("a", "b", 4);
        let b = fc("b", "a", 4);
        let arch = ArchSpec {
            name: "loop".into(),
            input_shape: vec![4],
            nodes: vec![a, b],
            output: "b".into(),
        };
        let err = arch.compile().unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("cycle")));
    }

    #[test]
    fn unreachable_node_is_rejected() {
        let arch = ArchSpec {
            name: "dead".into(),
            input_shape: vec![4],
            nodes: vec![fc("out", INPUT_ID, 2), fc("dangling", INPUT_ID, 3)],
            output: "out".into(),
        };
        let err = arch.compile().unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("unreachable")));
    }

    #[test]
    fn router_with_one_route_is_config_error() {
        let arch = ArchSpec {
            name: "r1".into(),
            input_shape: vec![4],
            nodes: vec![NodeSpec {
                id: "r".into(),
                kind: NodeKind::Router {
                    routes: 1,
                    input: RouterInput::Raw,
                },
                inputs: vec![INPUT_ID.into()],
                route_tag: None,
            }],
            output: "r".into(),
        };
        assert!(matches!(arch.compile().unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn routed_merge_requires_matching_route_count() {
        let router = NodeSpec {
            id: "r".into(),
            kind: NodeKind::Router {
                routes: 3,
                input: RouterInput::Raw,
            },
            inputs: vec![INPUT_ID.into()],
            route_tag: None,
        };
        let merge = NodeSpec {
            id: "m".into(),
            kind: NodeKind::Identity,
            inputs: vec!["r".into(), "a".into(), "b".into()],
            route_tag: None,
        };
        let arch = ArchSpec {
            name: "bad".into(),
            input_shape: vec![4],
            nodes: vec![router, fc("a", INPUT_ID, 4), fc("b", INPUT_ID, 4), merge],
            output: "m".into(),
        };
        let err = arch.compile().unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("emits 3 weights")));
    }

    #[test]
    fn selection_and_concat_shapes() {
        let sel = NodeSpec {
            id: "s".into(),
            kind: NodeKind::Selection { rows: vec![0, 2] },
            inputs: vec![INPUT_ID.into()],
            route_tag: None,
        };
        let sel2 = NodeSpec {
            id: "s2".into(),
            kind: NodeKind::Selection { rows: vec![1, 3] },
            inputs: vec![INPUT_ID.into()],
            route_tag: None,
        };
        let cat = NodeSpec {
            id: "c".into(),
            kind: NodeKind::Concat,
            inputs: vec!["s".into(), "s2".into()],
            route_tag: None,
        };
        let arch = ArchSpec {
            name: "sel".into(),
            input_shape: vec![4, 5, 5],
            nodes: vec![sel, sel2, cat],
            output: "c".into(),
        };
        let c = arch.compile().unwrap();
        assert_eq!(c.plan(c.node_index("c").unwrap()).out_shape, vec![4, 5, 5]);
    }
}
