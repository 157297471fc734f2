//! Constructors for the architecture families used by the search space,
//! the CLI and the test fixtures.

use crate::graph::{
    ArchSpec, LayerOp, NodeKind, NodeSpec, Padding, RouterInput, INPUT_ID,
};
use crate::tensor::ActivationKind;

/// One convolutional level of a micro-convnet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    /// Filter groups; > 1 makes the layer implicitly routed.
    pub groups: usize,
    /// Non-overlapping max-pool of this size after the convolution.
    pub pool: Option<usize>,
}

impl ConvLayer {
    pub fn new(filters: usize, kernel: usize, groups: usize, pool: Option<usize>) -> Self {
        ConvLayer {
            filters,
            kernel,
            groups,
            pool,
        }
    }
}

/// A convolution stack with ReLU activations, closed by global
/// max-pooling and a fully-connected classifier. Conv level `l` carries
/// route tag `(l, 0)`; the classifier is tagged with the next layer index.
pub fn micro_convnet(
    name: &str,
    input: [usize; 3],
    classes: usize,
    layers: &[ConvLayer],
) -> ArchSpec {
    let mut nodes = Vec::new();
    let mut prev = INPUT_ID.to_string();
    for (l, layer) in layers.iter().enumerate() {
        let conv_id = format!("conv{}", l + 1);
        nodes.push(NodeSpec {
            id: conv_id.clone(),
            kind: NodeKind::Transform {
                op: LayerOp::Conv {
                    out_channels: layer.filters,
                    kernel: (layer.kernel, layer.kernel),
                    stride: (1, 1),
                    padding: Padding::Same,
                    groups: layer.groups,
                },
                act: ActivationKind::ReLU,
            },
            inputs: vec![prev.clone()],
            route_tag: Some((l, 0)),
        });
        prev = conv_id;
        if let Some(k) = layer.pool {
            let pool_id = format!("pool{}", l + 1);
            nodes.push(NodeSpec {
                id: pool_id.clone(),
                kind: NodeKind::Transform {
                    op: LayerOp::MaxPool {
                        kernel: (k, k),
                        stride: (k, k),
                    },
                    act: ActivationKind::Identity,
                },
                inputs: vec![prev.clone()],
                route_tag: Some((l, 0)),
            });
            prev = pool_id;
        }
    }
    nodes.push(NodeSpec {
        id: "gmp".into(),
        kind: NodeKind::Transform {
            op: LayerOp::GlobalMaxPool,
            act: ActivationKind::Identity,
        },
        inputs: vec![prev.clone()],
        route_tag: Some((layers.len(), 0)),
    });
    nodes.push(NodeSpec {
        id: "fc-out".into(),
        kind: NodeKind::Transform {
            op: LayerOp::Fc {
                out_features: classes,
                homogeneous: true,
            },
            act: ActivationKind::Identity,
        },
        inputs: vec!["gmp".into()],
        route_tag: Some((layers.len(), 0)),
    });
    ArchSpec {
        name: name.into(),
        input_shape: input.to_vec(),
        nodes,
        output: "fc-out".into(),
    }
}

/// An explicitly routed classifier: a router over the input gates R
/// two-layer fc routes whose logits are combined per Eq.-style weighting.
/// Route `j`'s nodes carry tags `(1, j)` and `(2, j)`.
pub fn routed_fc_net(
    name: &str,
    input_shape: &[usize],
    classes: usize,
    routes: usize,
    hidden: usize,
) -> ArchSpec {
    let mut nodes = vec![NodeSpec {
        id: "router".into(),
        kind: NodeKind::Router {
            routes,
            input: RouterInput::Pooled,
        },
        inputs: vec![INPUT_ID.into()],
        route_tag: Some((0, 0)),
    }];
    let mut merge_inputs = vec!["router".to_string()];
    for j in 0..routes {
        let hid = format!("route{j}-hidden");
        let out = format!("route{j}-logits");
        nodes.push(NodeSpec {
            id: hid.clone(),
            kind: NodeKind::Transform {
                op: LayerOp::Fc {
                    out_features: hidden,
                    homogeneous: true,
                },
                act: ActivationKind::Sigmoid,
            },
            inputs: vec![INPUT_ID.into()],
            route_tag: Some((1, j)),
        });
        nodes.push(NodeSpec {
            id: out.clone(),
            kind: NodeKind::Transform {
                op: LayerOp::Fc {
                    out_features: classes,
                    homogeneous: true,
                },
                act: ActivationKind::Identity,
            },
            inputs: vec![hid],
            route_tag: Some((2, j)),
        });
        merge_inputs.push(out);
    }
    nodes.push(NodeSpec {
        id: "merge".into(),
        kind: NodeKind::Identity,
        inputs: merge_inputs,
        route_tag: Some((3, 0)),
    });
    ArchSpec {
        name: name.into(),
        input_shape: input_shape.to_vec(),
        nodes,
        output: "merge".into(),
    }
}

/// A plain fc classifier: `hidden` sigmoid features (when > 0) into
/// identity-activated class logits.
pub fn fc_net(name: &str, input_shape: &[usize], classes: usize, hidden: usize) -> ArchSpec {
    let mut nodes = Vec::new();
    let mut prev = INPUT_ID.to_string();
    if hidden > 0 {
        nodes.push(NodeSpec {
            id: "hidden".into(),
            kind: NodeKind::Transform {
                op: LayerOp::Fc {
                    out_features: hidden,
                    homogeneous: true,
                },
                act: ActivationKind::Sigmoid,
            },
            inputs: vec![prev.clone()],
            route_tag: Some((0, 0)),
        });
        prev = "hidden".into();
    }
    nodes.push(NodeSpec {
        id: "fc-out".into(),
        kind: NodeKind::Transform {
            op: LayerOp::Fc {
                out_features: classes,
                homogeneous: true,
            },
            act: ActivationKind::Identity,
        },
        inputs: vec![prev],
        route_tag: Some((1, 0)),
    });
    ArchSpec {
        name: name.into(),
        input_shape: input_shape.to_vec(),
        nodes,
        output: "fc-out".into(),
    }
}
