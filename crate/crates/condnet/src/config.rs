//! Text configuration for architectures, search spaces and ensembles.
//!
//! Architectures serialize as a TOML key/value tree with one `[[node]]`
//! table per node; parse → emit round-trips losslessly. The schema is
//! documented in the README.

use crate::graph::{ArchSpec, LayerOp, NodeKind, NodeSpec, Padding, RouterInput};
use crate::search::{LayerDomain, SearchSpace};
use crate::tensor::ActivationKind;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ArchCfg {
    name: String,
    input_shape: Vec<usize>,
    output: String,
    #[serde(rename = "node", default)]
    nodes: Vec<NodeCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct NodeCfg {
    id: String,
    kind: String,
    inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    route_tag: Option<[usize; 2]>,
    // transform fields
    #[serde(skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    homogeneous: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<PaddingCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation: Option<ActivationKind>,
    // selection
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<usize>>,
    // router
    #[serde(skip_serializing_if = "Option::is_none")]
    routes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    router_input: Option<String>,
}

impl NodeCfg {
    fn bare(id: &str, kind: &str, inputs: &[String]) -> NodeCfg {
        NodeCfg {
            id: id.to_string(),
            kind: kind.to_string(),
            inputs: inputs.to_vec(),
            route_tag: None,
            out_features: None,
            homogeneous: None,
            out_channels: None,
            kernel: None,
            stride: None,
            padding: None,
            groups: None,
            activation: None,
            rows: None,
            routes: None,
            router_input: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
enum PaddingCfg {
    Named(String),
    Explicit([usize; 2]),
}

fn padding_to_cfg(p: Padding) -> PaddingCfg {
    match p {
        Padding::Same => PaddingCfg::Named("same".into()),
        Padding::Explicit(y, x) => PaddingCfg::Explicit([y, x]),
    }
}

fn padding_from_cfg(p: &PaddingCfg, node: &str) -> Result<Padding> {
    match p {
        PaddingCfg::Named(s) if s == "same" => Ok(Padding::Same),
        PaddingCfg::Named(s) => Err(Error::Format(format!(
            "node '{node}': unknown padding '{s}' (expected \"same\" or [y, x])"
        ))),
        PaddingCfg::Explicit([y, x]) => Ok(Padding::Explicit(*y, *x)),
    }
}

fn node_to_cfg(node: &NodeSpec) -> NodeCfg {
    let mut cfg = NodeCfg::bare(&node.id, "", &node.inputs);
    cfg.route_tag = node.route_tag.map(|(l, r)| [l, r]);
    match &node.kind {
        NodeKind::Identity => cfg.kind = "identity".into(),
        NodeKind::Concat => cfg.kind = "concat".into(),
        NodeKind::Selection { rows } => {
            cfg.kind = "select".into();
            cfg.rows = Some(rows.clone());
        }
        NodeKind::Router { routes, input } => {
            cfg.kind = "router".into();
            cfg.routes = Some(*routes);
            cfg.router_input = Some(
                match input {
                    RouterInput::Pooled => "pooled",
                    RouterInput::Raw => "raw",
                }
                .into(),
            );
        }
        NodeKind::Transform { op, act } => {
            cfg.activation = Some(*act);
            match op {
                LayerOp::Fc {
                    out_features,
                    homogeneous,
                } => {
                    cfg.kind = "fc".into();
                    cfg.out_features = Some(*out_features);
                    cfg.homogeneous = Some(*homogeneous);
                }
                LayerOp::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => {
                    cfg.kind = "conv".into();
                    cfg.out_channels = Some(*out_channels);
                    cfg.kernel = Some([kernel.0, kernel.1]);
                    cfg.stride = Some([stride.0, stride.1]);
                    cfg.padding = Some(padding_to_cfg(*padding));
                    cfg.groups = Some(*groups);
                }
                LayerOp::MaxPool { kernel, stride } => {
                    cfg.kind = "maxpool".into();
                    cfg.kernel = Some([kernel.0, kernel.1]);
                    cfg.stride = Some([stride.0, stride.1]);
                }
                LayerOp::GlobalMaxPool => {
                    cfg.kind = "gmp".into();
                }
            }
        }
    }
    cfg
}

fn require<V>(field: Option<V>, node: &str, name: &str) -> Result<V> {
    field.ok_or_else(|| Error::Format(format!("node '{node}': missing field '{name}'")))
}

fn node_from_cfg(cfg: &NodeCfg) -> Result<NodeSpec> {
    let id = cfg.id.clone();
    let kind = match cfg.kind.as_str() {
        "identity" => NodeKind::Identity,
        "concat" => NodeKind::Concat,
        "select" => NodeKind::Selection {
            rows: require(cfg.rows.clone(), &id, "rows")?,
        },
        "router" => NodeKind::Router {
            routes: require(cfg.routes, &id, "routes")?,
            input: match cfg.router_input.as_deref() {
                None | Some("pooled") => RouterInput::Pooled,
                Some("raw") => RouterInput::Raw,
                Some(other) => {
                    return Err(Error::Format(format!(
                        "node '{id}': unknown router_input '{other}'"
                    )))
                }
            },
        },
        "fc" => NodeKind::Transform {
            op: LayerOp::Fc {
                out_features: require(cfg.out_features, &id, "out_features")?,
                homogeneous: cfg.homogeneous.unwrap_or(true),
            },
            act: require(cfg.activation, &id, "activation")?,
        },
        "conv" => {
            let kernel = require(cfg.kernel, &id, "kernel")?;
            NodeKind::Transform {
                op: LayerOp::Conv {
                    out_channels: require(cfg.out_channels, &id, "out_channels")?,
                    kernel: (kernel[0], kernel[1]),
                    stride: cfg.stride.map(|s| (s[0], s[1])).unwrap_or((1, 1)),
                    padding: cfg
                        .padding
                        .as_ref()
                        .map(|p| padding_from_cfg(p, &id))
                        .transpose()?
                        .unwrap_or(Padding::Same),
                    groups: cfg.groups.unwrap_or(1),
                },
                act: require(cfg.activation, &id, "activation")?,
            }
        }
        "maxpool" => {
            let kernel = require(cfg.kernel, &id, "kernel")?;
            NodeKind::Transform {
                op: LayerOp::MaxPool {
                    kernel: (kernel[0], kernel[1]),
                    stride: cfg
                        .stride
                        .map(|s| (s[0], s[1]))
                        .unwrap_or((kernel[0], kernel[1])),
                },
                act: cfg.activation.unwrap_or(ActivationKind::Identity),
            }
        }
        "gmp" => NodeKind::Transform {
            op: LayerOp::GlobalMaxPool,
            act: cfg.activation.unwrap_or(ActivationKind::Identity),
        },
        other => {
            return Err(Error::Format(format!(
                "node '{id}': unknown kind '{other}'"
            )))
        }
    };
    Ok(NodeSpec {
        id,
        kind,
        inputs: cfg.inputs.clone(),
        route_tag: cfg.route_tag.map(|[l, r]| (l, r)),
    })
}

pub fn arch_to_toml(spec: &ArchSpec) -> Result<String> {
    let cfg = ArchCfg {
        name: spec.name.clone(),
        input_shape: spec.input_shape.clone(),
        output: spec.output.clone(),
        nodes: spec.nodes.iter().map(node_to_cfg).collect(),
    };
    toml::to_string_pretty(&cfg).map_err(|e| Error::Format(format!("cannot emit arch: {e}")))
}

pub fn arch_from_toml(text: &str) -> Result<ArchSpec> {
    let cfg: ArchCfg =
        toml::from_str(text).map_err(|e| Error::Format(format!("cannot parse arch: {e}")))?;
    let nodes = cfg
        .nodes
        .iter()
        .map(node_from_cfg)
        .collect::<Result<Vec<_>>>()?;
    Ok(ArchSpec {
        name: cfg.name,
        input_shape: cfg.input_shape,
        nodes,
        output: cfg.output,
    })
}

pub fn save_arch(path: &Path, spec: &ArchSpec) -> Result<()> {
    std::fs::write(path, arch_to_toml(spec)?)?;
    Ok(())
}

pub fn load_arch(path: &Path) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    arch_from_toml(&text)
}

// ── Search-space files ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpaceCfg {
    base: ArchCfg,
    #[serde(rename = "layer", default)]
    layers: Vec<LayerDomainCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDomainCfg {
    node: String,
    #[serde(default = "one_route")]
    routes: Vec<usize>,
    filters: Vec<usize>,
}

fn one_route() -> Vec<usize> {
    vec![1]
}

pub fn space_from_toml(text: &str) -> Result<SearchSpace> {
    let cfg: SpaceCfg = toml::from_str(text)
        .map_err(|e| Error::Format(format!("cannot parse search space: {e}")))?;
    let nodes = cfg
        .base
        .nodes
        .iter()
        .map(node_from_cfg)
        .collect::<Result<Vec<_>>>()?;
    let base = ArchSpec {
        name: cfg.base.name,
        input_shape: cfg.base.input_shape,
        nodes,
        output: cfg.base.output,
    };
    Ok(SearchSpace {
        base,
        layers: cfg
            .layers
            .into_iter()
            .map(|l| LayerDomain {
                node: l.node,
                routes: l.routes,
                filters: l.filters,
            })
            .collect(),
    })
}

pub fn space_to_toml(space: &SearchSpace) -> Result<String> {
    let cfg = SpaceCfg {
        base: ArchCfg {
            name: space.base.name.clone(),
            input_shape: space.base.input_shape.clone(),
            output: space.base.output.clone(),
            nodes: space.base.nodes.iter().map(node_to_cfg).collect(),
        },
        layers: space
            .layers
            .iter()
            .map(|l| LayerDomainCfg {
                node: l.node.clone(),
                routes: l.routes.clone(),
                filters: l.filters.clone(),
            })
            .collect(),
    };
    toml::to_string_pretty(&cfg).map_err(|e| Error::Format(format!("cannot emit space: {e}")))
}

pub fn load_space(path: &Path) -> Result<SearchSpace> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    space_from_toml(&text)
}

// ── Ensemble files ───────────────────────────────────────────────────

/// An ensemble spec on disk: expert arch/checkpoint paths (relative to
/// the spec file) plus the router architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnsembleCfg {
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertCfg>,
    pub router: RouterCfg,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpertCfg {
    pub name: String,
    pub arch: PathBuf,
    pub ckpt: PathBuf,
    #[serde(default = "one")]
    pub crop_factor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RouterCfg {
    pub arch: PathBuf,
}

fn one() -> usize {
    1
}

pub fn ensemble_from_toml(text: &str) -> Result<EnsembleCfg> {
    toml::from_str(text).map_err(|e| Error::Format(format!("cannot parse ensemble: {e}")))
}

pub fn ensemble_to_toml(cfg: &EnsembleCfg) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Format(format!("cannot emit ensemble: {e}")))
}

pub fn load_ensemble_cfg(path: &Path) -> Result<EnsembleCfg> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    ensemble_from_toml(&text)
}
