//! Forward evaluation of a compiled architecture under a routing policy,
//! with conditional computation: route subgraphs that no sample visits are
//! never evaluated and leave no tape entries.

use crate::graph::{
    CompiledArch, NodeKind, PolicyMode, RouterInput, RoutingPolicy, INPUT_NODE,
};
use crate::tape::{ParamStore, Tape, ValueId};
use crate::tensor::{ActivationKind, Scalar, Tensor};
use crate::{Error, Result};

/// Route weights after policy application, with visit bookkeeping.
#[derive(Debug, Clone)]
pub struct PolicyOutcome<T> {
    /// `[batch, R]` weights; pruned routes hold exact zeros.
    pub weights: Tensor<T>,
    /// Per-sample visit flags, `[batch * R]` row-major.
    pub sample_visits: Vec<bool>,
    /// Union over the batch: does any sample visit route `j`.
    pub route_visited: Vec<bool>,
}

/// Apply a routing policy to softmax route weights.
///
/// Top-τ keeps the τ largest entries per sample (ties to the lower route
/// index), zeroes the rest and, when the policy renormalizes, rescales
/// survivors to sum 1. τ = R leaves the weights untouched, exactly like
/// soft routing. Hard top-1 is top-τ with τ = 1.
pub fn apply_policy<T: Scalar>(r: &Tensor<T>, policy: &RoutingPolicy) -> Result<PolicyOutcome<T>> {
    let (batch, routes) = r.dims2()?;
    let tau = match policy.mode {
        PolicyMode::Soft => routes,
        PolicyMode::HardTop1 => 1,
        PolicyMode::TopTau(t) => t,
    };
    if tau == 0 || tau > routes {
        return Err(Error::Config(format!(
            "tau {tau} out of range for {routes} routes"
        )));
    }
    if policy.mode == PolicyMode::Soft || tau == routes {
        return Ok(PolicyOutcome {
            weights: r.clone(),
            sample_visits: vec![true; batch * routes],
            route_visited: vec![true; routes],
        });
    }
    let mut weights = Tensor::zeros(r.shape());
    let mut sample_visits = vec![false; batch * routes];
    let mut route_visited = vec![false; routes];
    for b in 0..batch {
        let row = &r.data()[b * routes..(b + 1) * routes];
        let mut idx: Vec<usize> = (0..routes).collect();
        idx.sort_by(|&a, &c| {
            row[c]
                .partial_cmp(&row[a])
                .expect("route weights are finite")
                .then(a.cmp(&c))
        });
        let survivors = &idx[..tau];
        let mut sum = T::zero();
        for &j in survivors {
            sum += row[j];
        }
        let out_row = &mut weights.data_mut()[b * routes..(b + 1) * routes];
        for &j in survivors {
            sample_visits[b * routes + j] = true;
            route_visited[j] = true;
            out_row[j] = if !policy.renormalize {
                row[j]
            } else if sum > T::zero() {
                row[j] / sum
            } else {
                // all survivor weights underflowed to zero
                T::one() / T::from_f64(tau as f64)
            };
        }
    }
    Ok(PolicyOutcome {
        weights,
        sample_visits,
        route_visited,
    })
}

/// Per-router record of one forward pass.
#[derive(Debug, Clone)]
pub struct RoutedOutputs<T> {
    pub router_node: String,
    /// Softmax-normalized router output r, `[batch, R]`.
    pub weights: Tensor<T>,
    /// Weights after the policy, `[batch, R]`.
    pub policy_weights: Tensor<T>,
    /// Union visit mask per route.
    pub visited: Vec<bool>,
    /// Route outputs v₁ʲ for visited routes; unvisited routes were never
    /// evaluated and hold `None`.
    pub per_route: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> RoutedOutputs<T> {
    /// Stack visited route outputs for one sample as rows (the matrix V₁,
    /// row j = flattened v₁ʲ of that sample; unvisited rows are zero).
    pub fn v1_matrix(&self, sample: usize) -> Tensor<T> {
        let feat = self
            .per_route
            .iter()
            .flatten()
            .next()
            .map(|t| t.len() / t.shape()[0])
            .unwrap_or(0);
        let mut out = Tensor::zeros(&[self.per_route.len(), feat]);
        for (j, route) in self.per_route.iter().enumerate() {
            if let Some(v) = route {
                let row = &v.data()[sample * feat..(sample + 1) * feat];
                out.data_mut()[j * feat..(j + 1) * feat].copy_from_slice(row);
            }
        }
        out
    }
}

/// Result of a forward pass: the tape, the output value, per-node values
/// and visit flags, and per-router routing records.
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub output: ValueId,
    pub node_values: Vec<Option<ValueId>>,
    pub visited: Vec<bool>,
    pub routed: Vec<RoutedOutputs<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn output_tensor(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    /// Backward pass for the recorded forward; requires soft routing.
    pub fn backward(&self, store: &mut ParamStore<T>, loss_grad: &Tensor<T>) -> Result<()> {
        self.tape.backward(store, self.output, loss_grad)
    }
}

struct Exec<'a, T> {
    arch: &'a CompiledArch,
    params: &'a ParamStore<T>,
    policy: &'a RoutingPolicy,
    tape: Tape<T>,
    node_values: Vec<Option<ValueId>>,
    visited: Vec<bool>,
    routed: Vec<RoutedOutputs<T>>,
    input_value: ValueId,
}

impl<T: Scalar> Exec<'_, T> {
    fn param_leaf(&mut self, node: usize) -> Result<ValueId> {
        let id = &self.arch.node(node).id;
        let pid = self.params.id(id).ok_or_else(|| {
            Error::State(format!("parameter store has no entry for node '{id}'"))
        })?;
        let want = self.arch.plan(node).param_shape.as_ref().unwrap();
        let have = self.params.get(pid).value.shape();
        if have != want.as_slice() {
            return Err(Error::Shape(format!(
                "parameter '{id}' has shape {have:?}, architecture expects {want:?}"
            )));
        }
        Ok(self.tape.leaf(self.params, pid))
    }

    fn eval(&mut self, node: usize) -> Result<ValueId> {
        if node == INPUT_NODE {
            return Ok(self.input_value);
        }
        if let Some(v) = self.node_values[node] {
            return Ok(v);
        }
        let plan = self.arch.plan(node).clone();

        // resolve the effective data input (routed merge or plain edge)
        let resolved_input: Option<ValueId> = match &plan.merge {
            Some(merge) => {
                let router_val = self.eval(merge.router)?;
                let raw = self.tape.value(router_val).clone();
                let outcome = apply_policy(&raw, self.policy)?;
                let mask = self.tape.policy_mask(
                    router_val,
                    outcome.weights.clone(),
                    self.policy.is_soft(),
                    self.policy.label(),
                );
                let mut route_vals: Vec<Option<ValueId>> = Vec::with_capacity(merge.routes.len());
                for (j, &route) in merge.routes.iter().enumerate() {
                    if outcome.route_visited[j] {
                        route_vals.push(Some(self.eval(route)?));
                    } else {
                        route_vals.push(None);
                    }
                }
                let combined = self.tape.weighted_sum(mask, route_vals.clone())?;
                self.routed.push(RoutedOutputs {
                    router_node: self.arch.node(merge.router).id.clone(),
                    weights: raw,
                    policy_weights: outcome.weights,
                    visited: outcome.route_visited,
                    per_route: route_vals
                        .iter()
                        .map(|v| v.map(|id| self.tape.value(id).clone()))
                        .collect(),
                });
                Some(combined)
            }
            None => match self.arch.node(node).kind {
                NodeKind::Concat => None, // concat evaluates all inputs itself
                _ => Some(self.eval(plan.data_inputs[0])?),
            },
        };

        let value = match &self.arch.node(node).kind {
            NodeKind::Identity => self.tape.identity(resolved_input.unwrap()),
            NodeKind::Selection { rows } => self.tape.select(resolved_input.unwrap(), rows)?,
            NodeKind::Concat => {
                let mut ids = Vec::with_capacity(plan.data_inputs.len());
                for &x in &plan.data_inputs {
                    ids.push(self.eval(x)?);
                }
                self.tape.concat(&ids)?
            }
            NodeKind::Router { input, .. } => {
                let v0 = resolved_input.unwrap();
                let summary = match (input, self.tape.value(v0).rank()) {
                    (RouterInput::Pooled, 4) => self.tape.global_max_pool(v0)?,
                    _ => v0,
                };
                let w = self.param_leaf(node)?;
                self.tape.fc(summary, w, ActivationKind::Softmax)?
            }
            NodeKind::Transform { op, act } => {
                use crate::graph::LayerOp;
                let x = resolved_input.unwrap();
                match op {
                    LayerOp::Fc { .. } => {
                        let w = self.param_leaf(node)?;
                        self.tape.fc(x, w, *act)?
                    }
                    LayerOp::Conv {
                        kernel,
                        stride,
                        padding,
                        groups,
                        ..
                    } => {
                        let w = self.param_leaf(node)?;
                        let pad = padding.resolve(*kernel)?;
                        self.tape.conv2d(x, w, *groups, *stride, pad, *act)?
                    }
                    LayerOp::MaxPool { kernel, stride } => self.tape.max_pool(x, *kernel, *stride)?,
                    LayerOp::GlobalMaxPool => self.tape.global_max_pool(x)?,
                }
            }
        };
        self.node_values[node] = Some(value);
        self.visited[node] = true;
        Ok(value)
    }
}

/// Evaluate `arch` on a batch under `policy`.
///
/// Routing decisions are per sample; a route subgraph is evaluated when at
/// least one sample in the batch visits it, and pruned samples contribute
/// exact-zero weights to the combination. Per-image cost accounting should
/// therefore pass single-sample batches.
pub fn forward<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    policy: &RoutingPolicy,
) -> Result<Forward<T>> {
    if x.rank() < 2 || x.shape()[1..] != *arch.spec.input_shape {
        return Err(Error::Shape(format!(
            "input {:?} does not match architecture input [batch]+{:?}",
            x.shape(),
            arch.spec.input_shape
        )));
    }
    let mut tape = Tape::new();
    let input_value = tape.input(x.clone());
    let mut exec = Exec {
        arch,
        params,
        policy,
        tape,
        node_values: vec![None; arch.spec.nodes.len()],
        visited: vec![false; arch.spec.nodes.len()],
        routed: Vec::new(),
        input_value,
    };
    let output = exec.eval(arch.output)?;
    Ok(Forward {
        tape: exec.tape,
        output,
        node_values: exec.node_values,
        visited: exec.visited,
        routed: exec.routed,
    })
}

/// Standalone router evaluation: softmax(P^R · summary(v0)) per sample.
pub fn router_forward<T: Scalar>(
    v0: &Tensor<T>,
    router_weight: &Tensor<T>,
    input: RouterInput,
) -> Result<Tensor<T>> {
    let (routes, _) = router_weight.dims2()?;
    if routes < 2 {
        return Err(Error::Config(format!(
            "router must emit >= 2 route weights, got {routes}"
        )));
    }
    let mut store = ParamStore::new();
    let pid = store.add("router", router_weight.clone())?;
    let mut tape = Tape::new();
    let xv = tape.input(v0.clone());
    let summary = match (input, v0.rank()) {
        (RouterInput::Pooled, 4) => tape.global_max_pool(xv)?,
        _ => xv,
    };
    let w = tape.leaf(&store, pid);
    let r = tape.fc(summary, w, ActivationKind::Softmax)?;
    Ok(tape.value(r).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ArchSpec, LayerOp, NodeSpec, INPUT_ID};
    use crate::tape::finite_difference_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn fc_node(id: &str, from: &str, n: usize, act: ActivationKind) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            kind: NodeKind::Transform {
                op: LayerOp::Fc {
                    out_features: n,
                    homogeneous: true,
                },
                act,
            },
            inputs: vec![from.into()],
            route_tag: None,
        }
    }

    /// The toy routed net: two fc routes and a router over the same input,
    /// merged by an identity node.
    fn two_route_arch(out_dim: usize) -> ArchSpec {
        ArchSpec {
            name: "toy-routed".into(),
            input_shape: vec![3],
            nodes: vec![
                NodeSpec {
                    id: "router".into(),
                    kind: NodeKind::Router {
                        routes: 2,
                        input: RouterInput::Raw,
                    },
                    inputs: vec![INPUT_ID.into()],
                    route_tag: None,
                },
                fc_node("route0", INPUT_ID, out_dim, ActivationKind::Sigmoid),
                fc_node("route1", INPUT_ID, out_dim, ActivationKind::Sigmoid),
                NodeSpec {
                    id: "merge".into(),
                    kind: NodeKind::Identity,
                    inputs: vec!["router".into(), "route0".into(), "route1".into()],
                    route_tag: None,
                },
            ],
            output: "merge".into(),
        }
    }

    fn init_store(arch: &CompiledArch, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for i in arch.param_nodes() {
            let shape = arch.plan(i).param_shape.clone().unwrap();
            store
                .add(&arch.node(i).id, rand_tensor(rng, &shape))
                .unwrap();
        }
        store
    }

    #[test]
    fn router_forward_softmax_values() {
        // uniform logits -> uniform weights
        let w = Tensor::<f64>::zeros(&[3, 3]); // zero weights, zero bias
        let x = Tensor::from_f64(&[1, 2], &[0.4, -0.2]).unwrap();
        let r = router_forward(&x, &w, RouterInput::Raw).unwrap();
        for &v in r.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // logits (1, 0): r = (e/(e+1), 1/(e+1))
        let mut w2 = Tensor::<f64>::zeros(&[2, 2]);
        w2.data_mut()[1] = 1.0; // bias of route 0 = 1, route 1 = 0
        let x1 = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        let r2 = router_forward(&x1, &w2, RouterInput::Raw).unwrap();
        let e = std::f64::consts::E;
        assert!((r2.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((r2.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((r2.data()[0] - 0.7311).abs() < 1e-4);
        // saturated logits -> approximately one-hot
        let mut w3 = Tensor::<f64>::zeros(&[2, 2]);
        w3.data_mut()[1] = 40.0;
        w3.data_mut()[3] = -40.0;
        let r3 = router_forward(&x1, &w3, RouterInput::Raw).unwrap();
        assert!((r3.data()[0] - 1.0).abs() < 1e-6);
        assert!(r3.data()[1] < 1e-6);
    }

    #[test]
    fn apply_policy_examples() {
        let r = Tensor::<f64>::from_f64(&[1, 3], &[0.5, 0.3, 0.2]).unwrap();
        let got = apply_policy(&r, &RoutingPolicy::top_tau(2)).unwrap();
        assert!((got.weights.data()[0] - 0.625).abs() < 1e-12);
        assert!((got.weights.data()[1] - 0.375).abs() < 1e-12);
        assert_eq!(got.weights.data()[2], 0.0);
        assert_eq!(got.route_visited, vec![true, true, false]);

        // tau = R leaves weights bit-identical
        let all = apply_policy(&r, &RoutingPolicy::top_tau(3)).unwrap();
        assert_eq!(all.weights, r);
        assert_eq!(all.route_visited, vec![true, true, true]);

        // hard top-1 is an exact one-hot
        let r2 = Tensor::<f64>::from_f64(&[1, 2], &[0.2, 0.8]).unwrap();
        let hard = apply_policy(&r2, &RoutingPolicy::hard_top1()).unwrap();
        assert_eq!(hard.weights.data(), &[0.0, 1.0]);

        // tau out of range
        assert!(matches!(
            apply_policy(&r, &RoutingPolicy::top_tau(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn apply_policy_tie_breaks_to_lower_index() {
        let r = Tensor::<f64>::from_f64(&[1, 3], &[0.4, 0.4, 0.2]).unwrap();
        let got = apply_policy(&r, &RoutingPolicy::hard_top1()).unwrap();
        assert_eq!(got.weights.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_one_hot_route_is_exact() {
        let arch = two_route_arch(4).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let hard = forward(&arch, &store, &x, &RoutingPolicy::hard_top1()).unwrap();
        // the chosen route's standalone output must equal the merged output
        let routed = &hard.routed[0];
        for b in 0..2 {
            let row = &routed.policy_weights.data()[b * 2..(b + 1) * 2];
            let j = if row[0] == 1.0 { 0 } else { 1 };
            let route_val = routed.per_route[j].as_ref().unwrap();
            for f in 0..4 {
                assert_eq!(
                    hard.output_tensor().data()[b * 4 + f],
                    route_val.data()[b * 4 + f]
                );
            }
        }
    }

    #[test]
    fn forward_identical_routes_under_uniform_weights() {
        // two routes with identical parameters, uniform r -> output equals
        // either route exactly (0.5v + 0.5v = v)
        let arch = two_route_arch(3).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shared = rand_tensor(&mut rng, &[3, 4]);
        let mut store = ParamStore::new();
        store
            .add("router", Tensor::<f64>::zeros(&[2, 4]))
            .unwrap(); // uniform weights
        store.add("route0", shared.clone()).unwrap();
        store.add("route1", shared).unwrap();
        let x = rand_tensor(&mut rng, &[1, 3]);
        let fwd = forward(&arch, &store, &x, &RoutingPolicy::soft()).unwrap();
        let route_val = fwd.routed[0].per_route[0].as_ref().unwrap();
        assert_eq!(fwd.output_tensor(), route_val);
    }

    #[test]
    fn forward_soft_matches_bruteforce_weighted_sum() {
        let arch = two_route_arch(5).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let fwd = forward(&arch, &store, &x, &RoutingPolicy::soft()).unwrap();
        // oracle: evaluate each route independently and mix by router weights
        let r = router_forward(&x, &store.get(store.id("router").unwrap()).value, RouterInput::Raw)
            .unwrap();
        let route_only = |name: &str| {
            let sub = ArchSpec {
                name: "one-route".into(),
                input_shape: vec![3],
                nodes: vec![fc_node("r", INPUT_ID, 5, ActivationKind::Sigmoid)],
                output: "r".into(),
            };
            let c = sub.compile().unwrap();
            let mut s = ParamStore::new();
            s.add("r", store.get(store.id(name).unwrap()).value.clone())
                .unwrap();
            forward(&c, &s, &x, &RoutingPolicy::soft())
                .unwrap()
                .output_tensor()
                .clone()
        };
        let v0 = route_only("route0");
        let v1 = route_only("route1");
        for b in 0..3 {
            for f in 0..5 {
                let want = r.data()[b * 2] * v0.data()[b * 5 + f]
                    + r.data()[b * 2 + 1] * v1.data()[b * 5 + f];
                let got = fwd.output_tensor().data()[b * 5 + f];
                assert!((got - want).abs() < 1e-12, "b={b} f={f}");
            }
        }
    }

    #[test]
    fn top_tau_full_equals_soft_exactly() {
        let arch = two_route_arch(4).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let soft = forward(&arch, &store, &x, &RoutingPolicy::soft()).unwrap();
        let full = forward(&arch, &store, &x, &RoutingPolicy::top_tau(2)).unwrap();
        assert_eq!(soft.output_tensor(), full.output_tensor());
        assert_eq!(soft.routed[0].visited, full.routed[0].visited);
        assert_eq!(soft.routed[0].policy_weights, full.routed[0].policy_weights);
    }

    #[test]
    fn unvisited_routes_leave_no_tape_entries() {
        let arch = two_route_arch(4).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[1, 3]);
        let soft = forward(&arch, &store, &x, &RoutingPolicy::soft()).unwrap();
        let hard = forward(&arch, &store, &x, &RoutingPolicy::hard_top1()).unwrap();
        assert!(hard.tape.len() < soft.tape.len());
        // exactly one route node evaluated
        let visited_routes = ["route0", "route1"]
            .iter()
            .filter(|id| hard.node_values[arch.node_index(id).unwrap()].is_some())
            .count();
        assert_eq!(visited_routes, 1);
        assert_eq!(hard.routed[0].visited.iter().filter(|&&v| v).count(), 1);
    }

    #[test]
    fn tree_specialization_visits_single_path() {
        // nested routers with identity routes: hard routing must evaluate
        // exactly one root-to-leaf path, as in a decision tree
        let leaf = |id: &str| NodeSpec {
            id: id.into(),
            kind: NodeKind::Identity,
            inputs: vec![INPUT_ID.into()],
            route_tag: None,
        };
        let router = |id: &str| NodeSpec {
            id: id.into(),
            kind: NodeKind::Router {
                routes: 2,
                input: RouterInput::Raw,
            },
            inputs: vec![INPUT_ID.into()],
            route_tag: None,
        };
        let arch = ArchSpec {
            name: "tree".into(),
            input_shape: vec![2],
            nodes: vec![
                router("r-top"),
                router("r-left"),
                router("r-right"),
                leaf("l0"),
                leaf("l1"),
                leaf("l2"),
                leaf("l3"),
                NodeSpec {
                    id: "m-left".into(),
                    kind: NodeKind::Identity,
                    inputs: vec!["r-left".into(), "l0".into(), "l1".into()],
                    route_tag: None,
                },
                NodeSpec {
                    id: "m-right".into(),
                    kind: NodeKind::Identity,
                    inputs: vec!["r-right".into(), "l2".into(), "l3".into()],
                    route_tag: None,
                },
                NodeSpec {
                    id: "m-top".into(),
                    kind: NodeKind::Identity,
                    inputs: vec!["r-top".into(), "m-left".into(), "m-right".into()],
                    route_tag: None,
                },
            ],
            output: "m-top".into(),
        };
        let arch = arch.compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[1, 2]);
        let fwd = forward(&arch, &store, &x, &RoutingPolicy::hard_top1()).unwrap();
        // exactly one of the two subtrees evaluated, and within it one leaf
        let visited_leaves = ["l0", "l1", "l2", "l3"]
            .iter()
            .filter(|id| fwd.visited[arch.node_index(id).unwrap()])
            .count();
        let visited_merges = ["m-left", "m-right"]
            .iter()
            .filter(|id| fwd.visited[arch.node_index(id).unwrap()])
            .count();
        assert_eq!(visited_leaves, 1);
        assert_eq!(visited_merges, 1);
        // identity transforms: the output equals the input row
        assert_eq!(fwd.output_tensor(), &x);
    }

    #[test]
    fn router_gradients_match_finite_differences() {
        // the toy two-route net: full θ = {P^j, P^R} gradient vs central
        // differences
        let arch = two_route_arch(3).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let target = rand_tensor(&mut rng, &[2, 3]);
        let err = finite_difference_check(&mut store, 1e-3, |store, record| {
            let fwd = forward(&arch, store, &x, &RoutingPolicy::soft())?;
            let out = fwd.output_tensor();
            let mut loss = 0.0;
            let mut grad = Tensor::zeros(out.shape());
            for (i, (&yv, &tv)) in out.data().iter().zip(target.data()).enumerate() {
                loss += 0.5 * (yv - tv) * (yv - tv);
                grad.data_mut()[i] = yv - tv;
            }
            if record {
                fwd.backward(store, &grad)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn identical_routes_give_zero_router_gradient() {
        // V1 rows equal => routing cannot change the loss => dL/dP^R = 0
        let arch = two_route_arch(3).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let shared = rand_tensor(&mut rng, &[3, 4]);
        let mut store = ParamStore::new();
        store.add("router", rand_tensor(&mut rng, &[2, 4])).unwrap();
        store.add("route0", shared.clone()).unwrap();
        store.add("route1", shared).unwrap();
        let x = rand_tensor(&mut rng, &[2, 3]);
        let fwd = forward(&arch, &store, &x, &RoutingPolicy::soft()).unwrap();
        let grad = Tensor::filled(fwd.output_tensor().shape(), 1.0);
        fwd.backward(&mut store, &grad).unwrap();
        let rid = store.id("router").unwrap();
        for &g in store.get(rid).grad.data() {
            assert!(g.abs() < 1e-12, "router grad should vanish, got {g}");
        }
    }

    #[test]
    fn backward_rejected_for_truncating_policies() {
        let arch = two_route_arch(3).compile().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut store = init_store(&arch, &mut rng);
        let x = rand_tensor(&mut rng, &[1, 3]);
        let fwd = forward(&arch, &store, &x, &RoutingPolicy::hard_top1()).unwrap();
        let grad = Tensor::filled(fwd.output_tensor().shape(), 1.0);
        let err = fwd.backward(&mut store, &grad).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}
