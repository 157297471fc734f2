//! Reverse-mode automatic differentiation over the layer primitives.
//!
//! A forward pass records primitive applications onto a [`Tape`] arena;
//! [`Tape::backward`] replays the entries in reverse, accumulating
//! gradients into the [`ParamStore`]. Entries only ever reference earlier
//! entries, so a single reverse sweep visits everything.

use crate::kernels::{col2im_acc, im2col, matmul_acc, maxpool_plane, transpose, Window};
use crate::tensor::{apply_activation, ActivationKind, Scalar, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;

pub type ValueId = usize;
pub type ParamId = usize;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of named parameters. Gradient accumulation order is
/// the reverse tape order, which is fixed, so training is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter '{name}'")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Zero every gradient; call between optimization steps.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let dst = &mut self.params[id].grad;
        debug_assert_eq!(dst.shape(), grad.shape());
        for (d, &s) in dst.data_mut().iter_mut().zip(grad.data()) {
            *d += s;
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Leaf {
        param: ParamId,
    },
    Fc {
        x: ValueId,
        w: ValueId,
        act: ActivationKind,
        homogeneous: bool,
        preact: Option<Tensor<T>>,
    },
    Conv {
        x: ValueId,
        w: ValueId,
        groups: usize,
        win: Window,
        act: ActivationKind,
        preact: Option<Tensor<T>>,
    },
    Activation {
        x: ValueId,
        act: ActivationKind,
        preact: Option<Tensor<T>>,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<ValueId>,
    },
    Select {
        x: ValueId,
        rows: Vec<usize>,
    },
    Identity {
        x: ValueId,
    },
    /// Per-sample weighted sum of route outputs: `out[b] = Σ_j w[b,j] v_j[b]`.
    /// Unvisited routes are `None`; their weights must be zero.
    WeightedSum {
        weights: ValueId,
        routes: Vec<Option<ValueId>>,
    },
    /// Route weights after a routing policy was applied. Only the soft
    /// policy is differentiable; truncating policies are inference-only.
    PolicyMask {
        x: ValueId,
        train_ok: bool,
        label: &'static str,
    },
}

struct Entry<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward pass. Indices returned by the recording methods are
/// stable handles into the tape arena.
pub struct Tape<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.entries[id].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        let id = self.entries.len();
        self.entries.push(Entry { value, op });
        id
    }

    pub fn input(&mut self, x: Tensor<T>) -> ValueId {
        self.push(x, Op::Input)
    }

    /// Snapshot a parameter's current value as a leaf.
    pub fn leaf(&mut self, store: &ParamStore<T>, param: ParamId) -> ValueId {
        self.push(store.get(param).value.clone(), Op::Leaf { param })
    }

    /// Fully-connected projection `act(W x)` per sample. The bias enters
    /// through a homogeneous coordinate: a weight of shape `[n, m+1]`
    /// treats its last column as the bias of an implicit constant-1 input.
    pub fn fc(&mut self, x: ValueId, w: ValueId, act: ActivationKind) -> Result<ValueId> {
        let xt = self.value(x).flatten_features();
        let (batch, m) = xt.dims2()?;
        let (n, wcols) = self.value(w).dims2()?;
        let homogeneous = if wcols == m {
            false
        } else if wcols == m + 1 {
            true
        } else {
            return Err(Error::Shape(format!(
                "fc weight [{n}, {wcols}] incompatible with input [{batch}, {m}] \
                 (weight columns must be {m} or {})",
                m + 1
            )));
        };
        let wdat = self.value(w).data();
        // z = x · W_mainᵀ
        let mut wt = vec![T::zero(); m * n];
        for o in 0..n {
            for i in 0..m {
                wt[i * n + o] = wdat[o * wcols + i];
            }
        }
        let mut z = vec![T::zero(); batch * n];
        matmul_acc(&mut z, xt.data(), &wt, batch, m, n);
        if homogeneous {
            for row in z.chunks_mut(n) {
                for (o, v) in row.iter_mut().enumerate() {
                    *v += wdat[o * wcols + m];
                }
            }
        }
        let preact = if act == ActivationKind::ReLU {
            Some(Tensor::new(vec![batch, n], z.clone())?)
        } else {
            None
        };
        apply_activation(&mut z, act, n);
        let out = Tensor::new(vec![batch, n], z)?;
        Ok(self.push(
            out,
            Op::Fc {
                x,
                w,
                act,
                homogeneous,
                preact,
            },
        ))
    }

    /// Grouped 2-D convolution: output channel block `b` (of `c_out/g`
    /// channels) reads only input channel block `b` (of `c_in/g`).
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        groups: usize,
        stride: (usize, usize),
        pad: (usize, usize),
        act: ActivationKind,
    ) -> Result<ValueId> {
        if act == ActivationKind::Softmax {
            return Err(Error::Unsupported(
                "softmax activation on convolution output".into(),
            ));
        }
        let (batch, c_in, h, wdim) = self.value(x).dims4()?;
        let wshape = self.value(w).shape().to_vec();
        let (c_out, c_in_g, ky, kx) = match wshape.as_slice() {
            &[a, b, c, d] => (a, b, c, d),
            s => {
                return Err(Error::Shape(format!(
                    "conv weight must be rank 4, got {s:?}"
                )))
            }
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide in-channels {c_in} and out-channels {c_out}"
            )));
        }
        if c_in_g != c_in / groups {
            return Err(Error::Shape(format!(
                "conv weight expects {c_in_g} channels per group but input has {} ({c_in}/{groups})",
                c_in / groups
            )));
        }
        let win = Window {
            kernel: (ky, kx),
            stride,
            pad,
        };
        let (h_out, w_out) = win.out_dims(h, wdim).ok_or_else(|| {
            Error::Shape(format!(
                "convolution window {win:?} does not fit input {h}x{wdim}"
            ))
        })?;
        let cg_in = c_in / groups;
        let cg_out = c_out / groups;
        let k_cin = cg_in * ky * kx;
        let hw_out = h_out * w_out;
        let mut z = vec![T::zero(); batch * c_out * hw_out];
        let mut cols = vec![T::zero(); k_cin * hw_out];
        {
            let xdat = self.value(x).data();
            let wdat = self.value(w).data();
            for b in 0..batch {
                let x_sample = &xdat[b * c_in * h * wdim..(b + 1) * c_in * h * wdim];
                for g in 0..groups {
                    let x_block = &x_sample[g * cg_in * h * wdim..(g + 1) * cg_in * h * wdim];
                    im2col(x_block, cg_in, h, wdim, win, h_out, w_out, &mut cols);
                    let w_block = &wdat[g * cg_out * k_cin..(g + 1) * cg_out * k_cin];
                    let z_base = b * c_out * hw_out + g * cg_out * hw_out;
                    matmul_acc(
                        &mut z[z_base..z_base + cg_out * hw_out],
                        w_block,
                        &cols,
                        cg_out,
                        k_cin,
                        hw_out,
                    );
                }
            }
        }
        let preact = if act == ActivationKind::ReLU {
            Some(Tensor::new(vec![batch, c_out, h_out, w_out], z.clone())?)
        } else {
            None
        };
        let zlen = z.len();
        apply_activation(&mut z, act, zlen);
        let out = Tensor::new(vec![batch, c_out, h_out, w_out], z)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                groups,
                win,
                act,
                preact,
            },
        ))
    }

    pub fn activation(&mut self, x: ValueId, act: ActivationKind) -> Result<ValueId> {
        let src = self.value(x);
        let cols = if act == ActivationKind::Softmax {
            if src.rank() != 2 {
                return Err(Error::Shape(format!(
                    "softmax expects a [batch, features] tensor, got {:?}",
                    src.shape()
                )));
            }
            src.shape()[1]
        } else {
            src.len()
        };
        let mut data = src.data().to_vec();
        let preact = if act == ActivationKind::ReLU {
            Some(src.clone())
        } else {
            None
        };
        apply_activation(&mut data, act, cols);
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Activation { x, act, preact }))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.activation(x, ActivationKind::ReLU)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        self.activation(x, ActivationKind::Softmax)
    }

    pub fn max_pool(
        &mut self,
        x: ValueId,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<ValueId> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let win = Window {
            kernel,
            stride,
            pad: (0, 0),
        };
        let (h_out, w_out) = win
            .out_dims(h, w)
            .ok_or_else(|| Error::Shape(format!("pool window {win:?} does not fit {h}x{w}")))?;
        let hw_out = h_out * w_out;
        let mut out = vec![T::zero(); batch * c * hw_out];
        let mut argmax = vec![0usize; batch * c * hw_out];
        let xdat = self.value(x).data();
        for bc in 0..batch * c {
            let plane = &xdat[bc * h * w..(bc + 1) * h * w];
            maxpool_plane(
                plane,
                h,
                w,
                win,
                h_out,
                w_out,
                &mut out[bc * hw_out..(bc + 1) * hw_out],
                &mut argmax[bc * hw_out..(bc + 1) * hw_out],
            );
        }
        let out = Tensor::new(vec![batch, c, h_out, w_out], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Per-channel maximum over all spatial positions: `[b,c,h,w] -> [b,c]`.
    pub fn global_max_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = vec![T::zero(); batch * c];
        let mut argmax = vec![0usize; batch * c];
        let xdat = self.value(x).data();
        for bc in 0..batch * c {
            let plane = &xdat[bc * hw..(bc + 1) * hw];
            let mut best = plane[0];
            let mut best_i = 0usize;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[bc] = best;
            argmax[bc] = best_i;
        }
        let out = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }))
    }

    /// Concatenate along the channel/feature dimension (dim 1), operand
    /// order preserved.
    pub fn concat(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Argument("concat requires >= 1 operand".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!(
                "concat operands must have a batch and a feature dimension, got {first:?}"
            )));
        }
        let mut dim1 = 0usize;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s[0] != first[0]
                || s.iter().skip(2).ne(first.iter().skip(2))
            {
                return Err(Error::Shape(format!(
                    "concat operand shapes differ outside dim 1: {:?} vs {:?}",
                    first, s
                )));
            }
            dim1 += s[1];
        }
        let batch = first[0];
        let tail: usize = first.iter().skip(2).product();
        let mut shape = first.clone();
        shape[1] = dim1;
        let mut out = vec![T::zero(); batch * dim1 * tail];
        for b in 0..batch {
            let mut off = 0usize;
            for &id in xs {
                let src = self.value(id);
                let c = src.shape()[1];
                let block = &src.data()[b * c * tail..(b + 1) * c * tail];
                out[b * dim1 * tail + off * tail..b * dim1 * tail + (off + c) * tail]
                    .copy_from_slice(block);
                off += c;
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    /// Row-selection: output channel/feature `i` is input `rows[i]`.
    /// This is the selection matrix S applied along dim 1.
    pub fn select(&mut self, x: ValueId, rows: &[usize]) -> Result<ValueId> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "select expects a batched tensor, got {shape:?}"
            )));
        }
        let c_in = shape[1];
        if rows.is_empty() {
            return Err(Error::Argument("selection must keep >= 1 row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= c_in) {
            return Err(Error::Argument(format!(
                "selection row {bad} out of range for {c_in} channels"
            )));
        }
        let batch = shape[0];
        let tail: usize = shape.iter().skip(2).product();
        let mut out_shape = shape.clone();
        out_shape[1] = rows.len();
        let mut out = vec![T::zero(); batch * rows.len() * tail];
        for b in 0..batch {
            for (i, &r) in rows.iter().enumerate() {
                let src_block = &src.data()[(b * c_in + r) * tail..(b * c_in + r + 1) * tail];
                out[(b * rows.len() + i) * tail..(b * rows.len() + i + 1) * tail]
                    .copy_from_slice(src_block);
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            out,
            Op::Select {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn identity(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).clone();
        self.push(v, Op::Identity { x })
    }

    /// Record route weights after a policy application. `train_ok` marks
    /// whether gradients may flow (soft routing only).
    pub fn policy_mask(
        &mut self,
        x: ValueId,
        weights: Tensor<T>,
        train_ok: bool,
        label: &'static str,
    ) -> ValueId {
        self.push(
            weights,
            Op::PolicyMask {
                x,
                train_ok,
                label,
            },
        )
    }

    /// Routed combination `out[b] = Σ_j w[b,j] · v_j[b]` over visited
    /// routes. `routes[j] = None` marks an unvisited route, whose weight
    /// must already be zero for every sample.
    pub fn weighted_sum(
        &mut self,
        weights: ValueId,
        routes: Vec<Option<ValueId>>,
    ) -> Result<ValueId> {
        let (batch, r) = self.value(weights).dims2()?;
        if routes.len() != r {
            return Err(Error::Shape(format!(
                "router emits {r} weights but {} routes are wired",
                routes.len()
            )));
        }
        let mut shape: Option<Vec<usize>> = None;
        for v in routes.iter().flatten() {
            let s = self.value(*v).shape();
            if s[0] != batch {
                return Err(Error::Shape(format!(
                    "route batch {} differs from router batch {batch}",
                    s[0]
                )));
            }
            match &shape {
                None => shape = Some(s.to_vec()),
                Some(first) if first.as_slice() != s => {
                    return Err(Error::Shape(format!(
                        "route output shapes differ: {first:?} vs {s:?}"
                    )))
                }
                _ => {}
            }
        }
        let shape = shape
            .ok_or_else(|| Error::State("weighted sum with no visited route".into()))?;
        let feat: usize = shape.iter().skip(1).product();
        let mut out = vec![T::zero(); batch * feat];
        let wdat = self.value(weights).data();
        for (j, route) in routes.iter().enumerate() {
            let Some(v) = route else { continue };
            let vdat = self.value(*v).data();
            for b in 0..batch {
                let wj = wdat[b * r + j];
                if wj == T::zero() {
                    continue;
                }
                let dst = &mut out[b * feat..(b + 1) * feat];
                let src = &vdat[b * feat..(b + 1) * feat];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wj * s;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::WeightedSum { weights, routes }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from `output`, seeding with `loss_grad`. Gradients of
    /// every parameter reached by the tape are accumulated into `store`;
    /// unreached parameters keep their current (typically zero) gradient.
    pub fn backward(
        &self,
        store: &mut ParamStore<T>,
        output: ValueId,
        loss_grad: &Tensor<T>,
    ) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::State(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        if output >= self.entries.len() {
            return Err(Error::State(format!(
                "output id {output} is not on the tape (len {})",
                self.entries.len()
            )));
        }
        if loss_grad.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "loss gradient shape {:?} does not match output shape {:?}",
                loss_grad.shape(),
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        adj[output] = Some(loss_grad.clone());
        for id in (0..=output).rev() {
            let Some(dy) = adj[id].take() else { continue };
            match &self.entries[id].op {
                Op::Input => {}
                Op::Leaf { param } => store.accumulate_grad(*param, &dy),
                Op::Fc {
                    x,
                    w,
                    act,
                    homogeneous,
                    preact,
                } => {
                    let dz = self.act_backward(id, &dy, *act, preact.as_ref());
                    let xt = self.value(*x).flatten_features();
                    let (batch, m) = xt.dims2().expect("fc input validated on forward");
                    let (n, wcols) = self.value(*w).dims2().expect("fc weight validated");
                    // dW = dzᵀ · x, bias column = column sums of dz
                    let dz_t = transpose(dz.data(), batch, n);
                    let mut dw_main = vec![T::zero(); n * m];
                    matmul_acc(&mut dw_main, &dz_t, xt.data(), n, batch, m);
                    let mut dw = vec![T::zero(); n * wcols];
                    for o in 0..n {
                        dw[o * wcols..o * wcols + m].copy_from_slice(&dw_main[o * m..(o + 1) * m]);
                    }
                    if *homogeneous {
                        for o in 0..n {
                            let mut s = T::zero();
                            for b in 0..batch {
                                s += dz.data()[b * n + o];
                            }
                            dw[o * wcols + m] = s;
                        }
                    }
                    let dw = Tensor::new(vec![n, wcols], dw).expect("dw shape");
                    self.add_adj(&mut adj, *w, dw);
                    // dx = dz · W_main
                    let wdat = self.value(*w).data();
                    let mut w_main = vec![T::zero(); n * m];
                    for o in 0..n {
                        w_main[o * m..(o + 1) * m]
                            .copy_from_slice(&wdat[o * wcols..o * wcols + m]);
                    }
                    let mut dx = vec![T::zero(); batch * m];
                    matmul_acc(&mut dx, dz.data(), &w_main, batch, n, m);
                    let dx = Tensor::new(self.value(*x).shape().to_vec(), dx).expect("dx shape");
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::Conv {
                    x,
                    w,
                    groups,
                    win,
                    act,
                    preact,
                } => {
                    let dz = self.act_backward(id, &dy, *act, preact.as_ref());
                    let (batch, c_in, h, wdim) =
                        self.value(*x).dims4().expect("conv input validated");
                    let wshape = self.value(*w).shape();
                    let (c_out, _, ky, kx) = (wshape[0], wshape[1], wshape[2], wshape[3]);
                    let (h_out, w_out) = win.out_dims(h, wdim).expect("validated on forward");
                    let g = *groups;
                    let cg_in = c_in / g;
                    let cg_out = c_out / g;
                    let k_cin = cg_in * ky * kx;
                    let hw_out = h_out * w_out;
                    let mut dw = vec![T::zero(); c_out * k_cin];
                    let mut dx = vec![T::zero(); batch * c_in * h * wdim];
                    let mut cols = vec![T::zero(); k_cin * hw_out];
                    let mut dcols = vec![T::zero(); k_cin * hw_out];
                    let xdat = self.value(*x).data();
                    let wdat = self.value(*w).data();
                    for b in 0..batch {
                        let x_sample = &xdat[b * c_in * h * wdim..(b + 1) * c_in * h * wdim];
                        for gi in 0..g {
                            let x_block =
                                &x_sample[gi * cg_in * h * wdim..(gi + 1) * cg_in * h * wdim];
                            im2col(x_block, cg_in, h, wdim, *win, h_out, w_out, &mut cols);
                            let dz_base = b * c_out * hw_out + gi * cg_out * hw_out;
                            let dz_block = &dz.data()[dz_base..dz_base + cg_out * hw_out];
                            // dW_g += dZ_g · colsᵀ
                            let cols_t = transpose(&cols, k_cin, hw_out);
                            matmul_acc(
                                &mut dw[gi * cg_out * k_cin..(gi + 1) * cg_out * k_cin],
                                dz_block,
                                &cols_t,
                                cg_out,
                                hw_out,
                                k_cin,
                            );
                            // dcols = W_gᵀ · dZ_g, scattered back to dx
                            let w_block = &wdat[gi * cg_out * k_cin..(gi + 1) * cg_out * k_cin];
                            let w_t = transpose(w_block, cg_out, k_cin);
                            for v in dcols.iter_mut() {
                                *v = T::zero();
                            }
                            matmul_acc(&mut dcols, &w_t, dz_block, k_cin, cg_out, hw_out);
                            let dx_base = b * c_in * h * wdim + gi * cg_in * h * wdim;
                            col2im_acc(
                                &dcols,
                                cg_in,
                                h,
                                wdim,
                                *win,
                                h_out,
                                w_out,
                                &mut dx[dx_base..dx_base + cg_in * h * wdim],
                            );
                        }
                    }
                    let dw = Tensor::new(wshape.to_vec(), dw).expect("dw shape");
                    self.add_adj(&mut adj, *w, dw);
                    let dx = Tensor::new(vec![batch, c_in, h, wdim], dx).expect("dx shape");
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::Activation { x, act, preact } => {
                    let dx = self.act_backward(id, &dy, *act, preact.as_ref());
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let src = self.value(*x);
                    let (_, _, h, w) = src.dims4().expect("validated");
                    let hw = h * w;
                    let hw_out = dy.shape()[2] * dy.shape()[3];
                    let mut dx = Tensor::zeros(src.shape());
                    for (bc, chunk) in dy.data().chunks(hw_out).enumerate() {
                        let plane = &mut dx.data_mut()[bc * hw..(bc + 1) * hw];
                        for (o, &g) in chunk.iter().enumerate() {
                            plane[argmax[bc * hw_out + o]] += g;
                        }
                    }
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let src = self.value(*x);
                    let (_, _, h, w) = src.dims4().expect("validated");
                    let hw = h * w;
                    let mut dx = Tensor::zeros(src.shape());
                    for (bc, &g) in dy.data().iter().enumerate() {
                        dx.data_mut()[bc * hw + argmax[bc]] += g;
                    }
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::Concat { xs } => {
                    let shape = self.value(id).shape();
                    let batch = shape[0];
                    let dim1 = shape[1];
                    let tail: usize = shape.iter().skip(2).product();
                    let mut off = 0usize;
                    for &src_id in xs {
                        let c = self.value(src_id).shape()[1];
                        let mut dx = Tensor::zeros(self.value(src_id).shape());
                        for b in 0..batch {
                            let src = &dy.data()
                                [b * dim1 * tail + off * tail..b * dim1 * tail + (off + c) * tail];
                            dx.data_mut()[b * c * tail..(b + 1) * c * tail].copy_from_slice(src);
                        }
                        off += c;
                        self.add_adj(&mut adj, src_id, dx);
                    }
                }
                Op::Select { x, rows } => {
                    let src = self.value(*x);
                    let c_in = src.shape()[1];
                    let batch = src.shape()[0];
                    let tail: usize = src.shape().iter().skip(2).product();
                    let mut dx = Tensor::zeros(src.shape());
                    for b in 0..batch {
                        for (i, &r) in rows.iter().enumerate() {
                            let g = &dy.data()
                                [(b * rows.len() + i) * tail..(b * rows.len() + i + 1) * tail];
                            let d = &mut dx.data_mut()[(b * c_in + r) * tail..(b * c_in + r + 1) * tail];
                            for (dv, &gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        }
                    }
                    self.add_adj(&mut adj, *x, dx);
                }
                Op::Identity { x } => {
                    self.add_adj(&mut adj, *x, dy);
                }
                Op::WeightedSum { weights, routes } => {
                    let wt = self.value(*weights);
                    let (batch, r) = wt.dims2().expect("validated");
                    let feat = dy.len() / batch;
                    let mut dw = Tensor::zeros(wt.shape());
                    for (j, route) in routes.iter().enumerate() {
                        let Some(v) = route else { continue };
                        let vdat = self.value(*v).data();
                        let mut dv = Tensor::zeros(self.value(*v).shape());
                        for b in 0..batch {
                            let wj = wt.data()[b * r + j];
                            let dy_s = &dy.data()[b * feat..(b + 1) * feat];
                            let v_s = &vdat[b * feat..(b + 1) * feat];
                            let dv_s = &mut dv.data_mut()[b * feat..(b + 1) * feat];
                            let mut dot = T::zero();
                            for ((dvv, &dyv), &vv) in dv_s.iter_mut().zip(dy_s).zip(v_s) {
                                *dvv += wj * dyv;
                                dot += dyv * vv;
                            }
                            dw.data_mut()[b * r + j] = dot;
                        }
                        self.add_adj(&mut adj, *v, dv);
                    }
                    self.add_adj(&mut adj, *weights, dw);
                }
                Op::PolicyMask { x, train_ok, label } => {
                    if !train_ok {
                        return Err(Error::Unsupported(format!(
                            "backward through {label} routing; only soft routing is trainable"
                        )));
                    }
                    self.add_adj(&mut adj, *x, dy);
                }
            }
        }
        Ok(())
    }

    fn add_adj(&self, adj: &mut [Option<Tensor<T>>], id: ValueId, grad: Tensor<T>) {
        match &mut adj[id] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), grad.shape());
                for (d, &s) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn act_backward(
        &self,
        id: ValueId,
        dy: &Tensor<T>,
        act: ActivationKind,
        preact: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        match act {
            ActivationKind::Identity => dy.clone(),
            ActivationKind::ReLU => {
                // subgradient at exactly 0 is 0
                let z = preact.expect("relu preactivation saved on forward");
                let mut dz = dy.clone();
                for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                    if zv <= T::zero() {
                        *d = T::zero();
                    }
                }
                dz
            }
            ActivationKind::Sigmoid => {
                let y = self.value(id);
                let mut dz = dy.clone();
                for (d, &yv) in dz.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (T::one() - yv);
                }
                dz
            }
            ActivationKind::Softmax => {
                let y = self.value(id);
                let cols = y.shape()[y.rank() - 1];
                let mut dz = dy.clone();
                for (dz_row, y_row) in dz
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                {
                    let mut dot = T::zero();
                    for (&d, &yv) in dz_row.iter().zip(y_row) {
                        dot += d * yv;
                    }
                    for (d, &yv) in dz_row.iter_mut().zip(y_row) {
                        *d = yv * (*d - dot);
                    }
                }
                dz
            }
        }
    }
}

// ── Gradient oracle ──────────────────────────────────────────────────

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn(store, record)` must evaluate the scalar loss; when `record`
/// is true it must also accumulate analytic gradients into the store.
/// Returns the max over parameter elements of
/// `|analytic - central| / max(|analytic|, |central|, eps)`.
pub fn finite_difference_check<T, F>(
    store: &mut ParamStore<T>,
    h: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>, bool) -> Result<T>,
{
    const EPS: f64 = 1e-5;
    store.zero_grads();
    let base = loss_fn(store, true)?;
    if !base.is_finite() {
        return Err(Error::Eval("loss is not finite at the base point".into()));
    }
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();
    let mut max_rel = 0.0f64;
    let step = T::from_f64(h);
    for pid in 0..store.len() {
        for e in 0..analytic[pid].len() {
            let orig = store.get(pid).value.data()[e];
            store.value_mut(pid).data_mut()[e] = orig + step;
            let plus = loss_fn(store, false)?.as_f64();
            store.value_mut(pid).data_mut()[e] = orig - step;
            let minus = loss_fn(store, false)?.as_f64();
            store.value_mut(pid).data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Eval(format!(
                    "loss not finite while perturbing parameter '{}'",
                    store.get(pid).name
                )));
            }
            let central = (plus - minus) / (2.0 * h);
            let a = analytic[pid][e];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(EPS);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
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

    #[test]
    fn fc_zero_input_relu_is_zero() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::<f64>::zeros(&[4, 4]))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3]));
        let wl = tape.leaf(&store, w);
        let y = tape.fc(x, wl, ActivationKind::ReLU).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_identity_weight_passes_input_through() {
        let mut store = ParamStore::new();
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = store.add("w", eye).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = rand_tensor(&mut rng, &[2, 3]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let wl = tape.leaf(&store, w);
        let y = tape.fc(x, wl, ActivationKind::Identity).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn fc_sigmoid_matches_scalar_loop_oracle() {
        // random x (2x3), random homogeneous P (4x4), sigmoid
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = rand_tensor(&mut rng, &[2, 3]);
        let wt = rand_tensor(&mut rng, &[4, 4]);
        let mut store = ParamStore::new();
        let w = store.add("w", wt.clone()).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let wl = tape.leaf(&store, w);
        let y = tape.fc(x, wl, ActivationKind::Sigmoid).unwrap();
        // independent scalar-loop evaluation
        for b in 0..2 {
            for o in 0..4 {
                let mut z = wt.data()[o * 4 + 3]; // homogeneous bias column
                for i in 0..3 {
                    z += wt.data()[o * 4 + i] * xt.data()[b * 3 + i];
                }
                let want = sigmoid(z);
                let got = tape.value(y).data()[b * 4 + o];
                assert!((got - want).abs() <= 1e-6, "({b},{o}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn fc_shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::<f64>::zeros(&[4, 7])).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3]));
        let wl = tape.leaf(&store, w);
        let err = tape.fc(x, wl, ActivationKind::Identity).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 7]") && msg.contains("[2, 3]"), "{msg}");
    }

    /// Naive 7-loop grouped convolution, used as the independent oracle.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        g: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (batch, c_in, h, wd) = x.dims4().unwrap();
        let ws = w.shape();
        let (c_out, cg_in, ky, kx) = (ws[0], ws[1], ws[2], ws[3]);
        let h_out = (h + 2 * pad.0 - ky) / stride.0 + 1;
        let w_out = (wd + 2 * pad.1 - kx) / stride.1 + 1;
        let cg_out = c_out / g;
        let mut out = Tensor::zeros(&[batch, c_out, h_out, w_out]);
        for b in 0..batch {
            for o in 0..c_out {
                let gi = o / cg_out;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut s = 0.0;
                        for ci in 0..cg_in {
                            let c = gi * cg_in + ci;
                            for dy in 0..ky {
                                for dx in 0..kx {
                                    let iy = (oy * stride.0 + dy) as isize - pad.0 as isize;
                                    let ix = (ox * stride.1 + dx) as isize - pad.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c_in + c) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((o * cg_in + ci) * ky + dy) * kx + dx];
                                }
                            }
                        }
                        out.data_mut()[((b * c_out + o) * h_out + oy) * w_out + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_channel_identity_passes_through() {
        // g=1, 1x1 kernel, w = channel identity
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let mut store = ParamStore::new();
        let wid = store.add("w", w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let wl = tape.leaf(&store, wid);
        let y = tape
            .conv2d(x, wl, 1, (1, 1), (0, 0), ActivationKind::Identity)
            .unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(g, c_in, c_out, k, s, p) in
            &[(1, 3, 4, 3, 1, 1), (2, 4, 6, 3, 1, 0), (3, 6, 3, 1, 2, 0), (2, 4, 4, 2, 1, 1)]
        {
            let xt = rand_tensor(&mut rng, &[2, c_in, 5, 6]);
            let wt = rand_tensor(&mut rng, &[c_out, c_in / g, k, k]);
            let mut store = ParamStore::new();
            let wid = store.add("w", wt.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(xt.clone());
            let wl = tape.leaf(&store, wid);
            let y = tape
                .conv2d(x, wl, g, (s, s), (p, p), ActivationKind::Identity)
                .unwrap();
            let want = naive_conv(&xt, &wt, g, (s, s), (p, p));
            assert_eq!(tape.value(y).shape(), want.shape());
            assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_group_locality_is_bitwise() {
        // zeroing input channels 2-3 leaves output channels 0-1 bit-identical
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = rand_tensor(&mut rng, &[1, 4, 6, 6]);
        let wt = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let mut x_zeroed = xt.clone();
        for c in 2..4 {
            for v in &mut x_zeroed.data_mut()[c * 36..(c + 1) * 36] {
                *v = 0.0;
            }
        }
        let mut store = ParamStore::new();
        let wid = store.add("w", wt).unwrap();
        let run = |input: &Tensor<f64>, store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let x = tape.input(input.clone());
            let wl = tape.leaf(store, wid);
            let y = tape
                .conv2d(x, wl, 2, (1, 1), (1, 1), ActivationKind::Identity)
                .unwrap();
            tape.value(y).clone()
        };
        let full = run(&xt, &store);
        let zeroed = run(&x_zeroed, &store);
        // output block 0 = channels 0..2
        assert_eq!(full.data()[..2 * 36], zeroed.data()[..2 * 36]);
    }

    #[test]
    fn conv_grouped_equals_masked_dense() {
        // g=2 output equals g=1 output when cross-group weights are zero
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = rand_tensor(&mut rng, &[2, 4, 5, 5]);
        let wt = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        // embed into dense weights with zeros at cross-group positions
        let mut dense = Tensor::<f64>::zeros(&[4, 4, 3, 3]);
        for o in 0..4 {
            let gi = o / 2;
            for ci in 0..2 {
                let c = gi * 2 + ci;
                for t in 0..9 {
                    dense.data_mut()[((o * 4 + c) * 9) + t] = wt.data()[(o * 2 + ci) * 9 + t];
                }
            }
        }
        let mut store = ParamStore::new();
        let wg = store.add("wg", wt).unwrap();
        let wd = store.add("wd", dense).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(xt);
        let wgl = tape.leaf(&store, wg);
        let wdl = tape.leaf(&store, wd);
        let yg = tape
            .conv2d(x, wgl, 2, (1, 1), (1, 1), ActivationKind::Identity)
            .unwrap();
        let yd = tape
            .conv2d(x, wdl, 1, (1, 1), (1, 1), ActivationKind::Identity)
            .unwrap();
        assert!(tape.value(yg).max_abs_diff(tape.value(yd)) <= 1e-6);
    }

    #[test]
    fn conv_bad_groups_is_config_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::<f64>::zeros(&[4, 1, 3, 3])).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 5, 5]));
        let wl = tape.leaf(&store, w);
        let err = tape
            .conv2d(x, wl, 2, (1, 1), (1, 1), ActivationKind::Identity)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn global_max_pool_cases() {
        let mut tape = Tape::<f64>::new();
        // constant map
        let x = tape.input(Tensor::filled(&[1, 2, 3, 3], 0.7));
        let y = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7]);
        // single pixel
        let x1 = tape.input(Tensor::from_f64(&[1, 2, 1, 1], &[3.0, -4.0]).unwrap());
        let y1 = tape.global_max_pool(x1).unwrap();
        assert_eq!(tape.value(y1).data(), &[3.0, -4.0]);
        // random vs scalar loop
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let x2 = tape.input(xt.clone());
        let y2 = tape.global_max_pool(x2).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for i in 0..16 {
                    best = best.max(xt.data()[(b * 3 + c) * 16 + i]);
                }
                assert_eq!(tape.value(y2).data()[b * 3 + c], best);
            }
        }
    }

    #[test]
    fn concat_single_operand_and_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let only = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(only).data(), &[1.0, 2.0]);
        let b = tape.input(Tensor::from_f64(&[1, 1], &[9.0]).unwrap());
        let both = tape.concat(&[b, a]).unwrap();
        assert_eq!(tape.value(both).data(), &[9.0, 1.0, 2.0]);
        let bad = tape.input(Tensor::from_f64(&[2, 1], &[0.0, 0.0]).unwrap());
        assert!(matches!(tape.concat(&[a, bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_at_minimum_is_zero() {
        // loss = 0.5 ||y - y*||^2 with y = y*: all grads zero
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wt = rand_tensor(&mut rng, &[3, 3]);
        let mut store = ParamStore::new();
        let w = store.add("w", wt).unwrap();
        let xt = rand_tensor(&mut rng, &[2, 2]);
        let mut tape = Tape::new();
        let x = tape.input(xt);
        let wl = tape.leaf(&store, w);
        let y = tape.fc(x, wl, ActivationKind::Sigmoid).unwrap();
        let zero_grad = Tensor::zeros(tape.value(y).shape()); // y - y* = 0
        tape.backward(&mut store, y, &zero_grad).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_fc_identity_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wt = rand_tensor(&mut rng, &[3, 2]);
        let xt = rand_tensor(&mut rng, &[1, 2]);
        let gt = rand_tensor(&mut rng, &[1, 3]);
        let mut store = ParamStore::new();
        let w = store.add("w", wt).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let wl = tape.leaf(&store, w);
        let y = tape.fc(x, wl, ActivationKind::Identity).unwrap();
        tape.backward(&mut store, y, &gt).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let want = gt.data()[o] * xt.data()[i];
                let got = store.get(w).grad.data()[o * 2 + i];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let err = tape
            .backward(&mut store, 0, &Tensor::zeros(&[1, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_through_hard_policy_is_unsupported() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let w = tape.input(Tensor::from_f64(&[1, 2], &[0.3, 0.7]).unwrap());
        let masked = tape.policy_mask(
            w,
            Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap(),
            false,
            "hard top-1",
        );
        let a = tape.input(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = tape.input(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
        let out = tape.weighted_sum(masked, vec![Some(a), Some(b)]).unwrap();
        let err = tape
            .backward(&mut store, out, &Tensor::filled(&[1, 2], 1.0))
            .unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    /// End-to-end gradient soundness on a small fc composite.
    #[test]
    fn finite_difference_on_two_layer_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let target = rand_tensor(&mut rng, &[3, 2]);
        let mut store = ParamStore::new();
        store.add("w1", rand_tensor(&mut rng, &[5, 5])).unwrap();
        store.add("w2", rand_tensor(&mut rng, &[2, 6])).unwrap();
        let err = finite_difference_check(&mut store, 1e-3, |store, record| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let w1 = tape.leaf(store, 0);
            let w2 = tape.leaf(store, 1);
            let h = tape.fc(xi, w1, ActivationKind::Sigmoid)?;
            let y = tape.fc(h, w2, ActivationKind::Identity)?;
            let out = tape.value(y);
            let mut loss = 0.0;
            let mut grad = Tensor::zeros(out.shape());
            for (i, (&yv, &tv)) in out.data().iter().zip(target.data()).enumerate() {
                loss += 0.5 * (yv - tv) * (yv - tv);
                grad.data_mut()[i] = yv - tv;
            }
            if record {
                tape.backward(store, y, &grad)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn finite_difference_check_trivial_cases() {
        // f(p) = p^2 at p = 3: analytic 6, central difference 6 exactly
        let mut store = ParamStore::<f64>::new();
        store
            .add("p", Tensor::from_f64(&[1], &[3.0]).unwrap())
            .unwrap();
        let err = finite_difference_check(&mut store, 1e-3, |store, record| {
            let p = store.get(0).value.data()[0];
            if record {
                let mut g = Tensor::zeros(&[1]);
                g.data_mut()[0] = 2.0 * p;
                // accumulate by hand: this loss has no tape
                for (d, &s) in store.params[0].grad.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            Ok(p * p)
        })
        .unwrap();
        assert!(err < 1e-9, "quadratic should be exact, got {err}");

        // constant function: both gradients zero
        let mut store = ParamStore::new();
        store
            .add("p", Tensor::from_f64(&[1], &[0.5]).unwrap())
            .unwrap();
        let err = finite_difference_check(&mut store, 1e-3, |_, _| Ok(4.2f64)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let mut store = ParamStore::new();
        let w = store.add("w", {
            let mut t = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
            t.data_mut()[0] = 1.0;
            t
        });
        let w = w.unwrap();
        let xt = Tensor::from_f64(&[1, 1, 2, 2], &[0.1, 0.9, 0.4, 0.2]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(xt);
        let wl = tape.leaf(&store, w);
        let c = tape
            .conv2d(x, wl, 1, (1, 1), (0, 0), ActivationKind::Identity)
            .unwrap();
        let y = tape.max_pool(c, (2, 2), (2, 2)).unwrap();
        let g = Tensor::filled(&[1, 1, 1, 1], 1.0);
        tape.backward(&mut store, y, &g).unwrap();
        // d(loss)/dw = x[argmax] = 0.9
        assert!((store.get(w).grad.data()[0] - 0.9).abs() < 1e-12);
    }
}
