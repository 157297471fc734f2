//! Mini-batch SGD training: the 1/(1+γ0λt) learning-rate schedule with
//! plateau-triggered drops, momentum, weight decay, scaled-Gaussian
//! fan-in initialization, and the supported loss functions.

use crate::data::Dataset;
use crate::forward::forward;
use crate::graph::{CompiledArch, LayerOp, NodeKind, RoutingPolicy};
use crate::tape::ParamStore;
use crate::tensor::{sigmoid, softmax_rows, Scalar, Tensor};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// ½‖y − y*‖² per sample, batch-averaged.
    SquaredError,
    /// Softmax over logits + cross-entropy against one-hot targets.
    SoftmaxCrossEntropy,
    /// Independent per-output logistic losses against 0/1 targets (used
    /// for training ensemble routers on per-route correctness).
    PerRouteLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate γ0.
    pub lr0: f64,
    /// Weight decay λ; also drives the schedule denominator.
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Plateau window in iterations: no val improvement > 0.1pp for this
    /// long triggers a schedule drop.
    pub plateau_window: usize,
    /// Learning rate divisor applied at each plateau, at most
    /// `max_drops` times.
    pub drop_factor: f64,
    pub max_drops: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Horizontal mirroring + random crops on rank-4 training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 20,
            plateau_window: 2000,
            drop_factor: 10.0,
            max_drops: 2,
            seed: 0,
            loss: LossKind::SoftmaxCrossEntropy,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.drop_factor > 1.0) {
            return Err(Error::Config("drop factor must be > 1".into()));
        }
        Ok(())
    }
}

/// Train/validation/test index sets: disjoint, together covering the
/// dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// First `n_train` samples for training, the next `n_val` for
    /// validation, the remainder for test.
    pub fn contiguous(n: usize, n_train: usize, n_val: usize) -> Result<SplitSpec> {
        if n_train + n_val > n {
            return Err(Error::Argument(format!(
                "splits {n_train}+{n_val} exceed dataset size {n}"
            )));
        }
        Ok(SplitSpec {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::Argument(format!(
                    "split index {i} out of range for dataset of {n}"
                )));
            }
            if seen[i] {
                return Err(Error::Argument(format!(
                    "split index {i} appears in more than one subset"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Argument(
                "splits must cover the whole dataset".into(),
            ));
        }
        Ok(())
    }
}

/// γ_t = γ0 (1 + γ0 λ t)⁻¹, further divided by the accumulated
/// plateau-drop factors.
pub fn learning_rate(cfg: &TrainConfig, t: u64, drops: u32) -> f64 {
    cfg.lr0 / (1.0 + cfg.lr0 * cfg.weight_decay * t as f64)
        / cfg.drop_factor.powi(drops as i32)
}

/// Batch-averaged loss and its gradient w.r.t. the network output.
pub fn loss<T: Scalar>(
    y: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<(f64, Tensor<T>)> {
    if y.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} shapes differ",
            y.shape(),
            target.shape()
        )));
    }
    if !y.all_finite() || !target.all_finite() {
        return Err(Error::Eval("loss inputs contain NaN or Inf".into()));
    }
    let batch = y.shape()[0];
    let cols = y.len() / batch;
    let inv_b = 1.0 / batch as f64;
    let inv_b_t = T::from_f64(inv_b);
    let mut grad = Tensor::zeros(y.shape());
    let mut total = 0.0f64;
    match kind {
        LossKind::SquaredError => {
            for ((&yv, &tv), g) in y
                .data()
                .iter()
                .zip(target.data())
                .zip(grad.data_mut().iter_mut())
            {
                let d = yv - tv;
                total += 0.5 * d.as_f64() * d.as_f64();
                *g = d * inv_b_t;
            }
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut probs = y.data().to_vec();
            softmax_rows(&mut probs, cols);
            for b in 0..batch {
                for c in 0..cols {
                    let p = probs[b * cols + c];
                    let t = target.data()[b * cols + c];
                    if t > T::zero() {
                        total -= t.as_f64() * p.as_f64().max(1e-300).ln();
                    }
                    grad.data_mut()[b * cols + c] = (p - t) * inv_b_t;
                }
            }
        }
        LossKind::PerRouteLogistic => {
            for ((&zv, &tv), g) in y
                .data()
                .iter()
                .zip(target.data())
                .zip(grad.data_mut().iter_mut())
            {
                let z = zv.as_f64();
                let t = tv.as_f64();
                // softplus(z) - z t, evaluated stably
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                *g = (sigmoid(zv) - tv) * inv_b_t;
            }
        }
    }
    Ok((total * inv_b, grad))
}

/// One-hot rows for integer class labels.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = T::one();
    }
    t
}

/// Scaled-Gaussian fan-in initialization: every weight element (bias
/// columns included, via the homogeneous convention) is drawn
/// N(0, sqrt(2 / fan_in)). Deterministic per seed; parameters are visited
/// in topological order.
pub fn init_params<T: Scalar>(arch: &CompiledArch, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for i in arch.param_nodes() {
        let shape = arch.plan(i).param_shape.clone().unwrap();
        let fan_in: usize = match &arch.node(i).kind {
            NodeKind::Transform {
                op: LayerOp::Conv { .. },
                ..
            } => shape[1] * shape[2] * shape[3],
            _ => shape[1],
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("std is finite");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        store
            .add(&arch.node(i).id, Tensor::new(shape, data).unwrap())
            .expect("node ids are unique");
    }
    store
}

/// Classification accuracy (argmax of the output row) over `indices`.
pub fn accuracy<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    data: &Dataset<T>,
    indices: &[usize],
    policy: &RoutingPolicy,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Argument("accuracy over an empty index set".into()));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.batch(chunk);
        let fwd = forward(arch, params, &x, policy)?;
        let out = fwd.output_tensor();
        let cols = out.len() / chunk.len();
        for (row, &i) in chunk.iter().enumerate() {
            let r = &out.data()[row * cols..(row + 1) * cols];
            let pred = argmax(r);
            if pred == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean router-weight entropy over samples (soft policy), a measure of
/// route specialization: lower means sharper routing.
pub fn router_entropy<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    data: &Dataset<T>,
    indices: &[usize],
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(256) {
        let x = data.batch(chunk);
        let fwd = forward(arch, params, &x, &RoutingPolicy::soft())?;
        for routed in &fwd.routed {
            let (b, r) = routed.weights.dims2()?;
            for row in 0..b {
                let mut h = 0.0;
                for j in 0..r {
                    let p = routed.weights.data()[row * r + j].as_f64();
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                total += h;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Argument(
            "architecture has no routers to measure".into(),
        ));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub history: Vec<EpochStats>,
    /// Iterations executed.
    pub iterations: u64,
}

/// Train against integer class labels (one-hot targets, validation metric
/// = classification accuracy).
pub fn train<T: Scalar>(
    arch: &CompiledArch,
    data: &Dataset<T>,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    data.validate()?;
    if cfg.loss == LossKind::PerRouteLogistic {
        return Err(Error::Config(
            "per-route logistic loss needs explicit targets; use train_on_targets".into(),
        ));
    }
    let out_dim: usize = {
        let plan = arch.plan(arch.output);
        plan.out_shape.iter().product()
    };
    if out_dim != data.classes {
        return Err(Error::Config(format!(
            "network emits {out_dim} outputs but the dataset has {} classes",
            data.classes
        )));
    }
    let targets = one_hot::<T>(&data.labels, data.classes);
    train_on_targets(arch, &data.images, &targets, splits, cfg)
}

/// Train against an explicit `[n, d]` target matrix. The validation
/// metric is argmax agreement for the classification losses and mean
/// thresholded agreement for the per-route logistic loss.
pub fn train_on_targets<T: Scalar>(
    arch: &CompiledArch,
    images: &Tensor<T>,
    targets: &Tensor<T>,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = images.shape()[0];
    if targets.shape()[0] != n {
        return Err(Error::Shape(format!(
            "{n} images but {} target rows",
            targets.shape()[0]
        )));
    }
    splits.validate(n)?;
    if splits.train.is_empty() {
        return Err(Error::Argument("empty training split".into()));
    }
    let feat: usize = images.shape().iter().skip(1).product();
    let tdim = targets.shape()[1];

    let mut params = init_params::<T>(arch, cfg.seed);
    let mut velocity: Vec<Tensor<T>> = params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let momentum = T::from_f64(cfg.momentum);
    let decay = T::from_f64(cfg.weight_decay);

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut t: u64 = 0;
    let mut drops: u32 = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut last_improve: u64 = 0;
    let mut order = splits.train.clone();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, tgt) = assemble_batch(images, targets, feat, tdim, chunk, cfg, &mut rng)?;
            let fwd = forward(arch, &params, &x, &RoutingPolicy::soft())?;
            if !fwd.output_tensor().all_finite() {
                return Err(Error::Eval(format!(
                    "training diverged at iteration {t}: network output is not finite"
                )));
            }
            let (batch_loss, grad) = loss(fwd.output_tensor(), &tgt, cfg.loss)?;
            if !batch_loss.is_finite() {
                return Err(Error::Eval(format!(
                    "training diverged at iteration {t}: loss is not finite"
                )));
            }
            params.zero_grads();
            fwd.backward(&mut params, &grad)?;
            let lr = T::from_f64(learning_rate(cfg, t, drops));
            for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
                for ((vv, &g), w) in v
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(p.value.data_mut().iter_mut())
                {
                    *vv = momentum * *vv + (g + decay * *w);
                    *w = *w - lr * *vv;
                }
            }
            loss_sum += batch_loss * chunk.len() as f64;
            t += 1;
        }
        let train_loss = loss_sum / splits.train.len() as f64;
        let val_acc = if splits.val.is_empty() {
            f64::NAN
        } else {
            validation_metric(arch, &params, images, targets, feat, tdim, splits, cfg)?
        };
        let lr_now = learning_rate(cfg, t, drops);
        history.push(EpochStats {
            epoch,
            train_loss,
            val_acc,
            lr: lr_now,
        });
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.5} val_acc {val_acc:.4} lr {lr_now:.6}"
        );
        // plateau: no improvement > 0.1pp within the window drops the rate
        if val_acc.is_finite() && val_acc > best_val + 1e-3 {
            best_val = val_acc;
            last_improve = t;
        } else if drops < cfg.max_drops as u32
            && cfg.plateau_window > 0
            && t.saturating_sub(last_improve) >= cfg.plateau_window as u64
        {
            drops += 1;
            last_improve = t;
            log::info!("validation plateau at iteration {t}: dropping learning rate (x{drops})");
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        iterations: t,
    })
}

#[allow(clippy::too_many_arguments)]
fn validation_metric<T: Scalar>(
    arch: &CompiledArch,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
    feat: usize,
    tdim: usize,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut agree = 0.0f64;
    for chunk in splits.val.chunks(cfg.batch_size.max(1)) {
        let x = gather_rows(images, feat, chunk);
        let fwd = forward(arch, params, &x, &RoutingPolicy::soft())?;
        let out = fwd.output_tensor();
        let cols = out.len() / chunk.len();
        for (row, &i) in chunk.iter().enumerate() {
            let y = &out.data()[row * cols..(row + 1) * cols];
            let tgt = &targets.data()[i * tdim..(i + 1) * tdim];
            match cfg.loss {
                LossKind::PerRouteLogistic => {
                    let mut ok = 0usize;
                    for (yv, tv) in y.iter().zip(tgt) {
                        let pred = sigmoid(*yv).as_f64() > 0.5;
                        if pred == (tv.as_f64() > 0.5) {
                            ok += 1;
                        }
                    }
                    agree += ok as f64 / cols as f64;
                }
                _ => {
                    if argmax(y) == argmax(tgt) {
                        agree += 1.0;
                    }
                }
            }
        }
    }
    Ok(agree / splits.val.len() as f64)
}

fn gather_rows<T: Scalar>(images: &Tensor<T>, feat: usize, idx: &[usize]) -> Tensor<T> {
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * feat);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * feat..(i + 1) * feat]);
    }
    Tensor::new(shape, data).expect("gather shape consistent")
}

fn assemble_batch<T: Scalar>(
    images: &Tensor<T>,
    targets: &Tensor<T>,
    feat: usize,
    tdim: usize,
    chunk: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut x = gather_rows(images, feat, chunk);
    if cfg.augment && images.rank() == 4 {
        let (_, c, h, w) = images.dims4()?;
        for row in 0..chunk.len() {
            let flip = rng.random_range(0..2u8) == 1;
            let dy = rng.random_range(-2i64..=2);
            let dx = rng.random_range(-2i64..=2);
            augment_sample(
                &mut x.data_mut()[row * feat..(row + 1) * feat],
                c,
                h,
                w,
                dy,
                dx,
                flip,
            );
        }
    }
    let mut tgt = Tensor::zeros(&[chunk.len(), tdim]);
    for (row, &i) in chunk.iter().enumerate() {
        tgt.data_mut()[row * tdim..(row + 1) * tdim]
            .copy_from_slice(&targets.data()[i * tdim..(i + 1) * tdim]);
    }
    Ok((x, tgt))
}

/// Shift by (dy, dx) with zero fill, then optionally mirror horizontally.
fn augment_sample<T: Scalar>(
    img: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    dy: i64,
    dx: i64,
    flip: bool,
) {
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let tx = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + tx] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    img.copy_from_slice(&out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_clusters;
    use crate::graph::{ArchSpec, NodeSpec, RouterInput, INPUT_ID};
    use crate::tensor::ActivationKind;

    fn linear_arch(in_dim: usize, classes: usize) -> CompiledArch {
        ArchSpec {
            name: "linear".into(),
            input_shape: vec![in_dim, 1, 1],
            nodes: vec![NodeSpec {
                id: "out".into(),
                kind: NodeKind::Transform {
                    op: LayerOp::Fc {
                        out_features: classes,
                        homogeneous: true,
                    },
                    act: ActivationKind::Identity,
                },
                inputs: vec![INPUT_ID.into()],
                route_tag: None,
            }],
            output: "out".into(),
        }
        .compile()
        .unwrap()
    }

    #[test]
    fn learning_rate_schedule_values() {
        let cfg = TrainConfig {
            lr0: 0.1,
            weight_decay: 1e-4,
            ..TrainConfig::default()
        };
        // t = 0
        assert!((learning_rate(&cfg, 0, 0) - 0.1).abs() < 1e-15);
        // hand arithmetic: 0.1 / (1 + 0.1 * 1e-4 * 1000) = 0.1 / 1.01
        assert!((learning_rate(&cfg, 1000, 0) - 0.1 / 1.01).abs() < 1e-12);
        // lambda = 0: constant
        let flat = TrainConfig {
            lr0: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate(&flat, 123_456, 0), 0.05);
        // drops divide
        assert!((learning_rate(&cfg, 0, 2) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn loss_reference_values() {
        // y = y*: zero loss, zero gradient
        let y = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.4]).unwrap();
        let (l, g) = loss(&y, &y, LossKind::SquaredError).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        // y = (1, 0), y* = (0, 0): L = 1/2
        let y1 = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let t1 = Tensor::<f64>::zeros(&[1, 2]);
        let (l1, _) = loss(&y1, &t1, LossKind::SquaredError).unwrap();
        assert!((l1 - 0.5).abs() < 1e-12);
        // uniform prediction over K classes: cross-entropy = ln K
        let k = 7;
        let logits = Tensor::<f64>::zeros(&[1, k]);
        let mut tgt = Tensor::<f64>::zeros(&[1, k]);
        tgt.data_mut()[3] = 1.0;
        let (lk, _) = loss(&logits, &tgt, LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((lk - (k as f64).ln()).abs() < 1e-12);
        // NaN input is an evaluation error
        let bad = Tensor::<f64>::from_f64(&[1, 1], &[f64::NAN]).unwrap();
        let t = Tensor::<f64>::zeros(&[1, 1]);
        assert!(matches!(
            loss(&bad, &t, LossKind::SquaredError),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn init_params_statistics_and_determinism() {
        // fan_in = 2 gives std exactly 1
        let arch = ArchSpec {
            name: "one".into(),
            input_shape: vec![1],
            nodes: vec![NodeSpec {
                id: "fc".into(),
                kind: NodeKind::Transform {
                    op: LayerOp::Fc {
                        out_features: 50_000,
                        homogeneous: true,
                    },
                    act: ActivationKind::Identity,
                },
                inputs: vec![INPUT_ID.into()],
                route_tag: None,
            }],
            output: "fc".into(),
        }
        .compile()
        .unwrap();
        let store = init_params::<f64>(&arch, 42);
        let w = &store.get(0).value;
        assert_eq!(w.len(), 100_000);
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        let var: f64 =
            w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!((std - 1.0).abs() < 0.02, "std {std}"); // sqrt(2/2) = 1, within 2%
        // determinism
        let again = init_params::<f64>(&arch, 42);
        assert_eq!(again.get(0).value, store.get(0).value);
        let other = init_params::<f64>(&arch, 43);
        assert_ne!(other.get(0).value, store.get(0).value);
    }

    #[test]
    fn separable_task_reaches_high_accuracy() {
        let data = gen_two_clusters::<f64>(200, 3).unwrap();
        let splits = SplitSpec::contiguous(200, 140, 30).unwrap();
        let arch = linear_arch(2, 2);
        let cfg = TrainConfig {
            lr0: 0.5,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 50,
            seed: 1,
            loss: LossKind::SoftmaxCrossEntropy,
            plateau_window: 0,
            ..TrainConfig::default()
        };
        let out = train(&arch, &data, &splits, &cfg).unwrap();
        let train_acc =
            accuracy(&arch, &out.params, &data, &splits.train, &RoutingPolicy::soft(), 64).unwrap();
        assert!(train_acc >= 0.99, "train accuracy {train_acc}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = gen_two_clusters::<f64>(40, 2).unwrap();
        let splits = SplitSpec::contiguous(40, 30, 5).unwrap();
        let arch = linear_arch(2, 2);
        let cfg = TrainConfig {
            lr0: 0.0,
            max_epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&arch, &data, &splits, &cfg).unwrap();
        let fresh = init_params::<f64>(&arch, 5);
        assert_eq!(out.params.get(0).value, fresh.get(0).value);
    }

    #[test]
    fn fixed_seed_reproduces_parameters_bitwise() {
        let data = gen_two_clusters::<f32>(80, 9).unwrap();
        let splits = SplitSpec::contiguous(80, 60, 10).unwrap();
        let arch = linear_arch(2, 2);
        let cfg = TrainConfig {
            lr0: 0.2,
            max_epochs: 5,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train(&arch, &data, &splits, &cfg).unwrap();
        let b = train(&arch, &data, &splits, &cfg).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn single_sgd_step_descends_on_smooth_net() {
        // first-order check: one tiny step on a sigmoid net lowers the
        // squared-error loss on a fixed batch
        let data = gen_two_clusters::<f64>(32, 5).unwrap();
        let arch = ArchSpec {
            name: "smooth".into(),
            input_shape: vec![2, 1, 1],
            nodes: vec![
                NodeSpec {
                    id: "h".into(),
                    kind: NodeKind::Transform {
                        op: LayerOp::Fc {
                            out_features: 4,
                            homogeneous: true,
                        },
                        act: ActivationKind::Sigmoid,
                    },
                    inputs: vec![INPUT_ID.into()],
                    route_tag: None,
                },
                NodeSpec {
                    id: "out".into(),
                    kind: NodeKind::Transform {
                        op: LayerOp::Fc {
                            out_features: 2,
                            homogeneous: true,
                        },
                        act: ActivationKind::Sigmoid,
                    },
                    inputs: vec!["h".into()],
                    route_tag: None,
                },
            ],
            output: "out".into(),
        }
        .compile()
        .unwrap();
        let mut params = init_params::<f64>(&arch, 11);
        let targets = one_hot::<f64>(&data.labels, 2);
        let eval_loss = |params: &ParamStore<f64>| -> f64 {
            let fwd = forward(&arch, params, &data.images, &RoutingPolicy::soft()).unwrap();
            loss(fwd.output_tensor(), &targets, LossKind::SquaredError)
                .unwrap()
                .0
        };
        let before = eval_loss(&params);
        // one plain gradient step, γ = 1e-5
        let fwd = forward(&arch, &params, &data.images, &RoutingPolicy::soft()).unwrap();
        let (_, grad) = loss(fwd.output_tensor(), &targets, LossKind::SquaredError).unwrap();
        params.zero_grads();
        fwd.backward(&mut params, &grad).unwrap();
        let lr = 1e-5;
        for p in params.iter_mut() {
            for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        }
        let after = eval_loss(&params);
        assert!(
            after < before,
            "descent check failed: {before} -> {after}"
        );
    }

    #[test]
    fn weight_decay_scales_weights_without_data_gradient() {
        // one momentum step from rest with zero data gradient:
        // v = λθ, θ' = θ - γλθ = θ(1 - γλ)
        let arch = linear_arch(2, 2);
        let cfg = TrainConfig {
            lr0: 0.1,
            weight_decay: 0.01,
            momentum: 0.9,
            ..TrainConfig::default()
        };
        let params = init_params::<f64>(&arch, 3);
        let w0 = params.get(0).value.clone();
        let lr = learning_rate(&cfg, 0, 0);
        let mut p = params.clone();
        let zero_grad = Tensor::<f64>::zeros(w0.shape());
        let mut velocity = Tensor::<f64>::zeros(w0.shape());
        for ((vv, &g), w) in velocity
            .data_mut()
            .iter_mut()
            .zip(zero_grad.data())
            .zip(p.value_mut(0).data_mut().iter_mut())
        {
            *vv = 0.9 * *vv + (g + cfg.weight_decay * *w);
            *w -= lr * *vv;
        }
        for (&got, &orig) in p.get(0).value.data().iter().zip(w0.data()) {
            let step_form = orig - lr * (cfg.weight_decay * orig);
            assert_eq!(got, step_form);
            let algebraic = orig * (1.0 - lr * cfg.weight_decay);
            assert!((got - algebraic).abs() <= 1e-15 * algebraic.abs().max(1.0));
        }
    }

    #[test]
    fn router_entropy_decreases_as_routes_specialize() {
        let data = gen_two_clusters::<f64>(240, 17).unwrap();
        let splits = SplitSpec::contiguous(240, 200, 20).unwrap();
        let arch = ArchSpec {
            name: "routed".into(),
            input_shape: vec![2, 1, 1],
            nodes: vec![
                NodeSpec {
                    id: "router".into(),
                    kind: NodeKind::Router {
                        routes: 2,
                        input: RouterInput::Pooled,
                    },
                    inputs: vec![INPUT_ID.into()],
                    route_tag: None,
                },
                NodeSpec {
                    id: "r0".into(),
                    kind: NodeKind::Transform {
                        op: LayerOp::Fc {
                            out_features: 2,
                            homogeneous: true,
                        },
                        act: ActivationKind::Sigmoid,
                    },
                    inputs: vec![INPUT_ID.into()],
                    route_tag: Some((0, 0)),
                },
                NodeSpec {
                    id: "r1".into(),
                    kind: NodeKind::Transform {
                        op: LayerOp::Fc {
                            out_features: 2,
                            homogeneous: true,
                        },
                        act: ActivationKind::Sigmoid,
                    },
                    inputs: vec![INPUT_ID.into()],
                    route_tag: Some((0, 1)),
                },
                NodeSpec {
                    id: "merge".into(),
                    kind: NodeKind::Identity,
                    inputs: vec!["router".into(), "r0".into(), "r1".into()],
                    route_tag: None,
                },
            ],
            output: "merge".into(),
        }
        .compile()
        .unwrap();
        let cfg = TrainConfig {
            lr0: 0.8,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 1,
            seed: 2,
            loss: LossKind::SquaredError,
            plateau_window: 0,
            ..TrainConfig::default()
        };
        let one = train(&arch, &data, &splits, &cfg).unwrap();
        let h1 = router_entropy(&arch, &one.params, &data, &splits.train).unwrap();
        let cfg_full = TrainConfig {
            max_epochs: 40,
            ..cfg
        };
        let full = train(&arch, &data, &splits, &cfg_full).unwrap();
        let h_final = router_entropy(&arch, &full.params, &data, &splits.train).unwrap();
        assert!(
            h_final < h1,
            "router entropy should drop: epoch1 {h1} vs final {h_final}"
        );
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let data = gen_two_clusters::<f32>(64, 13).unwrap();
        let splits = SplitSpec::contiguous(64, 48, 8).unwrap();
        let arch = linear_arch(2, 2);
        let cfg = TrainConfig {
            lr0: 1e18, // guaranteed blow-up
            weight_decay: 0.0,
            max_epochs: 30,
            loss: LossKind::SquaredError,
            ..TrainConfig::default()
        };
        let err = train(&arch, &data, &splits, &cfg).unwrap_err();
        assert!(matches!(err, Error::Eval(m) if m.contains("diverged")));
    }

    #[test]
    fn split_spec_validation() {
        let s = SplitSpec::contiguous(10, 6, 2).unwrap();
        assert!(s.validate(10).is_ok());
        let overlapping = SplitSpec {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert!(overlapping.validate(3).is_err());
        let gap = SplitSpec {
            train: vec![0],
            val: vec![1],
            test: vec![],
        };
        assert!(gap.validate(3).is_err());
    }
}
