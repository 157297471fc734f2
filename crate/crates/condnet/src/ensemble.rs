//! Explicitly-routed ensembles of pretrained experts: a trainable router
//! predicts per-route correctness, inference escalates from cheap to
//! expensive experts until the prediction is trusted, and swept operating
//! thresholds trace an amortized error/cost curve.

use crate::cost::{static_report, CurvePoint};
use crate::data::Dataset;
use crate::forward::forward;
use crate::graph::{ArchSpec, CompiledArch, RoutingPolicy};
use crate::tape::ParamStore;
use crate::tensor::{sigmoid, softmax_rows, Scalar, Tensor};
use crate::train::{argmax, train_on_targets, EpochStats, SplitSpec, TrainConfig};
use crate::{Error, Result};
use rayon::prelude::*;

/// A frozen, pretrained component network. Cost is its full static MAC
/// count times the crop-averaging factor.
pub struct Expert<T> {
    pub name: String,
    pub arch: CompiledArch,
    pub params: ParamStore<T>,
    /// Test-time oversampling analog: average the posterior over this
    /// many deterministic crops/flips (1 = none, up to 10).
    pub crop_factor: usize,
}

impl<T: Scalar> Expert<T> {
    pub fn new(
        name: &str,
        arch: CompiledArch,
        params: ParamStore<T>,
        crop_factor: usize,
    ) -> Result<Self> {
        if crop_factor == 0 || crop_factor > 10 {
            return Err(Error::Config(format!(
                "crop factor must be in 1..=10, got {crop_factor}"
            )));
        }
        Ok(Expert {
            name: name.to_string(),
            arch,
            params,
            crop_factor,
        })
    }

    /// Per-inference MACs, oversampling included.
    pub fn macs(&self) -> u64 {
        static_report(&self.arch).total_macs * self.crop_factor as u64
    }

    /// Class posterior: softmax over the expert's logits, averaged over
    /// the deterministic crop/flip variants when `crop_factor > 1`.
    pub fn posterior(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = x.shape()[0];
        let mut acc: Option<Tensor<T>> = None;
        for v in 0..self.crop_factor {
            let variant = crop_variant(x, v)?;
            let fwd = forward(&self.arch, &self.params, &variant, &RoutingPolicy::soft())?;
            let out = fwd.output_tensor();
            let cols = out.len() / batch;
            let mut probs = out.data().to_vec();
            softmax_rows(&mut probs, cols);
            let probs = Tensor::new(vec![batch, cols], probs)?;
            acc = Some(match acc {
                None => probs,
                Some(mut a) => {
                    for (av, &pv) in a.data_mut().iter_mut().zip(probs.data()) {
                        *av += pv;
                    }
                    a
                }
            });
        }
        let mut mean = acc.expect("crop_factor >= 1");
        let inv = T::from_f64(1.0 / self.crop_factor as f64);
        for v in mean.data_mut() {
            *v *= inv;
        }
        Ok(mean)
    }

    /// Standalone operating point on `indices`: (error, MACs).
    pub fn operating_point(&self, data: &Dataset<T>, indices: &[usize]) -> Result<(f64, u64)> {
        let mut correct = 0usize;
        for chunk in indices.chunks(256) {
            let x = data.batch(chunk);
            let p = self.posterior(&x)?;
            let cols = p.len() / chunk.len();
            for (row, &i) in chunk.iter().enumerate() {
                if argmax(&p.data()[row * cols..(row + 1) * cols]) == data.labels[i] {
                    correct += 1;
                }
            }
        }
        Ok((1.0 - correct as f64 / indices.len() as f64, self.macs()))
    }
}

/// Deterministic crop/flip variant `v`: 0 is the image itself, 1-4 are
/// one-pixel shifts, 5-9 mirror variants 0-4.
fn crop_variant<T: Scalar>(x: &Tensor<T>, v: usize) -> Result<Tensor<T>> {
    if v == 0 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4().map_err(|_| {
        Error::Config("crop averaging needs [batch, c, h, w] inputs".into())
    })?;
    let flip = v >= 5;
    let (dy, dx): (i64, i64) = match v % 5 {
        0 => (0, 0),
        1 => (0, 1),
        2 => (0, -1),
        3 => (1, 0),
        _ => (-1, 0),
    };
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as i64 + dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let tx = if flip { w - 1 - xx } else { xx };
                    out.data_mut()[((i * c + ch) * h + y) * w + tx] =
                        x.data()[((i * c + ch) * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Experts plus the router that arbitrates among them. Experts are kept
/// in increasing-cost order; inference escalates along that order.
pub struct Ensemble<T> {
    pub experts: Vec<Expert<T>>,
    pub router_arch: CompiledArch,
    pub router_params: Option<ParamStore<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(mut experts: Vec<Expert<T>>, router: &ArchSpec) -> Result<Self> {
        if experts.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs >= 2 experts, got {}",
                experts.len()
            )));
        }
        let router_arch = router.compile()?;
        let out_dim: usize = router_arch
            .plan(router_arch.output)
            .out_shape
            .iter()
            .product();
        if out_dim != experts.len() {
            return Err(Error::Config(format!(
                "router emits {out_dim} scores but the ensemble has {} experts",
                experts.len()
            )));
        }
        experts.sort_by_key(|e| e.macs());
        Ok(Ensemble {
            experts,
            router_arch,
            router_params: None,
        })
    }

    pub fn router_macs(&self) -> u64 {
        static_report(&self.router_arch).total_macs
    }
}

/// Per-image, per-expert 0/1 correctness labels (each expert evaluated
/// once over the dataset). Column order follows the ensemble's
/// cost-sorted expert order.
pub fn correctness_labels<T: Scalar>(
    experts: &[Expert<T>],
    data: &Dataset<T>,
) -> Result<Tensor<T>> {
    data.validate()?;
    let n = data.len();
    let r = experts.len();
    let mut labels = Tensor::zeros(&[n, r]);
    let all: Vec<usize> = (0..n).collect();
    for (j, expert) in experts.iter().enumerate() {
        for chunk in all.chunks(256) {
            let x = data.batch(chunk);
            let p = expert.posterior(&x)?;
            let cols = p.len() / chunk.len();
            for (row, &i) in chunk.iter().enumerate() {
                if argmax(&p.data()[row * cols..(row + 1) * cols]) == data.labels[i] {
                    labels.data_mut()[i * r + j] = T::one();
                }
            }
        }
    }
    Ok(labels)
}

/// Train the router to predict each route's correctness for each image
/// (per-route logistic loss). Expert parameters are untouched; the loss
/// only ever reaches the router.
pub fn train_router<T: Scalar>(
    ensemble: &mut Ensemble<T>,
    data: &Dataset<T>,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    let labels = correctness_labels(&ensemble.experts, data)?;
    let mut cfg = *cfg;
    cfg.loss = crate::train::LossKind::PerRouteLogistic;
    let out = train_on_targets(&ensemble.router_arch, &data.images, &labels, splits, &cfg)?;
    ensemble.router_params = Some(out.params);
    Ok(out.history)
}

/// Outcome of routed inference on one sample.
#[derive(Debug, Clone)]
pub struct RoutedPrediction<T> {
    pub posterior: Tensor<T>,
    pub visited: Vec<bool>,
    /// Realized MACs: visited experts plus the router when it ran.
    pub macs: u64,
}

/// Evaluate one sample at operating threshold `theta`.
///
/// The cheapest expert always runs. While the router's best predicted
/// correctness among visited experts stays below `theta`, the next
/// cheapest expert is added. `theta <= 0` never escalates and skips the
/// router entirely, reproducing the cheap expert's operating point
/// exactly; `theta >= 1` visits everyone. Visited posteriors are combined
/// with renormalized router scores.
pub fn route_and_predict<T: Scalar>(
    ensemble: &Ensemble<T>,
    x: &Tensor<T>,
    theta: f64,
) -> Result<RoutedPrediction<T>> {
    if x.shape()[0] != 1 {
        return Err(Error::Argument(
            "route_and_predict evaluates one sample at a time".into(),
        ));
    }
    let r = ensemble.experts.len();
    let mut visited = vec![false; r];
    visited[0] = true;
    if theta <= 0.0 {
        let posterior = ensemble.experts[0].posterior(x)?;
        return Ok(RoutedPrediction {
            posterior,
            visited,
            macs: ensemble.experts[0].macs(),
        });
    }
    let router_params = ensemble
        .router_params
        .as_ref()
        .ok_or_else(|| Error::State("router has not been trained".into()))?;
    let fwd = forward(
        &ensemble.router_arch,
        router_params,
        x,
        &RoutingPolicy::soft(),
    )?;
    let logits = fwd.output_tensor();
    let q: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z).as_f64()).collect();
    // escalate while the best trusted score stays under theta; the clamp
    // keeps theta = 1 visiting everyone even if a sigmoid saturates
    let mut best = q[0].min(1.0 - 1e-12);
    let mut next = 1usize;
    while best < theta && next < r {
        visited[next] = true;
        best = best.max(q[next].min(1.0 - 1e-12));
        next += 1;
    }
    // combine visited posteriors, weighted by renormalized router scores
    let mut weight_sum = 0.0;
    for j in 0..r {
        if visited[j] {
            weight_sum += q[j];
        }
    }
    let visited_count = visited.iter().filter(|&&v| v).count();
    let mut posterior: Option<Tensor<T>> = None;
    let mut macs = ensemble.router_macs();
    for j in 0..r {
        if !visited[j] {
            continue;
        }
        let w = if weight_sum > 0.0 {
            q[j] / weight_sum
        } else {
            1.0 / visited_count as f64
        };
        let wt = T::from_f64(w);
        let p = ensemble.experts[j].posterior(x)?;
        macs += ensemble.experts[j].macs();
        posterior = Some(match posterior {
            None => {
                let mut p0 = p;
                for v in p0.data_mut() {
                    *v *= wt;
                }
                p0
            }
            Some(mut acc) => {
                for (a, &pv) in acc.data_mut().iter_mut().zip(p.data()) {
                    *a += wt * pv;
                }
                acc
            }
        });
    }
    Ok(RoutedPrediction {
        posterior: posterior.expect("at least the cheap expert is visited"),
        visited,
        macs,
    })
}

/// The trivial random-mixing baseline between two operating points:
/// picking network A with probability 1-p and B with p gives the straight
/// segment between their (error, cost) points.
pub fn baseline_curve(
    a: (f64, u64),
    b: (f64, u64),
    grid: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::Argument("baseline grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|&p| {
            (
                p,
                (1.0 - p) * a.0 + p * b.0,
                (1.0 - p) * a.1 as f64 + p * b.1 as f64,
            )
        })
        .collect())
}

/// Amortized (error, cost) across `indices` for each operating threshold.
pub fn sweep_curve<T: Scalar>(
    ensemble: &Ensemble<T>,
    data: &Dataset<T>,
    indices: &[usize],
    grid: &[f64],
) -> Result<Vec<(f64, CurvePoint)>> {
    if grid.is_empty() {
        return Err(Error::Argument("operating-threshold grid is empty".into()));
    }
    if indices.is_empty() {
        return Err(Error::Argument("sweep over an empty index set".into()));
    }
    let model_size: u64 = ensemble
        .experts
        .iter()
        .map(|e| static_report(&e.arch).total_params)
        .sum::<u64>()
        + static_report(&ensemble.router_arch).total_params;
    let feat: usize = data.images.shape().iter().skip(1).product();
    let mut sample_shape = vec![1usize];
    sample_shape.extend_from_slice(&data.images.shape()[1..]);
    let mut out = Vec::with_capacity(grid.len());
    for &theta in grid {
        // per-image results are independent; integer reduction keeps the
        // sweep bit-identical for any thread count
        let per_image: Vec<(bool, u64)> = indices
            .par_iter()
            .map(|&i| -> Result<(bool, u64)> {
                let x = Tensor::new(
                    sample_shape.clone(),
                    data.images.data()[i * feat..(i + 1) * feat].to_vec(),
                )?;
                let pred = route_and_predict(ensemble, &x, theta)?;
                let wrong = argmax(pred.posterior.data()) != data.labels[i];
                Ok((wrong, pred.macs))
            })
            .collect::<Result<Vec<_>>>()?;
        let errors = per_image.iter().filter(|&&(wrong, _)| wrong).count();
        let cost_sum: u64 = per_image.iter().map(|&(_, m)| m).sum();
        out.push((
            theta,
            CurvePoint {
                error: errors as f64 / indices.len() as f64,
                expected_cost: cost_sum as f64 / indices.len() as f64,
                model_size,
            },
        ));
    }
    Ok(out)
}
