//! Size-normalized architecture search over per-layer route counts and
//! filter counts, with exhaustive and seeded-random drivers.

use crate::cost::{param_count, static_report};
use crate::data::Dataset;
use crate::graph::{ArchSpec, LayerOp, NodeKind, RoutingPolicy};
use crate::tape::ParamStore;
use crate::tensor::Scalar;
use crate::train::{accuracy, train, SplitSpec, TrainConfig};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Size-normalized accuracy α = accuracy / model size.
pub fn alpha(accuracy: f64, size: u64) -> Result<f64> {
    if size == 0 {
        return Err(Error::Argument(
            "size-normalized accuracy needs size > 0".into(),
        ));
    }
    Ok(accuracy / size as f64)
}

/// Searchable degrees of freedom of one layer (a named transform node of
/// the base architecture). Route counts map onto conv filter groups;
/// filter counts scale the layer width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDomain {
    pub node: String,
    /// Candidate route counts R_l (conv nodes only; use `[1]` for fc).
    pub routes: Vec<usize>,
    /// Candidate filter/feature counts F_l.
    pub filters: Vec<usize>,
}

/// A parametrized family: a base architecture plus per-layer domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub base: ArchSpec,
    pub layers: Vec<LayerDomain>,
}

/// One point of the family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub config_id: usize,
    pub routes: Vec<usize>,
    pub filters: Vec<usize>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("search space has no layer domains".into()));
        }
        for d in &self.layers {
            if d.routes.is_empty() || d.filters.is_empty() {
                return Err(Error::Argument(format!(
                    "layer domain '{}' is empty",
                    d.node
                )));
            }
            let node = self
                .base
                .nodes
                .iter()
                .find(|n| n.id == d.node)
                .ok_or_else(|| {
                    Error::Argument(format!("layer domain '{}' not in base arch", d.node))
                })?;
            match &node.kind {
                NodeKind::Transform {
                    op: LayerOp::Conv { .. },
                    ..
                } => {}
                NodeKind::Transform {
                    op: LayerOp::Fc { .. },
                    ..
                } if d.routes == [1] => {}
                _ => {
                    return Err(Error::Argument(format!(
                        "layer domain '{}' must name a conv node (or an fc node with \
                         routes fixed to [1])",
                        d.node
                    )))
                }
            }
        }
        Ok(())
    }

    /// Apply a configuration: per named layer, set the filter count and
    /// (for conv) the group count.
    pub fn realize(&self, routes: &[usize], filters: &[usize]) -> Result<ArchSpec> {
        let mut spec = self.base.clone();
        for (li, d) in self.layers.iter().enumerate() {
            let node = spec
                .nodes
                .iter_mut()
                .find(|n| n.id == d.node)
                .expect("validated domain node");
            match &mut node.kind {
                NodeKind::Transform {
                    op:
                        LayerOp::Conv {
                            out_channels,
                            groups,
                            ..
                        },
                    ..
                } => {
                    *out_channels = filters[li];
                    *groups = routes[li];
                }
                NodeKind::Transform {
                    op: LayerOp::Fc { out_features, .. },
                    ..
                } => {
                    *out_features = filters[li];
                }
                _ => unreachable!("validated domain node kind"),
            }
        }
        Ok(spec)
    }

    /// Deterministic enumeration of every valid configuration (layer-major
    /// cartesian product; combinations whose grouping does not divide the
    /// channel counts are skipped).
    pub fn enumerate(&self) -> Result<Vec<(Candidate, ArchSpec)>> {
        self.validate()?;
        let mut out = Vec::new();
        let per_layer: Vec<Vec<(usize, usize)>> = self
            .layers
            .iter()
            .map(|d| {
                let mut combos = Vec::new();
                for &r in &d.routes {
                    for &f in &d.filters {
                        combos.push((r, f));
                    }
                }
                combos
            })
            .collect();
        let mut cursor = vec![0usize; per_layer.len()];
        let mut config_id = 0usize;
        loop {
            let routes: Vec<usize> = cursor
                .iter()
                .zip(&per_layer)
                .map(|(&c, combos)| combos[c].0)
                .collect();
            let filters: Vec<usize> = cursor
                .iter()
                .zip(&per_layer)
                .map(|(&c, combos)| combos[c].1)
                .collect();
            let spec = self.realize(&routes, &filters)?;
            if spec.compile().is_ok() {
                out.push((
                    Candidate {
                        config_id,
                        routes,
                        filters,
                    },
                    spec,
                ));
                config_id += 1;
            }
            // odometer increment, last layer fastest
            let mut k = per_layer.len();
            loop {
                if k == 0 {
                    if out.is_empty() {
                        return Err(Error::Argument(
                            "search space contains no valid configuration".into(),
                        ));
                    }
                    return Ok(out);
                }
                k -= 1;
                cursor[k] += 1;
                if cursor[k] < per_layer[k].len() {
                    break;
                }
                cursor[k] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    Exhaustive,
    Random { seed: u64, budget: usize },
}

/// One evaluated configuration, ready for ranking and CSV emission.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub config_id: usize,
    pub routes: Vec<usize>,
    pub filters: Vec<usize>,
    pub accuracy: f64,
    pub params: u64,
    pub macs: u64,
    pub alpha: f64,
}

/// Run the driver over the space, scoring configurations with `eval`
/// (which returns test accuracy in [0, 1]). Results come back sorted by α
/// descending, ties broken by configuration order.
pub fn search<F>(space: &SearchSpace, driver: Driver, mut eval: F) -> Result<Vec<SearchResult>>
where
    F: FnMut(&ArchSpec, &Candidate) -> Result<f64>,
{
    let all = space.enumerate()?;
    let picked: Vec<usize> = match driver {
        Driver::Exhaustive => (0..all.len()).collect(),
        Driver::Random { seed, budget } => {
            let budget = if budget > all.len() {
                log::warn!(
                    "random search budget {budget} exceeds space size {}; clamping",
                    all.len()
                );
                all.len()
            } else if budget == 0 {
                return Err(Error::Argument("random search budget must be >= 1".into()));
            } else {
                budget
            };
            let mut idx: Vec<usize> = (0..all.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(budget);
            idx.sort_unstable();
            idx
        }
    };
    let mut results = Vec::with_capacity(picked.len());
    for i in picked {
        let (cand, spec) = &all[i];
        let compiled = spec.compile()?;
        let acc = eval(spec, cand)?;
        let size = param_count(&compiled);
        let report = static_report(&compiled);
        results.push(SearchResult {
            config_id: cand.config_id,
            routes: cand.routes.clone(),
            filters: cand.filters.clone(),
            accuracy: acc,
            params: size,
            macs: report.total_macs,
            alpha: alpha(acc, size)?,
        });
    }
    results.sort_by(|a, b| {
        b.alpha
            .partial_cmp(&a.alpha)
            .expect("alpha is finite")
            .then(a.config_id.cmp(&b.config_id))
    });
    Ok(results)
}

/// The standard train-and-score function: train on the fixed splits, then
/// report test accuracy. Each configuration trains from its own seed
/// (`cfg.seed + config_id`) so runs are independent and reproducible.
pub fn train_and_score<T: Scalar>(
    spec: &ArchSpec,
    cand: &Candidate,
    data: &Dataset<T>,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let compiled = spec.compile()?;
    let mut cfg = *cfg;
    cfg.seed = cfg.seed.wrapping_add(cand.config_id as u64);
    let out = train(&compiled, data, splits, &cfg)?;
    accuracy(
        &compiled,
        &out.params,
        data,
        &splits.test,
        &RoutingPolicy::soft(),
        cfg.batch_size,
    )
}

/// Trained-and-scored artifacts a caller may want alongside the ranking.
pub struct ScoredParams<T> {
    pub params: ParamStore<T>,
    pub accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{micro_convnet, ConvLayer};

    fn toy_space() -> SearchSpace {
        let base = micro_convnet(
            "base",
            [4, 8, 8],
            4,
            &[ConvLayer::new(8, 3, 1, Some(2)), ConvLayer::new(8, 3, 1, None)],
        );
        SearchSpace {
            base,
            layers: vec![
                LayerDomain {
                    node: "conv1".into(),
                    routes: vec![1],
                    filters: vec![16, 8, 4],
                },
                LayerDomain {
                    node: "conv2".into(),
                    routes: vec![1, 2, 4],
                    filters: vec![8],
                },
            ],
        }
    }

    #[test]
    fn alpha_reference_values() {
        assert_eq!(alpha(0.5, 10).unwrap(), 0.05);
        // doubling size at equal accuracy halves alpha
        let a1 = alpha(0.7, 1000).unwrap();
        let a2 = alpha(0.7, 2000).unwrap();
        assert!((a1 - 2.0 * a2).abs() < 1e-18);
        // hand division
        let a = alpha(0.843, 966_986).unwrap();
        assert!((a - 8.717809771806417e-07).abs() < 1e-19);
        assert!(matches!(alpha(0.5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn enumerate_is_a_cartesian_product_of_valid_configs() {
        let space = toy_space();
        let all = space.enumerate().unwrap();
        // 3 filter choices x 3 route choices, all divisible here
        assert_eq!(all.len(), 9);
        // deterministic ordering: last layer varies fastest
        assert_eq!(all[0].0.filters, vec![16, 8]);
        assert_eq!(all[0].0.routes, vec![1, 1]);
        assert_eq!(all[1].0.routes, vec![1, 2]);
        for (_, spec) in &all {
            spec.compile().unwrap();
        }
    }

    #[test]
    fn enumerate_filters_nondivisible_groupings() {
        let mut space = toy_space();
        // conv1 width 2 with conv2 grouped by 4 cannot divide channels
        space.layers[0].filters = vec![2];
        space.layers[1].routes = vec![4, 1];
        let all = space.enumerate().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].0.routes, vec![1, 1]);
    }

    #[test]
    fn single_point_domains_reproduce_the_base() {
        let space = SearchSpace {
            base: toy_space().base,
            layers: vec![LayerDomain {
                node: "conv1".into(),
                routes: vec![1],
                filters: vec![8],
            }],
        };
        let all = space.enumerate().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].1, space.base);
    }

    #[test]
    fn exhaustive_matches_bruteforce_argmax() {
        let space = toy_space();
        // synthetic accuracy: richer configs do better, groups cost a bit
        let score = |routes: &[usize], filters: &[usize]| -> f64 {
            let f: usize = filters.iter().sum();
            let r: usize = routes.iter().sum();
            (0.3 + 0.02 * f as f64 - 0.01 * r as f64).min(0.99)
        };
        let ranked = search(&space, Driver::Exhaustive, |_, cand| {
            Ok(score(&cand.routes, &cand.filters))
        })
        .unwrap();
        // independent brute force over the same enumeration
        let mut best: Option<(f64, usize)> = None;
        for (cand, spec) in space.enumerate().unwrap() {
            let compiled = spec.compile().unwrap();
            let a = score(&cand.routes, &cand.filters) / param_count(&compiled) as f64;
            match best {
                Some((ba, _)) if ba >= a => {}
                _ => best = Some((a, cand.config_id)),
            }
        }
        let (best_alpha, best_id) = best.unwrap();
        assert_eq!(ranked[0].config_id, best_id);
        assert!((ranked[0].alpha - best_alpha).abs() < 1e-18);
    }

    #[test]
    fn random_with_full_budget_covers_the_space() {
        let space = toy_space();
        let eval = |_: &ArchSpec, cand: &Candidate| Ok(0.5 + 0.001 * cand.config_id as f64);
        let exhaustive = search(&space, Driver::Exhaustive, eval).unwrap();
        let random = search(
            &space,
            Driver::Random {
                seed: 3,
                budget: 9,
            },
            eval,
        )
        .unwrap();
        let mut a: Vec<usize> = exhaustive.iter().map(|r| r.config_id).collect();
        let mut b: Vec<usize> = random.iter().map(|r| r.config_id).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // over-budget clamps instead of failing
        let clamped = search(
            &space,
            Driver::Random {
                seed: 3,
                budget: 99,
            },
            eval,
        )
        .unwrap();
        assert_eq!(clamped.len(), 9);
    }

    #[test]
    fn dominant_config_ranks_first() {
        // one config strictly more accurate and strictly smaller
        let space = SearchSpace {
            base: toy_space().base,
            layers: vec![LayerDomain {
                node: "conv1".into(),
                routes: vec![1],
                filters: vec![8, 2],
            }],
        };
        let ranked = search(&space, Driver::Exhaustive, |_, cand| {
            Ok(if cand.filters[0] == 2 { 0.9 } else { 0.6 })
        })
        .unwrap();
        assert_eq!(ranked[0].filters, vec![2]);
    }
}
