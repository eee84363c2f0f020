//! Proxy clustering of neurons that share an input vector.
//!
//! Every neuron points at the peer whose weight vector makes the smallest
//! angle with its own. Nodes are then taken greedily by current indegree:
//! the chosen node becomes a proxy and the remaining nodes pointing at it
//! become its members. Ties (equal angle, equal indegree) go to the lower
//! index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::angle_from_cos;
use crate::model::QuantModel;

/// Closest-neighbour graph of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleGraph {
    /// Outgoing edge per node; `None` for zero-norm neurons or when fewer
    /// than two neurons are usable.
    pub edges: Vec<Option<usize>>,
    /// Angle in degrees to the edge target (`NaN` without an edge).
    pub angles: Vec<f64>,
    pub indegree: Vec<usize>,
}

impl AngleGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Histogram of closest-neighbour angles in 10-degree bins.
    pub fn angle_histogram(&self) -> [u64; 18] {
        let mut h = [0u64; 18];
        for &a in self.angles.iter().filter(|a| !a.is_nan()) {
            h[((a / 10.0) as usize).min(17)] += 1;
        }
        h
    }
}

/// Builds the graph over `neurons` rows of `row_len` int8 weights.
pub fn build_angle_graph(weights: &[i8], row_len: usize) -> AngleGraph {
    let n = weights.len().checked_div(row_len).unwrap_or(0);
    let rows: Vec<&[i8]> = (0..n).map(|i| &weights[i * row_len..(i + 1) * row_len]).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| (r.iter().map(|&w| (w as i64) * (w as i64)).sum::<i64>() as f64).sqrt())
        .collect();
    let valid: Vec<usize> = (0..n).filter(|&i| norms[i] > 0.0).collect();
    let mut graph = AngleGraph {
        edges: vec![None; n],
        angles: vec![f64::NAN; n],
        indegree: vec![0; n],
    };
    if valid.len() < 2 {
        return graph;
    }
    let closest: Vec<(usize, usize, f64)> = valid
        .par_iter()
        .map(|&i| {
            let mut best: Option<(usize, f64)> = None;
            for &j in &valid {
                if j == i {
                    continue;
                }
                let dot: i64 = rows[i].iter().zip(rows[j]).map(|(&a, &b)| a as i64 * b as i64).sum();
                let cos = dot as f64 / (norms[i] * norms[j]);
                // Strictly larger cosine wins, so ties stay with the lower index.
                if best.is_none_or(|(_, c)| cos > c) {
                    best = Some((j, cos));
                }
            }
            let (j, cos) = best.expect("at least two valid neurons");
            (i, j, angle_from_cos(cos))
        })
        .collect();
    for (i, j, angle) in closest {
        graph.edges[i] = Some(j);
        graph.angles[i] = angle;
        graph.indegree[j] += 1;
    }
    graph
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cluster {
    pub proxy: usize,
    /// Ascending original indices.
    pub members: Vec<usize>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Proxy/member/singleton partition of one layer's neurons.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerClusters {
    pub neurons: usize,
    /// In selection order.
    pub clusters: Vec<Cluster>,
    /// Ascending; always evaluated, never predicted.
    pub singletons: Vec<usize>,
}

/// How a neuron takes part in prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Proxy { cluster: usize },
    Member { cluster: usize, proxy: usize },
    Singleton,
}

impl LayerClusters {
    pub fn all_singletons(neurons: usize) -> Self {
        LayerClusters {
            neurons,
            clusters: Vec::new(),
            singletons: (0..neurons).collect(),
        }
    }

    pub fn member_count(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    /// Role of every neuron, indexed by original position.
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Singleton; self.neurons];
        for (ci, c) in self.clusters.iter().enumerate() {
            roles[c.proxy] = Role::Proxy { cluster: ci };
            for &m in &c.members {
                roles[m] = Role::Member {
                    cluster: ci,
                    proxy: c.proxy,
                };
            }
        }
        roles
    }

    /// Storage order: proxies in cluster order, then singletons (the proxy
    /// table), then members grouped by cluster (the member table).
    pub fn storage_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = self.clusters.iter().map(|c| c.proxy).collect();
        order.extend(&self.singletons);
        for c in &self.clusters {
            order.extend(&c.members);
        }
        order
    }

    /// Checks that proxies, members and singletons cover every neuron once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.neurons];
        let mut mark = |i: usize| -> Result<()> {
            match seen.get_mut(i) {
                Some(s) if !*s => {
                    *s = true;
                    Ok(())
                }
                Some(_) => Err(Error::config(format!("neuron {i} appears twice in cluster plan"))),
                None => Err(Error::config(format!("neuron {i} out of range in cluster plan"))),
            }
        };
        for c in &self.clusters {
            if c.members.is_empty() {
                return Err(Error::config(format!("proxy {} has no members", c.proxy)));
            }
            mark(c.proxy)?;
            for &m in &c.members {
                mark(m)?;
            }
        }
        for &s in &self.singletons {
            mark(s)?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!("neuron {missing} missing from cluster plan")));
        }
        Ok(())
    }
}

/// Greedy indegree clustering. With `max_angle`, edges longer than the
/// cutoff are dropped so those nodes can never be members.
pub fn build_clusters(graph: &AngleGraph, max_angle: Option<f64>) -> LayerClusters {
    let n = graph.len();
    let edge = |i: usize| -> Option<usize> {
        let t = graph.edges[i]?;
        match max_angle {
            Some(limit) if graph.angles[i] > limit => None,
            _ => Some(t),
        }
    };
    let mut in_neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(t) = edge(i) {
            in_neighbors[t].push(i);
        }
    }
    let mut indegree: Vec<usize> = in_neighbors.iter().map(Vec::len).collect();
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut plan = LayerClusters {
        neurons: n,
        ..Default::default()
    };
    let remove = |v: usize, alive: &mut Vec<bool>, indegree: &mut Vec<usize>| {
        alive[v] = false;
        if let Some(t) = edge(v) {
            if alive[t] {
                indegree[t] -= 1;
            }
        }
    };
    while remaining > 0 {
        // max_by_key keeps the last maximum; iterate in reverse for lowest index.
        let proxy = (0..n)
            .rev()
            .filter(|&i| alive[i])
            .max_by_key(|&i| indegree[i])
            .expect("remaining node");
        remove(proxy, &mut alive, &mut indegree);
        remaining -= 1;
        let members: Vec<usize> = in_neighbors[proxy].iter().copied().filter(|&m| alive[m]).collect();
        for &m in &members {
            remove(m, &mut alive, &mut indegree);
            remaining -= 1;
        }
        if members.is_empty() {
            plan.singletons.push(proxy);
        } else {
            plan.clusters.push(Cluster { proxy, members });
        }
    }
    plan.singletons.sort_unstable();
    plan
}

/// Per-layer plans for a whole model. Only ReLU layers are clustered.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelClusters {
    pub layers: Vec<LayerClusters>,
}

impl ModelClusters {
    pub fn build(model: &QuantModel, max_angle: Option<f64>) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                if l.relu {
                    build_clusters(&build_angle_graph(&l.weights, l.row_len()), max_angle)
                } else {
                    LayerClusters::all_singletons(l.neurons)
                }
            })
            .collect();
        ModelClusters { layers }
    }

    pub fn unclustered(model: &QuantModel) -> Self {
        ModelClusters {
            layers: model.layers().iter().map(|l| LayerClusters::all_singletons(l.neurons)).collect(),
        }
    }

    pub fn validate_for(&self, model: &QuantModel) -> Result<()> {
        if self.layers.len() != model.len() {
            return Err(Error::config(format!(
                "cluster plan has {} layers, model has {}",
                self.layers.len(),
                model.len()
            )));
        }
        for (i, (plan, layer)) in self.layers.iter().zip(model.layers()).enumerate() {
            if plan.neurons != layer.neurons {
                return Err(Error::config(format!(
                    "layer {i}: plan covers {} neurons, layer has {}",
                    plan.neurons, layer.neurons
                )));
            }
            plan.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Unit directions at 0, +5 and -5 degrees, scaled to int8.
    fn fan() -> Vec<i8> {
        vec![127, 0, 127, 11, 127, -11]
    }

    #[test]
    fn fan_graph_hand_trace() {
        let g = build_angle_graph(&fan(), 2);
        assert_eq!(g.edges, vec![Some(1), Some(0), Some(0)]);
        assert_eq!(g.indegree, vec![2, 1, 0]);
        assert!((g.angles[0] - 4.95).abs() < 0.01);
    }

    #[test]
    fn fan_clusters_around_first_neuron() {
        let plan = build_clusters(&build_angle_graph(&fan(), 2), None);
        assert_eq!(
            plan.clusters,
            vec![Cluster {
                proxy: 0,
                members: vec![1, 2]
            }]
        );
        assert!(plan.singletons.is_empty());
        plan.validate().unwrap();
    }

    #[test]
    fn identical_vectors_point_at_each_other() {
        let g = build_angle_graph(&[3, -4, 3, -4], 2);
        assert_eq!(g.edges, vec![Some(1), Some(0)]);
        assert_eq!(g.angles, vec![0.0, 0.0]);
        let plan = build_clusters(&g, None);
        assert_eq!(plan.clusters[0].proxy, 0);
        assert_eq!(plan.clusters[0].members, vec![1]);
    }

    #[test]
    fn orthogonal_basis_ties_go_to_lowest_index() {
        let g = build_angle_graph(&[1, 0, 0, 0, 1, 0, 0, 0, 1], 3);
        assert_eq!(g.edges, vec![Some(1), Some(0), Some(0)]);
        assert!(g.angles.iter().all(|&a| (a - 90.0).abs() < 1e-9));
    }

    #[test]
    fn zero_norm_neurons_become_singletons() {
        let g = build_angle_graph(&[0, 0, 5, 1, 5, 2], 2);
        assert_eq!(g.edges[0], None);
        let plan = build_clusters(&g, None);
        assert!(plan.singletons.contains(&0));
        plan.validate().unwrap();

        let lonely = build_angle_graph(&[0, 0, 5, 1], 2);
        assert!(lonely.edges.iter().all(Option::is_none));
        assert_eq!(build_clusters(&lonely, None).singletons, vec![0, 1]);
    }

    #[test]
    fn zero_cutoff_leaves_everyone_alone() {
        let plan = build_clusters(&build_angle_graph(&fan(), 2), Some(0.0));
        assert!(plan.clusters.is_empty());
        assert_eq!(plan.singletons, vec![0, 1, 2]);
    }

    #[test]
    fn storage_order_groups_members_by_cluster() {
        let plan = LayerClusters {
            neurons: 6,
            clusters: vec![
                Cluster { proxy: 4, members: vec![0, 5] },
                Cluster { proxy: 1, members: vec![3] },
            ],
            singletons: vec![2],
        };
        assert_eq!(plan.storage_order(), vec![4, 1, 2, 0, 5, 3]);
    }

    /// Star groups of distinct sizes around orthogonal axes, so no two
    /// candidate proxies ever tie on indegree.
    fn stars() -> (Vec<i8>, usize) {
        let dim = 8;
        let mut w = Vec::new();
        for (axis, size) in [5usize, 4, 3, 2].iter().enumerate() {
            for k in 0..*size {
                let mut row = vec![0i8; dim];
                row[axis] = 100;
                if k > 0 {
                    row[4 + (k % 4)] = (k * 7) as i8;
                }
                w.extend(row);
            }
        }
        (w, dim)
    }

    fn as_sets(plan: &LayerClusters, relabel: &dyn Fn(usize) -> usize) -> Vec<Vec<usize>> {
        let mut sets: Vec<Vec<usize>> = plan
            .clusters
            .iter()
            .map(|c| {
                let mut s: Vec<usize> = std::iter::once(c.proxy).chain(c.members.iter().copied()).map(relabel).collect();
                s.sort_unstable();
                s
            })
            .chain(plan.singletons.iter().map(|&s| vec![relabel(s)]))
            .collect();
        sets.sort();
        sets
    }

    proptest! {
        #[test]
        fn plans_partition_random_layers(
            n in 1usize..40,
            k in 1usize..12,
            seed in any::<u64>(),
            cutoff in proptest::option::of(0.0f64..120.0),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<i8> = (0..n * k).map(|_| rng.random_range(-3..=3)).collect();
            let g = build_angle_graph(&w, k);
            prop_assert_eq!(g.indegree.iter().sum::<usize>(), g.edges.iter().flatten().count());
            let plan = build_clusters(&g, cutoff);
            prop_assert!(plan.validate().is_ok());
            prop_assert_eq!(plan.clone(), build_clusters(&g, cutoff));
        }

        #[test]
        fn relabeling_gives_an_isomorphic_plan(perm_seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (w, dim) = stars();
            let n = w.len() / dim;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            // Row i of the permuted layer is original row perm[i].
            let pw: Vec<i8> = perm.iter().flat_map(|&p| w[p * dim..(p + 1) * dim].to_vec()).collect();
            let base = build_clusters(&build_angle_graph(&w, dim), None);
            let permuted = build_clusters(&build_angle_graph(&pw, dim), None);
            prop_assert_eq!(as_sets(&base, &|i| i), as_sets(&permuted, &|i| perm[i]));
        }
    }
}
