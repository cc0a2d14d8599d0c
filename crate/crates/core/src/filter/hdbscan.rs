//! HDBSCAN over Euclidean distance.
//!
//! Core distances count the point itself as its first neighbour. The
//! minimum spanning tree of the mutual-reachability graph is built with
//! Prim's algorithm without materializing the distance matrix, condensed
//! with `min_cluster_size`, and clusters are chosen by excess of mass with
//! the root excluded. Labels are `-1` for outliers and `0..` otherwise,
//! numbered by the lowest input index in each cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const OUTLIER: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams { min_cluster_size: 15, min_samples: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<i64>,
    pub warning: Option<String>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().copied().max().map(|m| (m + 1).max(0) as usize).unwrap_or(0)
    }
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

// Zero mutual-reachability distances would give infinite lambdas.
const MIN_DISTANCE: f64 = 1e-12;

pub fn hdbscan(points: &[Vec<f32>], params: &HdbscanParams) -> Clustering {
    let n = points.len();
    let mcs = params.min_cluster_size.max(2);
    if n == 0 {
        return Clustering { labels: Vec::new(), warning: None };
    }
    if n < mcs {
        return Clustering {
            labels: vec![OUTLIER; n],
            warning: Some(format!("{n} points is fewer than min_cluster_size {mcs}; all marked as outliers")),
        };
    }
    if points.iter().all(|p| p == &points[0]) {
        return Clustering { labels: vec![0; n], warning: None };
    }

    let core = core_distances(points, params.min_samples.max(1));
    let mst = prim_mst(points, &core);
    let tree = single_linkage(n, mst);
    let condensed = condense(&tree, n, mcs);
    let selected = select_clusters(&condensed, n);
    let labels = assign_labels(&condensed, &selected, n);
    Clustering { labels, warning: None }
}

fn core_distances(points: &[Vec<f32>], min_samples: usize) -> Vec<f64> {
    let k = min_samples.min(points.len());
    points
        .par_iter()
        .map(|p| {
            let mut d: Vec<f64> = points.iter().map(|q| euclid(p, q)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Edges `(a, b, weight)` of the mutual-reachability MST.
fn prim_mst(points: &[Vec<f32>], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let cur = &points[current];
        let cur_core = core[current];
        let updates: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&j| !in_tree[j])
            .map(|j| (j, euclid(cur, &points[j]).max(cur_core).max(core[j])))
            .collect();
        for (j, d) in updates {
            if d < best[j] {
                best[j] = d;
                parent[j] = current;
            }
        }
        // Lowest weight; ties go to the lowest index.
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((parent[next], next, best[next]));
        current = next;
    }
    edges
}

struct LinkNode {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

/// Merge nodes `n..2n-1` in ascending edge order; node `2n-2` is the root.
fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<LinkNode> {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0.min(a.1), a.0.max(a.1)).cmp(&(b.0.min(b.1), b.0.max(b.1)))));
    let mut uf_parent: Vec<usize> = (0..2 * n - 1).collect();
    let mut size = vec![1usize; 2 * n - 1];
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut nodes = Vec::with_capacity(n - 1);
    for (k, (a, b, w)) in edges.into_iter().enumerate() {
        let ra = find(&mut uf_parent, a);
        let rb = find(&mut uf_parent, b);
        let id = n + k;
        uf_parent[ra] = id;
        uf_parent[rb] = id;
        size[id] = size[ra] + size[rb];
        nodes.push(LinkNode { left: ra, right: rb, distance: w, size: size[id] });
    }
    nodes
}

/// Row of the condensed tree: `child` is a point (`< n`) or a cluster label.
#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    child_size: usize,
}

fn condense(tree: &[LinkNode], n: usize, mcs: usize) -> Vec<CondensedEdge> {
    let node_size = |x: usize| if x < n { 1 } else { tree[x - n].size };
    let root = 2 * n - 2;
    let mut out = Vec::new();
    let mut next_label = n + 1;
    // (tree node, cluster label it belongs to)
    let mut stack = vec![(root, n)];
    let points_below = |x: usize, acc: &mut Vec<usize>| {
        let mut s = vec![x];
        while let Some(v) = s.pop() {
            if v < n {
                acc.push(v);
            } else {
                s.push(tree[v - n].left);
                s.push(tree[v - n].right);
            }
        }
    };
    while let Some((node, label)) = stack.pop() {
        if node < n {
            continue;
        }
        let link = &tree[node - n];
        let lambda = 1.0 / link.distance.max(MIN_DISTANCE);
        let (l, r) = (link.left, link.right);
        let (ls, rs) = (node_size(l), node_size(r));
        match (ls >= mcs, rs >= mcs) {
            (true, true) => {
                for (child, size) in [(l, ls), (r, rs)] {
                    let new_label = next_label;
                    next_label += 1;
                    out.push(CondensedEdge { parent: label, child: new_label, lambda, child_size: size });
                    stack.push((child, new_label));
                }
            }
            (true, false) | (false, true) => {
                let (keep, drop) = if ls >= mcs { (l, r) } else { (r, l) };
                let mut pts = Vec::new();
                points_below(drop, &mut pts);
                for p in pts {
                    out.push(CondensedEdge { parent: label, child: p, lambda, child_size: 1 });
                }
                stack.push((keep, label));
            }
            (false, false) => {
                let mut pts = Vec::new();
                points_below(l, &mut pts);
                points_below(r, &mut pts);
                for p in pts {
                    out.push(CondensedEdge { parent: label, child: p, lambda, child_size: 1 });
                }
            }
        }
    }
    out
}

/// Excess-of-mass selection; returns the set of selected cluster labels.
fn select_clusters(condensed: &[CondensedEdge], n: usize) -> Vec<usize> {
    let root = n;
    let max_label = condensed.iter().map(|e| e.parent.max(if e.child >= n { e.child } else { 0 })).max().unwrap_or(root);
    let slots = max_label - n + 1;
    let mut birth = vec![0.0f64; slots];
    let mut stability = vec![0.0f64; slots];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); slots];
    for e in condensed {
        if e.child >= n {
            birth[e.child - n] = e.lambda;
            children[e.parent - n].push(e.child);
        }
    }
    for e in condensed {
        stability[e.parent - n] += (e.lambda - birth[e.parent - n]) * e.child_size as f64;
    }
    let mut is_selected = vec![true; slots];
    is_selected[0] = false;
    // Children always carry larger labels than their parent.
    for label in (n + 1..=max_label).rev() {
        let i = label - n;
        let child_sum: f64 = children[i].iter().map(|c| stability[c - n]).sum();
        if !children[i].is_empty() && child_sum > stability[i] {
            is_selected[i] = false;
            stability[i] = child_sum;
        } else {
            let mut stack = children[i].clone();
            while let Some(c) = stack.pop() {
                is_selected[c - n] = false;
                stack.extend(children[c - n].iter().copied());
            }
        }
    }
    (n + 1..=max_label).filter(|l| is_selected[l - n]).collect()
}

fn assign_labels(condensed: &[CondensedEdge], selected: &[usize], n: usize) -> Vec<i64> {
    let root = n;
    let mut cluster_parent = std::collections::HashMap::new();
    let mut point_cluster = vec![root; n];
    for e in condensed {
        if e.child >= n {
            cluster_parent.insert(e.child, e.parent);
        } else {
            point_cluster[e.child] = e.parent;
        }
    }
    let selected: std::collections::HashSet<usize> = selected.iter().copied().collect();
    let resolve = |mut c: usize| -> Option<usize> {
        loop {
            if selected.contains(&c) {
                return Some(c);
            }
            match cluster_parent.get(&c) {
                Some(&p) => c = p,
                None => return None,
            }
        }
    };
    let raw: Vec<Option<usize>> = point_cluster.iter().map(|&c| resolve(c)).collect();
    // Renumber by first appearance in input order.
    let mut mapping = std::collections::HashMap::new();
    raw.into_iter()
        .map(|c| match c {
            None => OUTLIER,
            Some(c) => {
                let next = mapping.len() as i64;
                *mapping.entry(c).or_insert(next)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(rng: &mut impl Rng, center: &[f32], sigma: f32, count: usize) -> Vec<Vec<f32>> {
        let normal = Normal::new(0.0f32, sigma).unwrap();
        (0..count).map(|_| center.iter().map(|c| c + normal.sample(rng)).collect()).collect()
    }

    fn nearest_center(p: &[f32], centers: &[Vec<f32>]) -> (usize, f64) {
        centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, euclid(p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    #[test]
    fn two_separated_blobs() {
        for seed in 0..5 {
            let mut rng = crate::rng::seeded_rng(seed);
            let dim = 8;
            let mut a = vec![0.0f32; dim];
            let mut b = vec![0.0f32; dim];
            a[0] = -1.0;
            b[0] = 1.0;
            let centers = vec![a.clone(), b.clone()];
            let mut pts = blob(&mut rng, &a, 0.01, 50);
            pts.extend(blob(&mut rng, &b, 0.01, 50));
            let c = hdbscan(&pts, &HdbscanParams::default());
            assert_eq!(c.n_clusters(), 2, "seed {seed}");
            assert!(c.labels.iter().all(|&l| l != OUTLIER), "seed {seed}: {:?}", c.labels);
            // Cluster membership agrees with the nearest-center oracle.
            for (i, p) in pts.iter().enumerate() {
                for (j, q) in pts.iter().enumerate() {
                    let same_truth = nearest_center(p, &centers).0 == nearest_center(q, &centers).0;
                    assert_eq!(same_truth, c.labels[i] == c.labels[j]);
                }
            }
        }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![0.5f32, 0.5, 0.0]; 20];
        let c = hdbscan(&pts, &HdbscanParams::default());
        assert_eq!(c.labels, vec![0; 20]);
    }

    #[test]
    fn too_few_points_are_all_outliers() {
        let pts = vec![vec![0.0f32], vec![1.0], vec![2.0]];
        let c = hdbscan(&pts, &HdbscanParams::default());
        assert_eq!(c.labels, vec![OUTLIER; 3]);
        assert!(c.warning.is_some());
        assert!(hdbscan(&[], &HdbscanParams::default()).labels.is_empty());
    }

    #[test]
    fn three_blobs_with_uniform_noise() {
        let mut ok = 0;
        for seed in 0..5 {
            let mut rng = crate::rng::seeded_rng(100 + seed);
            let dim = 4;
            let centers: Vec<Vec<f32>> = (0..3)
                .map(|k| (0..dim).map(|d| if d == k { 1.0 } else { 0.0 }).collect())
                .collect();
            let mut pts = Vec::new();
            for c in &centers {
                pts.extend(blob(&mut rng, c, 0.05, 40));
            }
            let noise: Vec<Vec<f32>> = (0..10).map(|_| (0..dim).map(|_| rng.random_range(-6.0f32..6.0)).collect()).collect();
            pts.extend(noise.iter().cloned());
            let c = hdbscan(&pts, &HdbscanParams::default());
            assert_eq!(c.n_clusters(), 3, "seed {seed}");
            // Oracle: a noise point far from every center should be an outlier.
            let far: Vec<usize> = (120..130).filter(|&i| nearest_center(&pts[i], &centers).1 > 1.5).collect();
            let flagged = far.iter().filter(|&&i| c.labels[i] == OUTLIER).count();
            if flagged * 10 >= far.len() * 8 {
                ok += 1;
            }
            // Blob points land in the cluster of their center.
            for k in 0..3 {
                let first = c.labels[k * 40];
                assert!(first != OUTLIER);
                let agree = (k * 40..(k + 1) * 40).filter(|&i| c.labels[i] == first).count();
                assert!(agree >= 38, "seed {seed} blob {k}: {agree}");
            }
        }
        assert!(ok >= 4, "noise mostly outliers in {ok}/5 seeds");
    }

    #[test]
    fn labels_are_deterministic() {
        let mut rng = crate::rng::seeded_rng(3);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.1, 30);
        pts.extend(blob(&mut rng, &[2.0, 2.0], 0.1, 30));
        let a = hdbscan(&pts, &HdbscanParams::default());
        let b = hdbscan(&pts, &HdbscanParams::default());
        assert_eq!(a, b);
    }

    #[test]
    fn min_samples_larger_than_input_is_clamped() {
        let mut rng = crate::rng::seeded_rng(4);
        let pts = blob(&mut rng, &[0.0, 0.0], 0.1, 16);
        let c = hdbscan(&pts, &HdbscanParams { min_cluster_size: 15, min_samples: 50 });
        assert_eq!(c.labels.len(), 16);
    }
}
