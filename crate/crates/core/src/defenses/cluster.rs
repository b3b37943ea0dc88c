//! Small clustering utilities shared by the statistical defenses.

use crate::nn::FlatVector;
use crate::rng::CounterRng;
use crate::scalar::Scalar;

/// Pairwise cosine distances `1 - cos(a, b)`; zero-norm vectors sit at
/// distance 1 from everything.
pub fn cosine_distance_matrix<S: Scalar>(deltas: &[&FlatVector<S>]) -> Vec<Vec<f64>> {
    let n = deltas.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - deltas[i].cosine(deltas[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    dist
}

/// Single-linkage clustering cut at the largest merge-height gap.
///
/// All pairs are merged in ascending distance order; the n-1 merge heights
/// are scanned for the widest gap and every merge below it is applied. A
/// height range below 1e-12 (all points effectively coincident) yields one
/// cluster. Returns a cluster id per point.
pub fn gap_cut_clusters(dist: &[Vec<f64>]) -> Vec<usize> {
    let n = dist.len();
    if n <= 1 {
        return vec![0; n];
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((dist[i][j], i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // First pass: collect the single-linkage merge heights.
    let mut uf = UnionFind::new(n);
    let mut heights = Vec::with_capacity(n - 1);
    for &(d, i, j) in &pairs {
        if uf.union(i, j) {
            heights.push(d);
        }
    }

    let span = heights[heights.len() - 1] - heights[0];
    let threshold = if span <= 1e-12 {
        // No scale separation: everything is one cluster.
        f64::INFINITY
    } else {
        // Cut below the widest gap; on ties prefer the later gap (fewer,
        // larger clusters).
        let mut best = 0usize;
        let mut best_gap = -1.0;
        for k in 0..heights.len() - 1 {
            let gap = heights[k + 1] - heights[k];
            if gap >= best_gap {
                best_gap = gap;
                best = k;
            }
        }
        heights[best]
    };

    let mut uf = UnionFind::new(n);
    for &(d, i, j) in &pairs {
        if d <= threshold {
            uf.union(i, j);
        }
    }
    uf.labels()
}

/// Lloyd's k-means on 2-D points with k-means++ seeding, deterministic
/// under the given stream. Returns a cluster id per point.
pub fn kmeans_2d(points: &[[f64; 2]], k: usize, rng: &mut CounterRng) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n, "k={k} out of range for {n} points");
    // k-means++ seeding.
    let mut centers: Vec<[f64; 2]> = vec![points[rng.next_below(n)]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.next_below(n)
        } else {
            let mut target = rng.next_f64() * total;
            let mut picked = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    picked = i;
                    break;
                }
                target -= w;
            }
            picked
        };
        centers.push(points[next]);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assign[i]][0] += p[0];
            sums[assign[i]][1] += p[1];
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when the union actually merged two components.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        // Lower root wins so labels are reproducible.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }

    /// Cluster ids normalized to 0..k in first-appearance order.
    fn labels(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut map = std::collections::BTreeMap::new();
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let root = self.find(i);
            let next = map.len();
            labels.push(*map.entry(root).or_insert(next));
        }
        labels
    }
}
