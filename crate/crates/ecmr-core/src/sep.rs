//! Structural entropy over nonnegative similarity graphs, and the partition
//! search used to decide which channel groups are redundant.
//!
//! The one-dimensional entropy weights channels inside a group; the
//! two-dimensional entropy scores a clustering of groups; detachment cost
//! measures how much a vertex's removal to a fresh singleton raises the
//! two-dimensional score. Natural logarithms throughout, and the usual
//! 0 * log 0 = 0 convention at isolated vertices and empty cuts.

use crate::error::{Error, Result};

/// Symmetric weighted graph with a zero diagonal and nonnegative weights.
#[derive(Clone, Debug)]
pub struct WeightedGraph {
    n: usize,
    w: Vec<f64>,
    degree: Vec<f64>,
    volume: f64,
}

impl WeightedGraph {
    /// Build from a dense row-major weight matrix.
    pub fn from_weights(n: usize, w: Vec<f64>) -> Result<WeightedGraph> {
        if n == 0 {
            return Err(Error::InvalidArg("graph needs at least one vertex".into()));
        }
        if w.len() != n * n {
            return Err(Error::InvalidArg(format!(
                "weight matrix has {} entries, expected {}",
                w.len(),
                n * n
            )));
        }
        for i in 0..n {
            if w[i * n + i] != 0.0 {
                return Err(Error::InvalidArg(format!("nonzero diagonal at vertex {i}")));
            }
            for j in 0..n {
                let v = w[i * n + j];
                if !(v >= 0.0) {
                    return Err(Error::InvalidArg(format!("negative or NaN weight at ({i},{j})")));
                }
                if v != w[j * n + i] {
                    return Err(Error::InvalidArg(format!("asymmetric weight at ({i},{j})")));
                }
            }
        }
        let degree: Vec<f64> = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum()).collect();
        let volume = degree.iter().sum();
        Ok(WeightedGraph { n, w, degree, volume })
    }

    /// Build from an undirected edge list; each pair may appear once.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<WeightedGraph> {
        let mut w = vec![0.0; n * n];
        for &(i, j, v) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArg(format!("edge ({i},{j}) out of range for n={n}")));
            }
            if i == j {
                return Err(Error::InvalidArg(format!("self-loop at vertex {i}")));
            }
            if w[i * n + j] != 0.0 {
                return Err(Error::InvalidArg(format!("duplicate edge ({i},{j})")));
            }
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
        WeightedGraph::from_weights(n, w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Uniformly scale all weights (used to probe scale invariance).
    pub fn scaled(&self, c: f64) -> Result<WeightedGraph> {
        if !(c > 0.0) {
            return Err(Error::InvalidArg(format!("scale {c} must be positive")));
        }
        WeightedGraph::from_weights(self.n, self.w.iter().map(|v| v * c).collect())
    }
}

/// Clamped-cosine similarity graph over per-channel feature vectors:
/// w_ij = max(cos(u_i, u_j), 0), zero diagonal. A zero-norm vector has
/// similarity 0 with everything.
pub fn build_similarity_graph(features: &[Vec<f64>]) -> Result<WeightedGraph> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArg("no feature vectors".into()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArg("feature vectors must share a nonzero length".into()));
    }
    let norms: Vec<f64> = features
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sim = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).max(0.0)
            };
            w[i * n + j] = sim;
            w[j * n + i] = sim;
        }
    }
    WeightedGraph::from_weights(n, w)
}

#[inline]
fn plogp_ratio(mass: f64, num: f64, den: f64) -> f64 {
    if mass == 0.0 {
        0.0
    } else {
        mass * (num / den).ln()
    }
}

/// Per-vertex one-dimensional structural entropy: -(d_i/v) ln(d_i/v).
/// A zero-volume graph yields all zeros.
pub fn one_dim_entropy(g: &WeightedGraph) -> Vec<f64> {
    let v = g.volume();
    (0..g.n())
        .map(|i| {
            if v == 0.0 {
                0.0
            } else {
                -plogp_ratio(g.degree(i) / v, g.degree(i), v)
            }
        })
        .collect()
}

/// Softmax of the per-vertex entropies. Zero-volume graphs degrade to the
/// uniform distribution (all entropies equal).
pub fn entropy_weights(g: &WeightedGraph) -> Vec<f64> {
    let h = one_dim_entropy(g);
    let mx = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = h.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Entropy-weighted channel aggregate: F = sum_i weight_i * u_i.
pub fn aggregate_features(features: &[Vec<f64>], g: &WeightedGraph) -> Result<Vec<f64>> {
    if features.len() != g.n() {
        return Err(Error::InvalidArg(format!(
            "{} feature vectors but graph has {} vertices",
            features.len(),
            g.n()
        )));
    }
    let weights = entropy_weights(g);
    let dim = features[0].len();
    let mut out = vec![0.0; dim];
    for (f, &wt) in features.iter().zip(&weights) {
        for (o, &x) in out.iter_mut().zip(f) {
            *o += wt * x;
        }
    }
    Ok(out)
}

/// A clustering of 0..n in canonical form: cluster labels are 0..k in order
/// of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assign: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn from_assignment(assign: Vec<usize>) -> Result<Partition> {
        if assign.is_empty() {
            return Err(Error::InvalidArg("empty partition".into()));
        }
        let mut remap: Vec<Option<usize>> = vec![None; assign.len()];
        let mut next = 0usize;
        let mut canon = Vec::with_capacity(assign.len());
        for &a in &assign {
            if a >= assign.len() {
                return Err(Error::InvalidArg(format!("cluster label {a} out of range")));
            }
            let lbl = match remap[a] {
                Some(l) => l,
                None => {
                    remap[a] = Some(next);
                    next += 1;
                    next - 1
                }
            };
            canon.push(lbl);
        }
        Ok(Partition { assign: canon, k: next })
    }

    pub fn singletons(n: usize) -> Partition {
        Partition { assign: (0..n).collect(), k: n }
    }

    pub fn from_clusters(n: usize, clusters: &[Vec<usize>]) -> Result<Partition> {
        let mut assign = vec![usize::MAX; n];
        for (ci, members) in clusters.iter().enumerate() {
            for &m in members {
                if m >= n {
                    return Err(Error::InvalidArg(format!("vertex {m} out of range")));
                }
                if assign[m] != usize::MAX {
                    return Err(Error::InvalidArg(format!("vertex {m} in two clusters")));
                }
                assign[m] = ci;
            }
        }
        if assign.iter().any(|&a| a == usize::MAX) {
            return Err(Error::InvalidArg("partition does not cover all vertices".into()));
        }
        Partition::from_assignment(assign)
    }

    pub fn n(&self) -> usize {
        self.assign.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.k
    }

    pub fn label(&self, vertex: usize) -> usize {
        self.assign[vertex]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assign
    }

    /// Member lists, each ascending, ordered by cluster label.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (v, &a) in self.assign.iter().enumerate() {
            out[a].push(v);
        }
        out
    }

    /// Detach one vertex into a fresh singleton cluster; detaching an
    /// existing singleton returns the same partition.
    pub fn move_to_singleton(&self, vertex: usize) -> Partition {
        let mut assign = self.assign.clone();
        let old = assign[vertex];
        if assign.iter().filter(|&&a| a == old).count() == 1 {
            return self.clone();
        }
        assign[vertex] = self.k;
        Partition::from_assignment(assign).expect("labels stay in range")
    }
}

/// Two-dimensional structural entropy of a partition:
/// H = -sum_C [ (cut_C/v) ln(vol_C/v) + sum_{o in C} (d_o/v) ln(d_o/vol_C) ].
pub fn two_dim_entropy(g: &WeightedGraph, p: &Partition) -> Result<f64> {
    if p.n() != g.n() {
        return Err(Error::InvalidArg(format!(
            "partition over {} vertices, graph has {}",
            p.n(),
            g.n()
        )));
    }
    let v = g.volume();
    if v == 0.0 {
        return Err(Error::InvalidArg("two_dim_entropy undefined on zero-volume graphs".into()));
    }
    let k = p.num_clusters();
    let mut vol = vec![0.0; k];
    let mut cut = vec![0.0; k];
    for i in 0..g.n() {
        vol[p.label(i)] += g.degree(i);
    }
    for i in 0..g.n() {
        for j in i + 1..g.n() {
            if p.label(i) != p.label(j) {
                let w = g.weight(i, j);
                cut[p.label(i)] += w;
                cut[p.label(j)] += w;
            }
        }
    }
    let mut h = 0.0;
    for c in 0..k {
        h -= plogp_ratio(cut[c] / v, vol[c], v);
    }
    for i in 0..g.n() {
        let d = g.degree(i);
        if d > 0.0 {
            h -= plogp_ratio(d / v, d, vol[p.label(i)]);
        }
    }
    Ok(h)
}

/// Exhaustive minimizer over all set partitions (restricted-growth
/// enumeration). Ties break to fewer clusters, then to the lexicographically
/// smallest canonical assignment (which enumeration order supplies for free).
/// Guarded to n <= 12.
pub fn minimize_2dse_exact(g: &WeightedGraph) -> Result<(Partition, f64)> {
    let n = g.n();
    if n > 12 {
        return Err(Error::InvalidArg(format!("exact search is capped at 12 vertices, got {n}")));
    }
    if n == 1 {
        return Ok((Partition::singletons(1), 0.0));
    }
    if g.volume() == 0.0 {
        return Err(Error::InvalidArg("exact search undefined on zero-volume graphs".into()));
    }
    let mut assign = vec![0usize; n];
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    // iterative restricted-growth enumeration in lexicographic order
    loop {
        let p = Partition::from_assignment(assign.clone()).expect("valid labels");
        let h = two_dim_entropy(g, &p)?;
        let k = p.num_clusters();
        let better = match &best {
            None => true,
            Some((bh, bk, _)) => h < *bh || (h == *bh && k < *bk),
        };
        if better {
            best = Some((h, k, assign.clone()));
        }
        // advance to the next restricted-growth string
        let mut pos = n;
        loop {
            if pos == 1 {
                pos = 0;
                break;
            }
            pos -= 1;
            let prefix_max = assign[..pos].iter().cloned().max().unwrap_or(0);
            if assign[pos] <= prefix_max {
                assign[pos] += 1;
                for a in assign[pos + 1..].iter_mut() {
                    *a = 0;
                }
                break;
            }
            assign[pos] = 0;
        }
        if pos == 0 {
            break;
        }
    }
    let (h, _, assign) = best.expect("at least one partition evaluated");
    Ok((Partition::from_assignment(assign)?, h))
}

/// Greedy agglomeration: start from singletons and repeatedly merge the
/// cluster pair that lowers the two-dimensional entropy the most, stopping
/// when no merge strictly lowers it. Clusters are kept ordered by smallest
/// member so pair tie-breaks (lowest index pair) are well defined.
pub fn minimize_2dse_greedy(g: &WeightedGraph) -> Result<(Partition, f64)> {
    let n = g.n();
    if n == 1 {
        return Ok((Partition::singletons(1), 0.0));
    }
    if g.volume() == 0.0 {
        return Err(Error::InvalidArg("greedy search undefined on zero-volume graphs".into()));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut current = two_dim_entropy(g, &Partition::singletons(n))?;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut cand = Vec::with_capacity(clusters.len() - 1);
                for (ci, c) in clusters.iter().enumerate() {
                    if ci == i {
                        let mut merged = c.clone();
                        merged.extend_from_slice(&clusters[j]);
                        merged.sort_unstable();
                        cand.push(merged);
                    } else if ci != j {
                        cand.push(c.clone());
                    }
                }
                let h = two_dim_entropy(g, &Partition::from_clusters(n, &cand)?)?;
                // strict improvement over best-so-far keeps the first (lowest
                // index) pair on exact ties
                if h < current && best.as_ref().map_or(true, |&(bh, _, _)| h < bh) {
                    best = Some((h, i, j));
                }
            }
        }
        match best {
            Some((h, i, j)) => {
                let moved = clusters.remove(j);
                clusters[i].extend(moved);
                clusters[i].sort_unstable();
                clusters.sort_by_key(|c| c[0]);
                current = h;
            }
            None => break,
        }
    }
    let p = Partition::from_clusters(n, &clusters)?;
    Ok((p, current))
}

/// Detachment cost by direct recomputation:
/// H(partition with `vertex` detached) - H(partition). Detaching an existing
/// singleton costs exactly 0.
pub fn detachment_cost(g: &WeightedGraph, p: &Partition, vertex: usize) -> Result<f64> {
    if vertex >= p.n() {
        return Err(Error::InvalidArg(format!("vertex {vertex} out of range")));
    }
    let detached = p.move_to_singleton(vertex);
    if detached.num_clusters() == p.num_clusters() {
        return Ok(0.0);
    }
    Ok(two_dim_entropy(g, &detached)? - two_dim_entropy(g, p)?)
}

/// Closed-form detachment cost: only the affected cluster's term changes, so
/// the difference is term(C without o) + term({o}) - term(C).
pub fn detachment_cost_incremental(
    g: &WeightedGraph,
    p: &Partition,
    vertex: usize,
) -> Result<f64> {
    if vertex >= p.n() {
        return Err(Error::InvalidArg(format!("vertex {vertex} out of range")));
    }
    let v = g.volume();
    if v == 0.0 {
        return Err(Error::InvalidArg("detachment undefined on zero-volume graphs".into()));
    }
    let home = p.label(vertex);
    let members: Vec<usize> =
        (0..p.n()).filter(|&i| p.label(i) == home).collect();
    if members.len() == 1 {
        return Ok(0.0);
    }
    let term = |set: &[usize]| -> f64 {
        let vol: f64 = set.iter().map(|&i| g.degree(i)).sum();
        let mut cut = 0.0;
        for &i in set {
            for j in 0..g.n() {
                if !set.contains(&j) {
                    cut += g.weight(i, j);
                }
            }
        }
        let mut t = -plogp_ratio(cut / v, vol, v);
        for &i in set {
            let d = g.degree(i);
            if d > 0.0 {
                t -= plogp_ratio(d / v, d, vol);
            }
        }
        t
    };
    let rest: Vec<usize> = members.iter().cloned().filter(|&i| i != vertex).collect();
    Ok(term(&rest) + term(&[vertex]) - term(&members))
}

/// Per-cluster retention: inside each cluster keep the vertex with the
/// highest detachment cost, ties to the lowest index. Returns one flag per
/// vertex.
pub fn retention_flags(g: &WeightedGraph, p: &Partition) -> Result<Vec<bool>> {
    let mut flags = vec![false; p.n()];
    for cluster in p.clusters() {
        let costs: Vec<f64> =
            cluster.iter().map(|&m| detachment_cost(g, p, m)).collect::<Result<_>>()?;
        let top = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // costs inside float noise of the maximum count as tied; the lowest
        // vertex index wins so exact duplicates resolve deterministically
        let tol = 1e-9 * top.abs().max(1e-12);
        let pick = cluster
            .iter()
            .zip(&costs)
            .find(|(_, &c)| c >= top - tol)
            .map(|(&m, _)| m)
            .expect("cluster is non-empty");
        flags[pick] = true;
    }
    Ok(flags)
}

/// Threshold the per-vertex vote frequencies at `rho`. If nothing clears the
/// bar the single highest-frequency vertex (lowest index on ties) is kept, so
/// the selection is never empty.
pub fn vote_and_select(votes: &[u32], samples: usize, rho: f64) -> Result<Vec<bool>> {
    if votes.is_empty() || samples == 0 {
        return Err(Error::InvalidArg("vote_and_select needs votes and samples".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArg(format!("rho {rho} outside [0,1]")));
    }
    let freqs: Vec<f64> = votes.iter().map(|&c| c as f64 / samples as f64).collect();
    let mut flags: Vec<bool> = freqs.iter().map(|&f| f >= rho).collect();
    if !flags.iter().any(|&f| f) {
        let mut best = 0;
        for (i, &f) in freqs.iter().enumerate() {
            if f > freqs[best] {
                best = i;
            }
        }
        flags[best] = true;
    }
    Ok(flags)
}

/// Render the graph in the interchange format: a `n <count> volume <v>`
/// header, then one `i j w` line per undirected edge (i < j, nonzero).
pub fn format_graph_dump(g: &WeightedGraph) -> String {
    let mut out = format!("n {} volume {}\n", g.n(), g.volume());
    for i in 0..g.n() {
        for j in i + 1..g.n() {
            let w = g.weight(i, j);
            if w != 0.0 {
                out.push_str(&format!("{i} {j} {w}\n"));
            }
        }
    }
    out
}

/// Parse the interchange format written by [`format_graph_dump`]. The header
/// volume must agree with the edges to 1e-6 relative.
pub fn parse_graph_dump(text: &str) -> Result<WeightedGraph> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArg("empty graph dump".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "n" || toks[2] != "volume" {
        return Err(Error::InvalidArg(format!("bad graph header '{header}'")));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| Error::InvalidArg(format!("bad vertex count '{}'", toks[1])))?;
    let declared_volume: f64 = toks[3]
        .parse()
        .map_err(|_| Error::InvalidArg(format!("bad volume '{}'", toks[3])))?;
    let mut edges = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 {
            return Err(Error::InvalidArg(format!("bad edge line '{line}'")));
        }
        let i: usize =
            t[0].parse().map_err(|_| Error::InvalidArg(format!("bad vertex '{}'", t[0])))?;
        let j: usize =
            t[1].parse().map_err(|_| Error::InvalidArg(format!("bad vertex '{}'", t[1])))?;
        let w: f64 =
            t[2].parse().map_err(|_| Error::InvalidArg(format!("bad weight '{}'", t[2])))?;
        edges.push((i, j, w));
    }
    let g = WeightedGraph::from_edges(n, &edges)?;
    let diff = (g.volume() - declared_volume).abs();
    if diff > 1e-6 * declared_volume.abs().max(1.0) {
        return Err(Error::InvalidArg(format!(
            "declared volume {declared_volume} does not match edges ({})",
            g.volume()
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> WeightedGraph {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.gen_bool(0.8) { rng.gen_range(0.0..1.0) } else { 0.0 };
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        WeightedGraph::from_weights(n, w).unwrap()
    }

    #[test]
    fn cosine_triangle_fixture() {
        let feats = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let g = build_similarity_graph(&feats).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.weight(0, 1) - r).abs() < 1e-12);
        assert!((g.weight(1, 2) - r).abs() < 1e-12);
        assert_eq!(g.weight(0, 2), 0.0);
        assert!((g.degree(0) - 0.7071).abs() < 1e-4);
        assert!((g.degree(1) - 1.4142).abs() < 1e-4);
        assert!((g.volume() - 2.8284).abs() < 1e-4);
    }

    #[test]
    fn negative_similarity_clamps_and_zero_vectors_isolate() {
        let feats = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]];
        let g = build_similarity_graph(&feats).unwrap();
        assert_eq!(g.weight(0, 1), 0.0);
        assert_eq!(g.weight(0, 2), 0.0);
        assert_eq!(g.weight(1, 2), 0.0);
        assert_eq!(g.volume(), 0.0);
        // zero-volume: uniform aggregation weights
        let w = entropy_weights(&g);
        for &x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_graph_entropies_coincide() {
        let g = WeightedGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let h = one_dim_entropy(&g);
        // degrees 1,2,1 over volume 4: both ratios give 0.25*ln(4) = 0.5*ln(2)
        let expect = 0.25 * 4.0f64.ln();
        for &v in &h {
            assert!((v - expect).abs() < 1e-12, "entropy {v}");
        }
        assert!((expect - 0.3466).abs() < 1e-4);
        let w = entropy_weights(&g);
        for &v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_weighted_sum() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let g = build_similarity_graph(&feats).unwrap();
        let f = aggregate_features(&feats, &g).unwrap();
        // orthogonal features: zero-volume graph, uniform weights
        assert!((f[0] - 0.5).abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_partition_matches_one_dim_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..7);
            let g = random_graph(n, &mut rng);
            if g.volume() == 0.0 {
                continue;
            }
            let h2 = two_dim_entropy(&g, &Partition::singletons(n)).unwrap();
            let h1: f64 = one_dim_entropy(&g).iter().sum();
            assert!((h2 - h1).abs() < 1e-12, "h2 {h2} vs h1 {h1}");
        }
    }

    #[test]
    fn disjoint_edge_pairs_fixture_is_ln2() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let p = Partition::from_clusters(4, &[vec![0, 1], vec![2, 3]]).unwrap();
        let h = two_dim_entropy(&g, &p).unwrap();
        assert!((h - 2.0f64.ln()).abs() < 1e-12, "H {h}");
        // both searches find this optimum
        let (pe, he) = minimize_2dse_exact(&g).unwrap();
        assert!((he - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(pe.assignment(), &[0, 0, 1, 1]);
        let (pg, hg) = minimize_2dse_greedy(&g).unwrap();
        assert!((hg - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(pg.assignment(), &[0, 0, 1, 1]);
    }

    #[test]
    fn exact_beats_or_ties_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.gen_range(2..7);
            let g = random_graph(n, &mut rng);
            if g.volume() == 0.0 {
                continue;
            }
            let (_, he) = minimize_2dse_exact(&g).unwrap();
            let (_, hg) = minimize_2dse_greedy(&g).unwrap();
            assert!(he <= hg + 1e-12, "exact {he} > greedy {hg}");
        }
    }

    #[test]
    fn duplicated_vertices_cluster_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut feats = base.clone();
        feats.push(base[1].clone()); // vertex 3 duplicates vertex 1
        let g = build_similarity_graph(&feats).unwrap();
        let (p, _) = minimize_2dse_greedy(&g).unwrap();
        assert_eq!(p.label(1), p.label(3), "duplicates should share a cluster");
    }

    #[test]
    fn detachment_direct_and_incremental_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let n = rng.gen_range(2..8);
            let g = random_graph(n, &mut rng);
            if g.volume() == 0.0 {
                continue;
            }
            // random partition
            let assign: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3.min(n))).collect();
            let p = Partition::from_assignment(assign).unwrap();
            for o in 0..n {
                let a = detachment_cost(&g, &p, o).unwrap();
                let b = detachment_cost_incremental(&g, &p, o).unwrap();
                assert!((a - b).abs() < 1e-9, "direct {a} vs incremental {b}");
            }
        }
    }

    #[test]
    fn detaching_a_singleton_costs_exactly_zero() {
        let g = WeightedGraph::from_edges(3, &[(0, 1, 0.8)]).unwrap();
        let p = Partition::from_clusters(3, &[vec![0, 1], vec![2]]).unwrap();
        let c = detachment_cost(&g, &p, 2).unwrap();
        assert_eq!(c.to_bits(), 0.0f64.to_bits());
        assert_eq!(detachment_cost_incremental(&g, &p, 2).unwrap().to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn retention_argmax_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(3..7);
            let g = random_graph(n, &mut rng);
            if g.volume() == 0.0 {
                continue;
            }
            let (p, _) = minimize_2dse_greedy(&g).unwrap();
            let base = retention_flags(&g, &p).unwrap();
            for &c in &[0.1, 10.0] {
                let gs = g.scaled(c).unwrap();
                let flags = retention_flags(&gs, &p).unwrap();
                assert_eq!(base, flags, "retention changed under scale {c}");
            }
        }
    }

    #[test]
    fn vote_threshold_and_fallback() {
        // 10 samples, rho 0.1: one vote is enough
        let flags = vote_and_select(&[1, 0, 5], 10, 0.1).unwrap();
        assert_eq!(flags, vec![true, false, true]);
        // nothing passes: highest frequency survives, lowest index on ties
        let flags = vote_and_select(&[2, 3, 3], 10, 0.5).unwrap();
        assert_eq!(flags, vec![false, true, false]);
        let flags = vote_and_select(&[0, 0], 4, 0.5).unwrap();
        assert_eq!(flags, vec![true, false]);
        assert!(vote_and_select(&[], 4, 0.5).is_err());
        assert!(vote_and_select(&[1], 0, 0.5).is_err());
        assert!(vote_and_select(&[1], 4, 1.5).is_err());
    }

    #[test]
    fn graph_dump_roundtrip() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let text = format_graph_dump(&g);
        assert!(text.starts_with("n 4 volume 4\n"));
        let back = parse_graph_dump(&text).unwrap();
        assert_eq!(back.n(), 4);
        assert_eq!(back.weight(0, 1), 1.0);
        assert_eq!(back.weight(2, 3), 1.0);
        assert_eq!(back.weight(0, 2), 0.0);
        // header volume mismatch is rejected
        assert!(parse_graph_dump("n 2 volume 5\n0 1 1.0\n").is_err());
        // duplicate edges are rejected
        assert!(parse_graph_dump("n 2 volume 2\n0 1 1.0\n1 0 1.0\n").is_err());
    }

    #[test]
    fn exact_handles_single_vertex() {
        let g = WeightedGraph::from_weights(1, vec![0.0]).unwrap();
        let (p, h) = minimize_2dse_exact(&g).unwrap();
        assert_eq!(p.num_clusters(), 1);
        assert_eq!(h, 0.0);
        let (pg, hg) = minimize_2dse_greedy(&g).unwrap();
        assert_eq!(pg.num_clusters(), 1);
        assert_eq!(hg, 0.0);
    }

    #[test]
    fn exact_is_capped_at_twelve_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(13, &mut rng);
        assert!(minimize_2dse_exact(&g).is_err());
    }
}
