//! Grouping inputs by the similarity of their network computations.
//!
//! Inputs are compared by the Hamming distance of their activation patterns,
//! clustered bottom-up with the complete-linkage criterion into a
//! [`Dendrogram`], and the dendrogram is mirrored into a [`BatchTree`] whose
//! inner nodes carry subtree leaf counts. Extracting a batch of up to `k`
//! inputs walks the tree in pre-order, stops at the first node with count at
//! most `k`, returns its leaves, and prunes them.

use serde::{Deserialize, Serialize};

use crate::network::ActivationPattern;
use crate::{Error, Result};

/// Number of differing bits between two equal-length patterns.
pub fn hamming(a: &ActivationPattern, b: &ActivationPattern) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "activation patterns have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
}

/// One agglomeration step: clusters `a` and `b` merged at `distance`.
///
/// Cluster ids follow the usual convention: ids below the leaf count denote
/// leaves (in input order); id `leaves + i` denotes the cluster created by
/// merge `i`. `a < b` always holds, so the first-listed argument is the
/// earlier-created cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: usize,
}

/// Stepwise dendrogram over a set of inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// JSON export for external inspection.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dendrogram serializes")
    }
}

/// Complete-linkage agglomerative clustering.
///
/// At each step the pair of clusters with minimal linkage distance
/// `max_{x in A, y in B} hamming(x, y)` is merged. Ties are broken by the
/// lexicographically smallest sorted member set of the merged cluster, i.e.
/// by lowest (then next-lowest) original input index, which makes the
/// dendrogram deterministic.
pub fn hcluster(patterns: &[ActivationPattern]) -> Result<Dendrogram> {
    let n = patterns.len();
    if n == 0 {
        return Err(Error::InvalidInput("hcluster requires at least one input".into()));
    }
    // Dense pairwise distance matrix over the current clusters.
    let mut dist = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = hamming(&patterns[i], &patterns[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    struct Cluster {
        id: usize,
        members: Vec<usize>, // sorted original indices
    }
    let mut clusters: Vec<Cluster> = (0..n)
        .map(|i| Cluster {
            id: i,
            members: vec![i],
        })
        .collect();
    // Linkage distances between active clusters, indexed by position in `clusters`.
    let mut link: Vec<Vec<usize>> = dist.clone();

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, usize, Vec<usize>)> = None; // (i, j, d, merged members)
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let d = link[i][j];
                let candidate_key = || {
                    let mut m = clusters[i].members.clone();
                    m.extend_from_slice(&clusters[j].members);
                    m.sort_unstable();
                    m
                };
                let better = match &best {
                    None => true,
                    Some((_, _, bd, bkey)) => d < *bd || (d == *bd && candidate_key() < *bkey),
                };
                if better {
                    best = Some((i, j, d, candidate_key()));
                }
            }
        }
        let (i, j, d, members) = best.expect("at least two clusters remain");
        let (id_a, id_b) = (
            clusters[i].id.min(clusters[j].id),
            clusters[i].id.max(clusters[j].id),
        );
        merges.push(Merge {
            a: id_a,
            b: id_b,
            distance: d,
        });
        // Complete linkage: distance to the union is the max of the parts.
        let new_id = n + step;
        #[allow(clippy::needless_range_loop)]
        for r in 0..clusters.len() {
            if r != i && r != j {
                link[i][r] = link[i][r].max(link[j][r]);
                link[r][i] = link[i][r];
            }
        }
        clusters[i] = Cluster {
            id: new_id,
            members,
        };
        clusters.remove(j);
        for row in link.iter_mut() {
            row.remove(j);
        }
        link.remove(j);
    }
    Ok(Dendrogram { leaves: n, merges })
}

// ---------------------------------------------------------------------------
// Batch tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(usize), // input position
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    count: usize,
    parent: Option<usize>,
    removed: bool,
}

/// Binary tree mirroring a dendrogram, supporting batch extraction.
#[derive(Debug, Clone)]
pub struct BatchTree {
    nodes: Vec<Node>,
    root: usize,
    remaining: usize,
}

impl BatchTree {
    /// Mirrors the dendrogram: one leaf per input, one inner node per merge;
    /// the earlier-created cluster becomes the left child.
    pub fn from_dendrogram(d: &Dendrogram) -> Self {
        let n = d.leaves;
        let mut nodes: Vec<Node> = (0..n)
            .map(|i| Node {
                kind: NodeKind::Leaf(i),
                count: 1,
                parent: None,
                removed: false,
            })
            .collect();
        for m in &d.merges {
            let idx = nodes.len();
            let count = nodes[m.a].count + nodes[m.b].count;
            nodes[m.a].parent = Some(idx);
            nodes[m.b].parent = Some(idx);
            nodes.push(Node {
                kind: NodeKind::Inner {
                    left: m.a,
                    right: m.b,
                },
                count,
                parent: None,
                removed: false,
            });
        }
        let root = nodes.len() - 1;
        BatchTree {
            nodes,
            root,
            remaining: n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Live leaf count of the subtree rooted at the given dendrogram cluster id.
    pub fn count_of(&self, id: usize) -> usize {
        self.nodes[id].count
    }

    pub fn root_count(&self) -> usize {
        self.nodes[self.root].count
    }

    /// Extracts a batch of up to `k` inputs: pre-order traversal from the
    /// root stops at the first node whose live leaf count is at most `k`;
    /// that subtree's leaves are returned and pruned from the tree.
    pub fn extract_batch(&mut self, k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if self.remaining == 0 {
            return Err(Error::InvalidInput("batch tree is empty".into()));
        }
        let mut cursor = self.root;
        let target = loop {
            let node = &self.nodes[cursor];
            debug_assert!(!node.removed && node.count > 0);
            if node.count <= k {
                break cursor;
            }
            // Descend pre-order: the left child first when it is still live.
            match node.kind {
                NodeKind::Leaf(_) => break cursor, // count 1 <= k already caught
                NodeKind::Inner { left, right } => {
                    let l = &self.nodes[left];
                    cursor = if !l.removed && l.count > 0 { left } else { right };
                }
            }
        };

        let mut batch = Vec::new();
        self.collect_leaves(target, &mut batch);
        self.remove_subtree(target);
        let removed = batch.len();
        let mut up = self.nodes[target].parent;
        while let Some(p) = up {
            self.nodes[p].count -= removed;
            up = self.nodes[p].parent;
        }
        self.remaining -= removed;
        Ok(batch)
    }

    fn collect_leaves(&self, idx: usize, out: &mut Vec<usize>) {
        let node = &self.nodes[idx];
        if node.removed || node.count == 0 {
            return;
        }
        match node.kind {
            NodeKind::Leaf(pos) => out.push(pos),
            NodeKind::Inner { left, right } => {
                self.collect_leaves(left, out);
                self.collect_leaves(right, out);
            }
        }
    }

    fn remove_subtree(&mut self, idx: usize) {
        let kind = self.nodes[idx].kind.clone();
        self.nodes[idx].removed = true;
        self.nodes[idx].count = 0;
        if let NodeKind::Inner { left, right } = kind {
            if !self.nodes[left].removed {
                self.remove_subtree(left);
            }
            if !self.nodes[right].removed {
                self.remove_subtree(right);
            }
        }
    }
}

/// Mirrors a dendrogram into its extraction tree.
pub fn build_batch_tree(d: &Dendrogram) -> BatchTree {
    BatchTree::from_dendrogram(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pat(bits: &[u8]) -> ActivationPattern {
        ActivationPattern {
            bits: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    #[test]
    fn hamming_of_figure_patterns_is_two() {
        let a = pat(&[1, 0, 1, 1, 0, 1, 0]);
        let b = pat(&[0, 0, 0, 1, 0, 1, 0]);
        assert_eq!(hamming(&a, &b).unwrap(), 2);
    }

    #[test]
    fn hamming_identity_and_complement() {
        let a = pat(&[1, 0, 1, 0, 1]);
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        let neg = ActivationPattern {
            bits: a.bits.iter().map(|b| !b).collect(),
        };
        assert_eq!(hamming(&a, &neg).unwrap(), a.len());
    }

    #[test]
    fn hamming_rejects_length_mismatch() {
        let a = pat(&[1, 0]);
        let b = pat(&[1, 0, 1]);
        assert!(matches!(hamming(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn singleton_has_empty_merge_list() {
        let d = hcluster(&[pat(&[1, 0, 1])]).unwrap();
        assert_eq!(d.leaves, 1);
        assert!(d.merges.is_empty());
        let mut t = BatchTree::from_dendrogram(&d);
        assert_eq!(t.root_count(), 1);
        assert_eq!(t.extract_batch(3).unwrap(), vec![0]);
        assert!(t.is_empty());
    }

    /// Builds six patterns whose pairwise Hamming distances reproduce the
    /// reference clustering ordering: the pair (x3, x4) at 420 merges before
    /// (x5, x6) at 477, and their union has linkage 595. x1 and x2 sit far
    /// away and join last.
    pub(crate) fn six_reference_patterns() -> Vec<ActivationPattern> {
        // Column-type construction for x3..x6 with x3 = all zeros. Each entry
        // is ((bit of x4, bit of x5, bit of x6), column count); the counts
        // solve the distance system d34=420, d35=595, d36=586, d45=519,
        // d46=478, d56=477.
        let column_counts: &[((u8, u8, u8), usize)] = &[
            ((1, 0, 0), 8),
            ((0, 1, 0), 95),
            ((0, 0, 1), 70),
            ((1, 1, 0), 148),
            ((1, 0, 1), 164),
            ((0, 1, 1), 252),
            ((1, 1, 1), 100),
        ];
        let group_len: usize = column_counts.iter().map(|&(_, c)| c).sum(); // 837
        let tail = 1150; // room for the x1/x2 blocks
        let len = group_len + tail;
        let x3 = vec![0u8; len];
        let mut x4 = vec![0u8; len];
        let mut x5 = vec![0u8; len];
        let mut x6 = vec![0u8; len];
        let mut pos = 0;
        for &((b4, b5, b6), cnt) in column_counts {
            for _ in 0..cnt {
                x4[pos] = b4;
                x5[pos] = b5;
                x6[pos] = b6;
                pos += 1;
            }
        }
        // x1 and x2: 800 ones each in overlapping fresh blocks, distance 700
        // from each other and at least 800 from the group.
        let base = group_len;
        let mut x1 = vec![0u8; len];
        let mut x2 = vec![0u8; len];
        for i in 0..800 {
            x1[base + i] = 1;
        }
        for i in 350..1150 {
            x2[base + i] = 1;
        }
        vec![pat(&x1), pat(&x2), pat(&x3), pat(&x4), pat(&x5), pat(&x6)]
    }

    #[test]
    fn reference_distances_hold() {
        let p = six_reference_patterns();
        let d = |i: usize, j: usize| hamming(&p[i], &p[j]).unwrap();
        assert_eq!(d(2, 3), 420);
        assert_eq!(d(4, 5), 477);
        let cross = [d(2, 4), d(2, 5), d(3, 4), d(3, 5)];
        assert_eq!(*cross.iter().max().unwrap(), 595);
        assert!(cross.iter().all(|&c| c > 477));
        assert_eq!(d(0, 1), 700);
        for i in 2..6 {
            assert!(d(0, i) >= 800 && d(1, i) >= 800);
        }
    }

    #[test]
    fn reference_clustering_merges_in_published_order() {
        let p = six_reference_patterns();
        let d = hcluster(&p).unwrap();
        // First three merges: (x3,x4)@420, (x5,x6)@477, union@595.
        assert_eq!(d.merges[0], Merge { a: 2, b: 3, distance: 420 });
        assert_eq!(d.merges[1], Merge { a: 4, b: 5, distance: 477 });
        assert_eq!(d.merges[2], Merge { a: 6, b: 7, distance: 595 });
        assert_eq!(d.merges[3], Merge { a: 0, b: 1, distance: 700 });
    }

    #[test]
    fn batch_tree_counts_match_reference_structure() {
        let p = six_reference_patterns();
        let d = hcluster(&p).unwrap();
        let t = BatchTree::from_dendrogram(&d);
        assert_eq!(t.root_count(), 6);
        // The {x3,x4,x5,x6} union is merge 2, cluster id 6+2=8.
        assert_eq!(t.count_of(8), 4);
    }

    #[test]
    fn batch_extraction_returns_reference_subtree() {
        let p = six_reference_patterns();
        let d = hcluster(&p).unwrap();
        let mut t = BatchTree::from_dendrogram(&d);
        let mut batch = t.extract_batch(4).unwrap();
        batch.sort_unstable();
        assert_eq!(batch, vec![2, 3, 4, 5]);
        assert_eq!(t.remaining(), 2);
        let mut rest = t.extract_batch(4).unwrap();
        rest.sort_unstable();
        assert_eq!(rest, vec![0, 1]);
        assert!(t.is_empty());
    }

    #[test]
    fn extract_one_returns_single_leaf() {
        let p = six_reference_patterns();
        let d = hcluster(&p).unwrap();
        let mut t = BatchTree::from_dendrogram(&d);
        let batch = t.extract_batch(1).unwrap();
        assert_eq!(batch.len(), 1);
    }

    /// Brute-force reference agglomeration recomputing every cluster distance
    /// from scratch (no Lance-Williams update), same tie rule.
    fn reference_hcluster(patterns: &[ActivationPattern]) -> Dendrogram {
        let n = patterns.len();
        let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
        let mut merges = Vec::new();
        for step in 0..n.saturating_sub(1) {
            let mut best: Option<(usize, usize, usize, Vec<usize>)> = None;
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let mut d = 0usize;
                    for &x in &clusters[i].1 {
                        for &y in &clusters[j].1 {
                            d = d.max(hamming(&patterns[x], &patterns[y]).unwrap());
                        }
                    }
                    let mut key: Vec<usize> = clusters[i].1.clone();
                    key.extend_from_slice(&clusters[j].1);
                    key.sort_unstable();
                    let better = match &best {
                        None => true,
                        Some((_, _, bd, bk)) => d < *bd || (d == *bd && key < *bk),
                    };
                    if better {
                        best = Some((i, j, d, key));
                    }
                }
            }
            let (i, j, d, key) = best.unwrap();
            let (ia, ib) = (clusters[i].0.min(clusters[j].0), clusters[i].0.max(clusters[j].0));
            merges.push(Merge {
                a: ia,
                b: ib,
                distance: d,
            });
            clusters[i] = (n + step, key);
            clusters.remove(j);
        }
        Dendrogram { leaves: n, merges }
    }

    fn random_patterns(seed: u64, n: usize, len: usize) -> Vec<ActivationPattern> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..n)
            .map(|_| ActivationPattern {
                bits: (0..len)
                    .map(|_| {
                        state ^= state << 13;
                        state ^= state >> 7;
                        state ^= state << 17;
                        state & 1 == 1
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_reference_on_random_patterns() {
        for seed in 0..30u64 {
            let pats = random_patterns(seed, 8, 24);
            assert_eq!(hcluster(&pats).unwrap(), reference_hcluster(&pats), "seed {}", seed);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn hamming_is_a_metric(seed in 0u64..10_000) {
            let p = random_patterns(seed, 3, 16);
            let d01 = hamming(&p[0], &p[1]).unwrap();
            let d10 = hamming(&p[1], &p[0]).unwrap();
            let d02 = hamming(&p[0], &p[2]).unwrap();
            let d12 = hamming(&p[1], &p[2]).unwrap();
            prop_assert_eq!(d01, d10);
            prop_assert_eq!(hamming(&p[0], &p[0]).unwrap(), 0);
            prop_assert!(d02 <= d01 + d12);
        }

        #[test]
        fn linkage_distances_are_monotone(seed in 0u64..10_000, n in 2usize..10) {
            let pats = random_patterns(seed, n, 20);
            let d = hcluster(&pats).unwrap();
            prop_assert_eq!(d.merges.len(), n - 1);
            for w in d.merges.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }

        #[test]
        fn extraction_partitions_the_input_set(
            seed in 0u64..10_000,
            n in 1usize..12,
            ks in proptest::collection::vec(1usize..6, 1..20)
        ) {
            let pats = random_patterns(seed, n, 16);
            let d = hcluster(&pats).unwrap();
            let mut t = BatchTree::from_dendrogram(&d);
            let mut seen = std::collections::BTreeSet::new();
            let mut ki = 0;
            while !t.is_empty() {
                let k = ks[ki % ks.len()];
                ki += 1;
                let batch = t.extract_batch(k).unwrap();
                prop_assert!(!batch.is_empty() && batch.len() <= k);
                for x in batch {
                    prop_assert!(seen.insert(x), "duplicate input {}", x);
                }
            }
            prop_assert_eq!(seen.len(), n);
        }

        #[test]
        fn tree_counts_match_leaf_enumeration(seed in 0u64..10_000, n in 1usize..10) {
            let pats = random_patterns(seed, n, 16);
            let d = hcluster(&pats).unwrap();
            let t = BatchTree::from_dendrogram(&d);
            // Each merge's node count equals the recount of leaves below it.
            for (i, _) in d.merges.iter().enumerate() {
                let id = n + i;
                let mut leaves = Vec::new();
                t.collect_leaves(id, &mut leaves);
                prop_assert_eq!(t.count_of(id), leaves.len());
            }
        }
    }
}
