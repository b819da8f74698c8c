//! The 68-landmark facial graph and its symmetric normalization.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;

/// Anatomical landmark groups of the standard 68-point indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Jaw,
    RightBrow,
    LeftBrow,
    NoseBridge,
    LowerNose,
    RightEye,
    LeftEye,
    OuterLip,
    InnerLip,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Jaw,
        Region::RightBrow,
        Region::LeftBrow,
        Region::NoseBridge,
        Region::LowerNose,
        Region::RightEye,
        Region::LeftEye,
        Region::OuterLip,
        Region::InnerLip,
    ];

    /// Inclusive landmark index range.
    pub fn nodes(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Region::Jaw => 0..=16,
            Region::RightBrow => 17..=21,
            Region::LeftBrow => 22..=26,
            Region::NoseBridge => 27..=30,
            Region::LowerNose => 31..=35,
            Region::RightEye => 36..=41,
            Region::LeftEye => 42..=47,
            Region::OuterLip => 48..=59,
            Region::InnerLip => 60..=67,
        }
    }

    fn is_loop(self) -> bool {
        matches!(
            self,
            Region::RightEye | Region::LeftEye | Region::OuterLip | Region::InnerLip
        )
    }

    pub fn edges(self) -> Vec<(usize, usize)> {
        let nodes: Vec<usize> = self.nodes().collect();
        let mut edges: Vec<(usize, usize)> = nodes.windows(2).map(|w| (w[0], w[1])).collect();
        if self.is_loop() {
            edges.push((nodes[0], nodes[nodes.len() - 1]));
        }
        if self == Region::InnerLip {
            // Aperture chords between opposing upper and lower inner-lip points.
            edges.extend([(61, 67), (62, 66), (63, 65), (60, 64)]);
        }
        edges
    }
}

/// The canonical 67-edge face mesh: chains for jaw, brows and nose, closed
/// loops for eyes and lips, and aperture chords across the inner lip.
pub fn canonical_edges() -> Vec<(usize, usize)> {
    Region::ALL.iter().flat_map(|r| r.edges()).collect()
}

/// Undirected graph over landmarks with its normalized adjacency
/// `D^-1/2 (A + I) D^-1/2`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FacialGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency_norm: Tensor<f64>,
}

pub fn build_facial_adjacency() -> FacialGraph {
    FacialGraph::from_edges(NUM_LANDMARKS, &canonical_edges()).expect("canonical edges are valid")
}

fn canonical_pairs(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut set = BTreeSet::new();
    for &(i, j) in edges {
        if i >= num_nodes || j >= num_nodes {
            return Err(Error::Data(format!(
                "edge ({i}, {j}) references a node outside 0..{num_nodes}"
            )));
        }
        if i == j {
            return Err(Error::Data(format!("self-loop on node {i} in edge list")));
        }
        set.insert((i.min(j), i.max(j)));
    }
    Ok(set.into_iter().collect())
}

/// `D^-1/2 (A + I) D^-1/2` where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Tensor<f64>> {
    if num_nodes == 0 {
        return Err(Error::Data("graph has no nodes".into()));
    }
    let pairs = canonical_pairs(num_nodes, edges)?;
    let mut a = vec![0.0; num_nodes * num_nodes];
    for i in 0..num_nodes {
        a[i * num_nodes + i] = 1.0;
    }
    for &(i, j) in &pairs {
        a[i * num_nodes + j] = 1.0;
        a[j * num_nodes + i] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = a
        .chunks(num_nodes)
        .map(|row| 1.0 / row.iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..num_nodes {
        for j in 0..num_nodes {
            a[i * num_nodes + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::from_vec(&[num_nodes, num_nodes], a)
}

impl FacialGraph {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let edges = canonical_pairs(num_nodes, edges)?;
        let adjacency_norm = normalize_adjacency(num_nodes, &edges)?;
        Ok(Self {
            num_nodes,
            edges,
            adjacency_norm,
        })
    }

    /// Adds user-supplied connector edges.
    pub fn with_extra_edges(&self, extra: &[(usize, usize)]) -> Result<Self> {
        let mut all = self.edges.clone();
        all.extend_from_slice(extra);
        Self::from_edges(self.num_nodes, &all)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edges, each stored once as `(min, max)`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn adjacency_norm(&self) -> &Tensor<f64> {
        &self.adjacency_norm
    }

    pub fn adjacency<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(self.adjacency_norm.shape(), self.adjacency_norm.data())
            .expect("same shape")
    }

    /// Degrees in `A` (self-loops excluded).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
            }
        }
        (0..self.num_nodes)
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# {} nodes, {} edges\n", self.num_nodes, self.edges.len());
        for (i, j) in &self.edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }
}

/// Parses `i j` pairs, one per line, with `#` comments.
pub fn parse_edge_list(text: &str, origin: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(format!("expected `i j`, got `{line}`")));
        }
        let i = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad node index `{}`: {e}", fields[0])))?;
        let j = fields[1]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad node index `{}`: {e}", fields[1])))?;
        edges.push((i, j));
    }
    Ok(edges)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    parse_edge_list(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_counts() {
        let g = build_facial_adjacency();
        assert_eq!(g.num_nodes(), 68);
        assert_eq!(g.edges().len(), 67);
        assert_eq!(g.component_count(), 9);
        assert!(g.contains_edge(0, 1));
        assert!(g.contains_edge(36, 41));
        assert!(g.contains_edge(41, 36));
        assert!(!g.contains_edge(0, 67));
    }

    #[test]
    fn group_edge_counts() {
        let counts: Vec<usize> = Region::ALL.iter().map(|r| r.edges().len()).collect();
        assert_eq!(counts, vec![16, 4, 4, 3, 4, 6, 6, 12, 12]);
    }

    #[test]
    fn small_normalizations() {
        let one = normalize_adjacency(1, &[]).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let two = normalize_adjacency(2, &[(0, 1)]).unwrap();
        for &v in two.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn jaw_end_row_has_two_nonzeros() {
        let g = build_facial_adjacency();
        let a = g.adjacency_norm().data();
        let nz = a[..68].iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, 2);
    }

    #[test]
    fn rejects_bad_indices() {
        assert!(normalize_adjacency(3, &[(0, 3)]).is_err());
        assert!(FacialGraph::from_edges(3, &[(1, 1)]).is_err());
    }

    #[test]
    fn normalized_adjacency_invariants() {
        let g = build_facial_adjacency();
        let n = g.num_nodes();
        let a = g.adjacency_norm().data();
        let deg: Vec<f64> = g.degrees().iter().map(|&d| d as f64 + 1.0).collect();
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let v = a[i * n + j];
                assert!((v - a[j * n + i]).abs() < 1e-12);
                assert!(v >= 0.0);
                assert_eq!(v > 0.0, i == j || g.contains_edge(i, j));
                row += v * deg[j].sqrt() / deg[i].sqrt();
            }
            assert!((row - 1.0).abs() < 1e-12, "row {i}: {row}");
        }
    }

    #[test]
    fn spectral_radius_is_at_most_one() {
        let g = build_facial_adjacency();
        let m = nalgebra::DMatrix::from_row_slice(68, 68, g.adjacency_norm().data());
        let eig = m.symmetric_eigen();
        let rho = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(rho <= 1.0 + 1e-9, "{rho}");
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# header\n0 1\n\n2 3 # trailing\n";
        let edges = parse_edge_list(text, Path::new("e.txt")).unwrap();
        assert_eq!(edges, vec![(0, 1), (2, 3)]);
        let err = parse_edge_list("0 1\n0 x\n", Path::new("e.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let g = build_facial_adjacency();
        let back = parse_edge_list(&g.to_edge_list(), Path::new("g")).unwrap();
        assert_eq!(FacialGraph::from_edges(68, &back).unwrap(), g);
    }

    #[test]
    fn extra_edges_join_components() {
        let g = build_facial_adjacency().with_extra_edges(&[(30, 33)]).unwrap();
        assert_eq!(g.edges().len(), 68);
        assert_eq!(g.component_count(), 8);
    }

    proptest! {
        #[test]
        fn permutation_consistency(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..NUM_LANDMARKS).collect();
            perm.shuffle(&mut rng);
            let edges = canonical_edges();
            let permuted: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
            let a = normalize_adjacency(68, &edges).unwrap();
            let b = normalize_adjacency(68, &permuted).unwrap();
            for i in 0..68 {
                for j in 0..68 {
                    let lhs = b.data()[perm[i] * 68 + perm[j]];
                    prop_assert!((lhs - a.data()[i * 68 + j]).abs() < 1e-12);
                }
            }
        }
    }
}
