use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// One or more graphs laid out as a single block-diagonal node set.
///
/// Edges are undirected. They are stored canonically as `(min, max)` pairs,
/// sorted and deduplicated; explicit self-loops are dropped because the
/// normalized adjacency adds them anyway.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    node_features: Tensor,
    edges: Vec<(usize, usize)>,
    graph_ids: Vec<usize>,
    num_graphs: usize,
    offsets: Vec<usize>,
    normalized_adjacency: Arc<CsrMatrix>,
    adjacency: Arc<CsrMatrix>,
    pooling: Arc<CsrMatrix>,
}

impl GraphBatch {
    pub fn new(node_features: Tensor, edges: &[(usize, usize)], graph_ids: Vec<usize>) -> Result<Self> {
        if node_features.ndim() != 2 {
            return Err(Error::dim(
                "graph",
                format!("node features must be [nodes, dim], got {:?}", node_features.shape()),
            ));
        }
        let n = node_features.rows();
        if graph_ids.len() != n {
            return Err(Error::dim("graph", format!("{} graph ids for {n} nodes", graph_ids.len())));
        }
        let mut offsets = vec![0];
        for (i, w) in graph_ids.windows(2).enumerate() {
            if w[1] < w[0] || w[1] > w[0] + 1 {
                return Err(Error::contract(format!(
                    "graph ids must be contiguous and non-decreasing (node {})",
                    i + 1
                )));
            }
            if w[1] != w[0] {
                offsets.push(i + 1);
            }
        }
        if graph_ids[0] != 0 {
            return Err(Error::contract("graph ids must start at 0"));
        }
        offsets.push(n);
        let num_graphs = offsets.len() - 1;

        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::contract(format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            if u != v {
                canon.push((u.min(v), u.max(v)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        if let Some(&(u, v)) = canon.iter().find(|&&(u, v)| graph_ids[u] != graph_ids[v]) {
            return Err(Error::contract(format!("edge ({u},{v}) joins two different graphs")));
        }

        let mut degree = vec![1.0; n];
        let mut adj = Vec::with_capacity(2 * canon.len());
        for &(u, v) in &canon {
            degree[u] += 1.0;
            degree[v] += 1.0;
            adj.push((u, v, 1.0));
            adj.push((v, u, 1.0));
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
        let mut norm: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])).collect();
        norm.extend(adj.iter().map(|&(u, v, _)| (u, v, inv_sqrt[u] * inv_sqrt[v])));
        let pool: Vec<(usize, usize, f64)> = (0..n)
            .map(|i| {
                let g = graph_ids[i];
                (g, i, 1.0 / (offsets[g + 1] - offsets[g]) as f64)
            })
            .collect();

        Ok(GraphBatch {
            node_features,
            edges: canon,
            graph_ids,
            num_graphs,
            offsets,
            normalized_adjacency: Arc::new(CsrMatrix::from_triplets(n, n, &norm)?),
            adjacency: Arc::new(CsrMatrix::from_triplets(n, n, &adj)?),
            pooling: Arc::new(CsrMatrix::from_triplets(num_graphs, n, &pool)?),
        })
    }

    /// A single graph.
    pub fn single(node_features: Tensor, edges: &[(usize, usize)]) -> Result<Self> {
        let n = node_features.rows();
        GraphBatch::new(node_features, edges, vec![0; n])
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.row_len()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn graph_ids(&self) -> &[usize] {
        &self.graph_ids
    }

    /// Node index range of graph `g`.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    /// `D^{-1/2}(A+I)D^{-1/2}`.
    pub fn normalized_adjacency(&self) -> &Arc<CsrMatrix> {
        &self.normalized_adjacency
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    /// `[graphs, nodes]` operator averaging each graph's nodes.
    pub fn pooling(&self) -> &Arc<CsrMatrix> {
        &self.pooling
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row_entries(v).map(|(u, _)| u)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Same structure with replacement node features.
    pub fn with_features(&self, node_features: Tensor) -> Result<Self> {
        if node_features.rows() != self.num_nodes() {
            return Err(Error::dim(
                "graph",
                format!("{} feature rows for {} nodes", node_features.rows(), self.num_nodes()),
            ));
        }
        Ok(GraphBatch {
            node_features: node_features.flatten_rows(),
            edges: self.edges.clone(),
            graph_ids: self.graph_ids.clone(),
            num_graphs: self.num_graphs,
            offsets: self.offsets.clone(),
            normalized_adjacency: Arc::clone(&self.normalized_adjacency),
            adjacency: Arc::clone(&self.adjacency),
            pooling: Arc::clone(&self.pooling),
        })
    }

    /// The listed graphs, renumbered in the given order, together with the
    /// original index of every node in the result.
    pub fn subgraphs(&self, graphs: &[usize]) -> Result<(GraphBatch, Vec<usize>)> {
        let mut nodes = Vec::new();
        let mut ids = Vec::new();
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new_g, &g) in graphs.iter().enumerate() {
            if g >= self.num_graphs {
                return Err(Error::contract(format!("graph {g} out of range")));
            }
            for v in self.node_range(g) {
                remap[v] = nodes.len();
                nodes.push(v);
                ids.push(new_g);
            }
        }
        let mut edges = Vec::new();
        for &g in graphs {
            let r = self.node_range(g);
            let lo = self.edges.partition_point(|&(u, _)| u < r.start);
            for &(u, v) in &self.edges[lo..] {
                if u >= r.end {
                    break;
                }
                edges.push((remap[u], remap[v]));
            }
        }
        let features = self.node_features.select_rows(&nodes)?;
        Ok((GraphBatch::new(features, &edges, ids)?, nodes))
    }

    /// Block-diagonal union of several batches.
    pub fn merge(parts: &[GraphBatch]) -> Result<Self> {
        let mut edges = Vec::new();
        let mut ids = Vec::new();
        let mut feats = Vec::new();
        let (mut node_base, mut graph_base) = (0, 0);
        for p in parts {
            edges.extend(p.edges.iter().map(|&(u, v)| (u + node_base, v + node_base)));
            ids.extend(p.graph_ids.iter().map(|g| g + graph_base));
            feats.push(p.node_features.clone());
            node_base += p.num_nodes();
            graph_base += p.num_graphs;
        }
        GraphBatch::new(Tensor::concat_rows(&feats)?, &edges, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> GraphBatch {
        GraphBatch::single(Tensor::zeros(&[3, 2]), &[(0, 1), (2, 1), (1, 0)]).unwrap()
    }

    #[test]
    fn normalized_adjacency_matches_formula() {
        let g = path3();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        let a = g.normalized_adjacency().to_dense();
        // degrees with self-loops: 2, 3, 2
        let expect = [
            [0.5, 1.0 / 6f64.sqrt(), 0.0],
            [1.0 / 6f64.sqrt(), 1.0 / 3.0, 1.0 / 6f64.sqrt()],
            [0.0, 1.0 / 6f64.sqrt(), 0.5],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.at2(i, j) - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_node_has_unit_self_loop() {
        let g = GraphBatch::single(Tensor::zeros(&[1, 4]), &[]).unwrap();
        assert_eq!(g.normalized_adjacency().to_dense().data(), &[1.0]);
        assert_eq!(g.adjacency().nnz(), 0);
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(GraphBatch::single(Tensor::zeros(&[3, 1]), &[(0, 5)]).is_err());
        assert!(GraphBatch::new(Tensor::zeros(&[3, 1]), &[], vec![0, 1, 0]).is_err());
        assert!(GraphBatch::new(Tensor::zeros(&[2, 1]), &[(0, 1)], vec![0, 1]).is_err());
    }

    #[test]
    fn subgraphs_and_merge_roundtrip() {
        let a = GraphBatch::single(Tensor::vector(vec![1.0, 2.0]).reshape(&[2, 1]).unwrap(), &[(0, 1)]).unwrap();
        let b = GraphBatch::single(Tensor::vector(vec![3.0, 4.0, 5.0]).reshape(&[3, 1]).unwrap(), &[(0, 2)]).unwrap();
        let m = GraphBatch::merge(&[a, b]).unwrap();
        assert_eq!(m.num_graphs(), 2);
        assert_eq!(m.edges(), &[(0, 1), (2, 4)]);
        let (s, nodes) = m.subgraphs(&[1]).unwrap();
        assert_eq!(nodes, vec![2, 3, 4]);
        assert_eq!(s.edges(), &[(0, 2)]);
        assert_eq!(s.node_features().data(), &[3.0, 4.0, 5.0]);
        let pool = m.pooling().to_dense();
        assert_eq!(pool.at2(1, 3), 1.0 / 3.0);
    }
}
