//! Joint-connectivity graph and its symmetric normalization.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Skeleton connectivity: a symmetric nonnegative adjacency over `V` joints
/// plus its diagonal degree and the precomputed `D^{-1/2} A D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    adjacency: Array2<f64>,
    degree: Array1<f64>,
    normalized: Array2<f64>,
}

impl SkeletonGraph {
    /// Validates `adjacency` (square, symmetric, nonnegative, finite, every
    /// degree positive) and precomputes the symmetric normalization.
    pub fn new(adjacency: Array2<f64>) -> Result<Self> {
        let (rows, cols) = adjacency.dim();
        if rows != cols {
            return Err(Error::Graph(format!(
                "adjacency must be square, got {rows}x{cols}"
            )));
        }
        for ((i, j), &a) in adjacency.indexed_iter() {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Graph(format!(
                    "adjacency({i},{j}) = {a} is not a finite nonnegative weight"
                )));
            }
            if (a - adjacency[(j, i)]).abs() > 1e-12 {
                return Err(Error::Graph(format!(
                    "adjacency is not symmetric at ({i},{j}): {a} vs {}",
                    adjacency[(j, i)]
                )));
            }
        }
        let degree: Array1<f64> = adjacency.rows().into_iter().map(|r| r.sum()).collect();
        if let Some(v) = degree.iter().position(|&d| d <= 0.0) {
            return Err(Error::Graph(format!(
                "joint {v} has zero degree; add a self-loop before building the graph"
            )));
        }
        let inv_sqrt: Array1<f64> = degree.mapv(|d| 1.0 / d.sqrt());
        let mut normalized = adjacency.clone();
        for ((i, j), value) in normalized.indexed_iter_mut() {
            *value *= inv_sqrt[i] * inv_sqrt[j];
        }
        Ok(Self {
            adjacency,
            degree,
            normalized,
        })
    }

    /// Builds the graph from undirected edges, adding a self-loop to every joint.
    pub fn from_edges(num_joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = Array2::<f64>::eye(num_joints);
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::Graph(format!(
                    "edge ({a},{b}) references a joint outside 0..{num_joints}"
                )));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        Self::new(adjacency)
    }

    /// Identity graph: self-loops only.
    pub fn identity(num_joints: usize) -> Self {
        Self::new(Array2::eye(num_joints)).expect("identity adjacency is always valid")
    }

    pub fn num_joints(&self) -> usize {
        self.degree.len()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn degree(&self) -> &Array1<f64> {
        &self.degree
    }

    /// `D^{-1/2} A D^{-1/2}`.
    pub fn normalized(&self) -> &Array2<f64> {
        &self.normalized
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Dense reference: build D from A by row sums, then D^{-1/2} A D^{-1/2}
    // entry by entry, independent of the constructor's vectorized path.
    fn dense_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let v = a.len();
        let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
        let mut out = vec![vec![0.0; v]; v];
        for i in 0..v {
            for j in 0..v {
                out[i][j] = a[i][j] / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
        out
    }

    #[test]
    fn identity_graph_normalizes_to_identity() {
        let g = SkeletonGraph::identity(3);
        assert_eq!(g.normalized(), &Array2::<f64>::eye(3));
        assert_eq!(g.degree(), &array![1.0, 1.0, 1.0]);
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let g = SkeletonGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let expected = dense_normalize(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ]);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (g.normalized()[(i, j)] - expected[i][j]).abs() < 1e-15,
                    "mismatch at ({i},{j})"
                );
            }
        }
        assert_eq!(g.degree(), &array![2.0, 3.0, 2.0]);
    }

    #[test]
    fn zero_degree_node_is_rejected() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let err = SkeletonGraph::new(a).unwrap_err();
        assert!(matches!(err, Error::Graph(_)), "got {err:?}");
        assert!(err.to_string().contains("joint 1"));
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        let a = array![[1.0, 0.5], [0.2, 1.0]];
        assert!(matches!(SkeletonGraph::new(a), Err(Error::Graph(_))));
    }

    #[test]
    fn negative_weight_is_rejected() {
        let a = array![[1.0, -0.5], [-0.5, 1.0]];
        assert!(matches!(SkeletonGraph::new(a), Err(Error::Graph(_))));
    }
}
