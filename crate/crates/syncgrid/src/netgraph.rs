//! Weighted undirected graphs and the small dense linear algebra the models share.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("negative or non-finite weight {0}")]
    BadWeight(f64),
    #[error("edge ({0}, {1}) already present")]
    DuplicateEdge(usize, usize),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not square")]
    NotSquare,
}

/// Undirected graph stored as (i, j, w) with i < j.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl NetworkGraph {
    pub fn new(node_count: usize) -> Self {
        Self { node_count, edges: Vec::new() }
    }

    pub fn add_edge(&mut self, i: usize, j: usize, w: f64) -> Result<(), GraphError> {
        for n in [i, j] {
            if n >= self.node_count {
                return Err(GraphError::NodeOutOfRange(n));
            }
        }
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(GraphError::BadWeight(w));
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        if self.edges.iter().any(|&(x, y, _)| x == a && y == b) {
            return Err(GraphError::DuplicateEdge(a, b));
        }
        self.edges.push((a, b, w));
        Ok(())
    }

    pub fn with_edges(node_count: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let mut g = Self::new(node_count);
        for &(i, j, w) in edges {
            g.add_edge(i, j, w)?;
        }
        Ok(g)
    }

    pub fn complete(node_count: usize, w: f64) -> Self {
        let mut g = Self::new(node_count);
        for i in 0..node_count {
            for j in i + 1..node_count {
                g.add_edge(i, j, w).expect("valid complete-graph edge");
            }
        }
        g
    }

    /// Edges from the strictly upper triangle of a symmetric weight matrix; zeros skipped.
    pub fn from_weights(w: &Matrix) -> Result<Self, GraphError> {
        if !w.is_square() {
            return Err(GraphError::NotSquare);
        }
        let n = w.nrows();
        let mut g = Self::new(n);
        for i in 0..n {
            for j in i + 1..n {
                if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 * (1.0 + w[(i, j)].abs()) {
                    return Err(GraphError::NotSymmetric);
                }
                if w[(i, j)] != 0.0 {
                    g.add_edge(i, j, w[(i, j)])?;
                }
            }
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.iter().find(|&&(x, y, _)| x == a && y == b).map(|e| e.2)
    }

    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        self.edges
            .iter()
            .filter_map(|&(a, b, w)| {
                if a == i {
                    Some((b, w))
                } else if b == i {
                    Some((a, w))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Dense symmetric weight matrix.
    pub fn weight_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.node_count, self.node_count);
        for &(i, j, w) in &self.edges {
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        m
    }

    /// Union-find connectivity; edges of zero weight still connect.
    pub fn is_connected(&self) -> bool {
        if self.node_count <= 1 {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.node_count).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j, _) in &self.edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (1..self.node_count).all(|k| find(&mut parent, k) == root)
    }
}

/// Node-by-edge incidence matrix; the lower-index endpoint gets +1.
pub fn incidence(g: &NetworkGraph) -> Matrix {
    let mut e = Matrix::zeros(g.node_count(), g.edges().len());
    for (k, &(i, j, _)) in g.edges().iter().enumerate() {
        e[(i, k)] = 1.0;
        e[(j, k)] = -1.0;
    }
    e
}

/// L = E K E^T with K the diagonal of edge weights.
pub fn laplacian(g: &NetworkGraph) -> Matrix {
    let e = incidence(g);
    let k = Matrix::from_diagonal(&nalgebra::DVector::from_iterator(
        g.edges().len(),
        g.edges().iter().map(|e| e.2),
    ));
    &e * k * e.transpose()
}

pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

fn check_symmetric(m: &Matrix) -> Result<(), GraphError> {
    if !m.is_square() {
        return Err(GraphError::NotSquare);
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(GraphError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>, GraphError> {
    check_symmetric(m)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ev)
}

/// Second-smallest Laplacian eigenvalue (Fiedler value); values below 1e-10 snap to 0.
pub fn algebraic_connectivity(l: &Matrix) -> Result<f64, GraphError> {
    let ev = symmetric_eigenvalues(l)?;
    if ev.len() < 2 {
        return Ok(0.0);
    }
    let l2 = ev[1];
    Ok(if l2.abs() < 1e-10 { 0.0 } else { l2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_incidence() {
        let g = NetworkGraph::with_edges(2, &[(0, 1, 1.0)]).unwrap();
        let e = incidence(&g);
        assert_eq!(e.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn empty_graph_shapes() {
        let g = NetworkGraph::new(3);
        let e = incidence(&g);
        assert_eq!((e.nrows(), e.ncols()), (3, 0));
        assert_eq!(laplacian(&g), Matrix::zeros(3, 3));
    }

    #[test]
    fn rejects_bad_edges() {
        let mut g = NetworkGraph::new(2);
        assert_eq!(g.add_edge(0, 0, 1.0), Err(GraphError::SelfLoop(0)));
        assert_eq!(g.add_edge(0, 2, 1.0), Err(GraphError::NodeOutOfRange(2)));
        assert!(g.add_edge(0, 1, -1.0).is_err());
        g.add_edge(1, 0, 1.0).unwrap();
        assert!(g.add_edge(0, 1, 2.0).is_err());
    }

    #[test]
    fn two_node_laplacian() {
        let g = NetworkGraph::complete(2, 1.0);
        assert_eq!(laplacian(&g), Matrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!((algebraic_connectivity(&laplacian(&g)).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kronecker_row_example() {
        let a = Matrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = Matrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(kronecker(&a, &b), Matrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 2.0]));
        let i2 = Matrix::identity(2, 2);
        assert_eq!(kronecker(&i2, &i2), Matrix::identity(4, 4));
    }

    #[test]
    fn nonsymmetric_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(algebraic_connectivity(&m), Err(GraphError::NotSymmetric));
    }

    #[test]
    fn disconnected_has_zero_fiedler() {
        let g = NetworkGraph::with_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert!(!g.is_connected());
        assert_eq!(algebraic_connectivity(&laplacian(&g)).unwrap(), 0.0);
    }
}
