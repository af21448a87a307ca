use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graphdata::PropagationEvent;
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Directed and undirected views of a reply tree.
///
/// The raw views are 0/1 matrices with `top_down[parent][child] = 1`. Each
/// `*_propagation` operator is the row-normalised `D⁻¹(Aᵀ + I)` of its view:
/// row `v` averages node `v` with the nodes that send messages to `v` along
/// that view's edges. In the top-down operator a child receives from its
/// parent; in the bottom-up operator a parent receives from its children.
#[derive(Clone, Debug)]
pub struct AdjacencyViews<T = f64> {
    pub top_down: Matrix<T>,
    pub bottom_up: Matrix<T>,
    pub undirected: Matrix<T>,
    pub top_down_propagation: Arc<Matrix<T>>,
    pub bottom_up_propagation: Arc<Matrix<T>>,
    pub undirected_propagation: Arc<Matrix<T>>,
}

/// Row-normalised `viewᵀ + I`.
pub fn propagation_operator<T: Scalar>(view: &Matrix<T>) -> Matrix<T> {
    let n = view.rows();
    let mut op = view.transpose();
    for v in 0..n {
        op.set(v, v, T::one());
    }
    for v in 0..n {
        let deg: T = op.row(v).iter().copied().sum();
        for x in op.row_mut(v) {
            *x /= deg;
        }
    }
    op
}

pub fn build_adjacency<T: Scalar>(event: &PropagationEvent) -> Result<AdjacencyViews<T>> {
    let n = event.num_nodes();
    let edges = event.edges();
    if edges.len() + 1 != n {
        return Err(Error::Structure(format!(
            "event {} has {} edges for {} nodes",
            event.event_id(),
            edges.len(),
            n
        )));
    }
    let mut top_down = Matrix::zeros(n, n);
    for &(parent, child) in &edges {
        if parent >= n || child >= n || parent == child {
            return Err(Error::Structure(format!(
                "invalid edge ({parent}, {child})"
            )));
        }
        top_down.set(parent, child, T::one());
    }
    let bottom_up = top_down.transpose();
    let undirected = top_down.zip_map(&bottom_up, "undirected", |a, b| a.max(b))?;
    Ok(AdjacencyViews {
        top_down_propagation: Arc::new(propagation_operator(&top_down)),
        bottom_up_propagation: Arc::new(propagation_operator(&bottom_up)),
        undirected_propagation: Arc::new(propagation_operator(&undirected)),
        top_down,
        bottom_up,
        undirected,
    })
}
