//! Forward kernels and their backward rules (gradient, epsilon-LRP and
//! excitation), each as a free function over explicit activations so they
//! can be tested in isolation from the tape.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Stabiliser for the epsilon relevance rule. Always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Epsilon<T = f64>(T);

impl<T: Scalar> Epsilon<T> {
    pub fn new(value: T) -> Result<Self> {
        if value > T::zero() && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!(
                "epsilon must be positive, got {value}"
            )))
        }
    }

    pub fn value(self) -> T {
        self.0
    }

    /// `z + ε·sign(z)`, with `sign(0) = +1`.
    #[inline]
    pub fn stabilize(self, z: T) -> T {
        if z >= T::zero() {
            z + self.0
        } else {
            z - self.0
        }
    }
}

impl<T: Scalar> Default for Epsilon<T> {
    fn default() -> Self {
        Self(T::of(1e-6))
    }
}

fn check_bias<T: Scalar>(weights: &Matrix<T>, bias: Option<&Matrix<T>>) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != (1, weights.cols()) {
            return Err(Error::Dimension {
                op: "linear bias",
                left: (1, weights.cols()),
                right: b.shape(),
            });
        }
    }
    Ok(())
}

/// `input · weights + bias`, bias broadcast over rows.
pub fn linear_forward<T: Scalar>(
    input: &Matrix<T>,
    weights: &Matrix<T>,
    bias: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    check_bias(weights, bias)?;
    let mut out = input.matmul(weights)?;
    if let Some(b) = bias {
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("linear"));
    }
    Ok(out)
}

pub fn relu_forward<T: Scalar>(input: &Matrix<T>) -> Matrix<T> {
    input.map(|v| v.max(T::zero()))
}

/// `adjacency · input`; the adjacency is a constant of the computation.
pub fn aggregate_forward<T: Scalar>(adjacency: &Matrix<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    adjacency.matmul(input)
}

/// Column means as a `1 × cols` row.
pub fn mean_readout_forward<T: Scalar>(input: &Matrix<T>) -> Result<Matrix<T>> {
    if input.rows() == 0 {
        return Err(Error::Dimension {
            op: "mean_readout",
            left: input.shape(),
            right: (1, input.cols()),
        });
    }
    let n = T::of(input.rows() as f64);
    Ok(input.col_sums().map(|v| v / n))
}

fn check_upstream<T: Scalar>(
    op: &'static str,
    output: (usize, usize),
    upstream: &Matrix<T>,
) -> Result<()> {
    if upstream.shape() != output {
        return Err(Error::Dimension {
            op,
            left: output,
            right: upstream.shape(),
        });
    }
    Ok(())
}

/// Epsilon-LRP through a linear layer:
/// `r_j = Σ_k a_j w_jk / stab(Σ_j' a_j' w_j'k + b_k) · r_k`.
///
/// The bias appears in the denominator only; it receives no relevance.
pub fn lrp_linear_backward<T: Scalar>(
    input: &Matrix<T>,
    weights: &Matrix<T>,
    bias: Option<&Matrix<T>>,
    upstream: &Matrix<T>,
    eps: Epsilon<T>,
) -> Result<Matrix<T>> {
    let z = linear_forward(input, weights, bias)?;
    check_upstream("lrp_linear_backward", z.shape(), upstream)?;
    let s = upstream.zip_map(&z, "lrp_linear_backward", |r, z| r / eps.stabilize(z))?;
    input.hadamard(&s.matmul_t(weights)?)
}

/// ReLU passes relevance through unchanged.
pub fn lrp_relu_backward<T: Scalar>(upstream: &Matrix<T>) -> Matrix<T> {
    upstream.clone()
}

/// Epsilon-LRP through `adjacency · input`, independently per feature column.
pub fn lrp_aggregate_backward<T: Scalar>(
    adjacency: &Matrix<T>,
    input: &Matrix<T>,
    upstream: &Matrix<T>,
    eps: Epsilon<T>,
) -> Result<Matrix<T>> {
    let z = aggregate_forward(adjacency, input)?;
    check_upstream("lrp_aggregate_backward", z.shape(), upstream)?;
    let s = upstream.zip_map(&z, "lrp_aggregate_backward", |r, z| r / eps.stabilize(z))?;
    input.hadamard(&adjacency.t_matmul(&s)?)
}

/// Epsilon-LRP through the mean readout, treating it as a linear map with
/// uniform weights `1/|V|`.
pub fn lrp_mean_readout_backward<T: Scalar>(
    input: &Matrix<T>,
    upstream: &Matrix<T>,
    eps: Epsilon<T>,
) -> Result<Matrix<T>> {
    let z = mean_readout_forward(input)?;
    check_upstream("lrp_mean_readout_backward", z.shape(), upstream)?;
    let n = T::of(input.rows() as f64);
    Ok(Matrix::from_fn(input.rows(), input.cols(), |v, d| {
        input.get(v, d) / n * upstream.get(0, d) / eps.stabilize(z.get(0, d))
    }))
}

/// Excitation (positive-weight) propagation through a linear layer:
/// `p_j = Σ_k a⁺_j w⁺_jk / Σ_j' a⁺_j' w⁺_j'k · p_k`, zero where the
/// denominator vanishes.
pub fn excitation_linear_backward<T: Scalar>(
    input: &Matrix<T>,
    weights: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let a = relu_forward(input);
    let w = relu_forward(weights);
    let z = a.matmul(&w)?;
    check_upstream("excitation_linear_backward", z.shape(), upstream)?;
    let s = upstream.zip_map(&z, "excitation_linear_backward", safe_div)?;
    a.hadamard(&s.matmul_t(&w)?)
}

pub fn excitation_aggregate_backward<T: Scalar>(
    adjacency: &Matrix<T>,
    input: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let a = relu_forward(input);
    let adj = relu_forward(adjacency);
    let z = adj.matmul(&a)?;
    check_upstream("excitation_aggregate_backward", z.shape(), upstream)?;
    let s = upstream.zip_map(&z, "excitation_aggregate_backward", safe_div)?;
    a.hadamard(&adj.t_matmul(&s)?)
}

pub fn excitation_mean_readout_backward<T: Scalar>(
    input: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let a = relu_forward(input);
    let z = a.col_sums();
    check_upstream("excitation_mean_readout_backward", z.shape(), upstream)?;
    Ok(Matrix::from_fn(a.rows(), a.cols(), |v, d| {
        a.get(v, d) * safe_div(upstream.get(0, d), z.get(0, d))
    }))
}

#[inline]
fn safe_div<T: Scalar>(num: T, den: T) -> T {
    if den > T::zero() {
        num / den
    } else {
        T::zero()
    }
}
