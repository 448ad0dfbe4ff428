use crate::error::{Error, Result};

use super::tensor::{ParamTensor, Tensor};

/// Row-major `m×k` by `k×n` product, written into `out` (`m×n`) as
/// `out = a·b + beta·out`.
pub fn gemm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, beta: f32) {
    assert_eq!(a.len(), m * k, "lhs extent");
    assert_eq!(b.len(), k * n, "rhs extent");
    assert_eq!(out.len(), m * n, "output extent");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents asserted above; all strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 1×1 convolution with stride 1: a per-pixel linear map `D -> K`.
pub fn conv1x1(features: &Tensor, weights: &ParamTensor, bias: &ParamTensor) -> Result<Tensor> {
    let (h, w, d) = features.dims3()?;
    let (wd, k) = weights.value.dims2()?;
    if wd != d {
        return Err(Error::Dimension(format!(
            "conv1x1 weights expect {wd} input channels, features have {d}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Dimension(format!(
            "conv1x1 bias shape {:?} does not match {k} output channels",
            bias.shape()
        )));
    }
    let pixels = h * w;
    let mut out = Vec::with_capacity(pixels * k);
    for _ in 0..pixels {
        out.extend_from_slice(bias.value.data());
    }
    gemm(features.data(), weights.value.data(), &mut out, pixels, d, k, 1.0);
    Tensor::from_vec(&[h, w, k], out)
}

fn check_backward_shapes(
    upstream: &Tensor,
    features: &Tensor,
    weights: &ParamTensor,
) -> Result<(usize, usize, usize)> {
    let (h, w, d) = features.dims3()?;
    let (uh, uw, k) = upstream.dims3()?;
    let (wd, wk) = weights.value.dims2()?;
    if (uh, uw) != (h, w) || wd != d || wk != k {
        return Err(Error::Dimension(format!(
            "conv1x1 backward: upstream {:?}, features {:?}, weights {:?} are inconsistent",
            upstream.shape(),
            features.shape(),
            weights.shape()
        )));
    }
    Ok((h * w, d, k))
}

/// Accumulates weight and bias gradients of [`conv1x1`] and returns the
/// gradient with respect to the input features.
pub fn conv1x1_backward(
    upstream: &Tensor,
    features: &Tensor,
    weights: &mut ParamTensor,
    bias: &mut ParamTensor,
) -> Result<Tensor> {
    conv1x1_backward_params(upstream, features, weights, bias)?;
    let (pixels, d, k) = check_backward_shapes(upstream, features, weights)?;
    let mut grad_features = vec![0.0f32; pixels * d];
    // grad_features = upstream · weightsᵀ
    // SAFETY: dense buffers with extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            pixels,
            k,
            d,
            1.0,
            upstream.data().as_ptr(),
            k as isize,
            1,
            weights.value.data().as_ptr(),
            1,
            k as isize,
            0.0,
            grad_features.as_mut_ptr(),
            d as isize,
            1,
        );
    }
    Tensor::from_vec(features.shape(), grad_features)
}

/// Parameter half of [`conv1x1_backward`], for callers whose features are
/// constants.
pub fn conv1x1_backward_params(
    upstream: &Tensor,
    features: &Tensor,
    weights: &mut ParamTensor,
    bias: &mut ParamTensor,
) -> Result<()> {
    let (pixels, d, k) = check_backward_shapes(upstream, features, weights)?;
    if bias.shape() != [k] {
        return Err(Error::Dimension(format!(
            "conv1x1 bias shape {:?} does not match {k} output channels",
            bias.shape()
        )));
    }
    // grad_weights += featuresᵀ · upstream
    // SAFETY: dense buffers with extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            d,
            pixels,
            k,
            1.0,
            features.data().as_ptr(),
            1,
            d as isize,
            upstream.data().as_ptr(),
            k as isize,
            1,
            1.0,
            weights.grad.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    let mut sums = vec![0.0f64; k];
    for row in upstream.data().chunks_exact(k) {
        for (s, &u) in sums.iter_mut().zip(row) {
            *s += u as f64;
        }
    }
    for (g, s) in bias.grad.data_mut().iter_mut().zip(sums) {
        *g += s as f32;
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Domain(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(values: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(values.shape(), axis)?;
    if n == 0 {
        return Err(Error::Domain("softmax over an empty axis".into()));
    }
    let mut buf: Vec<f64> = values.data().iter().map(|&v| v as f64).collect();
    softmax_strided(&mut buf, outer, n, inner);
    Tensor::from_vec(values.shape(), buf.into_iter().map(|v| v as f32).collect())
}

/// In-place softmax over the middle extent of an `outer×n×inner` buffer.
pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0f64;
            for j in 0..n {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                data[at(j)] /= total;
            }
        }
    }
}

/// Vector-Jacobian product of softmax: given the softmax output `y` and the
/// upstream gradient `dy`, returns `y ∘ (dy − Σ y·dy)` along `axis`.
pub fn softmax_backward(output: &Tensor, upstream: &Tensor, axis: usize) -> Result<Tensor> {
    if output.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "softmax backward: output {:?} vs upstream {:?}",
            output.shape(),
            upstream.shape()
        )));
    }
    let (outer, n, inner) = axis_split(output.shape(), axis)?;
    let y: Vec<f64> = output.data().iter().map(|&v| v as f64).collect();
    let dy: Vec<f64> = upstream.data().iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; output.len()];
    softmax_backward_strided(&y, &dy, &mut grad, outer, n, inner);
    Tensor::from_vec(output.shape(), grad.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn softmax_backward_strided(
    y: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    outer: usize,
    n: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: f64 = (0..n).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..n {
                grad[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}
