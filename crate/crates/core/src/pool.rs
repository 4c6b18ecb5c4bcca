//! Max reductions: windowed spatial pooling, global spatial max, and max over
//! an arbitrary axis (the scale projection). Each returns the flat source index
//! of every selected element so the backward pass can route gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max over an axis together with the flat argmax indices (first maximum wins).
pub fn max_over_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if axis >= t.rank() {
        return Err(Error::shape(format!("no axis {axis} in {:?}", t.shape())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let extent = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let data = t.data();
    let mut values = Vec::with_capacity(outer * inner);
    let mut argmax = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut best = base;
            for k in 1..extent {
                let idx = base + k * inner;
                if data[idx] > data[best] {
                    best = idx;
                }
            }
            values.push(data[best]);
            argmax.push(best);
        }
    }
    let mut shape: Vec<usize> = t.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok((Tensor::new(&shape, values)?, argmax))
}

/// Non-overlapping `window x window` max pooling over the last two axes;
/// trailing rows/columns that do not fill a window are dropped.
pub fn max_pool2d_with_indices<T: Scalar>(t: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if t.rank() < 2 {
        return Err(Error::shape(format!("max_pool2d needs rank >= 2, got {:?}", t.shape())));
    }
    let rank = t.rank();
    let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    if window == 0 || window > h || window > w {
        return Err(Error::invalid(format!("pool window {window} does not fit a {h}x{w} map")));
    }
    let (oh, ow) = (h / window, w / window);
    let planes: usize = t.shape()[..rank - 2].iter().product();
    let data = t.data();
    let mut values = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                values.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok((Tensor::new(&shape, values)?, argmax))
}

pub fn max_pool2d<T: Scalar>(t: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    Ok(max_pool2d_with_indices(t, window)?.0)
}

/// Max over the whole spatial domain (last two axes).
pub fn global_max_spatial_with_indices<T: Scalar>(t: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if t.rank() < 3 {
        return Err(Error::shape(format!("global max needs rank >= 3, got {:?}", t.shape())));
    }
    let merged = t.clone().merge_axes(t.rank() - 2)?;
    max_over_axis(&merged, merged.rank() - 1)
}

pub fn global_max_spatial<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(global_max_spatial_with_indices(t)?.0)
}

/// Route an upstream gradient back through a max selection.
pub fn scatter_max_grad<T: Scalar>(grad: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad.len() != argmax.len() {
        return Err(Error::shape("max backward: gradient/index length mismatch"));
    }
    let mut out = Tensor::zeros(input_shape);
    let buf = out.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        buf[i] = buf[i] + g;
    }
    Ok(out)
}
