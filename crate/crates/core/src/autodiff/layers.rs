//! Scale convolutions recorded on a tape, mirroring
//! [`crate::scaleconv`] op for op.

use std::sync::Arc;

use crate::conv::{ChannelLayout, Padding};
use crate::error::{Error, Result};
use crate::scaleconv::ScaleConvLayer;
use crate::tensor::{Scalar, Tensor};

use super::{Tape, Var};

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub bias: Option<Var>,
}

pub fn layer_leaves<T: Scalar>(tape: &mut Tape<T>, layer: &ScaleConvLayer<T>) -> LayerVars {
    let w = tape.leaf(layer.weights().clone());
    let bias = layer.bias().map(|b| tape.leaf(b.clone()));
    LayerVars { w, bias }
}

fn dims(tape: &Tape<impl Scalar>, w: Var, basis: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize, usize)> {
    let ws = tape.shape(w);
    if ws.len() != 4 {
        return Err(Error::shape(format!("layer weights must be [C_out, C_in, K_S, N_b], got {ws:?}")));
    }
    let bs = basis.shape();
    Ok((ws[0], ws[1], ws[2], bs[1], bs[2]))
}

/// `x [N, C_in, U, U]` to `[N, C_out, S, U, U]`.
pub fn conv_t_h<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: LayerVars,
    basis: &Arc<Tensor<T>>,
    padding: Padding,
) -> Result<Var> {
    let (o, i, k, s, v) = dims(tape, vars.w, basis)?;
    if k != 1 {
        return Err(Error::invalid("lifting layer cannot have interscale interaction"));
    }
    let [n, _, u, w] = tape.shape(x).try_into().map_err(|_| Error::shape("conv_t_h input must be [N, C, U, U]"))?;
    let kappa = tape.assemble_kernel(vars.w, basis.clone())?;
    let kappa = tape.reshape(kappa, &[o, i, s, v, v])?;
    let lifted = tape.permute(kappa, &[0, 2, 1, 3, 4])?;
    let lifted = tape.reshape(lifted, &[1, o * s, i, v, v])?;
    let y = tape.conv(x, lifted, ChannelLayout::Blocked, padding)?;
    let y = tape.reshape(y, &[n, o, s, u, w])?;
    match vars.bias {
        Some(b) => tape.channel_bias(y, b),
        None => Ok(y),
    }
}

/// `x [N, C_in, S, U, U]` to `[N, C_out, S, U, U]`, summing `K_S` shifted
/// grouped convolutions.
pub fn conv_h_h<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: LayerVars,
    basis: &Arc<Tensor<T>>,
    padding: Padding,
) -> Result<Var> {
    let (o, i, k, s, _) = dims(tape, vars.w, basis)?;
    let [n, _, xs, u, w] = tape.shape(x).try_into().map_err(|_| Error::shape("conv_h_h input must be [N, C, S, U, U]"))?;
    if xs != s {
        return Err(Error::invalid(format!("input has {xs} levels, basis has {s}")));
    }
    let kappa = tape.assemble_kernel(vars.w, basis.clone())?;
    let by_offset = tape.permute(kappa, &[2, 0, 1, 3, 4, 5])?;
    let mut acc: Option<Var> = None;
    for j in 0..k {
        let kj = tape.select_outer(by_offset, j)?;
        let blocks = tape.permute(kj, &[2, 0, 1, 3, 4])?;
        let xj = if j == 0 { x } else { tape.shift_scale(x, -(j as isize))? };
        let expanded = tape.reshape(xj, &[n, i * s, u, w])?;
        let y = tape.conv(expanded, blocks, ChannelLayout::Interleaved, padding)?;
        let y = tape.reshape(y, &[n, o, s, u, w])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    let y = acc.expect("interaction >= 1");
    match vars.bias {
        Some(b) => tape.channel_bias(y, b),
        None => Ok(y),
    }
}
