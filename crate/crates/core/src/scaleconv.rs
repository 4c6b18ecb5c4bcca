//! Scale convolutions built from one 2D convolution each.
//!
//! * `conv_t_h`: `squeeze(conv2d(f, expand(w x Psi)))` lifts `[N, C_in, U, U]`
//!   to `[N, C_out, S, U, U]`.
//! * `conv_h_h`: `squeeze(conv2d(expand(f), expand(w x Psi)))`. The expanded
//!   kernel is block diagonal over levels, so it is run as a grouped
//!   convolution over the `S` diagonal blocks.
//! * `conv_h_h_interscale`: for each offset `j < K_S` the input is shifted `j`
//!   levels toward level 0 (zero filled at the coarse end) and convolved with
//!   weight slice `j`; the `K_S` results are summed. The spatial width of the
//!   kernel is always the one of the output level.

use std::sync::Arc;

use rand::Rng;

use crate::basis::{assemble_kernel, SteerableBasis};
use crate::conv::{conv2d, conv2d_grouped, ChannelLayout, Padding};
use crate::error::{Error, Result};
use crate::group::ScaleGrid;
use crate::pool::{global_max_spatial, max_over_axis};
use crate::tensor::{expand_signal, squeeze_output, Scalar, Tensor};

/// A batch of signals on the scale-translation group, `[N, C, S, U, U]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapH<T> {
    data: Tensor<T>,
    grid: ScaleGrid,
}

impl<T: Scalar> FeatureMapH<T> {
    pub fn new(data: Tensor<T>, grid: ScaleGrid) -> Result<Self> {
        data.expect_rank(5, "feature map on H")?;
        if data.shape()[2] != grid.num_levels() {
            return Err(Error::shape(format!(
                "scale extent {} does not match a {}-level grid",
                data.shape()[2],
                grid.num_levels()
            )));
        }
        Ok(FeatureMapH { data, grid })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn map_data(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Result<Self> {
        FeatureMapH::new(f(&self.data), self.grid.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Identity,
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "identity" => Ok(Nonlinearity::Identity),
            _ => Err(Error::invalid(format!("unknown nonlinearity `{s}`"))),
        }
    }
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Identity => "identity",
        })
    }
}

/// Trainable weights over a fixed steerable basis.
#[derive(Clone, Debug)]
pub struct ScaleConvLayer<T> {
    weights: Tensor<T>,
    bias: Option<Tensor<T>>,
    basis: Arc<SteerableBasis>,
    basis_cast: Arc<Tensor<T>>,
    padding: Padding,
}

impl<T: Scalar> ScaleConvLayer<T> {
    /// `weights` is `[C_out, C_in, N_b]` or `[C_out, C_in, K_S, N_b]`.
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>, basis: Arc<SteerableBasis>, padding: Padding) -> Result<Self> {
        let weights = match weights.rank() {
            3 => {
                let [o, i, b] = weights.shape().try_into().unwrap();
                weights.reshape(&[o, i, 1, b])?
            }
            4 => weights,
            _ => return Err(Error::shape(format!("layer weights have shape {:?}", weights.shape()))),
        };
        let [c_out, _, k_s, nb] = weights.shape().try_into().unwrap();
        if nb != basis.num_functions() {
            return Err(Error::shape(format!("weights index {nb} basis functions, basis has {}", basis.num_functions())));
        }
        if k_s > basis.num_levels() {
            return Err(Error::invalid(format!(
                "interaction {k_s} exceeds the {} scale levels",
                basis.num_levels()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(format!("bias has shape {:?}, expected [{c_out}]", b.shape())));
            }
        }
        let basis_cast = Arc::new(basis.cast());
        Ok(ScaleConvLayer { weights, bias, basis, basis_cast, padding })
    }

    /// Uniform init in `[-b, b]`, `b = (C_in * N_b)^(-1/2)`; bias starts at zero.
    pub fn random(
        c_in: usize,
        c_out: usize,
        interaction: usize,
        basis: Arc<SteerableBasis>,
        with_bias: bool,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let nb = basis.num_functions();
        let bound = 1.0 / ((c_in * nb) as f64).sqrt();
        let weights = Tensor::from_fn(&[c_out, c_in, interaction, nb], |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
        let bias = with_bias.then(|| Tensor::zeros(&[c_out]));
        Self::new(weights, bias, basis, padding)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.bias.as_mut()
    }

    pub fn basis(&self) -> &Arc<SteerableBasis> {
        &self.basis
    }

    pub fn basis_tensor(&self) -> &Arc<Tensor<T>> {
        &self.basis_cast
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn set_padding(&mut self, padding: Padding) {
        self.padding = padding;
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn interaction(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.basis.spec().scale_grid
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// `[C_out, C_in, S, V, V]` kernel of interaction slice `j`.
    pub fn kernel(&self, j: usize) -> Result<Tensor<T>> {
        let [o, i, k, nb] = self.weights.shape().try_into().unwrap();
        if j >= k {
            return Err(Error::invalid(format!("interaction slice {j} of {k}")));
        }
        let slice: Vec<T> = (0..o * i)
            .flat_map(|oi| self.weights.data()[(oi * k + j) * nb..(oi * k + j + 1) * nb].iter().copied())
            .collect();
        assemble_kernel(&Tensor::new(&[o, i, nb], slice)?, &self.basis_cast)
    }
}

/// `[C_out, C_in, S, V, V]` to the lifting kernel `[C_out*S, C_in, V, V]`.
pub fn lifting_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    kernel.expect_rank(5, "scale kernel")?;
    let [o, i, s, v, _] = kernel.shape().try_into().unwrap();
    kernel.permute(&[0, 2, 1, 3, 4])?.reshape(&[o * s, i, v, v])
}

/// `[C_out, C_in, S, V, V]` to the diagonal blocks `[S, C_out, C_in, V, V]`
/// of the expanded `[C_out*S, C_in*S, V, V]` kernel.
pub fn level_blocks<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    kernel.expect_rank(5, "scale kernel")?;
    kernel.permute(&[2, 0, 1, 3, 4])
}

/// Dense block-diagonal expansion `[C_out*S, C_in*S, V, V]`.
pub fn block_diagonal_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    kernel.expect_rank(5, "scale kernel")?;
    let [o, i, s, v, _] = kernel.shape().try_into().unwrap();
    let vv = v * v;
    let mut dense = Tensor::zeros(&[o * s, i * s, v, v]);
    for oc in 0..o {
        for ic in 0..i {
            for l in 0..s {
                let src = ((oc * i + ic) * s + l) * vv;
                let dst = ((oc * s + l) * (i * s) + ic * s + l) * vv;
                dense.data_mut()[dst..dst + vv].copy_from_slice(&kernel.data()[src..src + vv]);
            }
        }
    }
    Ok(dense)
}

/// Add a per-channel bias to `[N, C, ...]`, shared over every trailing axis.
pub fn add_channel_bias<T: Scalar>(t: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let c = t.shape()[1];
    if bias.shape() != [c] {
        return Err(Error::shape(format!("bias {:?} for {c} channels", bias.shape())));
    }
    let inner: usize = t.shape()[2..].iter().product();
    for (chunk_idx, chunk) in t.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[chunk_idx % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(())
}

fn check_grid<T: Scalar>(f: &FeatureMapH<T>, layer: &ScaleConvLayer<T>) -> Result<()> {
    if f.grid() != layer.grid() {
        return Err(Error::invalid(format!("feature map grid {:?} does not match basis grid {:?}", f.grid(), layer.grid())));
    }
    if f.channels() != layer.c_in() {
        return Err(Error::shape(format!("layer expects {} input channels, got {}", layer.c_in(), f.channels())));
    }
    Ok(())
}

fn batched(f: &Tensor<impl Scalar>) -> Result<()> {
    if f.rank() != 4 {
        return Err(Error::shape(format!("signal on T must be [N, C, U, U], got {:?}", f.shape())));
    }
    Ok(())
}

/// Lift a signal on T, `[N, C_in, U, U]`, to H.
pub fn conv_t_h<T: Scalar>(f: &Tensor<T>, layer: &ScaleConvLayer<T>) -> Result<FeatureMapH<T>> {
    batched(f)?;
    if layer.interaction() != 1 {
        return Err(Error::invalid("conv_t_h needs a layer without interscale interaction"));
    }
    if f.shape()[1] != layer.c_in() {
        return Err(Error::shape(format!("layer expects {} input channels, got {}", layer.c_in(), f.shape()[1])));
    }
    let s = layer.grid().num_levels();
    let kernel = lifting_kernel(&layer.kernel(0)?)?;
    let mut out = squeeze_output(conv2d(f, &kernel, layer.padding)?, s)?;
    if let Some(b) = &layer.bias {
        add_channel_bias(&mut out, b)?;
    }
    FeatureMapH::new(out, layer.grid().clone())
}

fn conv_h_h_slice<T: Scalar>(f: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let s = f.shape()[2];
    let expanded = expand_signal(f.clone())?;
    let out = conv2d_grouped(&expanded, &level_blocks(kernel)?, ChannelLayout::Interleaved, padding)?;
    squeeze_output(out, s)
}

/// H to H without interscale interaction.
pub fn conv_h_h<T: Scalar>(f: &FeatureMapH<T>, layer: &ScaleConvLayer<T>) -> Result<FeatureMapH<T>> {
    check_grid(f, layer)?;
    if layer.interaction() != 1 {
        return conv_h_h_interscale(f, layer);
    }
    let mut out = conv_h_h_slice(f.data(), &layer.kernel(0)?, layer.padding)?;
    if let Some(b) = &layer.bias {
        add_channel_bias(&mut out, b)?;
    }
    FeatureMapH::new(out, f.grid().clone())
}

/// H to H with `K_S = layer.interaction()` neighbouring levels.
pub fn conv_h_h_interscale<T: Scalar>(f: &FeatureMapH<T>, layer: &ScaleConvLayer<T>) -> Result<FeatureMapH<T>> {
    check_grid(f, layer)?;
    let ks = layer.interaction();
    if ks > f.grid().num_levels() {
        return Err(Error::invalid(format!("interaction {ks} exceeds {} levels", f.grid().num_levels())));
    }
    let mut acc: Option<Tensor<T>> = None;
    for j in 0..ks {
        let shifted = shift_scale(f.data(), -(j as isize))?;
        let part = conv_h_h_slice(&shifted, &layer.kernel(j)?, layer.padding)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&part)?,
            None => acc = Some(part),
        }
    }
    let mut out = acc.expect("interaction >= 1");
    if let Some(b) = &layer.bias {
        add_channel_bias(&mut out, b)?;
    }
    FeatureMapH::new(out, f.grid().clone())
}

/// Literal form of the H to H algorithm: one dense convolution with the
/// block-diagonal `[C_out*S, C_in*S, V, V]` kernel. Used as a cross-check of
/// the grouped fast path.
pub fn conv_h_h_dense<T: Scalar>(f: &FeatureMapH<T>, layer: &ScaleConvLayer<T>) -> Result<FeatureMapH<T>> {
    check_grid(f, layer)?;
    let s = f.grid().num_levels();
    let mut acc: Option<Tensor<T>> = None;
    for j in 0..layer.interaction() {
        let shifted = shift_scale(f.data(), -(j as isize))?;
        let dense = block_diagonal_kernel(&layer.kernel(j)?)?;
        let part = squeeze_output(conv2d(&expand_signal(shifted)?, &dense, layer.padding)?, s)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&part)?,
            None => acc = Some(part),
        }
    }
    let mut out = acc.expect("interaction >= 1");
    if let Some(b) = &layer.bias {
        add_channel_bias(&mut out, b)?;
    }
    FeatureMapH::new(out, f.grid().clone())
}

/// Reference route: one plain convolution per (offset, output level).
pub fn conv_h_h_per_level<T: Scalar>(f: &FeatureMapH<T>, layer: &ScaleConvLayer<T>) -> Result<FeatureMapH<T>> {
    check_grid(f, layer)?;
    let [n, _, s, u, w] = f.shape().try_into().unwrap();
    let c_out = layer.c_out();
    let mut out = Tensor::zeros(&[n, c_out, s, u, w]);
    for j in 0..layer.interaction() {
        let kernel = layer.kernel(j)?;
        for level in 0..s.saturating_sub(j) {
            let input = select_level(f.data(), level + j)?;
            let k = select_level(&kernel, level)?;
            let part = conv2d(&input, &k, layer.padding)?;
            for b in 0..n {
                for o in 0..c_out {
                    let dst = out.offset(&[b, o, level, 0, 0]);
                    let src = part.offset(&[b, o, 0, 0]);
                    for p in 0..u * w {
                        out.data_mut()[dst + p] = out.data()[dst + p] + part.data()[src + p];
                    }
                }
            }
        }
    }
    if let Some(bias) = &layer.bias {
        add_channel_bias(&mut out, bias)?;
    }
    FeatureMapH::new(out, f.grid().clone())
}

/// Level `level` of `[N, C, S, ...]` as `[N, C, ...]`.
pub fn select_level<T: Scalar>(t: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
    let s = t.shape()[2];
    if level >= s {
        return Err(Error::invalid(format!("level {level} of {s}")));
    }
    let inner: usize = t.shape()[3..].iter().product();
    let outer = t.shape()[0] * t.shape()[1];
    let mut data = Vec::with_capacity(outer * inner);
    for row in 0..outer {
        let off = (row * s + level) * inner;
        data.extend_from_slice(&t.data()[off..off + inner]);
    }
    let mut shape = t.shape().to_vec();
    shape.remove(2);
    Tensor::new(&shape, data)
}

/// `out[.., l, ..] = f[.., l - shift, ..]`, zero where `l - shift` falls
/// outside the grid. Negative shifts move content toward level 0.
pub fn shift_scale<T: Scalar>(t: &Tensor<T>, shift: isize) -> Result<Tensor<T>> {
    if t.rank() < 3 {
        return Err(Error::shape(format!("shift_scale needs [N, C, S, ...], got {:?}", t.shape())));
    }
    let s = t.shape()[2];
    let inner: usize = t.shape()[3..].iter().product();
    let outer = t.shape()[0] * t.shape()[1];
    let mut out = Tensor::zeros(t.shape());
    for row in 0..outer {
        for level in 0..s {
            let src = level as isize - shift;
            if (0..s as isize).contains(&src) {
                let d = (row * s + level) * inner;
                let sidx = (row * s + src as usize) * inner;
                out.data_mut()[d..d + inner].copy_from_slice(&t.data()[sidx..sidx + inner]);
            }
        }
    }
    Ok(out)
}

pub fn pointwise_nonlinearity<T: Scalar>(f: &FeatureMapH<T>, kind: Nonlinearity) -> FeatureMapH<T> {
    match kind {
        Nonlinearity::Identity => f.clone(),
        Nonlinearity::Relu => FeatureMapH { data: relu(&f.data), grid: f.grid.clone() },
    }
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `f(s, x) -> max_s f(s, x)`: `[N, C, S, U, U]` to `[N, C, U, U]`.
pub fn scale_projection<T: Scalar>(f: &FeatureMapH<T>) -> Result<Tensor<T>> {
    Ok(max_over_axis(f.data(), 2)?.0)
}

/// `f(s, x) -> max_x f(s, x)`: `[N, C, S, U, U]` to `[N, C, S]`.
pub fn scale_axis_pool_spatial<T: Scalar>(f: &FeatureMapH<T>) -> Result<Tensor<T>> {
    global_max_spatial(f.data())
}
