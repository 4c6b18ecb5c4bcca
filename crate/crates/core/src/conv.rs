//! Same-size, stride-1 2D cross-correlation via im2col + GEMM.
//!
//! `out[o, y, x] = sum_{c, dy, dx} in[c, y + dy - r, x + dx - r] * k[o, c, dy, dx]`
//! with `r = (V - 1) / 2`; reads outside the image are resolved by [`Padding`].
//!
//! The grouped variant is what makes `convHH` a single call: a block-diagonal
//! expanded kernel `[C_out*S, C_in*S, V, V]` is stored as its `S` diagonal
//! blocks `[S, C_out, C_in, V, V]`, and the expanded signal keeps its
//! scale-fastest channel order ([`ChannelLayout::Interleaved`]).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Padding::Zero),
            "circular" => Ok(Padding::Circular),
            other => Err(Error::invalid(format!("unknown padding mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Zero => "zero",
            Padding::Circular => "circular",
        })
    }
}

/// How the channels of group `g` are laid out in a `G * C_g` channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelLayout {
    /// channel `g * C_g + c`
    Blocked,
    /// channel `c * G + g`
    Interleaved,
}

impl ChannelLayout {
    #[inline]
    fn channel(self, group: usize, c: usize, groups: usize, per_group: usize) -> usize {
        match self {
            ChannelLayout::Blocked => group * per_group + c,
            ChannelLayout::Interleaved => c * groups + group,
        }
    }

    /// Offset (in planes) of channel 0 of `group` and the plane stride between
    /// its consecutive channels.
    #[inline]
    fn plane_view(self, group: usize, groups: usize, per_group: usize) -> (usize, usize) {
        match self {
            ChannelLayout::Blocked => (group * per_group, 1),
            ChannelLayout::Interleaved => (group, groups),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    groups: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    v: usize,
    layout: ChannelLayout,
    padding: Padding,
}

impl Geometry {
    fn from(input: &Tensor<impl Scalar>, kernel: &Tensor<impl Scalar>, layout: ChannelLayout, padding: Padding) -> Result<Self> {
        input.expect_rank(4, "conv2d input")?;
        kernel.expect_rank(5, "grouped conv2d kernel")?;
        let [batch, channels, h, w] = input.shape().try_into().unwrap();
        let [groups, c_out, c_in, v, v2] = kernel.shape().try_into().unwrap();
        if v != v2 {
            return Err(Error::shape(format!("kernel must be square, got {v}x{v2}")));
        }
        if v % 2 == 0 {
            return Err(Error::shape(format!("kernel size must be odd, got {v}")));
        }
        if channels != groups * c_in {
            return Err(Error::shape(format!(
                "input has {channels} channels, kernel expects {groups} groups x {c_in}"
            )));
        }
        Ok(Geometry { batch, groups, c_in, c_out, h, w, v, layout, padding })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.v * self.v
    }

    fn in_image(&self) -> usize {
        self.groups * self.c_in * self.hw()
    }

    fn out_image(&self) -> usize {
        self.groups * self.c_out * self.hw()
    }

    fn kernel_group(&self) -> usize {
        self.c_out * self.col_rows()
    }

    /// Output rows of `group` inside one image's output block.
    fn out_rows(&self, group: usize) -> Strides {
        let (first, step) = self.layout.plane_view(group, self.groups, self.c_out);
        Strides { offset: first * self.hw(), rs: step * self.hw(), cs: 1 }
    }

    #[inline]
    fn source(&self, pos: isize, extent: usize) -> Option<usize> {
        let n = extent as isize;
        match self.padding {
            Padding::Zero => (0..n).contains(&pos).then_some(pos as usize),
            Padding::Circular => Some(pos.rem_euclid(n) as usize),
        }
    }
}

/// Output rows per im2col pass such that the column buffer stays near
/// `COL_BUDGET` elements.
const COL_BUDGET: usize = if cfg!(test) { 1 << 8 } else { 1 << 22 };

fn im2col<T: Scalar>(geo: &Geometry, image: &[T], group: usize, cols: &mut [T]) {
    im2col_rows(geo, image, group, 0..geo.h, cols)
}

/// Gather the receptive fields of output rows `rows` of one group of one
/// image into `cols[(c*V + dy)*V + dx][(y - rows.start)*W + x]`.
fn im2col_rows<T: Scalar>(geo: &Geometry, image: &[T], group: usize, rows: std::ops::Range<usize>, cols: &mut [T]) {
    let (h, w, v, hw) = (geo.h, geo.w, geo.v, geo.hw());
    let tile = rows.len() * w;
    let r = (v / 2) as isize;
    for c in 0..geo.c_in {
        let ch = geo.layout.channel(group, c, geo.groups, geo.c_in);
        let plane = &image[ch * hw..(ch + 1) * hw];
        for dy in 0..v {
            for dx in 0..v {
                let row = &mut cols[((c * v + dy) * v + dx) * tile..][..tile];
                let ox = dx as isize - r;
                for y in rows.clone() {
                    let dst = &mut row[(y - rows.start) * w..(y - rows.start + 1) * w];
                    let Some(sy) = geo.source(y as isize + dy as isize - r, h) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    match geo.padding {
                        Padding::Zero => {
                            // valid x range: 0 <= x + ox < w
                            let lo = (-ox).clamp(0, w as isize) as usize;
                            let hi = (w as isize - ox).clamp(0, w as isize) as usize;
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            if lo < hi {
                                let s0 = (lo as isize + ox) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        }
                        Padding::Circular => {
                            for (x, d) in dst.iter_mut().enumerate() {
                                *d = src[(x as isize + ox).rem_euclid(w as isize) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of [`im2col`].
fn col2im<T: Scalar>(geo: &Geometry, cols: &[T], group: usize, image: &mut [T]) {
    let (h, w, v, hw) = (geo.h, geo.w, geo.v, geo.hw());
    let r = (v / 2) as isize;
    for c in 0..geo.c_in {
        let ch = geo.layout.channel(group, c, geo.groups, geo.c_in);
        let plane = &mut image[ch * hw..(ch + 1) * hw];
        for dy in 0..v {
            for dx in 0..v {
                let row = &cols[((c * v + dy) * v + dx) * hw..][..hw];
                let ox = dx as isize - r;
                for y in 0..h {
                    let Some(sy) = geo.source(y as isize + dy as isize - r, h) else {
                        continue;
                    };
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        if let Some(sx) = geo.source(x as isize + ox, w) {
                            dst[sx] = dst[sx] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Plain convolution: input `[C_in, U, U]` or `[N, C_in, U, U]`, kernel
/// `[C_out, C_in, V, V]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    kernel.expect_rank(4, "conv2d kernel")?;
    let unbatched = input.rank() == 3;
    let batched = if unbatched {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        input.clone().reshape(&shape)?
    } else {
        input.clone()
    };
    let mut kshape = vec![1];
    kshape.extend_from_slice(kernel.shape());
    let k5 = kernel.clone().reshape(&kshape)?;
    let out = conv2d_grouped(&batched, &k5, ChannelLayout::Blocked, padding)?;
    if unbatched {
        let shape = out.shape()[1..].to_vec();
        out.reshape(&shape)
    } else {
        Ok(out)
    }
}

/// Grouped convolution: input `[N, G*C_in, H, W]`, kernel
/// `[G, C_out, C_in, V, V]`, output `[N, G*C_out, H, W]`, with the same
/// channel layout on both sides.
pub fn conv2d_grouped<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    layout: ChannelLayout,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geo = Geometry::from(input, kernel, layout, padding)?;
    let mut out = vec![T::zero(); geo.batch * geo.out_image()];
    let (inp, ker) = (input.data(), kernel.data());
    let band = (COL_BUDGET / (geo.col_rows() * geo.w).max(1)).clamp(1, geo.h.max(1));
    out.par_chunks_mut(geo.out_image())
        .zip(inp.par_chunks(geo.in_image()))
        .for_each_init(
            || vec![T::zero(); geo.col_rows() * band * geo.w],
            |cols, (out_img, in_img)| {
                for g in 0..geo.groups {
                    for y0 in (0..geo.h).step_by(band) {
                        let rows = y0..(y0 + band).min(geo.h);
                        let tile = rows.len() * geo.w;
                        im2col_rows(&geo, in_img, g, rows, cols);
                        let dst = geo.out_rows(g);
                        gemm(
                            geo.c_out,
                            geo.col_rows(),
                            tile,
                            T::one(),
                            ker,
                            Strides::row_major(g * geo.kernel_group(), geo.col_rows()),
                            cols,
                            Strides::row_major(0, tile),
                            T::zero(),
                            out_img,
                            Strides { offset: dst.offset + y0 * geo.w, ..dst },
                        );
                    }
                }
            },
        );
    Tensor::new(&[geo.batch, geo.groups * geo.c_out, geo.h, geo.w], out)
}

/// Gradients of a grouped convolution with respect to its input (when
/// `want_input`) and its kernel. Per-image kernel gradients are summed in
/// image order, so the result does not depend on the thread count.
pub fn conv2d_grouped_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    layout: ChannelLayout,
    padding: Padding,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let geo = Geometry::from(input, kernel, layout, padding)?;
    if grad_out.shape() != [geo.batch, geo.groups * geo.c_out, geo.h, geo.w] {
        return Err(Error::shape(format!("conv2d grad_out has shape {:?}", grad_out.shape())));
    }
    let (inp, ker, gout) = (input.data(), kernel.data(), grad_out.data());
    let kernel_len = kernel.len();

    let mut grad_in = if want_input { vec![T::zero(); inp.len()] } else { Vec::new() };
    let per_image: Vec<Vec<T>> = (0..geo.batch)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); geo.col_rows() * geo.hw()], vec![T::zero(); geo.col_rows() * geo.hw()]),
            |(cols, col_grad), n| {
                let in_img = &inp[n * geo.in_image()..(n + 1) * geo.in_image()];
                let g_img = &gout[n * geo.out_image()..(n + 1) * geo.out_image()];
                let mut gk = vec![T::zero(); kernel_len];
                let mut gi = if want_input { vec![T::zero(); geo.in_image()] } else { Vec::new() };
                for g in 0..geo.groups {
                    im2col(&geo, in_img, g, cols);
                    // dK_g = dOut_g * cols^T
                    gemm(
                        geo.c_out,
                        geo.hw(),
                        geo.col_rows(),
                        T::one(),
                        g_img,
                        geo.out_rows(g),
                        cols,
                        Strides::transposed(0, geo.hw()),
                        T::zero(),
                        &mut gk,
                        Strides::row_major(g * geo.kernel_group(), geo.col_rows()),
                    );
                    if want_input {
                        // dCols = K_g^T * dOut_g
                        gemm(
                            geo.col_rows(),
                            geo.c_out,
                            geo.hw(),
                            T::one(),
                            ker,
                            Strides::transposed(g * geo.kernel_group(), geo.col_rows()),
                            g_img,
                            geo.out_rows(g),
                            T::zero(),
                            col_grad,
                            Strides::row_major(0, geo.hw()),
                        );
                        col2im(&geo, col_grad, g, &mut gi);
                    }
                }
                if want_input {
                    gk.extend_from_slice(&gi);
                }
                gk
            },
        )
        .collect();

    let mut grad_kernel = vec![T::zero(); kernel_len];
    for (n, buf) in per_image.iter().enumerate() {
        for (acc, &v) in grad_kernel.iter_mut().zip(&buf[..kernel_len]) {
            *acc = *acc + v;
        }
        if want_input {
            grad_in[n * geo.in_image()..(n + 1) * geo.in_image()].copy_from_slice(&buf[kernel_len..]);
        }
    }
    let grad_in = want_input.then(|| Tensor::new(input.shape(), grad_in)).transpose()?;
    Ok((grad_in, Tensor::new(kernel.shape(), grad_kernel)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct loop evaluation of the correlation formula.
    fn conv_loop(input: &Tensor<f64>, kernel: &Tensor<f64>, padding: Padding) -> Tensor<f64> {
        let [n, ci, h, w] = input.shape().try_into().unwrap();
        let [co, _, v, _] = kernel.shape().try_into().unwrap();
        let r = (v / 2) as isize;
        let wrap = |p: isize, e: usize| -> Option<usize> {
            match padding {
                Padding::Zero => (0..e as isize).contains(&p).then_some(p as usize),
                Padding::Circular => Some(p.rem_euclid(e as isize) as usize),
            }
        };
        let mut out = Tensor::zeros(&[n, co, h, w]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in 0..v {
                                for dx in 0..v {
                                    let sy = wrap(y as isize + dy as isize - r, h);
                                    let sx = wrap(x as isize + dx as isize - r, w);
                                    if let (Some(sy), Some(sx)) = (sy, sx) {
                                        acc += input.at(&[b, c, sy, sx]) * kernel.at(&[o, c, dy, dx]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[b, o, y, x]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random(&[2, 3, 6, 5], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for o in 0..3 {
            let off = k.offset(&[o, o, 1, 1]);
            k.data_mut()[off] = 1.0;
        }
        for pad in [Padding::Zero, Padding::Circular] {
            assert_eq!(conv2d(&input, &k, pad).unwrap(), input);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random(&[2, 1, 5, 5], &mut rng);
        let out = conv2d(&Tensor::zeros(&[1, 7, 7]), &k, Padding::Zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&[1, 5, 5], &mut rng);
        let kernel = random(&[1, 1, 3, 3], &mut rng);
        let fast = conv2d(&input, &kernel, Padding::Zero).unwrap();
        let want = conv_loop(&input.clone().reshape(&[1, 1, 5, 5]).unwrap(), &kernel, Padding::Zero);
        assert!(fast.rel_l2_error(&want.reshape(&[1, 5, 5]).unwrap()).unwrap() < 1e-12);

        // f32 against the same oracle
        let fast32 = conv2d(&input.cast::<f32>(), &kernel.cast::<f32>(), Padding::Zero).unwrap();
        assert!(fast32.cast::<f64>().rel_l2_error(&fast).unwrap() < 1e-6);

        for pad in [Padding::Zero, Padding::Circular] {
            let input = random(&[2, 3, 7, 6], &mut rng);
            let kernel = random(&[4, 3, 5, 5], &mut rng);
            let fast = conv2d(&input, &kernel, pad).unwrap();
            assert!(fast.rel_l2_error(&conv_loop(&input, &kernel, pad)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_even_and_mismatched_kernels() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 2, 2]), Padding::Zero).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), Padding::Zero).is_err());
    }

    #[test]
    fn interleaved_groups_equal_block_diagonal_dense_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (groups, ci, co, v) = (3, 2, 4, 3);
        let input = random(&[2, ci * groups, 5, 5], &mut rng);
        let kernel = random(&[groups, co, ci, v, v], &mut rng);
        let fast = conv2d_grouped(&input, &kernel, ChannelLayout::Interleaved, Padding::Circular).unwrap();

        let mut dense = Tensor::zeros(&[co * groups, ci * groups, v, v]);
        for g in 0..groups {
            for o in 0..co {
                for c in 0..ci {
                    for dy in 0..v {
                        for dx in 0..v {
                            let off = dense.offset(&[o * groups + g, c * groups + g, dy, dx]);
                            dense.data_mut()[off] = kernel.at(&[g, o, c, dy, dx]);
                        }
                    }
                }
            }
        }
        let want = conv_loop(&input, &dense, Padding::Circular);
        assert!(fast.rel_l2_error(&want).unwrap() < 1e-12);
    }

    #[test]
    fn circular_padding_commutes_with_integer_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(&[1, 2, 8, 8], &mut rng);
        let kernel = random(&[3, 2, 5, 5], &mut rng);
        let roll = |t: &Tensor<f64>, dy: usize, dx: usize| {
            let [n, c, h, w] = t.shape().try_into().unwrap();
            let mut out = Tensor::zeros(t.shape());
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let off = out.offset(&[b, ch, (y + dy) % h, (x + dx) % w]);
                            out.data_mut()[off] = t.at(&[b, ch, y, x]);
                        }
                    }
                }
            }
            out
        };
        let a = conv2d(&roll(&input, 3, 5), &kernel, Padding::Circular).unwrap();
        let b = roll(&conv2d(&input, &kernel, Padding::Circular).unwrap(), 3, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_in_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x1 = random(&[1, 2, 6, 6], &mut rng);
        let x2 = random(&[1, 2, 6, 6], &mut rng);
        let k1 = random(&[2, 2, 3, 3], &mut rng);
        let k2 = random(&[2, 2, 3, 3], &mut rng);
        let lhs = conv2d(&x1.add(&x2.scale(0.7)).unwrap(), &k1, Padding::Zero).unwrap();
        let rhs = conv2d(&x1, &k1, Padding::Zero)
            .unwrap()
            .add(&conv2d(&x2, &k1, Padding::Zero).unwrap().scale(0.7))
            .unwrap();
        assert!(lhs.rel_l2_error(&rhs).unwrap() < 1e-12);
        let lhs = conv2d(&x1, &k1.add(&k2).unwrap(), Padding::Zero).unwrap();
        let rhs = conv2d(&x1, &k1, Padding::Zero).unwrap().add(&conv2d(&x1, &k2, Padding::Zero).unwrap()).unwrap();
        assert!(lhs.rel_l2_error(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <dOut, conv(x, k)> = <dx, x> = <dk, k> for a bilinear map.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for layout in [ChannelLayout::Blocked, ChannelLayout::Interleaved] {
            for pad in [Padding::Zero, Padding::Circular] {
                let x = random(&[2, 6, 5, 4], &mut rng);
                let k = random(&[3, 2, 2, 3, 3], &mut rng);
                let y = conv2d_grouped(&x, &k, layout, pad).unwrap();
                let gy = random(y.shape(), &mut rng);
                let (gx, gk) = conv2d_grouped_backward(&x, &k, &gy, layout, pad, true).unwrap();
                let lhs = gy.dot(&y).unwrap();
                assert!((gx.unwrap().dot(&x).unwrap() - lhs).abs() < 1e-10 * lhs.abs().max(1.0));
                assert!((gk.dot(&k).unwrap() - lhs).abs() < 1e-10 * lhs.abs().max(1.0));
            }
        }
    }
}
