//! Multi-scale steerable basis of 2D Hermite polynomials under a Gaussian
//! envelope:
//!
//! ```text
//! psi_sigma(x, y) = A / sigma^2 * H_n(x / sigma) * H_m(y / sigma) * exp(-(x^2 + y^2) / (2 sigma^2))
//! ```
//!
//! `H_n` are the physicists' Hermite polynomials (`H_1(x) = 2x`). Rescaling
//! the grid by `s` is the same as rescaling sigma, `psi_{s sigma}(s x, s y) =
//! s^-2 psi_sigma(x, y)`, so every level is evaluated directly from the closed
//! form and no filter is ever resampled. `A` is fixed once (unit L2 norm of the
//! pure Gaussian member at level 0) and shared by all levels; the per-level
//! `sigma^-2` attenuation is part of the steerability relation and is kept.

use crate::checkpoint::{Container, TensorData};
use crate::error::{Error, Result};
use crate::group::ScaleGrid;
use crate::tensor::{Scalar, Tensor};

/// Relative L2 residual of `psi_{l+1}(a p) = a^-2 psi_l(p)` over every
/// function, adjacent level pair and pixel `p` with `a p` on the grid.
/// Needs an integer base.
pub fn steerability_residual(basis: &SteerableBasis) -> Result<f64> {
    let a = basis.spec().scale_grid.base();
    let step = a.round() as isize;
    if (a - step as f64).abs() > 1e-12 || step < 2 {
        return Err(Error::invalid(format!("on-grid steerability needs an integer base, got {a}")));
    }
    let v = basis.filter_size();
    let r = (v / 2) as isize;
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..basis.num_functions() {
        for l in 0..basis.num_levels().saturating_sub(1) {
            let (fine, coarse) = (basis.slice(n, l), basis.slice(n, l + 1));
            for dy in -r / step..=r / step {
                for dx in -r / step..=r / step {
                    let at = |py: isize, px: isize| ((py + r) as usize) * v + (px + r) as usize;
                    let want = fine[at(dy, dx)] / (a * a);
                    let got = coarse[at(step * dy, step * dx)];
                    num += (got - want) * (got - want);
                    den += want * want;
                }
            }
        }
    }
    Ok(if num == 0.0 { 0.0 } else { (num / den).sqrt() })
}

/// Physicists' Hermite polynomial via `H_{n+1} = 2x H_n - 2n H_{n-1}`.
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = 2.0 * x * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

pub fn basis_function(n: usize, m: usize, sigma: f64, x: f64, y: f64, amplitude: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let envelope = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
    Ok(amplitude / (sigma * sigma) * hermite(n, x / sigma) * hermite(m, y / sigma) * envelope)
}

/// Orders `(n, m)` by increasing `n + m`, ties by increasing `n`.
pub fn order_pairs(count: usize, max_order: usize) -> Vec<(usize, usize)> {
    (0..=max_order)
        .flat_map(|total| (0..=total).map(move |n| (n, total - n)))
        .take(count)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisSpec {
    pub num_functions: usize,
    pub filter_size: usize,
    pub scale_grid: ScaleGrid,
    pub sigma0: f64,
    pub max_order: usize,
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filter_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("filter size must be odd, got {}", self.filter_size)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        let available = (self.max_order + 1) * (self.max_order + 2) / 2;
        if self.num_functions == 0 || self.num_functions > available {
            return Err(Error::invalid(format!(
                "{} basis functions requested, {available} exist with n + m <= {}",
                self.num_functions, self.max_order
            )));
        }
        Ok(())
    }

    pub fn sigma_at(&self, level: usize) -> f64 {
        self.sigma0 * self.scale_grid.base().powi(level as i32)
    }
}

/// Precomputed `[N_b, N_S, V, V]` basis, immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerableBasis {
    spec: BasisSpec,
    orders: Vec<(usize, usize)>,
    amplitude: f64,
    data: Tensor<f64>,
}

impl SteerableBasis {
    pub fn build(spec: BasisSpec) -> Result<Self> {
        spec.validate()?;
        let orders = order_pairs(spec.num_functions, spec.max_order);
        let v = spec.filter_size;
        let levels = spec.scale_grid.num_levels();
        let center = ((v - 1) / 2) as f64;

        let mut norm_sq = 0.0;
        for y in 0..v {
            for x in 0..v {
                let val = basis_function(0, 0, spec.sigma0, x as f64 - center, y as f64 - center, 1.0)?;
                norm_sq += val * val;
            }
        }
        let amplitude = 1.0 / norm_sq.sqrt();

        let mut data = Vec::with_capacity(orders.len() * levels * v * v);
        for &(n, m) in &orders {
            for level in 0..levels {
                let sigma = spec.sigma_at(level);
                for y in 0..v {
                    for x in 0..v {
                        data.push(basis_function(n, m, sigma, x as f64 - center, y as f64 - center, amplitude)?);
                    }
                }
            }
        }
        let data = Tensor::new(&[orders.len(), levels, v, v], data)?;
        if !data.is_finite() {
            return Err(Error::invalid("basis contains non-finite values"));
        }
        Ok(SteerableBasis { spec, orders, amplitude, data })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn orders(&self) -> &[(usize, usize)] {
        &self.orders
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn num_functions(&self) -> usize {
        self.orders.len()
    }

    pub fn num_levels(&self) -> usize {
        self.spec.scale_grid.num_levels()
    }

    pub fn filter_size(&self) -> usize {
        self.spec.filter_size
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        self.data.cast()
    }

    /// One `[V, V]` slice.
    pub fn slice(&self, index: usize, level: usize) -> &[f64] {
        let vv = self.spec.filter_size * self.spec.filter_size;
        let off = (index * self.num_levels() + level) * vv;
        &self.data.data()[off..off + vv]
    }

    pub fn write_to(&self, container: &mut Container) -> Result<()> {
        container.insert("basis.data", TensorData::F64(self.data.clone()))?;
        let spec = &self.spec;
        for (name, value) in [
            ("basis.base", spec.scale_grid.base()),
            ("basis.sigma0", spec.sigma0),
            ("basis.amplitude", self.amplitude),
        ] {
            container.insert(name, TensorData::F64(Tensor::scalar(value)))?;
        }
        for (name, value) in [
            ("basis.num_functions", spec.num_functions),
            ("basis.filter_size", spec.filter_size),
            ("basis.num_levels", spec.scale_grid.num_levels()),
            ("basis.max_order", spec.max_order),
        ] {
            container.insert(name, TensorData::I64(vec![1], vec![value as i64]))?;
        }
        Ok(())
    }

    /// Rebuild from a container and check the stored tensor against a fresh
    /// evaluation of the closed form.
    pub fn read_from(container: &Container) -> Result<Self> {
        let spec = BasisSpec {
            num_functions: container.scalar_i64("basis.num_functions")? as usize,
            filter_size: container.scalar_i64("basis.filter_size")? as usize,
            scale_grid: ScaleGrid::new(
                container.scalar_f64("basis.base")?,
                container.scalar_i64("basis.num_levels")? as usize,
            )?,
            sigma0: container.scalar_f64("basis.sigma0")?,
            max_order: container.scalar_i64("basis.max_order")? as usize,
        };
        let rebuilt = SteerableBasis::build(spec)?;
        let stored = container.f64_tensor("basis.data")?;
        if stored != rebuilt.data {
            return Err(Error::invalid("stored basis.data does not match its spec"));
        }
        Ok(rebuilt)
    }
}

/// `kappa[o, c, .., level] = sum_i w[o, c, .., i] * basis[i, level]`.
///
/// `w` has shape `[C_out, C_in, N_b]` or `[C_out, C_in, K_S, N_b]`; the result
/// has shape `[C_out, C_in, N_S, V, V]` or `[C_out, C_in, K_S, N_S, V, V]`.
pub fn assemble_kernel<T: Scalar>(w: &Tensor<T>, basis: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, nb, out_shape) = assemble_dims(w.shape(), basis.shape())?;
    let cols = basis.len() / nb;
    let mut out = vec![T::zero(); rows * cols];
    crate::tensor::gemm(
        rows,
        nb,
        cols,
        T::one(),
        w.data(),
        crate::tensor::Strides::row_major(0, nb),
        basis.data(),
        crate::tensor::Strides::row_major(0, cols),
        T::zero(),
        &mut out,
        crate::tensor::Strides::row_major(0, cols),
    );
    Tensor::new(&out_shape, out)
}

/// `dL/dw = dL/dkappa contracted against the fixed basis`.
pub fn assemble_kernel_backward<T: Scalar>(grad_kernel: &Tensor<T>, w_shape: &[usize], basis: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, nb, out_shape) = assemble_dims(w_shape, basis.shape())?;
    if grad_kernel.shape() != out_shape.as_slice() {
        return Err(Error::shape(format!("kernel gradient has shape {:?}, expected {out_shape:?}", grad_kernel.shape())));
    }
    let cols = basis.len() / nb;
    let mut gw = vec![T::zero(); rows * nb];
    crate::tensor::gemm(
        rows,
        cols,
        nb,
        T::one(),
        grad_kernel.data(),
        crate::tensor::Strides::row_major(0, cols),
        basis.data(),
        crate::tensor::Strides::transposed(0, cols),
        T::zero(),
        &mut gw,
        crate::tensor::Strides::row_major(0, nb),
    );
    Tensor::new(w_shape, gw)
}

fn assemble_dims(w: &[usize], basis: &[usize]) -> Result<(usize, usize, Vec<usize>)> {
    if basis.len() != 4 {
        return Err(Error::shape(format!("basis must be [N_b, N_S, V, V], got {basis:?}")));
    }
    if !(w.len() == 3 || w.len() == 4) {
        return Err(Error::shape(format!("weights must be [C_out, C_in, (K_S,) N_b], got {w:?}")));
    }
    let nb = *w.last().unwrap();
    if nb != basis[0] {
        return Err(Error::shape(format!("weights index {nb} basis functions, basis has {}", basis[0])));
    }
    let rows: usize = w[..w.len() - 1].iter().product();
    let mut shape = w[..w.len() - 1].to_vec();
    shape.extend_from_slice(&basis[1..]);
    Ok((rows, nb, shape))
}
