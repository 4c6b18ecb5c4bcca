//! Verification harness: the equivariance error
//! `Delta = |L_s Phi(f) - Phi(L_s f)|^2 / |L_s Phi(f)|^2`, its sweeps, and a
//! literal group-convolution oracle.
//!
//! `L_s` is a downscale by `s = a^j`. Downscaling the input moves content `j`
//! levels toward level 0, so output level `l` of `Phi(L_s f)` is compared with
//! level `l + j` of `Phi(f)` after that level has been downscaled spatially.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::{BasisSpec, SteerableBasis};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::group::ScaleGrid;
use crate::image::{natural_images, rescale_image};
use crate::scaleconv::{conv_h_h, conv_t_h, pointwise_nonlinearity, FeatureMapH, Nonlinearity, ScaleConvLayer};
use crate::tensor::{Scalar, Tensor};

/// Architecture of the randomly initialized stacks under test.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    /// Number of scale convolutions: one lifting layer plus `depth - 1`
    /// layers on H.
    pub depth: usize,
    pub channels: usize,
    pub interaction: usize,
    pub n_scales: usize,
    pub base: f64,
    pub n_basis: usize,
    pub max_order: usize,
    pub filter_size: usize,
    pub sigma0: f64,
    pub padding: Padding,
    /// Applied before every H-to-H layer.
    pub nonlinearity: Nonlinearity,
}

impl StackConfig {
    pub fn basis_spec(&self) -> Result<BasisSpec> {
        Ok(BasisSpec {
            num_functions: self.n_basis,
            filter_size: self.filter_size,
            scale_grid: ScaleGrid::new(self.base, self.n_scales)?,
            sigma0: self.sigma0,
            max_order: self.max_order,
        })
    }
}

/// `conv_t_h`, then `depth - 1` times ReLU and an H-to-H convolution.
#[derive(Clone, Debug)]
pub struct ScaleStack<T> {
    pub lift: ScaleConvLayer<T>,
    pub hidden: Vec<ScaleConvLayer<T>>,
    pub nonlinearity: Nonlinearity,
}

impl<T: Scalar> ScaleStack<T> {
    pub fn random(cfg: &StackConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::invalid("stack depth must be at least 1"));
        }
        let basis = Arc::new(SteerableBasis::build(cfg.basis_spec()?)?);
        let lift = ScaleConvLayer::random(in_channels, cfg.channels, 1, basis.clone(), false, cfg.padding, rng)?;
        let hidden = (1..cfg.depth)
            .map(|_| ScaleConvLayer::random(cfg.channels, cfg.channels, cfg.interaction, basis.clone(), false, cfg.padding, rng))
            .collect::<Result<_>>()?;
        Ok(ScaleStack { lift, hidden, nonlinearity: cfg.nonlinearity })
    }

    pub fn grid(&self) -> &ScaleGrid {
        self.lift.grid()
    }

    /// Number of levels of interaction summed per H layer.
    pub fn interaction(&self) -> usize {
        self.hidden.first().map_or(1, |l| l.interaction())
    }

    /// `[N, C, U, U]` to `[N, C', S, U, U]`.
    pub fn forward(&self, f: &Tensor<T>) -> Result<FeatureMapH<T>> {
        self.forward_h(&conv_t_h(f, &self.lift)?)
    }

    /// Runs only the H layers on an already lifted signal.
    pub fn forward_h(&self, lifted: &FeatureMapH<T>) -> Result<FeatureMapH<T>> {
        let mut h = lifted.clone();
        for layer in &self.hidden {
            h = conv_h_h(&pointwise_nonlinearity(&h, self.nonlinearity), layer)?;
        }
        Ok(h)
    }

    /// Outputs after the first `d` layers for every `d` in `depths`
    /// (ascending, each in `1..=depth`).
    pub fn forward_prefixes(&self, f: &Tensor<T>, depths: &[usize]) -> Result<Vec<FeatureMapH<T>>> {
        if depths.windows(2).any(|w| w[0] >= w[1]) || depths.first() == Some(&0) || depths.last().is_some_and(|&d| d > 1 + self.hidden.len()) {
            return Err(Error::invalid(format!("depths {depths:?} must ascend within 1..={}", 1 + self.hidden.len())));
        }
        let mut out = Vec::with_capacity(depths.len());
        let mut h = conv_t_h(f, &self.lift)?;
        let mut done = 1;
        for &d in depths {
            for layer in &self.hidden[done - 1..d - 1] {
                h = conv_h_h(&pointwise_nonlinearity(&h, self.nonlinearity), layer)?;
            }
            done = d;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Output levels of `Phi(L_s f)` whose counterpart `l + shift` in
    /// `Phi(f)` never read past the coarsest level.
    pub fn untruncated_levels(&self, shift: usize) -> Range<usize> {
        let s = self.grid().num_levels();
        let reach = (self.interaction() - 1) * self.hidden.len();
        0..s.saturating_sub(shift + reach)
    }
}

/// Squared-norm ratio over `levels` of the compared outputs, excluding a
/// `margin`-pixel border. Maps too small for the full margin keep their
/// central pixel(s).
fn delta_on<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, levels: Range<usize>, margin: usize) -> Result<f64> {
    let [_, c, _, h, w] = a.shape().try_into().map_err(|_| Error::shape("compared outputs must be rank 5"))?;
    let margin = margin.min((h.min(w) - 1) / 2);
    let (mut num, mut den) = (0.0, 0.0);
    for ch in 0..c {
        for level in levels.clone() {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let idx = [0, ch, level, y, x];
                    let (p, q) = (a.at(&idx).to_f64_lossy(), b.at(&idx).to_f64_lossy());
                    num += (p - q) * (p - q);
                    den += p * p;
                }
            }
        }
    }
    Ok(if num == 0.0 { 0.0 } else { num / den })
}

/// The two sides of the equivariance relation for one image and shift `j`:
/// `(L_s Phi(f), Phi(L_s f))`, both `[1, C, S - j, U', U']`.
pub fn aligned_outputs<T: Scalar>(stack: &ScaleStack<T>, f: &Tensor<T>, j: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let phi_f = stack.forward(f)?;
    aligned_outputs_from(stack, &phi_f, f, j)
}

fn aligned_outputs_from<T: Scalar>(
    stack: &ScaleStack<T>,
    phi_f: &FeatureMapH<T>,
    f: &Tensor<T>,
    j: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let grid = stack.grid();
    let s = grid.num_levels();
    if j >= s {
        return Err(Error::invalid(format!("shift {j} does not fit a {s}-level grid")));
    }
    let phi_lf = stack.forward(&rescale_image(f, grid.base().powi(-(j as i32)))?)?;
    align(grid, phi_f, &phi_lf, j)
}

fn align<T: Scalar>(grid: &ScaleGrid, phi_f: &FeatureMapH<T>, phi_lf: &FeatureMapH<T>, j: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grid.num_levels();
    let factor = grid.base().powi(-(j as i32));
    let [_, c, _, u2, _] = phi_lf.shape().try_into().unwrap();
    let keep = s - j;

    let coarse = rescale_image(phi_f.data(), factor)?;
    let mut lhs = vec![T::zero(); c * keep * u2 * u2];
    let mut rhs = vec![T::zero(); c * keep * u2 * u2];
    let plane = u2 * u2;
    for ch in 0..c {
        for l in 0..keep {
            let dst = (ch * keep + l) * plane;
            let a = coarse.offset(&[0, ch, l + j, 0, 0]);
            let b = phi_lf.data().offset(&[0, ch, l, 0, 0]);
            lhs[dst..dst + plane].copy_from_slice(&coarse.data()[a..a + plane]);
            rhs[dst..dst + plane].copy_from_slice(&phi_lf.data().data()[b..b + plane]);
        }
    }
    let shape = [1, c, keep, u2, u2];
    Ok((Tensor::new(&shape, lhs)?, Tensor::new(&shape, rhs)?))
}

/// Equivariance error over every overlapping level and the untruncated subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaSample {
    pub all_levels: f64,
    pub untruncated: Option<f64>,
}

/// `f` is `[1, C, U, U]`; `margin` is in pixels of the downscaled grid.
pub fn equivariance_error<T: Scalar>(stack: &ScaleStack<T>, f: &Tensor<T>, j: usize, margin: usize) -> Result<DeltaSample> {
    let phi_f = stack.forward(f)?;
    equivariance_error_from(stack, &phi_f, f, j, margin)
}

fn equivariance_error_from<T: Scalar>(
    stack: &ScaleStack<T>,
    phi_f: &FeatureMapH<T>,
    f: &Tensor<T>,
    j: usize,
    margin: usize,
) -> Result<DeltaSample> {
    if j == 0 {
        return Ok(DeltaSample { all_levels: 0.0, untruncated: Some(0.0) });
    }
    let (lhs, rhs) = aligned_outputs_from(stack, phi_f, f, j)?;
    let keep = lhs.shape()[2];
    let all_levels = delta_on(&lhs, &rhs, 0..keep, margin)?;
    let untrunc = stack.untruncated_levels(j);
    let untruncated = if untrunc.is_empty() { None } else { Some(delta_on(&lhs, &rhs, untrunc, margin)?) };
    Ok(DeltaSample { all_levels, untruncated })
}

/// `Delta` at each prefix depth of one stack, over all overlapping levels.
pub fn prefix_errors<T: Scalar>(stack: &ScaleStack<T>, f: &Tensor<T>, j: usize, margin: usize, depths: &[usize]) -> Result<Vec<f64>> {
    let grid = stack.grid();
    if j >= grid.num_levels() {
        return Err(Error::invalid(format!("shift {j} does not fit a {}-level grid", grid.num_levels())));
    }
    if j == 0 {
        return Ok(vec![0.0; depths.len()]);
    }
    let phi_f = stack.forward_prefixes(f, depths)?;
    let phi_lf = stack.forward_prefixes(&rescale_image(f, grid.base().powi(-(j as i32)))?, depths)?;
    phi_f
        .iter()
        .zip(&phi_lf)
        .map(|(a, b)| {
            let (lhs, rhs) = align(grid, a, b, j)?;
            let keep = lhs.shape()[2];
            delta_on(&lhs, &rhs, 0..keep, margin)
        })
        .collect()
}

/// Settings of the three sweeps: depth, input downscale, interscale width.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub depth_shift: usize,
    pub depth_scales: usize,
    pub downscale_scales: usize,
    pub downscale_base: f64,
    pub interactions: Vec<usize>,
    pub interaction_scales: usize,
    pub interaction_shift: usize,
    pub trials: usize,
    pub seed: u64,
    pub channels: usize,
    pub image_size: usize,
    pub base: f64,
    pub n_basis: usize,
    pub max_order: usize,
    pub filter_size: usize,
    pub downscale_filter_size: usize,
    pub sigma0: f64,
    pub margin: usize,
    pub padding: Padding,
    pub nonlinearity: Nonlinearity,
}

impl SweepConfig {
    fn stack(&self, depth: usize, interaction: usize, n_scales: usize, base: f64, filter_size: usize) -> StackConfig {
        StackConfig {
            depth,
            channels: self.channels,
            interaction,
            n_scales,
            base,
            n_basis: self.n_basis,
            max_order: self.max_order,
            filter_size,
            sigma0: self.sigma0,
            padding: self.padding,
            nonlinearity: self.nonlinearity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub sweep: String,
    pub x: f64,
    pub delta_mean: f64,
    pub delta_std: f64,
    pub trials: usize,
    pub n_scales: usize,
    pub base: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivarianceReport {
    pub records: Vec<ReportRecord>,
    /// `key=value` lines written as `#` comments above the CSV header.
    pub header: Vec<String>,
}

impl EquivarianceReport {
    pub fn sweep(&self, name: &str) -> Vec<&ReportRecord> {
        self.records.iter().filter(|r| r.sweep == name).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("sweep,x,delta_mean,delta_std,trials,n_scales,base,seed\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e},{},{},{},{}",
                r.sweep, r.x, r.delta_mean, r.delta_std, r.trials, r.n_scales, r.base, r.seed
            );
        }
        out
    }
}

/// One qualitative property of a sweep report.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Factor past which the downscale sweep is expected to break down.
pub const DOWNSCALE_KNEE: f64 = 16.0;

impl EquivarianceReport {
    /// Depth means non-decreasing with the deepest at most `max_final`; the
    /// largest downscale mean beyond [`DOWNSCALE_KNEE`] at least `sharp`
    /// times the largest up to it; interscale means increasing in `K_S`.
    pub fn shape_checks(&self, max_final: f64, sharp: f64) -> Vec<ShapeCheck> {
        let means = |name: &str| self.sweep(name).iter().map(|r| (r.x, r.delta_mean)).collect::<Vec<_>>();
        let depth = means("depth");
        let monotone = depth.windows(2).all(|w| w[1].1 >= w[0].1);
        let last = depth.last().map_or(f64::NAN, |d| d.1);
        let down = means("downscale");
        let peak = |keep: &dyn Fn(f64) -> bool| down.iter().filter(|d| keep(d.0)).map(|d| d.1).fold(f64::NAN, f64::max);
        let (inside, beyond) = (peak(&|x| x <= DOWNSCALE_KNEE + 1e-9), peak(&|x| x > DOWNSCALE_KNEE + 1e-9));
        let ratio = beyond / inside;
        let inter = means("interscale");
        let increasing = inter.len() >= 2 && inter.windows(2).all(|w| w[1].1 > w[0].1);
        let list = |v: &[(f64, f64)]| v.iter().map(|(x, m)| format!("{x}:{m:.4e}")).collect::<Vec<_>>().join(" ");
        vec![
            ShapeCheck {
                name: "depth_non_decreasing",
                passed: !depth.is_empty() && monotone,
                detail: list(&depth),
            },
            ShapeCheck {
                name: "depth_final_bound",
                passed: last <= max_final,
                detail: format!("{last:.4e} <= {max_final}"),
            },
            ShapeCheck {
                name: "downscale_sharp_beyond_16",
                passed: ratio >= sharp,
                detail: format!("max beyond {beyond:.4e} / max within {inside:.4e} = {ratio:.2} >= {sharp}"),
            },
            ShapeCheck {
                name: "interscale_increasing",
                passed: increasing,
                detail: list(&inter),
            },
        ]
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn trial_image(trial: usize, size: usize) -> Result<Tensor<f64>> {
    let pack = natural_images();
    let (_, img) = &pack[trial % pack.len()];
    let u = img.shape()[1];
    if size > u {
        return Err(Error::invalid(format!("image size {size} exceeds the {u}px pack")));
    }
    let off = (u - size) / 2;
    let data = (0..size * size).map(|i| img.at(&[0, off + i / size, off + i % size])).collect();
    Tensor::new(&[1, 1, size, size], data)
}

fn trial_rng(seed: u64, sweep: u64, point: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sweep << 48 | point << 24 | trial);
    rng
}

fn record(sweep: &str, x: f64, deltas: &[f64], n_scales: usize, base: f64, seed: u64) -> ReportRecord {
    let (delta_mean, delta_std) = mean_std(deltas);
    ReportRecord { sweep: sweep.into(), x, delta_mean, delta_std, trials: deltas.len(), n_scales, base, seed }
}

/// Runs the depth, downscale and interscale sweeps. Trials run on the rayon
/// pool; results are collected in trial order.
pub fn sweep_equivariance(cfg: &SweepConfig) -> Result<EquivarianceReport> {
    if cfg.trials == 0 {
        return Err(Error::invalid("sweeps need at least one trial"));
    }
    let mut report = EquivarianceReport {
        header: vec![
            format!("seed={}", cfg.seed),
            format!("threads={}", rayon::current_num_threads()),
            format!("images=natural pack, {}px center crop", cfg.image_size),
            format!("margin={} px of the downscaled grid", cfg.margin),
            format!("padding={}", cfg.padding),
            format!("depth_shift={} interaction_shift={}", cfg.depth_shift, cfg.interaction_shift),
        ],
        ..Default::default()
    };
    let images: Vec<Tensor<f64>> = (0..cfg.trials).map(|t| trial_image(t, cfg.image_size)).collect::<Result<_>>()?;

    // one stack per trial; shallower points are its prefixes
    let max_depth = cfg.depths.iter().copied().max().unwrap_or(0);
    if max_depth > 0 {
        let mut depths = cfg.depths.clone();
        depths.sort_unstable();
        depths.dedup();
        let stack_cfg = cfg.stack(max_depth, 1, cfg.depth_scales, cfg.base, cfg.filter_size);
        let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let stack = ScaleStack::<f64>::random(&stack_cfg, 1, &mut trial_rng(cfg.seed, 0, 0, t as u64))?;
                prefix_errors(&stack, &images[t], cfg.depth_shift, cfg.margin, &depths)
            })
            .collect::<Result<_>>()?;
        for (k, &depth) in depths.iter().enumerate() {
            let deltas: Vec<f64> = per_trial.iter().map(|d| d[k]).collect();
            report.records.push(record("depth", depth as f64, &deltas, cfg.depth_scales, cfg.base, cfg.seed));
        }
    }

    let stack_cfg = cfg.stack(1, 1, cfg.downscale_scales, cfg.downscale_base, cfg.downscale_filter_size);
    let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let stack = ScaleStack::<f64>::random(&stack_cfg, 1, &mut trial_rng(cfg.seed, 1, 0, t as u64))?;
            let phi_f = stack.forward(&images[t])?;
            (0..cfg.downscale_scales)
                .map(|j| Ok(equivariance_error_from(&stack, &phi_f, &images[t], j, cfg.margin)?.all_levels))
                .collect()
        })
        .collect::<Result<_>>()?;
    for j in 0..cfg.downscale_scales {
        let deltas: Vec<f64> = per_trial.iter().map(|d| d[j]).collect();
        report.records.push(record("downscale", cfg.downscale_base.powi(j as i32), &deltas, cfg.downscale_scales, cfg.downscale_base, cfg.seed));
    }

    for (p, &ks) in cfg.interactions.iter().enumerate() {
        let stack_cfg = cfg.stack(2, ks, cfg.interaction_scales, cfg.base, cfg.filter_size);
        let samples: Vec<DeltaSample> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let stack = ScaleStack::<f64>::random(&stack_cfg, 1, &mut trial_rng(cfg.seed, 2, p as u64, t as u64))?;
                equivariance_error(&stack, &images[t], cfg.interaction_shift, cfg.margin)
            })
            .collect::<Result<_>>()?;
        let all: Vec<f64> = samples.iter().map(|s| s.all_levels).collect();
        report.records.push(record("interscale", ks as f64, &all, cfg.interaction_scales, cfg.base, cfg.seed));
        let untrunc: Vec<f64> = samples.iter().filter_map(|s| s.untruncated).collect();
        if untrunc.len() == samples.len() {
            report.records.push(record("interscale_untruncated", ks as f64, &untrunc, cfg.interaction_scales, cfg.base, cfg.seed));
        }
    }
    Ok(report)
}

/// `[C_out, C_in, K_S, S, V, V]`: every interaction slice of a layer's kernel.
pub fn scale_kernel_stack<T: Scalar>(layer: &ScaleConvLayer<T>) -> Result<Tensor<T>> {
    let slices = (0..layer.interaction()).map(|j| layer.kernel(j)).collect::<Result<Vec<_>>>()?;
    let [o, i, s, v, _] = slices[0].shape().try_into().unwrap();
    let stacked = Tensor::stack(&slices)?;
    stacked.permute(&[1, 2, 0, 3, 4, 5])?.reshape(&[o, i, layer.interaction(), s, v, v])
}

/// Literal lifting convolution: for `f` on T, `[C_in, U, U]`, and kernel
/// `[C_out, C_in, S, V, V]`,
/// `out[o, l, y, x] = sum_{c, dy, dx} f[c, y + dy - r, x + dx - r] k[o, c, l, dy, dx]`
/// with zeros outside the image.
pub fn group_conv_oracle_t<T: Scalar>(f: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    let [ci, u, w] = f.shape().try_into().expect("oracle input is [C, U, U]");
    let [co, _, s, v, _] = kernel.shape().try_into().expect("oracle kernel is [C_out, C_in, S, V, V]");
    let r = (v / 2) as isize;
    let mut out = Tensor::zeros(&[co, s, u, w]);
    for o in 0..co {
        for l in 0..s {
            for y in 0..u {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..v {
                            for dx in 0..v {
                                let (sy, sx) = (y as isize + dy as isize - r, x as isize + dx as isize - r);
                                if sy < 0 || sx < 0 || sy >= u as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += f.at(&[c, sy as usize, sx as usize]).to_f64_lossy()
                                    * kernel.at(&[o, c, l, dy, dx]).to_f64_lossy();
                            }
                        }
                    }
                    let idx = out.offset(&[o, l, y, x]);
                    out.data_mut()[idx] = T::from_f64_lossy(acc);
                }
            }
        }
    }
    out
}

/// Literal scale convolution with the counting measure on both axes: for `f`
/// on H, `[C_in, S, U, U]`, and kernel `[C_out, C_in, K_S, S, V, V]`,
/// `out[o, l, y, x] = sum_{c, j, dy, dx} f[c, l + j, y + dy - r, x + dx - r] k[o, c, j, l, dy, dx]`
/// with zeros beyond the coarsest level and outside the image.
pub fn group_conv_oracle_h<T: Scalar>(f: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    let [ci, s, u, w] = f.shape().try_into().expect("oracle input is [C, S, U, U]");
    let [co, _, ks, _, v, _] = kernel.shape().try_into().expect("oracle kernel is [C_out, C_in, K_S, S, V, V]");
    let r = (v / 2) as isize;
    let mut out = Tensor::zeros(&[co, s, u, w]);
    for o in 0..co {
        for l in 0..s {
            for y in 0..u {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for j in 0..ks {
                            if l + j >= s {
                                continue;
                            }
                            for dy in 0..v {
                                for dx in 0..v {
                                    let (sy, sx) = (y as isize + dy as isize - r, x as isize + dx as isize - r);
                                    if sy < 0 || sx < 0 || sy >= u as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += f.at(&[c, l + j, sy as usize, sx as usize]).to_f64_lossy()
                                        * kernel.at(&[o, c, j, l, dy, dx]).to_f64_lossy();
                                }
                            }
                        }
                    }
                    let idx = out.offset(&[o, l, y, x]);
                    out.data_mut()[idx] = T::from_f64_lossy(acc);
                }
            }
        }
    }
    out
}

/// Relative L2 error of one fast-path layer against the literal oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub name: String,
    pub rel_error: f64,
}

/// `instances` random small problems (C <= 4, U <= 16, N_S <= 5,
/// K_S <= 2), cycling through `conv_t_h`, `conv_h_h` and
/// `conv_h_h_interscale`. The oracle accumulates in double precision.
pub fn oracle_suite<T: Scalar>(instances: usize, seed: u64) -> Result<Vec<OracleCase>> {
    use rand::Rng;
    (0..instances)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let kind = k % 3;
            let levels = if kind == 2 { rng.gen_range(2..=5) } else { rng.gen_range(1..=5) };
            let max_order = rng.gen_range(1..=3);
            let pairs = (max_order + 1) * (max_order + 2) / 2;
            let spec = BasisSpec {
                num_functions: rng.gen_range(1..=pairs),
                filter_size: [3, 5, 7][rng.gen_range(0..3)],
                scale_grid: ScaleGrid::new([crate::group::DEFAULT_BASE, std::f64::consts::SQRT_2, 2.0][rng.gen_range(0..3)], levels)?,
                sigma0: rng.gen_range(0.7..1.3),
                max_order,
            };
            let basis = Arc::new(SteerableBasis::build(spec)?);
            let (ci, co, u) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(4..=16));
            let ks = if kind == 2 { 2 } else { 1 };
            let layer = ScaleConvLayer::<T>::random(ci, co, ks, basis.clone(), false, Padding::Zero, &mut rng)?;
            let mut sample = |shape: &[usize]| Tensor::<T>::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
            let (name, fast, oracle) = if kind == 0 {
                let f = sample(&[1, ci, u, u]);
                let fast = conv_t_h(&f, &layer)?.into_data().slice_outer(0);
                ("conv_t_h", fast, group_conv_oracle_t(&f.slice_outer(0), &layer.kernel(0)?))
            } else {
                let f = FeatureMapH::new(sample(&[1, ci, levels, u, u]), basis.spec().scale_grid.clone())?;
                let fast = if kind == 1 { conv_h_h(&f, &layer)? } else { crate::scaleconv::conv_h_h_interscale(&f, &layer)? };
                let name = if kind == 1 { "conv_h_h" } else { "conv_h_h_interscale" };
                (name, fast.into_data().slice_outer(0), group_conv_oracle_h(&f.data().slice_outer(0), &scale_kernel_stack(&layer)?))
            };
            let (num, den) = fast.data().iter().zip(oracle.data()).fold((0.0, 0.0), |(n, d), (a, b)| {
                let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                (n + (a - b) * (a - b), d + b * b)
            });
            let rel_error = if num == 0.0 { 0.0 } else { (num / den).sqrt() };
            Ok(OracleCase { name: format!("{name}#{k} C={ci}->{co} U={u} S={levels} K_S={ks}"), rel_error })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::group::DEFAULT_BASE;
    use rand::Rng;

    fn stack_cfg(depth: usize, ks: usize) -> StackConfig {
        StackConfig {
            depth,
            channels: 2,
            interaction: ks,
            n_scales: 5,
            base: DEFAULT_BASE,
            n_basis: 6,
            max_order: 2,
            filter_size: 21,
            sigma0: 1.2,
            padding: Padding::Zero,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    fn image(size: usize) -> Tensor<f64> {
        trial_image(0, size).unwrap()
    }

    #[test]
    fn zero_shift_is_exactly_zero() {
        let stack = ScaleStack::<f64>::random(&stack_cfg(2, 1), 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = equivariance_error(&stack, &image(32), 0, 0).unwrap();
        assert_eq!(d.all_levels, 0.0);
    }

    #[test]
    fn scale_free_in_the_input() {
        let stack = ScaleStack::<f64>::random(&stack_cfg(2, 1), 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let f = image(32);
        let a = equivariance_error(&stack, &f, 3, 1).unwrap().all_levels;
        for c in [1e-3, 0.7, 250.0] {
            let b = equivariance_error(&stack, &f.scale(c), 3, 1).unwrap().all_levels;
            assert!((a - b).abs() <= 1e-10 * a.max(1e-300), "{a} vs {b}");
        }
        assert!(a >= 0.0);
    }

    #[test]
    fn prefixes_match_shallower_stacks() {
        let stack = ScaleStack::<f64>::random(&stack_cfg(3, 1), 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let f = image(24);
        let nested = prefix_errors(&stack, &f, 1, 1, &[1, 3]).unwrap();
        for (k, d) in [1usize, 3].into_iter().enumerate() {
            let short = ScaleStack { lift: stack.lift.clone(), hidden: stack.hidden[..d - 1].to_vec(), nonlinearity: stack.nonlinearity };
            let direct = equivariance_error(&short, &f, 1, 1).unwrap().all_levels;
            assert!((nested[k] - direct).abs() <= 1e-12 * direct.max(1e-300), "{} vs {direct}", nested[k]);
        }
        assert!(prefix_errors(&stack, &f, 1, 1, &[3, 1]).is_err());
        assert!(prefix_errors(&stack, &f, 1, 1, &[4]).is_err());
    }

    #[test]
    fn one_layer_downscale_is_small() {
        // a pre-smoothed image keeps bilinear aliasing of L_s secondary
        let g: Vec<f64> = (0..9).map(|i| (-((i as f64 - 4.0) / 1.5).powi(2) / 2.0).exp()).collect();
        let z: f64 = g.iter().sum::<f64>().powi(2);
        let blur = Tensor::from_fn(&[1, 1, 9, 9], |i| g[i / 9] * g[i % 9] / z);
        let f = crate::conv::conv2d(&image(64), &blur, Padding::Zero).unwrap();
        let cfg = StackConfig { sigma0: 1.5, filter_size: 27, ..stack_cfg(1, 1) };
        let stack = ScaleStack::<f64>::random(&cfg, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for j in 1..5 {
            let d = equivariance_error(&stack, &f, j, 2).unwrap().all_levels;
            assert!(d < 0.01, "j={j}: {d}");
        }
    }


    #[test]
    fn shift_outside_grid_rejected() {
        let stack = ScaleStack::<f64>::random(&stack_cfg(1, 1), 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(equivariance_error(&stack, &image(32), 5, 0).is_err());
    }

    #[test]
    fn untruncated_levels_account_for_interaction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = ScaleStack::<f64>::random(&stack_cfg(3, 1), 1, &mut rng).unwrap();
        let s2 = ScaleStack::<f64>::random(&stack_cfg(3, 2), 1, &mut rng).unwrap();
        assert_eq!(s1.untruncated_levels(2), 0..3);
        assert_eq!(s2.untruncated_levels(2), 0..1);
        assert_eq!(s2.untruncated_levels(3), 0..0);
    }

    #[test]
    fn single_level_oracle_is_plain_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::<f64>::from_fn(&[2, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f64>::from_fn(&[3, 2, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let plain = conv2d(&f, &k.clone().reshape(&[3, 2, 3, 3]).unwrap(), Padding::Zero).unwrap();
        let lifted = group_conv_oracle_t(&f, &k);
        assert!(lifted.reshape(&[3, 6, 6]).unwrap().rel_l2_error(&plain).unwrap() < 1e-14);
        let h = group_conv_oracle_h(&f.clone().reshape(&[2, 1, 6, 6]).unwrap(), &k.reshape(&[3, 2, 1, 1, 3, 3]).unwrap());
        assert!(h.reshape(&[3, 6, 6]).unwrap().rel_l2_error(&plain).unwrap() < 1e-14);
    }

    #[test]
    fn oracle_reads_out_kernel_on_delta() {
        let mut f = Tensor::<f64>::zeros(&[1, 3, 7, 7]);
        let at = f.offset(&[0, 1, 3, 3]);
        f.data_mut()[at] = 1.0;
        let k = Tensor::<f64>::from_fn(&[1, 1, 2, 3, 3, 3], |i| i as f64 + 1.0);
        let out = group_conv_oracle_h(&f, &k);
        // level 0 sees the delta through offset j = 1, level 1 through j = 0
        for (level, j) in [(0, 1), (1, 0)] {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(out.at(&[0, level, 3 - dy + 1, 3 - dx + 1]), k.at(&[0, 0, j, level, dy, dx]));
                }
            }
        }
        assert!((0..49).all(|p| out.at(&[0, 2, p / 7, p % 7]) == 0.0));
    }

    #[test]
    fn oracle_suite_within_tolerance() {
        let double = oracle_suite::<f64>(12, 7).unwrap();
        assert!(double.iter().all(|c| c.rel_error <= 1e-12), "{double:?}");
        let single = oracle_suite::<f32>(12, 7).unwrap();
        assert!(single.iter().all(|c| c.rel_error <= 1e-5), "{single:?}");
    }

    #[test]
    fn shape_checks_read_the_records() {
        let rec = |sweep: &str, x: f64, m: f64| ReportRecord { sweep: sweep.into(), x, delta_mean: m, delta_std: 0.0, trials: 1, n_scales: 5, base: 2.0, seed: 0 };
        let mut report = EquivarianceReport {
            records: vec![
                rec("depth", 1.0, 0.001), rec("depth", 10.0, 0.01), rec("depth", 50.0, 0.05),
                rec("downscale", 1.0, 0.0), rec("downscale", 16.0, 0.02), rec("downscale", 32.0, 0.5),
                rec("interscale", 1.0, 0.001), rec("interscale", 2.0, 0.1),
            ],
            header: vec![],
        };
        assert!(report.shape_checks(0.08, 5.0).iter().all(|c| c.passed));
        report.records[1].delta_mean = 0.1;
        report.records[5].delta_mean = 0.05;
        let failed: Vec<_> = report.shape_checks(0.08, 5.0).into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, ["depth_non_decreasing", "downscale_sharp_beyond_16"]);
    }

    #[test]
    fn report_csv_layout() {
        let report = EquivarianceReport {
            records: vec![record("depth", 1.0, &[0.1, 0.3], 5, 2.0, 7)],
            header: vec!["seed=7".into()],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# seed=7");
        assert_eq!(lines[1], "sweep,x,delta_mean,delta_std,trials,n_scales,base,seed");
        assert!(lines[2].starts_with("depth,1,2.000000000e-1,"));
        let (m, s) = mean_std(&[0.1, 0.3]);
        assert!((m - 0.2).abs() < 1e-15 && (s - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
