//! Wall-clock micro-benchmarks of the scale layers against plain convolution.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisSpec, SteerableBasis};
use crate::conv::{conv2d, conv2d_grouped, ChannelLayout, Padding};
use crate::error::{Error, Result};
use crate::scaleconv::{conv_h_h, conv_t_h, FeatureMapH, ScaleConvLayer};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub reps: usize,
}

/// Runs `f` `warmup` times untimed, then `reps` times timed; seconds.
pub fn measure<R>(warmup: usize, reps: usize, mut f: impl FnMut() -> R) -> Result<Timing> {
    if warmup == 0 {
        return Err(Error::invalid("warmup must be at least one repetition"));
    }
    if reps == 0 {
        return Err(Error::invalid("need at least one timed repetition"));
    }
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = reps / 2;
    let median = if reps % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
    Ok(Timing { median, min: times[0], max: times[reps - 1], reps })
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
    pub basis: BasisSpec,
    pub padding: Padding,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

/// Medians of a lifting layer and an H-to-H layer next to the plain
/// convolutions with the same input and output extents.
#[derive(Clone, Debug)]
pub struct BenchReport {
    /// `[N, C_in, U, U]` to `C_out * N_S` channels.
    pub conv2d: Timing,
    pub conv_t_h: Timing,
    /// `N_S` groups of `C_in` to `C_out` channels.
    pub grouped_conv2d: Timing,
    pub conv_h_h: Timing,
    pub threads: usize,
}

impl BenchReport {
    pub fn lift_ratio(&self) -> f64 {
        self.conv_t_h.median / self.conv2d.median
    }

    pub fn hh_ratio(&self) -> f64 {
        self.conv_h_h.median / self.grouped_conv2d.median
    }

    pub fn lines(&self) -> Vec<String> {
        let t = |name: &str, t: &Timing| format!("{name}_median_s={:.6e} {name}_min_s={:.6e} {name}_max_s={:.6e}", t.median, t.min, t.max);
        vec![
            format!("threads={}", self.threads),
            format!("reps={}", self.conv2d.reps),
            t("conv2d", &self.conv2d),
            t("conv_t_h", &self.conv_t_h),
            t("grouped_conv2d", &self.grouped_conv2d),
            t("conv_h_h", &self.conv_h_h),
            format!("ratio_conv_t_h={:.4}", self.lift_ratio()),
            format!("ratio_conv_h_h={:.4}", self.hh_ratio()),
        ]
    }
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

pub fn bench_layers<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    let basis = Arc::new(SteerableBasis::build(cfg.basis.clone())?);
    let (s, v) = (basis.num_levels(), basis.filter_size());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lift = ScaleConvLayer::<T>::random(cfg.c_in, cfg.c_out, 1, basis.clone(), true, cfg.padding, &mut rng)?;
    let hidden = ScaleConvLayer::<T>::random(cfg.c_in, cfg.c_out, 1, basis.clone(), true, cfg.padding, &mut rng)?;
    let x = random::<T>(&mut rng, &[cfg.batch, cfg.c_in, cfg.size, cfg.size]);
    let h = FeatureMapH::new(random::<T>(&mut rng, &[cfg.batch, cfg.c_in, s, cfg.size, cfg.size]), basis.spec().scale_grid.clone())?;
    let plain_kernel = random::<T>(&mut rng, &[cfg.c_out * s, cfg.c_in, v, v]);
    let grouped_kernel = random::<T>(&mut rng, &[s, cfg.c_out, cfg.c_in, v, v]);
    let h_flat = h.data().clone().reshape(&[cfg.batch, cfg.c_in * s, cfg.size, cfg.size])?;

    let (w, r) = (cfg.warmup, cfg.reps);
    Ok(BenchReport {
        conv2d: measure(w, r, || conv2d(&x, &plain_kernel, cfg.padding).unwrap())?,
        conv_t_h: measure(w, r, || conv_t_h(&x, &lift).unwrap())?,
        grouped_conv2d: measure(w, r, || conv2d_grouped(&h_flat, &grouped_kernel, ChannelLayout::Interleaved, cfg.padding).unwrap())?,
        conv_h_h: measure(w, r, || conv_h_h(&h, &hidden).unwrap())?,
        threads: rayon::current_num_threads(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_warmup_rejected() {
        assert!(measure(0, 5, || ()).is_err());
        assert!(measure(1, 0, || ()).is_err());
    }

    #[test]
    fn median_of_counted_reps() {
        let mut calls = 0;
        let t = measure(2, 5, || calls += 1).unwrap();
        assert_eq!(calls, 7);
        assert_eq!(t.reps, 5);
        assert!(t.min <= t.median && t.median <= t.max);
    }
}
