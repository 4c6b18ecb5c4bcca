//! Central finite-difference checks of tape gradients, in double precision.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisSpec, SteerableBasis};
use crate::conv::{ChannelLayout, Padding};
use crate::error::Result;
use crate::group::ScaleGrid;
use crate::tensor::Tensor;

use super::layers::{conv_h_h, conv_t_h, LayerVars};
use super::{Tape, Var};

/// Worst relative error over the inputs of one checked function.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of a scalar-valued `build` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` on up to `max_probes` random
/// coordinates per input. The error of an input is
/// `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over its probed coordinates;
/// `fault` is added to every analytic gradient entry as a negative control.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    step: f64,
    max_probes: usize,
    fault: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        let n = inputs[k].len();
        let coords: Vec<usize> = if n <= max_probes { (0..n).collect() } else { sample(rng, n, max_probes).into_vec() };
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i] + fault;
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        probes += coords.len();
        let denom = na.max(nf).sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        worst = worst.max(rel);
    }
    Ok(GradCheck { name: name.to_string(), max_rel_error: worst, probes })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    // well separated values so that max selections and ReLU kinks are
    // farther than the difference step from any tie
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, order.into_iter().map(|r| (r as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect()).unwrap()
}

fn small_basis(levels: usize) -> Arc<Tensor<f64>> {
    let spec = BasisSpec {
        num_functions: 6,
        filter_size: 3,
        scale_grid: ScaleGrid::new(1.6, levels).unwrap(),
        sigma0: 0.8,
        max_order: 2,
    };
    Arc::new(SteerableBasis::build(spec).unwrap().cast())
}

/// Every differentiable op, plus one- and two-layer scale networks. Each
/// case feeds the op's output through a random linear functional, so the
/// checked quantity is a scalar.
pub fn standard_suite(seed: u64, fault: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let probes = 24;
    let mut out = Vec::new();

    macro_rules! case {
        ($name:expr, $inputs:expr, $out_shape:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            let weights = uniform(&mut rng, &$out_shape);
            let build = move |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> {
                let y = $body?;
                $t.weighted_sum(y, weights.clone())
            };
            out.push(check_gradients($name, &inputs, &build, step, probes, fault, &mut rng)?);
        }};
    }

    case!("add", vec![uniform(&mut rng, &[3, 4]), uniform(&mut rng, &[3, 4])], [3, 4], |t, v| t.add(v[0], v[1]));
    case!("scale", vec![uniform(&mut rng, &[5])], [5], |t, v| Ok::<_, crate::Error>(t.scale(v[0], -1.7)));
    case!("reshape", vec![uniform(&mut rng, &[2, 6])], [3, 4], |t, v| t.reshape(v[0], &[3, 4]));
    case!("permute", vec![uniform(&mut rng, &[2, 3, 4])], [4, 2, 3], |t, v| t.permute(v[0], &[2, 0, 1]));
    case!("select_outer", vec![uniform(&mut rng, &[3, 2, 2])], [2, 2], |t, v| t.select_outer(v[0], 1));
    case!("shift_scale", vec![uniform(&mut rng, &[1, 2, 4, 3, 3])], [1, 2, 4, 3, 3], |t, v| t.shift_scale(v[0], -1));
    {
        let basis = small_basis(3);
        case!("assemble_kernel", vec![uniform(&mut rng, &[2, 3, 2, 6])], [2, 3, 2, 3, 3, 3], |t, v| t.assemble_kernel(v[0], basis.clone()));
    }
    for padding in [Padding::Zero, Padding::Circular] {
        case!(
            &format!("conv2d_{padding}"),
            vec![uniform(&mut rng, &[2, 3, 5, 5]), uniform(&mut rng, &[1, 2, 3, 3, 3])],
            [2, 2, 5, 5],
            |t, v| t.conv(v[0], v[1], ChannelLayout::Blocked, padding)
        );
        case!(
            &format!("conv2d_grouped_interleaved_{padding}"),
            vec![uniform(&mut rng, &[2, 6, 5, 5]), uniform(&mut rng, &[3, 2, 2, 3, 3])],
            [2, 6, 5, 5],
            |t, v| t.conv(v[0], v[1], ChannelLayout::Interleaved, padding)
        );
    }
    case!("channel_bias", vec![uniform(&mut rng, &[2, 3, 2, 2]), uniform(&mut rng, &[3])], [2, 3, 2, 2], |t, v| t.channel_bias(v[0], v[1]));
    case!("relu", vec![distinct(&mut rng, &[4, 5])], [4, 5], |t, v| Ok::<_, crate::Error>(t.relu(v[0])));
    case!("max_pool2d", vec![distinct(&mut rng, &[2, 2, 6, 6])], [2, 2, 3, 3], |t, v| t.max_pool2d(v[0], 2));
    case!("global_max_spatial", vec![distinct(&mut rng, &[2, 3, 4, 4])], [2, 3], |t, v| t.global_max_spatial(v[0]));
    case!("scale_projection", vec![distinct(&mut rng, &[2, 2, 4, 3, 3])], [2, 2, 3, 3], |t, v| t.max_over_axis(v[0], 2));
    case!(
        "linear",
        vec![uniform(&mut rng, &[3, 5]), uniform(&mut rng, &[4, 5]), uniform(&mut rng, &[4])],
        [3, 4],
        |t, v| t.linear(v[0], v[1], Some(v[2]))
    );
    {
        let labels = vec![2usize, 0, 4];
        let inputs = vec![uniform(&mut rng, &[3, 5]).scale(3.0)];
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &labels);
        out.push(check_gradients("softmax_cross_entropy", &inputs, &build, step, probes, fault, &mut rng)?);
    }

    let basis = small_basis(3);
    for padding in [Padding::Zero, Padding::Circular] {
        let b = basis.clone();
        case!(
            &format!("conv_t_h_{padding}"),
            vec![uniform(&mut rng, &[2, 2, 5, 5]), uniform(&mut rng, &[3, 2, 1, 6]), uniform(&mut rng, &[3])],
            [2, 3, 3, 5, 5],
            |t, v| conv_t_h(t, v[0], LayerVars { w: v[1], bias: Some(v[2]) }, &b, padding)
        );
        for ks in [1, 2] {
            let b = basis.clone();
            case!(
                &format!("conv_h_h_ks{ks}_{padding}"),
                vec![uniform(&mut rng, &[2, 2, 3, 5, 5]), uniform(&mut rng, &[2, 2, ks, 6]), uniform(&mut rng, &[2])],
                [2, 2, 3, 5, 5],
                |t, v| conv_h_h(t, v[0], LayerVars { w: v[1], bias: Some(v[2]) }, &b, padding)
            );
        }
    }
    {
        let b = basis.clone();
        case!(
            "two_layer_scale_net",
            vec![uniform(&mut rng, &[2, 1, 6, 6]), uniform(&mut rng, &[3, 1, 1, 6]), uniform(&mut rng, &[2, 3, 2, 6]), uniform(&mut rng, &[2])],
            [2, 2, 6, 6],
            |t, v| {
                let h = conv_t_h(t, v[0], LayerVars { w: v[1], bias: None }, &b, Padding::Zero)?;
                let h = t.relu(h);
                let h = conv_h_h(t, h, LayerVars { w: v[2], bias: Some(v[3]) }, &b, Padding::Zero)?;
                t.max_over_axis(h, 2)
            }
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let results = standard_suite(0, 0.0).unwrap();
        for r in &results {
            assert!(r.passed(1e-6), "{} {:e}", r.name, r.max_rel_error);
        }
        let faulty = standard_suite(0, 1e-3).unwrap();
        assert!(faulty.iter().all(|r| !r.passed(1e-6)));
    }
}
