//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default listed in [`KEYS`]; unknown keys, repeated keys and values
//! of the wrong kind are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::basis::BasisSpec;
use crate::conv::Padding;
use crate::equivariance::SweepConfig;
use crate::error::{Error, Result};
use crate::group::ScaleGrid;
use crate::timing::BenchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    IntList,
    Text,
    Choice(&'static [&'static str]),
}

/// A configuration key: name, kind, default and one line of documentation.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { name, kind, default, doc }
}

use Kind::*;

pub const KEYS: &[KeySpec] = &[
    key("seed", Int, "0", "master seed for initialization, shuffling and sweeps"),
    key("threads", Int, "0", "worker threads, 0 = physical cores; SESN_THREADS overrides"),
    key("precision", Choice(&["f32", "f64"]), "f32", "scalar type for training, benchmarks and oracle checks"),
    key("base", Float, "1.2599210498948732", "scale base a, default 2^(1/3)"),
    key("n_scales", Int, "4", "number of scale levels N_S"),
    key("n_basis", Int, "10", "basis functions N_b per level"),
    key("max_order", Int, "3", "largest Hermite order n + m"),
    key("sigma0", Float, "1.5", "envelope width at level 0"),
    key("filter_size", Int, "7", "filter extent V (odd)"),
    key("k_s", Int, "1", "interscale interaction of the hidden scale convolutions"),
    key("padding_mode", Choice(&["zero", "circular"]), "zero", "spatial boundary handling"),
    key("variant", Choice(&["vector", "scalar", "cnn"]), "vector", "classifier family"),
    key("widths", IntList, "16,32,48", "channels of the three convolutions"),
    key("hidden", Int, "256", "width of the hidden dense layer"),
    key("pool_after", IntList, "1,2", "convolutions followed by 2x2 max pooling"),
    key("cnn_widths", IntList, "0,0,0", "control CNN widths, 0,0,0 = match the parameter count"),
    key("epochs", Int, "20", "training epochs"),
    key("batch", Int, "32", "minibatch size"),
    key("lr", Float, "0.003", "initial Adam learning rate"),
    key("lr_milestones", IntList, "8,14", "epochs at which the learning rate is multiplied by lr_gamma"),
    key("lr_gamma", Float, "0.1", "step-decay factor"),
    key("weight_decay", Float, "0", "L2 penalty folded into the gradient"),
    key("data_dir", Text, "data/mnist", "directory with the four MNIST IDX files"),
    key("dataset", Text, "", "generated MNIST-scale container; empty = generate in memory"),
    key("data_seed", Int, "0", "seed of the MNIST-scale realization"),
    key("resolution", Int, "28", "frame size R of MNIST-scale, 28 or 56"),
    key("split", Choice(&["desk", "full"]), "desk", "desk = 2000/500/5000, full = 10000/2000/50000"),
    key("eq_depths", IntList, "1,10,20,30,40,50", "depth sweep, scale convolutions per stack"),
    key("eq_depth_shift", Int, "3", "downscale exponent j of the depth sweep"),
    key("eq_depth_scales", Int, "5", "N_S of the depth sweep"),
    key("eq_downscale_scales", Int, "13", "N_S of the downscale sweep; j runs over 0..N_S"),
    key("eq_downscale_base", Float, "1.4142135623730951", "scale base of the downscale sweep"),
    key("eq_downscale_filter_size", Int, "127", "V of the downscale sweep; 2U-1 or more never truncates"),
    key("eq_interactions", IntList, "1,2,3", "K_S values of the interscale sweep"),
    key("eq_interaction_scales", Int, "5", "N_S of the interscale sweep"),
    key("eq_interaction_shift", Int, "1", "downscale exponent j of the interscale sweep"),
    key("eq_trials", Int, "10", "random stacks and images per sweep point"),
    key("eq_channels", Int, "8", "channels of every sweep layer"),
    key("eq_image_size", Int, "64", "center crop of the bundled natural images"),
    key("eq_n_basis", Int, "6", "N_b of the sweeps"),
    key("eq_max_order", Int, "2", "largest Hermite order of the sweeps"),
    key("eq_filter_size", Int, "21", "V of the depth and interscale sweeps"),
    key("eq_sigma0", Float, "1.2", "level-0 envelope width of the sweeps"),
    key("eq_margin", Int, "2", "border pixels excluded from the error"),
    key("eq_padding", Choice(&["zero", "circular"]), "zero", "padding of the sweep stacks"),
    key("eq_nonlinearity", Choice(&["relu", "identity"]), "relu", "pointwise map between sweep layers"),
    key("oracle_instances", Int, "60", "random instances per precision in oracle-check"),
    key("gradcheck_seeds", Int, "20", "seeds of the finite-difference suite"),
    key("bench_batch", Int, "8", "benchmark minibatch"),
    key("bench_c_in", Int, "16", "benchmark input channels"),
    key("bench_c_out", Int, "16", "benchmark output channels"),
    key("bench_size", Int, "28", "benchmark spatial extent"),
    key("bench_warmup", Int, "3", "untimed repetitions before measuring, at least 1"),
    key("bench_reps", Int, "20", "timed repetitions"),
];

fn spec_of(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn check_kind(spec: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| Err(format!("`{}` expects {what}, got `{value}`", spec.name));
    match spec.kind {
        Int => value.parse::<u64>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => bad("a finite number"),
        },
        IntList => {
            if !value.is_empty() && value.split(',').all(|p| p.trim().parse::<u64>().is_ok()) {
                Ok(())
            } else {
                bad("a comma-separated list of integers")
            }
        }
        Text => Ok(()),
        Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("one of {}", options.join("|")))
            }
        }
    }
}

/// Parsed configuration; keys not given in the file hold their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got `{content}`") })?;
            let (k, v) = (k.trim(), v.trim());
            let spec = spec_of(k).ok_or_else(|| Error::Config { line, msg: format!("unknown key `{k}`") })?;
            if seen.contains(&spec.name) {
                return Err(Error::Config { line, msg: format!("`{k}` given twice") });
            }
            seen.push(spec.name);
            check_kind(spec, v).map_err(|msg| Error::Config { line, msg })?;
            cfg.values.insert(spec.name, v.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one key, with the same checks as the parser.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let spec = spec_of(name).ok_or_else(|| Error::invalid(format!("unknown key `{name}`")))?;
        check_kind(spec, value).map_err(Error::InvalidArgument)?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values.get(name).unwrap_or_else(|| panic!("no key `{name}`"))
    }

    pub fn int(&self, name: &str) -> u64 {
        self.raw(name).parse().unwrap_or_else(|_| panic!("`{name}` is not an integer key"))
    }

    pub fn usize(&self, name: &str) -> usize {
        self.int(name) as usize
    }

    pub fn float(&self, name: &str) -> f64 {
        self.raw(name).parse().unwrap_or_else(|_| panic!("`{name}` is not a numeric key"))
    }

    pub fn list(&self, name: &str) -> Vec<usize> {
        self.raw(name).split(',').map(|p| p.trim().parse().unwrap_or_else(|_| panic!("`{name}` is not a list key"))).collect()
    }

    pub fn padding(&self, name: &str) -> Padding {
        self.raw(name).parse().expect("validated choice")
    }

    /// Effective thread count: `SESN_THREADS` if set, else `threads`, with 0
    /// meaning the number of physical cores.
    pub fn threads(&self) -> Result<usize> {
        let requested = match std::env::var("SESN_THREADS") {
            Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::invalid(format!("SESN_THREADS must be an integer, got `{v}`")))?,
            Err(_) => self.usize("threads"),
        };
        Ok(if requested == 0 { num_cpus::get_physical().max(1) } else { requested })
    }

    pub fn basis_spec(&self) -> Result<BasisSpec> {
        let spec = BasisSpec {
            num_functions: self.usize("n_basis"),
            filter_size: self.usize("filter_size"),
            scale_grid: ScaleGrid::new(self.float("base"), self.usize("n_scales"))?,
            sigma0: self.float("sigma0"),
            max_order: self.usize("max_order"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bench_config(&self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            batch: self.usize("bench_batch"),
            c_in: self.usize("bench_c_in"),
            c_out: self.usize("bench_c_out"),
            size: self.usize("bench_size"),
            basis: self.basis_spec()?,
            padding: self.padding("padding_mode"),
            warmup: self.usize("bench_warmup"),
            reps: self.usize("bench_reps"),
            seed: self.int("seed"),
        })
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            depths: self.list("eq_depths"),
            depth_shift: self.usize("eq_depth_shift"),
            depth_scales: self.usize("eq_depth_scales"),
            downscale_scales: self.usize("eq_downscale_scales"),
            downscale_base: self.float("eq_downscale_base"),
            interactions: self.list("eq_interactions"),
            interaction_scales: self.usize("eq_interaction_scales"),
            interaction_shift: self.usize("eq_interaction_shift"),
            trials: self.usize("eq_trials"),
            seed: self.int("seed"),
            channels: self.usize("eq_channels"),
            image_size: self.usize("eq_image_size"),
            base: self.float("base"),
            n_basis: self.usize("eq_n_basis"),
            max_order: self.usize("eq_max_order"),
            filter_size: self.usize("eq_filter_size"),
            downscale_filter_size: self.usize("eq_downscale_filter_size"),
            sigma0: self.float("eq_sigma0"),
            margin: self.usize("eq_margin"),
            padding: self.padding("eq_padding"),
            nonlinearity: self.raw("eq_nonlinearity").parse().expect("validated choice"),
        }
    }

    /// Canonical text: every key with its current value and documentation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "# {}", k.doc);
            let _ = writeln!(out, "{} = {}", k.name, self.raw(k.name));
        }
        out
    }

    /// `key=value` lines of the keys that differ from their defaults.
    pub fn overrides(&self) -> Vec<String> {
        KEYS.iter().filter(|k| self.raw(k.name) != k.default).map(|k| format!("{}={}", k.name, self.raw(k.name))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for k in KEYS {
            check_kind(k, k.default).unwrap();
        }
        let cfg = RunConfig::default();
        cfg.basis_spec().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# run\n\nn_scales = 5   # five levels\nvariant=scalar\nwidths = 8, 8,16\n").unwrap();
        assert_eq!(cfg.usize("n_scales"), 5);
        assert_eq!(cfg.raw("variant"), "scalar");
        assert_eq!(cfg.list("widths"), vec![8, 8, 16]);
        assert_eq!(cfg.overrides(), vec!["n_scales=5", "variant=scalar", "widths=8, 8,16"]);
    }

    #[test]
    fn rejections_carry_line_numbers() {
        let line_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line_of("seed = 1\nbogus = 3\n"), 2);
        assert_eq!(line_of("seed = 1\n\nseed = 2\n"), 3);
        assert_eq!(line_of("n_scales = -1"), 1);
        assert_eq!(line_of("base = nan"), 1);
        assert_eq!(line_of("variant = resnet"), 1);
        assert_eq!(line_of("widths = 1,,2"), 1);
        assert_eq!(line_of("just text"), 1);
    }

    #[test]
    fn set_validates() {
        let mut cfg = RunConfig::default();
        cfg.set("padding_mode", "circular").unwrap();
        assert_eq!(cfg.padding("padding_mode"), Padding::Circular);
        assert!(cfg.set("padding_mode", "reflect").is_err());
        assert!(cfg.set("nope", "1").is_err());
    }
}
