//! The discrete scale-translation group: scalings `a^k` combined with 2D
//! translations, `(s2, t2) * (s1, t1) = (s2 s1, s2 t1 + t2)`.
//!
//! Scales are stored as integer levels so that equality and shifting along the
//! scale axis are exact.

use crate::error::{Error, Result};

/// Default scale base: three levels per octave.
pub const DEFAULT_BASE: f64 = 1.259_921_049_894_873_2; // 2^(1/3)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupElement {
    pub level: i32,
    /// `(t_y, t_x)` in pixels.
    pub translation: [f64; 2],
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { level: 0, translation: [0.0, 0.0] };

    pub fn new(level: i32, ty: f64, tx: f64) -> Self {
        GroupElement { level, translation: [ty, tx] }
    }

    pub fn scale(level: i32) -> Self {
        GroupElement { level, translation: [0.0, 0.0] }
    }

    pub fn translation(ty: f64, tx: f64) -> Self {
        GroupElement { level: 0, translation: [ty, tx] }
    }
}

/// The group for a fixed base `a > 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleTranslationGroup {
    base: f64,
}

impl ScaleTranslationGroup {
    pub fn new(base: f64) -> Result<Self> {
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::invalid(format!("scale base must be > 1, got {base}")));
        }
        Ok(ScaleTranslationGroup { base })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn scale_of(&self, level: i32) -> f64 {
        self.base.powi(level)
    }

    /// `g2 * g1`: apply `g1` first, then `g2`.
    pub fn compose(&self, g2: &GroupElement, g1: &GroupElement) -> GroupElement {
        let s2 = self.scale_of(g2.level);
        GroupElement {
            level: g2.level + g1.level,
            translation: [
                s2 * g1.translation[0] + g2.translation[0],
                s2 * g1.translation[1] + g2.translation[1],
            ],
        }
    }

    pub fn inverse(&self, g: &GroupElement) -> GroupElement {
        let inv_s = self.scale_of(-g.level);
        GroupElement {
            level: -g.level,
            translation: [-inv_s * g.translation[0], -inv_s * g.translation[1]],
        }
    }

    /// `g . x = s x + t`, so that `L_g[f](x) = f(g^-1 . x)`.
    pub fn act(&self, g: &GroupElement, point: [f64; 2]) -> [f64; 2] {
        let s = self.scale_of(g.level);
        [s * point[0] + g.translation[0], s * point[1] + g.translation[1]]
    }
}

/// The truncated scale axis: levels `0..N_S` with scales `a^0 .. a^(N_S-1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGrid {
    base: f64,
    num_levels: usize,
}

impl ScaleGrid {
    pub fn new(base: f64, num_levels: usize) -> Result<Self> {
        ScaleTranslationGroup::new(base)?;
        if num_levels == 0 {
            return Err(Error::invalid("scale grid needs at least one level"));
        }
        Ok(ScaleGrid { base, num_levels })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn level_scales(&self) -> Vec<f64> {
        (0..self.num_levels).map(|k| self.base.powi(k as i32)).collect()
    }

    pub fn group(&self) -> ScaleTranslationGroup {
        ScaleTranslationGroup { base: self.base }
    }
}
