//! Constitutive laws: potential, mobility, nutrient consumption and source terms.
//!
//! Every function here is a pure map from immutable parameter objects to
//! values. Validation checks the structural bounds the analysis relies on
//! (positivity of the scalar constants, boundedness of mobility, consumption
//! and source shapes, growth of the potential).

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Clamp to the unit interval, `max(0, min(1, s))`.
#[inline]
pub fn cutoff(s: f64) -> f64 {
    s.clamp(0.0, 1.0)
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = cutoff(t);
    t * t * (3.0 - 2.0 * t)
}

/// A bounded continuous scalar shape `R -> R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Constant {
        value: f64,
    },
    /// Linear interpolation through `(x0, y0)` and `(x1, y1)`, held constant outside.
    ClampedLinear {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Cubic smoothstep between `(x0, y0)` and `(x1, y1)`, held constant outside.
    Smoothstep {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    pub const fn zero() -> Self {
        Shape::Constant { value: 0.0 }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Shape::Constant { value } => value,
            Shape::ClampedLinear { x0, y0, x1, y1 } => y0 + (y1 - y0) * cutoff((s - x0) / (x1 - x0)),
            Shape::Smoothstep { x0, y0, x1, y1 } => y0 + (y1 - y0) * smoothstep((s - x0) / (x1 - x0)),
        }
    }

    /// Supremum of `|shape|` over the real line.
    pub fn sup_bound(&self) -> f64 {
        match *self {
            Shape::Constant { value } => value.abs(),
            Shape::ClampedLinear { y0, y1, .. } | Shape::Smoothstep { y0, y1, .. } => {
                y0.abs().max(y1.abs())
            }
        }
    }

    fn validate(&self, name: &str) -> Result<(), ModelError> {
        let finite = |v: f64| v.is_finite();
        let ok = match *self {
            Shape::Constant { value } => finite(value),
            Shape::ClampedLinear { x0, y0, x1, y1 } | Shape::Smoothstep { x0, y0, x1, y1 } => {
                [x0, y0, x1, y1].into_iter().all(finite) && x1 > x0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidShape(name.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MobilitySpec {
    Constant { m0: f64 },
    /// `m0 + (m1 - m0) * cutoff((1 + s) / 2)`.
    ClampedLinear { m0: f64, m1: f64 },
}

impl MobilitySpec {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            MobilitySpec::Constant { m0 } => m0,
            MobilitySpec::ClampedLinear { m0, m1 } => m0 + (m1 - m0) * cutoff(0.5 * (1.0 + s)),
        }
    }

    /// `(m0, m1)` with `m0 <= m(s) <= m1`.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            MobilitySpec::Constant { m0 } => (m0, m0),
            MobilitySpec::ClampedLinear { m0, m1 } => (m0, m1),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let (m0, m1) = self.bounds();
        if m0.is_finite() && m1.is_finite() && m0 > 0.0 && m0 <= m1 {
            Ok(())
        } else {
            Err(ModelError::MobilityBounds { m0, m1 })
        }
    }
}

impl Default for MobilitySpec {
    fn default() -> Self {
        MobilitySpec::Constant { m0: 1.0 }
    }
}

/// Nutrient consumption `h`, always valued in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsumptionSpec {
    Zero,
    /// `cutoff((1 + s) / 2)`, so `h(-1) = 0` and `h(1) = 1`.
    #[default]
    ClampedLinear,
    Smoothstep,
}

impl ConsumptionSpec {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ConsumptionSpec::Zero => 0.0,
            ConsumptionSpec::ClampedLinear => cutoff(0.5 * (1.0 + s)),
            ConsumptionSpec::Smoothstep => smoothstep(0.5 * (1.0 + s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    /// `(s^2 - 1)^2 / 4`.
    #[default]
    Quartic,
    /// Quartic on `|s| <= s_star`, continued by its second-order Taylor
    /// polynomial at `±s_star` so that `Psi''` is bounded.
    TruncatedQuartic {
        #[serde(default = "default_s_star")]
        s_star: f64,
    },
}

fn default_s_star() -> f64 {
    2.0
}

/// `(Psi, Psi', Psi'')` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialValue {
    pub psi: f64,
    pub dpsi: f64,
    pub ddpsi: f64,
}

fn quartic(s: f64) -> PotentialValue {
    let s2 = s * s;
    PotentialValue {
        psi: 0.25 * (s2 - 1.0) * (s2 - 1.0),
        dpsi: s * (s2 - 1.0),
        ddpsi: 3.0 * s2 - 1.0,
    }
}

impl PotentialSpec {
    pub fn truncated() -> Self {
        PotentialSpec::TruncatedQuartic { s_star: default_s_star() }
    }

    pub fn eval(&self, s: f64) -> PotentialValue {
        match *self {
            PotentialSpec::Quartic => quartic(s),
            PotentialSpec::TruncatedQuartic { s_star } => {
                let a = s.abs();
                if a <= s_star {
                    return quartic(s);
                }
                let edge = quartic(s_star);
                let d = a - s_star;
                let sign = s.signum();
                PotentialValue {
                    psi: edge.psi + edge.dpsi * d + 0.5 * edge.ddpsi * d * d,
                    dpsi: sign * (edge.dpsi + edge.ddpsi * d),
                    ddpsi: edge.ddpsi,
                }
            }
        }
    }

    /// True when `Psi''` is globally bounded (the quadratic-growth class).
    pub fn has_bounded_curvature(&self) -> bool {
        matches!(self, PotentialSpec::TruncatedQuartic { .. })
    }

    /// Global bound on `|Psi''|`, if any.
    pub fn curvature_bound(&self) -> Option<f64> {
        match *self {
            PotentialSpec::Quartic => None,
            PotentialSpec::TruncatedQuartic { s_star } => Some(3.0 * s_star * s_star - 1.0),
        }
    }

    /// Constants `(c1, c2)` with `Psi(s) >= c1 s^2 - c2` for all `s`.
    pub fn growth_constants(&self) -> (f64, f64) {
        let c1 = 0.5;
        // max over |s| <= limit of c1 s^2 - (s^2-1)^2/4; unconstrained max sits at s^2 = 2
        let quartic_max = |limit: f64| {
            let s2 = 2.0_f64.min(limit * limit);
            c1 * s2 - 0.25 * (s2 - 1.0) * (s2 - 1.0)
        };
        match *self {
            PotentialSpec::Quartic => (c1, quartic_max(f64::INFINITY)),
            PotentialSpec::TruncatedQuartic { s_star } => {
                let edge = quartic(s_star);
                // tail: c1 s^2 - [psi + dpsi d + ddpsi d^2 / 2], concave since ddpsi > 2 c1
                let vertex = (edge.dpsi - edge.ddpsi * s_star) / (2.0 * c1 - edge.ddpsi);
                let s = vertex.max(s_star);
                let d = s - s_star;
                let tail = c1 * s * s - (edge.psi + edge.dpsi * d + 0.5 * edge.ddpsi * d * d);
                (c1, quartic_max(s_star).max(tail).max(0.0))
            }
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match *self {
            PotentialSpec::Quartic => Ok(()),
            PotentialSpec::TruncatedQuartic { s_star } => {
                // below 1 the truncation would flatten the wells and Psi'' >= -1 fails near 0
                if s_star.is_finite() && s_star > 1.0 {
                    Ok(())
                } else {
                    Err(ModelError::TruncationThreshold(s_star))
                }
            }
        }
    }
}

/// Coefficients of `Gamma = b(phi) sigma + f(phi)` for the volume and mass sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    pub b_v: Shape,
    pub b_phi: Shape,
    pub f_v: Shape,
    pub f_phi: Shape,
}

impl SourceSpec {
    pub const fn zero() -> Self {
        SourceSpec {
            b_v: Shape::zero(),
            b_phi: Shape::zero(),
            f_v: Shape::zero(),
            f_phi: Shape::zero(),
        }
    }

    /// `Gamma_phi = P cutoff((1+phi)/2) sigma - A_ap cutoff((1+phi)/2)` and
    /// `Gamma_v = lambda * Gamma_phi`.
    pub fn growth_apoptosis(proliferation: f64, apoptosis: f64, volume_ratio: f64) -> Self {
        let ramp = |y1: f64| Shape::ClampedLinear {
            x0: -1.0,
            y0: 0.0,
            x1: 1.0,
            y1,
        };
        SourceSpec {
            b_v: ramp(volume_ratio * proliferation),
            b_phi: ramp(proliferation),
            f_v: ramp(-volume_ratio * apoptosis),
            f_phi: ramp(-apoptosis),
        }
    }

    /// Returns `(Gamma_v, Gamma_phi)`.
    pub fn eval(&self, phi: f64, sigma: f64, use_cutoff: bool) -> (f64, f64) {
        let s = if use_cutoff { cutoff(sigma) } else { sigma };
        (
            self.b_v.eval(phi) * s + self.f_v.eval(phi),
            self.b_phi.eval(phi) * s + self.f_phi.eval(phi),
        )
    }

    /// True when `Gamma_v` vanishes identically.
    pub fn volume_source_is_zero(&self) -> bool {
        self.b_v.sup_bound() == 0.0 && self.f_v.sup_bound() == 0.0
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (name, shape) in [
            ("b_v", &self.b_v),
            ("b_phi", &self.b_phi),
            ("f_v", &self.f_v),
            ("f_phi", &self.f_phi),
        ] {
            shape.validate(name)?;
            let bound = shape.sup_bound();
            for k in 0..=200 {
                let s = -10.0 + 0.1 * k as f64;
                if shape.eval(s).abs() > bound * (1.0 + 1e-12) {
                    return Err(ModelError::SourceBound(name.to_string()));
                }
            }
        }
        Ok(())
    }
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::zero()
    }
}

/// Boundary datum `g(t)` of the pressure Robin condition, uniform in space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryDatum {
    Constant { value: f64 },
    /// Piecewise constant: `values[k]` on `[times[k], times[k+1])`.
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl Default for BoundaryDatum {
    fn default() -> Self {
        BoundaryDatum::Constant { value: 0.0 }
    }
}

impl BoundaryDatum {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            BoundaryDatum::Constant { value } => *value,
            BoundaryDatum::Table { times, values } => {
                let k = times.iter().rposition(|&tk| tk <= t).unwrap_or(0);
                values[k]
            }
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            BoundaryDatum::Constant { value } if value.is_finite() => Ok(()),
            BoundaryDatum::Table { times, values }
                if !times.is_empty()
                    && times.len() == values.len()
                    && times.windows(2).all(|w| w[0] < w[1])
                    && values.iter().all(|v| v.is_finite()) =>
            {
                Ok(())
            }
            _ => Err(ModelError::BoundaryDatum),
        }
    }
}

/// All physical and constitutive constants of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Energy scale `A` in front of the potential.
    #[serde(rename = "A")]
    pub a_energy: f64,
    /// Gradient-energy coefficient `B`.
    #[serde(rename = "B")]
    pub b_gradient: f64,
    pub chi: f64,
    /// Darcy permeability `K`.
    #[serde(rename = "K")]
    pub permeability: f64,
    /// Coefficient `a` of the pressure Robin condition `K dp/dn = a (g - p)`.
    #[serde(rename = "a")]
    pub robin: f64,
    pub theta: f64,
    pub mobility: MobilitySpec,
    pub consumption: ConsumptionSpec,
    pub potential: PotentialSpec,
    pub sources: SourceSpec,
    pub g: BoundaryDatum,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            a_energy: 1.0,
            b_gradient: 2.5e-3,
            chi: 0.0,
            permeability: 1.0,
            robin: 1.0,
            theta: 0.0,
            mobility: MobilitySpec::default(),
            consumption: ConsumptionSpec::default(),
            potential: PotentialSpec::default(),
            sources: SourceSpec::zero(),
            g: BoundaryDatum::default(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("A", self.a_energy),
            ("B", self.b_gradient),
            ("K", self.permeability),
            ("a", self.robin),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::NotPositive { name, value });
            }
        }
        if !(self.chi.is_finite() && self.chi >= 0.0) {
            return Err(ModelError::NegativeChi(self.chi));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(ModelError::ThetaRange(self.theta));
        }
        self.mobility.validate()?;
        self.potential.validate()?;
        self.sources.validate()?;
        self.g.validate()
    }

    pub fn potential(&self, s: f64) -> PotentialValue {
        self.potential.eval(s)
    }

    pub fn mobility(&self, s: f64) -> f64 {
        self.mobility.eval(s)
    }

    pub fn consumption(&self, s: f64) -> f64 {
        self.consumption.eval(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn quartic_reference_points() {
        let p = PotentialSpec::Quartic;
        assert_eq!(p.eval(1.0), PotentialValue { psi: 0.0, dpsi: 0.0, ddpsi: 2.0 });
        assert_eq!(p.eval(0.0), PotentialValue { psi: 0.25, dpsi: 0.0, ddpsi: -1.0 });
    }

    #[test]
    fn truncated_tail_value_at_three() {
        let p = PotentialSpec::truncated();
        let v = p.eval(3.0);
        assert!(close(v.psi, 13.75, 1e-14));
        assert!(close(v.dpsi, 17.0, 1e-14));
        assert!(close(v.ddpsi, 11.0, 1e-14));
        // finite-difference cross-check of the same point
        let h = 1e-5;
        let fd = (p.eval(3.0 + h).psi - p.eval(3.0 - h).psi) / (2.0 * h);
        assert!(close(fd, 17.0, 1e-6 * 17.0));
        let v = p.eval(-3.0);
        assert!(close(v.psi, 13.75, 1e-14));
        assert!(close(v.dpsi, -17.0, 1e-14));
    }

    #[test]
    fn truncated_is_c2_across_threshold() {
        let p = PotentialSpec::truncated();
        for s in [2.0, -2.0] {
            let inner = p.eval(s * (1.0 - 1e-12));
            let outer = p.eval(s * (1.0 + 1e-12));
            assert!(close(inner.psi, outer.psi, 1e-9));
            assert!(close(inner.dpsi, outer.dpsi, 1e-9));
            assert!(close(inner.ddpsi, outer.ddpsi, 1e-9));
        }
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff(-0.5), 0.0);
        assert_eq!(cutoff(0.3), 0.3);
        assert_eq!(cutoff(1.7), 1.0);
    }

    #[test]
    fn source_examples() {
        let p = 0.7;
        let spec = SourceSpec {
            b_v: Shape::Constant { value: p },
            ..SourceSpec::zero()
        };
        for phi in [-3.0, 0.0, 0.4] {
            assert_eq!(spec.eval(phi, 1.0, false).0, p);
        }
        let spec = SourceSpec::growth_apoptosis(2.0, 0.5, 1.0);
        assert_eq!(spec.eval(0.2, 1.5, true), spec.eval(0.2, 1.0, true));
        let f0 = spec.f_phi.eval(0.0);
        let (_, gp) = spec.eval(0.0, 0.5, true);
        assert!(close(gp, 0.25 * 2.0 + f0, 1e-15));
    }

    #[test]
    fn consumption_and_mobility_examples() {
        let h = ConsumptionSpec::default();
        assert_eq!(h.eval(-1.0), 0.0);
        assert_eq!(h.eval(1.0), 1.0);
        assert_eq!(h.eval(0.0), 0.5);
        assert_eq!(MobilitySpec::Constant { m0: 1.0 }.eval(12.0), 1.0);
    }

    #[test]
    fn validation_rejects_bad_constants() {
        let p = ModelParams { robin: -1.0, ..ModelParams::default() };
        assert!(matches!(p.validate(), Err(ModelError::NotPositive { name: "a", .. })));
        let p = ModelParams { theta: 1.5, ..ModelParams::default() };
        assert!(matches!(p.validate(), Err(ModelError::ThetaRange(_))));
        let p = ModelParams { mobility: MobilitySpec::ClampedLinear { m0: 2.0, m1: 1.0 }, ..ModelParams::default() };
        assert!(p.validate().is_err());
        let p = ModelParams { potential: PotentialSpec::TruncatedQuartic { s_star: 0.5 }, ..ModelParams::default() };
        assert!(p.validate().is_err());
        assert!(ModelParams::default().validate().is_ok());
    }

    #[test]
    fn growth_constants_hold_on_samples() {
        for spec in [PotentialSpec::Quartic, PotentialSpec::truncated(), PotentialSpec::TruncatedQuartic { s_star: 1.2 }] {
            let (c1, c2) = spec.growth_constants();
            assert!(c1 > 0.0 && c2 >= 0.0);
            for k in 0..=4000 {
                let s = -10.0 + 0.005 * k as f64;
                assert!(spec.eval(s).psi >= c1 * s * s - c2 - 1e-12, "{spec:?} at {s}");
            }
        }
    }
}
