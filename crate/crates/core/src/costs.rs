//! Cost functions of `(s, a, s')` returning `(cost, terminal)`.
//!
//! All costs live in `[0, 1]`; only the hard endstop region yields the
//! terminal cost of 1.0. Regions are checked in the fixed order
//! hard endstop, soft stop, goal/center band, default.

use serde::{Deserialize, Serialize};

use crate::batch::Observation;
use crate::error::{NfqError, Result};

/// Track layout along the cart axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRegions {
    pub center: f64,
    /// Half-width of the center band, `θ_cart`.
    pub center_tolerance: f64,
    /// Distance from the center beyond which the soft-stop cost applies.
    pub soft_limit: f64,
    /// Distance from the center beyond which a transition is terminal.
    pub hard_limit: f64,
}

impl TrackRegions {
    /// Simulator geometry: endstops at ±2.4, soft stops at ±2.1, center band 15 % of the track length.
    pub fn simulator() -> Self {
        let hard_limit = 2.4;
        TrackRegions { center: 0.0, center_tolerance: 0.15 * (2.0 * hard_limit), soft_limit: 2.1, hard_limit }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.center_tolerance > 0.0
            && self.center_tolerance < self.soft_limit
            && self.soft_limit < self.hard_limit
            && self.center.is_finite();
        if ok {
            Ok(())
        } else {
            Err(NfqError::config(format!(
                "cost.regions: need 0 < center_tolerance < soft_limit < hard_limit, got {} / {} / {}",
                self.center_tolerance, self.soft_limit, self.hard_limit
            )))
        }
    }

    pub fn in_hard_stop(&self, x: f64) -> bool {
        (x - self.center).abs() > self.hard_limit
    }

    pub fn in_soft_stop(&self, x: f64) -> bool {
        (x - self.center).abs() > self.soft_limit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Shaped,
    TimeOptimal,
    ShapedInMargin,
    SwayKiller,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Shaped => "shaped",
            CostKind::TimeOptimal => "time_optimal",
            CostKind::ShapedInMargin => "shaped_in_margin",
            CostKind::SwayKiller => "sway_killer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub regions: TrackRegions,
    /// Pole margin. Measured on `1 - (cos α + 1) / 2` for the upright tasks and on
    /// `(cos α + 1) / 2` for the sway killer. Unused by `shaped`.
    pub pole_margin: f64,
    pub soft_cost: f64,
    pub step_cost: f64,
    pub terminal_cost: f64,
    /// Added to every transition whose action is non-zero.
    pub action_penalty: f64,
}

/// `0` upright, `1` hanging.
#[inline]
pub fn pole_down_fraction(cos_a: f64) -> f64 {
    1.0 - (cos_a + 1.0) / 2.0
}

impl CostSpec {
    pub fn shaped() -> Self {
        CostSpec {
            kind: CostKind::Shaped,
            regions: TrackRegions::simulator(),
            pole_margin: 0.0,
            soft_cost: 0.05,
            step_cost: 0.01,
            terminal_cost: 1.0,
            action_penalty: 0.0,
        }
    }

    pub fn time_optimal() -> Self {
        CostSpec { kind: CostKind::TimeOptimal, pole_margin: 0.3, ..Self::shaped() }
    }

    pub fn shaped_in_margin(pole_margin: f64) -> Self {
        CostSpec { kind: CostKind::ShapedInMargin, pole_margin, ..Self::shaped() }
    }

    pub fn sway_killer() -> Self {
        CostSpec { kind: CostKind::SwayKiller, pole_margin: 0.05, soft_cost: 0.1, ..Self::shaped() }
    }

    pub fn with_action_penalty(self, penalty: f64) -> Self {
        CostSpec { action_penalty: penalty, ..self }
    }

    /// Short identifier recorded in dataset headers.
    pub fn id(&self) -> String {
        let mut id = self.kind.name().to_string();
        if self.kind != CostKind::Shaped {
            id.push_str(&format!("(margin={})", self.pole_margin));
        }
        if self.action_penalty > 0.0 {
            id.push_str(&format!("+penalty({})", self.action_penalty));
        }
        id
    }

    pub fn validate(&self) -> Result<()> {
        self.regions.validate()?;
        if self.terminal_cost != 1.0 {
            return Err(NfqError::config("cost.terminal_cost: must be 1.0"));
        }
        for (name, v) in [("step_cost", self.step_cost), ("soft_cost", self.soft_cost)] {
            if !(0.0..=self.terminal_cost).contains(&v) {
                return Err(NfqError::config(format!("cost.{name}: must lie in [0, terminal_cost], got {v}")));
            }
        }
        if !(self.action_penalty >= 0.0 && self.action_penalty.is_finite()) {
            return Err(NfqError::config("cost.action_penalty: must be a finite non-negative number"));
        }
        if self.kind != CostKind::Shaped && !(self.pole_margin > 0.0 && self.pole_margin <= 1.0) {
            return Err(NfqError::config(format!("cost.pole_margin: must lie in (0, 1], got {}", self.pole_margin)));
        }
        Ok(())
    }

    /// The discounted sum of endless step costs must stay below the terminal cost,
    /// otherwise crashing into an endstop is the cheaper strategy.
    pub fn check_safety(&self, gamma: f64) -> Result<()> {
        let bound = if gamma < 1.0 { self.step_cost / (1.0 - gamma) } else { f64::INFINITY };
        // relative slack so that 0.01 / (1 - 0.99) counts as reaching the terminal cost
        if bound < self.terminal_cost * (1.0 - 1e-9) {
            Ok(())
        } else {
            Err(NfqError::config(format!(
                "cost.step_cost: step_cost / (1 - gamma) = {bound} must stay below terminal_cost {} (gamma = {gamma})",
                self.terminal_cost
            )))
        }
    }

    fn in_center_band(&self, x: f64, inclusive: bool) -> bool {
        let d = (x - self.regions.center).abs();
        if inclusive {
            d <= self.regions.center_tolerance
        } else {
            d < self.regions.center_tolerance
        }
    }

    /// Cost of arriving in `next`, without the action penalty.
    pub fn state_cost(&self, next: &Observation) -> (f64, bool) {
        let x = next.x;
        if self.regions.in_hard_stop(x) {
            return (self.terminal_cost, true);
        }
        if self.regions.in_soft_stop(x) {
            return (self.soft_cost, false);
        }
        let down = pole_down_fraction(next.cos_a);
        let cost = match self.kind {
            CostKind::Shaped => {
                if self.in_center_band(x, false) {
                    self.step_cost * down
                } else {
                    self.step_cost
                }
            }
            CostKind::TimeOptimal => {
                if down <= self.pole_margin && self.in_center_band(x, false) {
                    0.0
                } else {
                    self.step_cost
                }
            }
            CostKind::ShapedInMargin => {
                if down <= self.pole_margin && self.in_center_band(x, false) {
                    self.step_cost * down / self.pole_margin
                } else {
                    self.step_cost
                }
            }
            CostKind::SwayKiller => {
                if 1.0 - down <= self.pole_margin && self.in_center_band(x, true) {
                    0.0
                } else {
                    self.step_cost
                }
            }
        };
        (cost, false)
    }

    /// Full transition cost including the action penalty, clamped to the terminal cost.
    pub fn evaluate(&self, _obs: &Observation, action: f64, next: &Observation) -> (f64, bool) {
        let (cost, terminal) = self.state_cost(next);
        if action != 0.0 && self.action_penalty > 0.0 {
            ((cost + self.action_penalty).min(self.terminal_cost), terminal)
        } else {
            (cost, terminal)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn at(x: f64, alpha: f64) -> Observation {
        Observation::from_angle(x, 0.0, alpha, 0.0)
    }

    #[test]
    fn shaped_reference_points() {
        let c = CostSpec::shaped();
        assert_eq!(c.state_cost(&at(0.0, 0.0)), (0.0, false));
        let (hang, t) = c.state_cost(&at(0.0, PI));
        assert!((hang - 0.01).abs() < 1e-15 && !t);
        assert_eq!(c.state_cost(&at(2.5, 0.0)), (1.0, true));
        assert_eq!(c.state_cost(&at(-2.2, 0.0)), (0.05, false));
        assert_eq!(c.state_cost(&at(1.0, 0.0)), (0.01, false));
    }

    #[test]
    fn time_optimal_margin_edge() {
        let c = CostSpec::time_optimal();
        // 1 - (cos a + 1)/2 = 0.31  <=>  cos a = 1 - 2 * 0.31
        let alpha = (1.0f64 - 2.0 * 0.31).acos();
        assert_eq!(c.state_cost(&at(0.0, alpha)).0, 0.01);
        let inside = (1.0f64 - 2.0 * 0.29).acos();
        assert_eq!(c.state_cost(&at(0.0, inside)).0, 0.0);
        assert_eq!(c.state_cost(&at(2.2, 0.0)), (0.05, false));
    }

    #[test]
    fn sway_killer_prefers_hanging() {
        let c = CostSpec::sway_killer();
        assert_eq!(c.state_cost(&at(0.0, PI)).0, 0.0);
        assert_eq!(c.state_cost(&at(0.0, 0.0)).0, 0.01);
        assert_eq!(c.state_cost(&at(2.2, PI)), (0.1, false));
        assert_eq!(c.state_cost(&at(2.41, PI)), (1.0, true));
    }

    #[test]
    fn shaped_in_margin_is_small_inside_and_step_outside() {
        let c = CostSpec::shaped_in_margin(0.05);
        assert_eq!(c.state_cost(&at(0.0, 0.0)).0, 0.0);
        let inside = (1.0f64 - 2.0 * 0.049).acos();
        let v = c.state_cost(&at(0.0, inside)).0;
        assert!(v > 0.0 && v < 0.01);
        let outside = (1.0f64 - 2.0 * 0.051).acos();
        assert_eq!(c.state_cost(&at(0.0, outside)).0, 0.01);
    }

    #[test]
    fn action_penalty_applies_to_non_zero_actions_only() {
        let c = CostSpec::shaped().with_action_penalty(1e-5);
        let s = at(1.0, 0.3);
        assert_eq!(c.evaluate(&s, 0.0, &s).0, 0.01);
        assert!((c.evaluate(&s, 300.0, &s).0 - 0.01001).abs() < 1e-15);
        let crash = at(3.0, 0.0);
        assert_eq!(c.evaluate(&s, -10.0, &crash), (1.0, true));
    }

    #[test]
    fn safety_relation() {
        let c = CostSpec::shaped();
        assert!(c.check_safety(0.98).is_ok());
        assert!(c.check_safety(0.99).is_err());
        assert!(c.check_safety(1.0).is_err());
        let cheap = CostSpec { step_cost: 0.005, ..c };
        assert!(cheap.check_safety(0.99).is_ok());
    }

    #[test]
    fn region_validation() {
        let mut c = CostSpec::shaped();
        c.regions.soft_limit = 3.0;
        assert!(c.validate().is_err());
        assert!(CostSpec::sway_killer().validate().is_ok());
    }
}
