//! Compression plan: per-layer important-token fractions, the four global
//! drop ratios (QK and VW_L, important and unimportant class), and the
//! layer-to-representative map used to reuse classifications.

use crate::error::Error;
use crate::formats;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which way the ordering constraints between drop ratios point.
///
/// `Prose` follows the mechanics: unimportant tokens drop at least as much
/// as important ones, and the QK pair drops at least as much as VW_L.
/// `AsPrinted` flips both families to match the inequality block as
/// printed, kept selectable for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintDirection {
    #[default]
    Prose,
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    /// Important-token fraction per layer, each in (0, 1].
    pub g: Vec<f64>,
    /// Drop ratio for Q and K columns of important tokens.
    pub p_qk_i: f64,
    /// Drop ratio for Q and K columns of unimportant tokens.
    pub p_qk_u: f64,
    /// Drop ratio for V columns (and folded output-projection rows) of
    /// important tokens.
    pub p_vl_i: f64,
    /// Same for unimportant tokens.
    pub p_vl_u: f64,
    /// `group_map[l]` is the earlier layer whose token classification layer
    /// `l` reuses; a layer that ranks for itself maps to its own index.
    pub group_map: Vec<usize>,
}

impl CompressionPlan {
    /// Plan that changes nothing: full widths, every token important, every
    /// layer ranking for itself.
    pub fn none(n_layers: usize) -> CompressionPlan {
        CompressionPlan {
            g: vec![1.0; n_layers],
            p_qk_i: 0.0,
            p_qk_u: 0.0,
            p_vl_i: 0.0,
            p_vl_u: 0.0,
            group_map: (0..n_layers).collect(),
        }
    }

    /// Uniform plan used by sweeps: one drop ratio everywhere, one g.
    pub fn uniform(n_layers: usize, p: f64, g: f64) -> CompressionPlan {
        CompressionPlan {
            g: vec![g; n_layers],
            p_qk_i: p,
            p_qk_u: p,
            p_vl_i: p,
            p_vl_u: p,
            group_map: (0..n_layers).collect(),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.g.len() != n_layers {
            return Err(Error::BadPlan {
                reason: format!("plan has {} layers, model has {n_layers}", self.g.len()),
            });
        }
        if self.group_map.len() != n_layers {
            return Err(Error::BadPlan {
                reason: format!("group_map has {} entries, model has {n_layers} layers", self.group_map.len()),
            });
        }
        for (l, &g) in self.g.iter().enumerate() {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::BadPlan { reason: format!("g[{l}] = {g} outside (0, 1]") });
            }
        }
        for (name, p) in [
            ("p_qk_i", self.p_qk_i),
            ("p_qk_u", self.p_qk_u),
            ("p_vl_i", self.p_vl_i),
            ("p_vl_u", self.p_vl_u),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::BadPlan { reason: format!("{name} = {p} outside [0, 1)") });
            }
        }
        for (l, &rep) in self.group_map.iter().enumerate() {
            if rep > l {
                return Err(Error::BadPlan {
                    reason: format!("group_map[{l}] = {rep} points forward"),
                });
            }
            if self.group_map[rep] != rep {
                return Err(Error::BadPlan {
                    reason: format!("group_map[{l}] = {rep}, which is not a representative"),
                });
            }
        }
        Ok(())
    }

    /// Objective value: expected dropped-dimension mass, to be maximized.
    /// Per layer, important tokens contribute the important-class ratios
    /// weighted by g, unimportant tokens the unimportant-class ratios
    /// weighted by 1 - g.
    pub fn objective(&self) -> f64 {
        self.g
            .iter()
            .map(|&g| {
                (self.p_qk_i + self.p_vl_i) * g + (self.p_qk_u + self.p_vl_u) * (1.0 - g)
            })
            .sum()
    }

    /// Checks the ordering constraints under a direction policy. The g
    /// schedule must be non-decreasing (strictly increasing when `strict_g`).
    pub fn satisfies_constraints(&self, dir: ConstraintDirection, strict_g: bool) -> bool {
        let g_ok = self.g.windows(2).all(|w| if strict_g { w[0] < w[1] } else { w[0] <= w[1] });
        let p_ok = match dir {
            ConstraintDirection::Prose => {
                self.p_qk_u >= self.p_qk_i
                    && self.p_vl_u >= self.p_vl_i
                    && self.p_qk_i >= self.p_vl_i
                    && self.p_qk_u >= self.p_vl_u
            }
            ConstraintDirection::AsPrinted => {
                self.p_qk_u < self.p_qk_i
                    && self.p_vl_u < self.p_vl_i
                    && self.p_qk_u <= self.p_vl_u
                    && self.p_qk_i <= self.p_vl_i
            }
        };
        g_ok && p_ok
    }

    /// /DT forcing: one ratio per pair for every token class.
    pub fn forced_uniform_tokens(&self) -> CompressionPlan {
        let mut plan = self.clone();
        plan.p_qk_u = plan.p_qk_i;
        plan.p_vl_u = plan.p_vl_i;
        plan
    }

    /// /DL forcing: the first layer's g applied uniformly.
    pub fn forced_uniform_layers(&self) -> CompressionPlan {
        let mut plan = self.clone();
        let g0 = plan.g.first().copied().unwrap_or(1.0);
        plan.g = vec![g0; plan.g.len()];
        plan
    }

    /// Deterministic total order used for tie-breaking between candidate
    /// plans: lexicographic over the g schedule then the four ratios.
    pub fn lex_key(&self) -> Vec<f64> {
        let mut key = self.g.clone();
        key.extend([self.p_qk_i, self.p_qk_u, self.p_vl_i, self.p_vl_u]);
        key
    }
}

pub fn save_plan(plan: &CompressionPlan, path: &Path) -> Result<()> {
    formats::save_json(plan, path)
}

pub fn load_plan(path: &Path) -> Result<CompressionPlan> {
    formats::load_json(path)
}
