//! Experiment configuration read from TOML. Every key has a default and
//! unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{
    cubic_default, ou_linear, DiffusionSpec, ModelSpec, Polynomial, ReactionSpec, SineModulated,
};
use crate::error::{Error, Result};
use crate::observable::{Observable, ScalarFn};
use crate::output::config_hash;
use crate::semigroup::{QuadratureConfig, StreamConfig};
use crate::spectral::{Field, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `f = ρ - ρ³`, `g = 1 + 0.1 sin ρ`.
    CubicDefault,
    /// `f = -aρ`, `g ≡ σ`.
    OuLinear,
    /// Polynomial `f` and sine-modulated `g` from the `custom_*` keys.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Interior grid points `N`.
    pub grid: usize,
    /// Driven noise modes `M`.
    pub noise_modes: usize,
    /// Truncation level `n` of the reaction.
    pub truncation: Option<f64>,
    /// Yosida parameter `k`.
    pub yosida_k: Option<f64>,
    /// `a` of the linear preset.
    pub ou_a: f64,
    /// `σ` of the linear preset.
    pub ou_sigma: f64,
    /// Coefficients `c_0, c_1, …` of `f(ρ) = Σ c_i ρ^i` (custom preset).
    pub custom_reaction: Vec<f64>,
    /// `(α, β)` of the strong dissipativity inequality (custom preset).
    pub custom_h14: Option<(f64, f64)>,
    /// `g = base + amplitude·sin(frequency·ρ)` (custom preset).
    pub custom_g_base: f64,
    pub custom_g_amplitude: f64,
    pub custom_g_frequency: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: Preset::CubicDefault,
            grid: 64,
            noise_modes: 16,
            truncation: None,
            yosida_k: None,
            ou_a: 1.0,
            ou_sigma: 1.0,
            custom_reaction: vec![0.0, 1.0, 0.0, -1.0],
            custom_h14: None,
            custom_g_base: 1.0,
            custom_g_amplitude: 0.1,
            custom_g_frequency: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let grid = Grid::new(self.grid).map_err(|e| Error::Config(e.to_string()))?;
        let base = match self.preset {
            Preset::CubicDefault => cubic_default(grid, self.noise_modes),
            Preset::OuLinear => ou_linear(grid, self.noise_modes, self.ou_a, self.ou_sigma),
            Preset::Custom => {
                let poly = Polynomial::new(self.custom_reaction.clone());
                let deg = poly.degree().max(1) as f64;
                // sup f′ over a wide range stands in for the dissipativity bound.
                let lam = (-4000..=4000)
                    .map(|i| crate::coefficients::Coefficient::derivs(&poly, 0.5, i as f64 * 0.01).1)
                    .fold(f64::NEG_INFINITY, f64::max);
                let reaction = ReactionSpec { f: Arc::new(poly), deg_m: deg, lambda_dissip: lam, h14: self.custom_h14 };
                let (b, a, w) = (self.custom_g_base, self.custom_g_amplitude, self.custom_g_frequency);
                let diffusion = DiffusionSpec {
                    g: Arc::new(SineModulated { base: b, amplitude: a, frequency: w }),
                    lip_const: (a * w).abs(),
                    beta_g: (b.abs() - a.abs()).max(0.0),
                    upper_bound: b.abs() + a.abs(),
                };
                ModelSpec::new(reaction, diffusion, grid, self.noise_modes)
            }
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        base.with_truncation(self.truncation)?.with_yosida(self.yosida_k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dt: f64,
    /// Path horizon for `simulate`.
    pub horizon: f64,
    /// Snapshot times for `simulate`; empty means every 0.1.
    pub snapshots: Vec<f64>,
    /// Blow-up ceiling on `|u|_E`.
    pub ceiling: f64,
    pub threads: usize,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            dt: 0.002,
            horizon: 1.0,
            snapshots: Vec::new(),
            ceiling: 1e3,
            threads: 1,
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservableConfig {
    /// `tanh`, `sin`, `cos`, `atan`, `identity`, `square`, `rational` or `constant`.
    pub chi: String,
    /// `φ(x) = χ(⟨x, e_mode⟩)`.
    pub mode: usize,
    /// When set, `φ(x) = χ(x(point))` instead.
    pub point: Option<f64>,
    /// Value of the constant observable.
    pub constant: f64,
}

impl Default for ObservableConfig {
    fn default() -> Self {
        Self { chi: "tanh".into(), mode: 1, point: None, constant: 1.0 }
    }
}

pub fn parse_chi(name: &str, constant: f64) -> Result<ScalarFn> {
    Ok(match name {
        "tanh" => ScalarFn::Tanh,
        "sin" => ScalarFn::Sin,
        "cos" => ScalarFn::Cos,
        "atan" => ScalarFn::Atan,
        "identity" => ScalarFn::Identity,
        "square" => ScalarFn::Square,
        "rational" => ScalarFn::Rational,
        "constant" => ScalarFn::Constant(constant),
        other => return Err(Error::Config(format!("unknown observable profile '{other}'"))),
    })
}

impl ObservableConfig {
    pub fn build(&self, grid: Grid) -> Result<Observable> {
        let chi = parse_chi(&self.chi, self.constant)?;
        match self.point {
            Some(xi) if (0.0..=1.0).contains(&xi) => Ok(Observable::Evaluation { chi, index: grid.nearest_index(xi) }),
            Some(xi) => Err(Error::Config(format!("evaluation point {xi} outside [0,1]"))),
            None => Ok(Observable::cylindrical(chi, grid.mode(self.mode).map_err(|e| Error::Config(e.to_string()))?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Trajectories per plain Monte Carlo estimate.
    pub trajectories: usize,
    /// Inner trajectories of nested estimators.
    pub inner: usize,
    /// Outer samples of the carré estimator.
    pub outer: usize,
    pub quadrature_nodes: usize,
    pub quadrature_t_min: f64,
    pub quadrature_tail: f64,
    /// Terms of the carré-du-champ series.
    pub series_length: usize,
    pub fd_eps: f64,
    pub bootstrap: usize,
    pub max_abort_frac: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            trajectories: 10_000,
            inner: 128,
            outer: 2000,
            quadrature_nodes: 24,
            quadrature_t_min: 0.01,
            quadrature_tail: 1e-4,
            series_length: 16,
            fd_eps: 0.02,
            bootstrap: 200,
            max_abort_frac: 0.01,
        }
    }
}

impl BudgetConfig {
    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig {
            n_nodes: self.quadrature_nodes,
            t_min: self.quadrature_t_min,
            tail_tol: self.quadrature_tail,
            t_max: None,
        }
    }
}

/// States are multiples `c·e₁`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub states: Vec<f64>,
    pub times: Vec<f64>,
    pub lambda: f64,
    /// Galerkin modes of the Itô check.
    pub ito_modes: usize,
    pub ito_t: f64,
    pub ito_truncation: f64,
    pub energy_t: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            states: vec![0.0, 1.0, 2.0],
            times: vec![0.1, 0.25, 0.5],
            lambda: 1.0,
            ito_modes: 2,
            ito_t: 0.25,
            ito_truncation: 4.0,
            energy_t: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicConfig {
    pub chains: usize,
    pub samples_per_chain: usize,
    /// Defaults to `5/α̂`.
    pub burn_in: Option<f64>,
    /// Defaults to `1/α̂`.
    pub thin: Option<f64>,
    pub moments: Vec<f64>,
    pub gap_times: Vec<f64>,
    /// Persisted measure to reuse instead of sampling.
    pub measure_file: Option<String>,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self {
            chains: 512,
            samples_per_chain: 1,
            burn_in: None,
            thin: None,
            moments: vec![2.0, 4.0],
            gap_times: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            measure_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub truncation: Vec<f64>,
    pub noise_modes: Vec<usize>,
    pub yosida_k: Vec<f64>,
    /// Starting state `c·e₁`.
    pub start: f64,
    pub horizon: f64,
    pub trajectories: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            truncation: vec![1.0, 2.0, 4.0, 8.0],
            noise_modes: vec![4, 8, 16, 32],
            yosida_k: vec![1e2, 1e3, 1e4],
            start: 3.0,
            horizon: 0.5,
            trajectories: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub observable: ObservableConfig,
    pub budgets: BudgetConfig,
    pub checks: CheckConfig,
    pub ergodic: ErgodicConfig,
    pub ladder: LadderConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Hash of the resolved configuration; seeds and thread counts are part
    /// of it except `run.threads` and `run.out`, which never change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.threads = 1;
        c.run.out = String::new();
        config_hash(&c.to_toml())
    }

    pub fn stream(&self) -> StreamConfig {
        let mut sc = StreamConfig::new(self.run.seed, self.run.dt);
        sc.ceiling = self.run.ceiling;
        sc.max_abort_frac = self.budgets.max_abort_frac;
        sc
    }

    pub fn states(&self, grid: Grid) -> Result<Vec<(String, Field)>> {
        let e1 = grid.mode(1)?;
        Ok(self.checks.states.iter().map(|&c| (format!("{c}e1"), &e1 * c)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if !(r.dt > 0.0) || !(r.horizon >= 0.0) || r.threads == 0 {
            return Err(Error::Config("run.dt must be > 0, run.horizon >= 0 and run.threads >= 1".into()));
        }
        if self.budgets.trajectories < 2 || self.budgets.inner < 2 {
            return Err(Error::Config("budgets.trajectories and budgets.inner must be >= 2".into()));
        }
        if self.model.noise_modes == 0 || self.model.noise_modes > self.model.grid {
            return Err(Error::Config(format!(
                "model.noise_modes must lie in 1..={}, got {}",
                self.model.grid, self.model.noise_modes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        c.model.build().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("[model]\ngird = 3\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrip_and_hash() {
        let text = "[model]\npreset = \"ou-linear\"\ngrid = 32\nnoise_modes = 8\n[run]\nseed = 5\nthreads = 4\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        let mut d = c.clone();
        d.run.threads = 8;
        assert_eq!(c.hash(), d.hash());
        d.run.seed = 6;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn custom_preset_builds() {
        let text = "[model]\npreset = \"custom\"\ncustom_reaction = [0.0, -2.0]\ncustom_g_base = 0.5\ncustom_g_amplitude = 0.0\n";
        let m = ExperimentConfig::from_toml(text).unwrap().model.build().unwrap();
        assert_eq!(m.reaction.deg_m, 1.0);
        assert!((m.reaction.lambda_dissip + 2.0).abs() < 1e-12);
        assert_eq!(m.diffusion.beta_g, 0.5);
    }
}
