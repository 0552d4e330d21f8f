//! Experiment configuration: a single JSON object, unknown keys rejected.

use std::path::Path;

use nalgebra::{DVector, RealField};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{CarModel, Control, Integrator, State};
use crate::error::{config_err, Error, Result};
use crate::lqr::LqrWeights;
use crate::planner::{CostSpec, PlannerOptions};
use crate::simulator::{EpsilonGrid, SweepConfig, SweepModes};

/// The bundled car experiment.
pub const DEFAULT_CAR_CONFIG: &str = include_str!("../configs/car.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    pub horizon: usize,
    /// Planner starting point; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_controls: Option<Vec<Vec<f64>>>,
    pub planner: PlannerConfig,
    pub lqr: LqrConfig,
    pub sweep: SweepSection,
    pub ldp: LdpConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub wheelbase: f64,
    pub dt: f64,
    pub v_max: f64,
    pub phi_max: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub r_u: f64,
    pub r_g: f64,
    pub r_b: f64,
    /// Diagonal of the terminal goal metric.
    pub goal_weights: Vec<f64>,
    pub tolerance: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrConfig {
    pub wx_diag: Vec<f64>,
    pub wu_diag: Vec<f64>,
    pub wx_terminal_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub eps_start: f64,
    pub eps_step: f64,
    pub eps_end: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpConfig {
    pub delta: f64,
    pub epsilons: Vec<f64>,
    pub n_runs: usize,
    /// Last step of the exit window; the full horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub lemma_instances: usize,
    pub theorem3_epsilon: f64,
    pub theorem3_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            lemma_instances: 1000,
            theorem3_epsilon: 0.05,
            theorem3_samples: 100_000,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be a positive finite number, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be nonnegative, got {v}")))
    }
}

fn finite_vec(field: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(config_err(field, format!("expected {len} entries, got {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(config_err(format!("{field}[{i}]"), "must be finite"));
    }
    Ok(())
}

fn weights(field: &str, v: &[f64], len: usize) -> Result<()> {
    finite_vec(field, v, len)?;
    for (i, &w) in v.iter().enumerate() {
        nonnegative(&format!("{field}[{i}]"), w)?;
    }
    Ok(())
}

fn at_least_one(field: &str, n: usize) -> Result<()> {
    if n >= 1 {
        Ok(())
    } else {
        Err(config_err(field, "must be at least 1"))
    }
}

impl ExperimentConfig {
    pub fn default_car() -> Self {
        Self::from_json_str(DEFAULT_CAR_CONFIG).expect("bundled config is valid")
    }

    /// Parses and validates. Syntax and type errors name the offending
    /// field path and position.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." { "<root>".to_string() } else { path };
            config_err(field, format!("{inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical (compact) JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.name != "car" {
            return Err(config_err("model.name", format!("unknown model `{}` (supported: car)", m.name)));
        }
        positive("model.wheelbase", m.wheelbase)?;
        positive("model.dt", m.dt)?;
        positive("model.v_max", m.v_max)?;
        positive("model.phi_max", m.phi_max)?;
        if m.phi_max > f64::frac_pi_2() {
            return Err(config_err("model.phi_max", format!("must not exceed pi/2, got {}", m.phi_max)));
        }
        let (nx, nu) = (3, 2);
        finite_vec("x0", &self.x0, nx)?;
        finite_vec("goal", &self.goal, nx)?;
        at_least_one("horizon", self.horizon)?;
        if let Some(init) = &self.init_controls {
            if init.len() != self.horizon {
                return Err(config_err(
                    "init_controls",
                    format!("expected {} controls (one per step), got {}", self.horizon, init.len()),
                ));
            }
            for (t, u) in init.iter().enumerate() {
                finite_vec(&format!("init_controls[{t}]"), u, nu)?;
            }
        }

        let p = &self.planner;
        nonnegative("planner.r_u", p.r_u)?;
        positive("planner.r_g", p.r_g)?;
        nonnegative("planner.r_b", p.r_b)?;
        weights("planner.goal_weights", &p.goal_weights, nx)?;
        positive("planner.tolerance", p.tolerance)?;
        at_least_one("planner.max_iters", p.max_iters)?;

        weights("lqr.wx_diag", &self.lqr.wx_diag, nx)?;
        weights("lqr.wu_diag", &self.lqr.wu_diag, nu)?;
        weights("lqr.wx_terminal_diag", &self.lqr.wx_terminal_diag, nx)?;
        if let Some(i) = self.lqr.wu_diag.iter().position(|&w| w <= 0.0) {
            return Err(config_err(format!("lqr.wu_diag[{i}]"), "must be positive"));
        }

        let s = &self.sweep;
        positive("sweep.eps_start", s.eps_start)?;
        positive("sweep.eps_step", s.eps_step)?;
        if !(s.eps_end >= s.eps_start && s.eps_end.is_finite()) {
            return Err(config_err(
                "sweep.eps_end",
                format!("must be finite and at least eps_start = {}, got {}", s.eps_start, s.eps_end),
            ));
        }
        at_least_one("sweep.n_runs", s.n_runs)?;

        let l = &self.ldp;
        if !(l.delta > 0.0) {
            return Err(config_err("ldp.delta", format!("must be positive, got {}", l.delta)));
        }
        if l.epsilons.is_empty() {
            return Err(config_err("ldp.epsilons", "must not be empty"));
        }
        for (i, &e) in l.epsilons.iter().enumerate() {
            positive(&format!("ldp.epsilons[{i}]"), e)?;
        }
        at_least_one("ldp.n_runs", l.n_runs)?;
        if let Some(t) = l.horizon_index {
            if t == 0 || t > self.horizon {
                return Err(config_err(
                    "ldp.horizon_index",
                    format!("must lie in 1..={}, got {t}", self.horizon),
                ));
            }
        }

        let v = &self.verify;
        at_least_one("verify.lemma_instances", v.lemma_instances)?;
        positive("verify.theorem3_epsilon", v.theorem3_epsilon)?;
        if v.theorem3_samples < 100 {
            return Err(config_err("verify.theorem3_samples", "must be at least 100"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<CarModel> {
        let m = &self.model;
        Ok(CarModel::new(m.wheelbase, m.dt, m.v_max, m.phi_max)?.with_integrator(m.integrator))
    }

    pub fn initial_state(&self) -> State {
        DVector::from_column_slice(&self.x0)
    }

    pub fn goal_state(&self) -> State {
        DVector::from_column_slice(&self.goal)
    }

    pub fn initial_controls(&self) -> Vec<Control> {
        match &self.init_controls {
            Some(us) => us.iter().map(|u| DVector::from_column_slice(u)).collect(),
            None => vec![DVector::zeros(2); self.horizon],
        }
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let p = &self.planner;
        CostSpec::new(
            p.r_u,
            p.r_g,
            Some(self.goal_state()),
            DVector::from_column_slice(&p.goal_weights),
            p.r_b,
            Some(DVector::from_vec(vec![self.model.v_max, self.model.phi_max])),
        )
    }

    pub fn planner_options(&self) -> PlannerOptions {
        PlannerOptions {
            tolerance: self.planner.tolerance,
            max_iters: self.planner.max_iters,
            ..Default::default()
        }
    }

    pub fn lqr_weights(&self) -> Result<LqrWeights> {
        LqrWeights::diagonal(
            self.horizon,
            &self.lqr.wx_diag,
            &self.lqr.wu_diag,
            &self.lqr.wx_terminal_diag,
        )
    }

    pub fn epsilon_grid(&self, full_grid: bool) -> EpsilonGrid {
        if full_grid {
            EpsilonGrid::FULL
        } else {
            EpsilonGrid {
                start: self.sweep.eps_start,
                step: self.sweep.eps_step,
                end: self.sweep.eps_end,
            }
        }
    }

    pub fn sweep_config(&self, modes: SweepModes, full_grid: bool) -> SweepConfig {
        SweepConfig {
            grid: self.epsilon_grid(full_grid),
            n_runs: self.sweep.n_runs,
            master_seed: self.master_seed,
            modes,
        }
    }

    pub fn ldp_horizon_index(&self) -> usize {
        self.ldp.horizon_index.unwrap_or(self.horizon)
    }
}

impl std::str::FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_json_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::{json, Value};

    fn base() -> Value {
        serde_json::from_str(DEFAULT_CAR_CONFIG).unwrap()
    }

    fn field_of(v: Value) -> String {
        match ExperimentConfig::from_json_str(&v.to_string()) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn bundled_config_is_the_car_experiment() {
        let cfg = ExperimentConfig::default_car();
        assert_eq!(cfg.horizon, 20);
        assert_eq!(cfg.x0, vec![-1.5, 0.5, 0.0]);
        assert_eq!(cfg.goal, vec![-0.5, 1.0, 0.0]);
        assert_eq!(cfg.model.phi_max, std::f64::consts::FRAC_PI_2);
        assert_eq!(cfg.epsilon_grid(false).values().unwrap().len(), 15);
    }

    #[test]
    fn zero_horizon_names_the_field() {
        let mut v = base();
        v["horizon"] = json!(0);
        assert_eq!(field_of(v), "horizon");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base();
        v["planner"]["r_uu"] = json!(1.0);
        assert_eq!(field_of(v), "planner.r_uu");
        let mut v = base();
        v["extra"] = json!(true);
        assert_eq!(field_of(v), "extra");
    }

    #[test]
    fn type_errors_name_the_field() {
        let mut v = base();
        v["horizon"] = json!(-3);
        assert_eq!(field_of(v), "horizon");
        let mut v = base();
        v["sweep"]["n_runs"] = json!("many");
        assert_eq!(field_of(v), "sweep.n_runs");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default_car();
        assert_eq!(a.hash(), ExperimentConfig::default_car().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.master_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    type Mutation = Box<dyn Fn(&mut Value)>;

    fn invalidations() -> Vec<(&'static str, Mutation)> {
        vec![
            ("model.name", Box::new(|v| v["model"]["name"] = json!("boat"))),
            ("model.wheelbase", Box::new(|v| v["model"]["wheelbase"] = json!(0.0))),
            ("model.dt", Box::new(|v| v["model"]["dt"] = json!(-0.7))),
            ("model.v_max", Box::new(|v| v["model"]["v_max"] = json!(0.0))),
            ("model.phi_max", Box::new(|v| v["model"]["phi_max"] = json!(2.0))),
            ("x0", Box::new(|v| v["x0"] = json!([1.0, 2.0]))),
            ("goal", Box::new(|v| v["goal"] = json!([1.0, 2.0, 3.0, 4.0]))),
            ("horizon", Box::new(|v| v["horizon"] = json!(0))),
            ("init_controls", Box::new(|v| v["init_controls"] = json!([[0.0, 0.0]]))),
            ("planner.r_u", Box::new(|v| v["planner"]["r_u"] = json!(-1.0))),
            ("planner.r_g", Box::new(|v| v["planner"]["r_g"] = json!(0.0))),
            ("planner.r_b", Box::new(|v| v["planner"]["r_b"] = json!(-0.5))),
            ("planner.goal_weights[2]", Box::new(|v| v["planner"]["goal_weights"][2] = json!(-1.0))),
            ("planner.tolerance", Box::new(|v| v["planner"]["tolerance"] = json!(0.0))),
            ("planner.max_iters", Box::new(|v| v["planner"]["max_iters"] = json!(0))),
            ("lqr.wx_diag[0]", Box::new(|v| v["lqr"]["wx_diag"][0] = json!(-1.0))),
            ("lqr.wu_diag[1]", Box::new(|v| v["lqr"]["wu_diag"][1] = json!(0.0))),
            ("lqr.wx_terminal_diag", Box::new(|v| v["lqr"]["wx_terminal_diag"] = json!([1.0]))),
            ("sweep.eps_start", Box::new(|v| v["sweep"]["eps_start"] = json!(0.0))),
            ("sweep.eps_step", Box::new(|v| v["sweep"]["eps_step"] = json!(-0.01))),
            ("sweep.eps_end", Box::new(|v| v["sweep"]["eps_end"] = json!(0.001))),
            ("sweep.n_runs", Box::new(|v| v["sweep"]["n_runs"] = json!(0))),
            ("ldp.delta", Box::new(|v| v["ldp"]["delta"] = json!(0.0))),
            ("ldp.epsilons", Box::new(|v| v["ldp"]["epsilons"] = json!([]))),
            ("ldp.epsilons[1]", Box::new(|v| v["ldp"]["epsilons"][1] = json!(-0.1))),
            ("ldp.n_runs", Box::new(|v| v["ldp"]["n_runs"] = json!(0))),
            ("ldp.horizon_index", Box::new(|v| v["ldp"]["horizon_index"] = json!(21))),
            ("verify.theorem3_samples", Box::new(|v| v["verify"]["theorem3_samples"] = json!(10))),
        ]
    }

    #[test]
    fn every_invalid_field_is_named() {
        for (field, mutate) in invalidations() {
            let mut v = base();
            mutate(&mut v);
            assert_eq!(field_of(v), field);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fuzzed_invalid_configs_are_rejected(
            picks in proptest::collection::vec(0usize..28, 1..4),
        ) {
            let table = invalidations();
            let mut v = base();
            for &i in &picks {
                (table[i].1)(&mut v);
            }
            let err = ExperimentConfig::from_json_str(&v.to_string());
            let named = matches!(&err, Err(Error::Config { field, .. })
                if picks.iter().any(|&i| table[i].0 == field));
            prop_assert!(named, "{:?}", err);
        }

        #[test]
        fn round_trip_is_lossless(
            seed in any::<u64>(),
            x in proptest::array::uniform3(-10.0f64..10.0),
            dt in 1e-3f64..2.0,
            r_u in 0.0f64..10.0,
        ) {
            let mut cfg = ExperimentConfig::default_car();
            cfg.master_seed = seed;
            cfg.x0 = x.to_vec();
            cfg.model.dt = dt;
            cfg.planner.r_u = r_u;
            let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
