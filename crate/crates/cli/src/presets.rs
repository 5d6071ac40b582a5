//! Registry of the built-in experiments.

use serde_json::json;

use crate::config::ExperimentConfig;

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> serde_json::Value,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        serde_json::from_value((self.build)()).expect("preset configs follow the schema")
    }
}

/// Output times of the pole runs; they contain `0.4 2^{-k}` for `k <= 6`.
fn pole_times() -> serde_json::Value {
    json!([0.00625, 0.0125, 0.025, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4])
}

fn pole_data() -> serde_json::Value {
    json!({"kind": "pole", "a": 0.2, "j_list": [10.0, 15.0, 20.0, 25.0, 30.0]})
}

fn pole_grid() -> serde_json::Value {
    json!({"volume": 2.0, "grid": {"s_min": -14.0, "s_max": 10.0, "n_points": 961}})
}

fn example_5_1() -> serde_json::Value {
    json!({
        "name": "example-5-1",
        "geometry": {"volume": 2.0, "grid": {"s_min": -14.0, "s_max": 10.0, "n_points": 2049}},
        "initial_data": {"kind": "example_family", "j_list": [10.0, 100.0, 1000.0]},
        "flow": {"dt": 1e-3, "t_end": 0.75, "times": [0.25, 0.5, 0.75]},
        "checks": [
            {"theorem": "exact_regression", "j_list": [1.0, 10.0, 100.0], "times": [0.25, 0.5, 0.75], "tol": 5e-3, "halving_band": 0.25},
            {"theorem": "t_max_obstruction", "t": 0.5, "probe": 0.0, "variation_tol": 0.1},
            {"theorem": "c0_lower"},
            {"theorem": "dot_lower"},
            {"theorem": "c2"},
            {"theorem": "more_estimates", "phi1": {"scale": 1.0, "shift": -1.0}, "phi2": {"scale": 4.0, "shift": -1.0}, "delta": 0.25}
        ]
    })
}

fn lelong_decay() -> serde_json::Value {
    json!({
        "name": "lelong-decay",
        "geometry": pole_grid(),
        "initial_data": pole_data(),
        "flow": {"dt": 2e-3, "t_end": 0.4, "times": pole_times()},
        "checks": [
            {"theorem": "lelong_decay"},
            {"theorem": "sequence_independence", "family": {"sharpness": 2.0, "depth": "linear"}, "times": [0.1, 0.3], "tol": 1e-4},
            {"theorem": "lower_bound", "beta": 1.0, "region": [-11.0, 9.0]}
        ]
    })
}

fn comparison_sweep() -> serde_json::Value {
    json!({
        "name": "comparison-sweep",
        "geometry": {"volume": 2.0, "grid": {"s_min": -12.0, "s_max": 12.0, "n_points": 481}},
        "initial_data": {"kind": "random_sweep", "samples": 20},
        "flow": {"dt": 1e-3, "t_end": 0.8, "times": [0.1, 0.2, 0.4, 0.8]},
        "checks": [
            {"theorem": "comparison", "pairs": 20},
            {"theorem": "upper_bound"},
            {"theorem": "derivative_upper"}
        ],
        "output": {"trajectories": false},
        "seed": 20240601
    })
}

fn c0_c2_suite() -> serde_json::Value {
    json!({
        "name": "c0-c2-suite",
        "geometry": pole_grid(),
        "initial_data": pole_data(),
        "flow": {"dt": 2e-3, "t_end": 0.4, "times": pole_times()},
        "checks": [
            {"theorem": "c0_lower"},
            {"theorem": "dot_lower"},
            {"theorem": "c2"},
            {"theorem": "more_estimates", "phi1": {"scale": 1.0, "shift": -1.0}, "phi2": {"scale": 4.0, "shift": -1.0}, "delta": 0.25}
        ]
    })
}

fn capacity_decay() -> serde_json::Value {
    json!({
        "name": "capacity-decay",
        "geometry": {"volume": 2.0, "grid": {"s_min": -8.0, "s_max": 8.0, "n_points": 161}},
        "initial_data": {"kind": "pole", "a": 0.2, "j_list": [10.0, 15.0, 20.0]},
        "flow": {"dt": 1e-2, "t_end": 0.1, "times": [0.1]},
        "checks": [
            {"theorem": "capacity_exactness", "tol": 1e-6},
            {"theorem": "capacity_monotone", "pairs": 20},
            {"theorem": "capacity_decay", "levels": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5]},
            {"theorem": "kolodziej_extinction", "c": 2.0, "t0": 0.5, "theta": 1.0, "levels": 30, "dt": 1e-3, "t_end": 4.0},
            {"theorem": "kolodziej_witness", "t0": 3.0, "dt": 0.025, "t_end": 10.0}
        ],
        "output": {"trajectories": false},
        "seed": 7
    })
}

fn stability_sweep() -> serde_json::Value {
    json!({
        "name": "stability-sweep",
        "geometry": {"volume": 2.0, "grid": {"s_min": -12.0, "s_max": 12.0, "n_points": 481}},
        "initial_data": {"kind": "bump", "amplitude": 0.15, "width": 1.0},
        "flow": {"dt": 1e-3, "t_end": 0.5, "times": [0.5]},
        "checks": [
            {"theorem": "stability", "j_list": [4.0, 8.0, 16.0, 32.0, 64.0], "t": 0.5, "tol": 1e-3}
        ]
    })
}

fn zero_convergence() -> serde_json::Value {
    json!({
        "name": "zero-convergence",
        "geometry": pole_grid(),
        "initial_data": pole_data(),
        "flow": {"dt": 1e-3, "t_end": 0.4, "times": pole_times()},
        "checks": [
            {"theorem": "zero_convergence",
             "params": {"t0": 0.4, "levels": 6, "region": [-11.0, 9.0], "branch": "continuous", "tol": 1e-2},
             "datum": {"kind": "kink", "kappa": 0.1, "center": 1.0}},
            {"theorem": "zero_convergence",
             "params": {"t0": 0.4, "levels": 6, "region": [-3.0, 9.0], "branch": "analytic", "tol": 1e-2}}
        ]
    })
}

fn h_f_convergence() -> serde_json::Value {
    json!({
        "name": "h-f-convergence",
        "geometry": {"volume": 2.0, "grid": {"s_min": -32.0, "s_max": 10.0, "n_points": 1681}},
        "initial_data": {"kind": "hf", "minus_pole": 0.5, "j_list": [8.0, 16.0, 24.0], "gap_region": [-3.0, 9.0]},
        "flow": {"dt": 1e-3, "t_end": 0.4, "times": [0.00625, 0.0125, 0.025, 0.05, 0.1, 0.2, 0.4]},
        "checks": [
            {"theorem": "h_f_convergence",
             "params": {"t0": 0.4, "levels": 6, "region": [-3.0, 9.0], "branch": "analytic", "tol": 1e-2}}
        ]
    })
}

pub const PRESETS: [Preset; 8] = [
    Preset {
        name: "example-5-1",
        description: "closed-form regression, divergence past T_max and guarded estimates on the example family",
        build: example_5_1,
    },
    Preset {
        name: "lelong-decay",
        description: "(t, nu(t)) table, Lelong envelope, supersolution domination and family independence for a = 0.2",
        build: lelong_decay,
    },
    Preset {
        name: "comparison-sweep",
        description: "comparison principle, upper bound and derivative bound on seeded smooth data",
        build: comparison_sweep,
    },
    Preset {
        name: "c0-c2-suite",
        description: "fit-then-verify C0, time-derivative, Laplacian and analytic-singularity bounds for a = 0.2",
        build: c0_c2_suite,
    },
    Preset {
        name: "capacity-decay",
        description: "LP capacity exactness, monotonicity, level-set decay and the extinction lemma",
        build: capacity_decay,
    },
    Preset {
        name: "stability-sweep",
        description: "sup and C2 distances at t = 0.5 under 1/j perturbations",
        build: stability_sweep,
    },
    Preset {
        name: "zero-convergence",
        description: "monotone sequence and convergence as t -> 0 for a kink and an analytic pole",
        build: zero_convergence,
    },
    Preset {
        name: "h-f-convergence",
        description: "convergence as t -> 0 from the Monge-Ampere solution with one log-pole density",
        build: h_f_convergence,
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn list_presets() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|p| (p.name, p.description)).collect()
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;

    #[test]
    fn registry_holds_the_eight_presets() {
        let names: Vec<&str> = list_presets().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "example-5-1",
                "lelong-decay",
                "comparison-sweep",
                "c0-c2-suite",
                "capacity-decay",
                "stability-sweep",
                "zero-convergence",
                "h-f-convergence"
            ]
        );
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        for p in &PRESETS {
            let c = p.config();
            assert_eq!(c.name, p.name);
            c.validate(Path::new(".")).unwrap_or_else(|e| panic!("{}: {e:#}", p.name));
            assert!(!c.checks.is_empty());
            let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(again, c);
        }
    }

    #[test]
    fn unknown_names_are_absent() {
        assert!(find("example-5-1").is_some());
        assert!(find("example-5-2").is_none());
    }
}
