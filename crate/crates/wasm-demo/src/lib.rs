//! Browser bindings. Every export returns a JSON string so the page needs no
//! generated type glue; errors surface as thrown strings.

use fledgesim_core::data::{class_histograms, dirichlet_partition, generate, PartitionConfig, SyntheticDatasetSpec};
use fledgesim_core::privacy::{account_epsilon, NoiseSpec};
use fledgesim_core::profiles::Profiles;
use fledgesim_core::viability::assess_named;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn to_json<T: Serialize>(value: &T) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ProfileNames {
    networks: Vec<String>,
    devices: Vec<String>,
}

pub fn profile_names_json() -> Out {
    let p = Profiles::builtin();
    to_json(&ProfileNames {
        networks: p.networks.keys().cloned().collect(),
        devices: p.devices.keys().cloned().collect(),
    })
}

#[derive(Serialize)]
struct GranularityPoint {
    params: usize,
    payload_mb: f64,
    t_computation_s: Option<f64>,
    t_communication_s: f64,
    granularity: Option<f64>,
    verdict: &'static str,
}

/// Log-spaced sweep from 1e3 to 1e9 parameters, four points per decade.
pub fn granularity_curve_json(network: &str, device: &str, samples: usize) -> Out {
    let profiles = Profiles::builtin();
    let points = (0..=24)
        .map(|i| {
            let params = 10f64.powf(3.0 + i as f64 / 4.0).round() as usize;
            let r = assess_named(params, samples, network, device, &profiles).map_err(|e| e.to_string())?;
            Ok(GranularityPoint {
                params,
                payload_mb: r.payload_mb,
                t_computation_s: r.t_computation_s,
                t_communication_s: r.t_communication_s,
                granularity: r.granularity,
                verdict: r.verdict_label(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&points)
}

#[derive(Serialize)]
struct PrivacyCurves {
    /// Epsilon for noise multipliers in (0, z_max]; infinite budgets are `null`.
    epsilon: Vec<(f64, Option<f64>)>,
    /// Per-coordinate noise std against the dropout rate at the chosen z.
    noise_std: Vec<(f64, f64)>,
}

pub fn privacy_curves_json(z: f64, q: f64, rounds: u64, delta: f64, clip_norm: f64, clients: usize) -> Out {
    if !(z > 0.0 && z.is_finite()) {
        return Err("noise multiplier must be positive".into());
    }
    if clients == 0 {
        return Err("at least one client must report".into());
    }
    let z_max = (2.0 * z).max(2.0);
    let epsilon = (1..=40)
        .map(|i| {
            let zi = z_max * i as f64 / 40.0;
            let eps = account_epsilon(zi, q, delta, rounds).map_err(|e| e.to_string())?;
            Ok((zi, eps.is_finite().then_some(eps)))
        })
        .collect::<Result<Vec<_>, String>>()?;
    // Survivors are rounded down but never below one reporting client.
    let noise_std = (0..=18)
        .map(|i| {
            let p = 0.05 * i as f64;
            let survivors = (((1.0 - p) * clients as f64).floor() as usize).max(1);
            (p, NoiseSpec::for_round(z, clip_norm, survivors).sigma)
        })
        .collect();
    to_json(&PrivacyCurves { epsilon, noise_std })
}

#[derive(Serialize)]
struct PartitionView {
    n_classes: usize,
    histograms: Vec<Vec<usize>>,
}

/// Class counts per client for the default synthetic dataset.
pub fn partition_histogram_json(n_clients: usize, alpha: f64, seed: u64) -> Out {
    let spec = SyntheticDatasetSpec::default();
    let data = generate(&spec, seed).map_err(|e| e.to_string())?;
    let cfg = PartitionConfig { n_clients, alpha, seed };
    let parts = dirichlet_partition(&data.labels, &cfg).map_err(|e| e.to_string())?;
    to_json(&PartitionView {
        n_classes: spec.n_classes,
        histograms: class_histograms(&data.labels, &parts, spec.n_classes),
    })
}

#[wasm_bindgen]
pub fn profile_names() -> Result<String, JsValue> {
    profile_names_json().map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn granularity_curve(network: &str, device: &str, samples: usize) -> Result<String, JsValue> {
    granularity_curve_json(network, device, samples).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn privacy_curves(z: f64, q: f64, rounds: u32, delta: f64, clip_norm: f64, clients: usize) -> Result<String, JsValue> {
    privacy_curves_json(z, q, rounds.into(), delta, clip_norm, clients).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn partition_histogram(n_clients: usize, alpha: f64, seed: u32) -> Result<String, JsValue> {
    partition_histogram_json(n_clients, alpha, seed.into()).map_err(JsValue::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn granularity_curve_spans_the_grid_and_falls() {
        let v: Value = serde_json::from_str(&granularity_curve_json("lte-global-avg", "orin", 10_000).unwrap()).unwrap();
        let pts = v.as_array().unwrap();
        assert_eq!(pts.len(), 25);
        let gs: Vec<f64> = pts.iter().filter_map(|p| p["granularity"].as_f64()).collect();
        assert!(gs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn unknown_profile_is_an_error() {
        assert!(granularity_curve_json("carrier-pigeon", "orin", 10).unwrap_err().contains("carrier-pigeon"));
    }

    #[test]
    fn noise_grows_with_dropout() {
        let v: Value = serde_json::from_str(&privacy_curves_json(1.0, 0.2, 100, 1e-5, 1.0, 9).unwrap()).unwrap();
        let std: Vec<f64> = v["noise_std"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).collect();
        assert!((std[0] - 1.0 / 9.0).abs() < 1e-15);
        assert!(std.windows(2).all(|w| w[1] >= w[0]));
        let eps: Vec<f64> = v["epsilon"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).collect();
        assert!(eps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn partition_accounts_for_every_sample() {
        let v: Value = serde_json::from_str(&partition_histogram_json(10, 0.5, 3).unwrap()).unwrap();
        let total: u64 = v["histograms"].as_array().unwrap().iter().flat_map(|h| h.as_array().unwrap()).map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(total, SyntheticDatasetSpec::default().n_samples as u64);
        assert!(partition_histogram_json(10, 0.0, 3).is_err());
    }
}
