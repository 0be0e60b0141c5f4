//! Browser bindings: water-filling levels, the two-user capacity region and
//! the compensation lift as a function of input truncation. Every call takes
//! a comma-separated list of `nu_i` and returns a JSON string.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use amqd_core::allocation::{constant_variance_nus, select_good_nus, waterfill_exact_nus};
use amqd_core::capacity::capacity_region_2user;
use amqd_core::channel::ChannelBank;
use amqd_core::compensation::compensate_nus;
use amqd_core::harness::{region_json, REGION_POINTS};
use amqd_core::input::{DistributionKind, InputDistribution};
use num_complex::Complex64;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse_nus(text: &str) -> Result<Vec<f64>, String> {
    let nus = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<Vec<f64>, String>>()?;
    if nus.is_empty() {
        return Err("enter at least one nu_i".to_string());
    }
    if let Some(nu) = nus.iter().find(|nu| !(**nu > 0.0) || !nu.is_finite()) {
        return Err(format!("every nu_i must be positive and finite, got {nu}"));
    }
    Ok(nus)
}

/// Unit Fourier gains with noise `nu_i`, so each coefficient is `nu_i`.
fn bank_of(nus: &[f64]) -> Result<ChannelBank, String> {
    ChannelBank::from_fourier(vec![Complex64::new(1.0, 0.0); nus.len()], nus.to_vec()).map_err(|e| e.to_string())
}

fn rate(nus: &[f64], variances: &[f64]) -> f64 {
    nus.iter().zip(variances).map(|(nu, v)| (1.0 + v / nu).log2()).sum()
}

pub fn water_levels_json(nus: &str, nu_eve: f64) -> Result<String, String> {
    let nus = parse_nus(nus)?;
    let exact = waterfill_exact_nus(&nus, nu_eve);
    let constant = constant_variance_nus(&nus, nu_eve).map_err(|e| e.to_string())?;
    Ok(json!({
        "nu_eve": nu_eve,
        "nus": nus,
        "good": select_good_nus(&nus, nu_eve),
        "exact": exact.per_subchannel,
        "constant": constant.per_subchannel,
        "rate_exact": rate(&nus, &exact.per_subchannel),
        "rate_constant": rate(&nus, &constant.per_subchannel),
    })
    .to_string())
}

pub fn capacity_region_json(nus: &str, nu_eve: f64) -> Result<String, String> {
    let nus = parse_nus(nus)?;
    let bank = bank_of(&nus)?;
    let good = select_good_nus(&nus, nu_eve);
    let alloc = waterfill_exact_nus(&nus, nu_eve);
    let region = capacity_region_2user(&bank, &alloc, &good).map_err(|e| e.to_string())?;
    region_json(&region).map_err(|e| e.to_string())
}

/// `nu_kappa`, `G` and the number of surviving sub-channels for a
/// truncated-Gaussian input at `points` bounds spread over `[0.25, 4]`.
pub fn compensation_curve_json(nus: &str, nu_eve: f64, points: usize) -> Result<String, String> {
    let nus = parse_nus(nus)?;
    let points = points.clamp(2, 64);
    let mut rows = Vec::with_capacity(points);
    for k in 0..points {
        let bound = 0.25 + 3.75 * k as f64 / (points - 1) as f64;
        let dist =
            InputDistribution::new(DistributionKind::TruncatedGaussian { bound }, 1.0).map_err(|e| e.to_string())?;
        let r = compensate_nus(&nus, nu_eve, &dist).map_err(|e| e.to_string())?;
        rows.push(json!({
            "bound": bound,
            "nu_kappa": r.nu_kappa,
            "g_delta": r.g_delta,
            "kappa": r.kappa,
            "active": r.active.len(),
        }));
    }
    Ok(json!({ "nu_eve": nu_eve, "curve": rows }).to_string())
}

#[wasm_bindgen]
pub fn water_levels(nus: &str, nu_eve: f64) -> Result<String, JsValue> {
    water_levels_json(nus, nu_eve).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn capacity_region(nus: &str, nu_eve: f64) -> Result<String, JsValue> {
    capacity_region_json(nus, nu_eve).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compensation_curve(nus: &str, nu_eve: f64, points: usize) -> Result<String, JsValue> {
    compensation_curve_json(nus, nu_eve, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn region_points() -> usize {
    REGION_POINTS
}
