//! Browser bindings: generate an instance, build a tour, polish it with
//! random-crop reconstruction driven by an exact segment solver.

use geld::heuristics::{nearest_neighbor, nn_two_opt, random_insertion, two_opt};
use geld::inference::{prc, ExactPathSolver};
use geld::io::{generate_instances, Pattern};
use geld::tsp::{Point, Tour, TspInstance};
use geld::MetricMode;
use wasm_bindgen::prelude::*;

pub const MAX_SEGMENT: usize = 10;
const TWO_OPT_SWEEPS: usize = 1000;

fn instance(coords: &[f64]) -> Result<TspInstance, String> {
    if !coords.len().is_multiple_of(2) {
        return Err(format!("odd coordinate count {}", coords.len()));
    }
    let pts: Vec<Point> = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    TspInstance::new("web", pts, MetricMode::ContinuousEuclid).map_err(|e| e.to_string())
}

fn tour(inst: &TspInstance, order: &[u32]) -> Result<Tour, String> {
    Tour::new(inst, order.iter().map(|&i| i as usize).collect()).map_err(|e| e.to_string())
}

fn flat(t: &Tour) -> Vec<u32> {
    t.order().iter().map(|&i| i as u32).collect()
}

/// Flat `[x0, y0, x1, y1, ...]` in the unit square.
pub fn generate_points(pattern: &str, n: usize, seed: u32) -> Result<Vec<f64>, String> {
    let pattern: Pattern = pattern.parse().map_err(|e: geld::GeldError| e.to_string())?;
    let inst = generate_instances(pattern, n, 1, seed as u64).map_err(|e| e.to_string())?.remove(0);
    Ok(inst.coords().iter().flat_map(|p| [p[0], p[1]]).collect())
}

/// `method` is one of `nn`, `nn2opt`, `ri`, `ri2opt`.
pub fn solve_tour(coords: &[f64], method: &str, seed: u32) -> Result<Vec<u32>, String> {
    let inst = instance(coords)?;
    let t = match method {
        "nn" => nearest_neighbor(&inst, 0),
        "nn2opt" => nn_two_opt(&inst, TWO_OPT_SWEEPS).map(|r| r.tour),
        "ri" => random_insertion(&inst, seed as u64),
        "ri2opt" => random_insertion(&inst, seed as u64).and_then(|t| two_opt(&inst, &t, TWO_OPT_SWEEPS)).map(|r| r.tour),
        other => return Err(format!("unknown method {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    Ok(flat(&t))
}

pub fn improve_tour(coords: &[f64], order: &[u32], iterations: usize, seed: u32) -> Result<Vec<u32>, String> {
    let inst = instance(coords)?;
    let start = tour(&inst, order)?;
    let max_segment = MAX_SEGMENT.min(inst.len());
    let out = prc(&inst, &start, &ExactPathSolver, iterations, max_segment, seed as u64).map_err(|e| e.to_string())?;
    Ok(flat(&out))
}

pub fn length_of(coords: &[f64], order: &[u32]) -> Result<f64, String> {
    let inst = instance(coords)?;
    Ok(tour(&inst, order)?.length())
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen]
pub fn generate(pattern: &str, n: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    generate_points(pattern, n, seed).map_err(js)
}

#[wasm_bindgen]
pub fn solve(coords: &[f64], method: &str, seed: u32) -> Result<Vec<u32>, JsValue> {
    solve_tour(coords, method, seed).map_err(js)
}

#[wasm_bindgen]
pub fn improve(coords: &[f64], order: &[u32], iterations: usize, seed: u32) -> Result<Vec<u32>, JsValue> {
    improve_tour(coords, order, iterations, seed).map_err(js)
}

#[wasm_bindgen(js_name = tourLength)]
pub fn tour_length(coords: &[f64], order: &[u32]) -> Result<f64, JsValue> {
    length_of(coords, order).map_err(js)
}
