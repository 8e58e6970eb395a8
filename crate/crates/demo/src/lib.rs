//! WebAssembly bindings for the browser demo in `www/`. Every export returns
//! a JSON string; errors surface as JS exceptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use skelcompress::compress::{compress_model, parse_plan};
use skelcompress::finetune::{lr_at_epoch, TrainConfig};
use skelcompress::linalg::{reconstruction_error, svd_default, Matrix};
use skelcompress::model::{build_model, ModelConfig};

const MAX_DIM: usize = 256;
const MAX_EPOCHS: usize = 10_000;

#[derive(Debug, Serialize)]
pub struct Spectrum {
    pub rows: usize,
    pub cols: usize,
    pub sigma: Vec<f64>,
    /// Relative Frobenius error of the rank-k truncation, k = 0..=rank.
    pub rel_error: Vec<f64>,
    /// Factor-pair parameter count k·(rows + cols), k = 0..=rank.
    pub params: Vec<usize>,
    pub dense_params: usize,
    /// Largest k whose factor pair is strictly smaller than the dense matrix.
    pub break_even: usize,
}

/// Spectrum of `signal_rank` random outer products plus uniform noise.
pub fn spectrum(rows: usize, cols: usize, signal_rank: usize, noise: f64, seed: u64) -> Result<Spectrum, String> {
    if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
        return Err(format!("dimensions must be in 1..={MAX_DIM}"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err("noise must be a non-negative number".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Matrix::from_fn(rows, cols, |_, _| noise * rng.random_range(-1.0..1.0));
    for _ in 0..signal_rank.min(rows.min(cols)) {
        let u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        a = a.add(&Matrix::from_fn(rows, cols, |r, c| u[r] * v[c])).map_err(|e| e.to_string())?;
    }
    let s = svd_default(&a).map_err(|e| e.to_string())?;
    let norm = a.frobenius_norm();
    let rel = |e: f64| if norm > 0.0 { e / norm } else { 0.0 };
    let mut rel_error = vec![rel(norm)];
    for k in 1..=s.sigma.len() {
        rel_error.push(rel(reconstruction_error(&s, k).map_err(|e| e.to_string())?));
    }
    let params: Vec<usize> = (0..=s.sigma.len()).map(|k| k * (rows + cols)).collect();
    let dense_params = rows * cols;
    let break_even = params.iter().rposition(|&p| p < dense_params).unwrap_or(0);
    Ok(Spectrum { rows, cols, sigma: s.sigma, rel_error, params, dense_params, break_even })
}

fn parse_milestones(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("invalid milestone {t:?}")))
        .collect()
}

/// Learning rate at each epoch of a warm-up plus step-decay schedule.
pub fn lr_curve(base_lr: f64, decay: f64, milestones: &str, warmup: usize, epochs: usize) -> Result<Vec<f64>, String> {
    if epochs > MAX_EPOCHS {
        return Err(format!("epochs must be at most {MAX_EPOCHS}"));
    }
    let cfg = TrainConfig {
        base_lr,
        decay_factor: decay,
        milestones: parse_milestones(milestones)?,
        warmup_epochs: warmup,
        epochs,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    (0..epochs).map(|e| lr_at_epoch(&cfg, e).map_err(|e| e.to_string())).collect()
}

#[derive(Debug, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub group: &'static str,
    pub shape: [usize; 2],
    pub rank: Option<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub recon_rel: f64,
}

#[derive(Debug, Serialize)]
pub struct Accounting {
    pub plan: String,
    pub layers: Vec<LayerRow>,
    pub params_before: usize,
    pub params_after: usize,
    pub frames: usize,
    pub flops_before: usize,
    pub flops_after: usize,
}

/// Applies `plan` to a freshly initialized model and reports the savings.
pub fn plan_accounting(
    plan: &str,
    d_model: usize,
    heads: usize,
    blocks: usize,
    seed: u64,
) -> Result<Accounting, String> {
    if d_model > MAX_DIM || blocks > 8 {
        return Err(format!("d_model must be at most {MAX_DIM} and blocks at most 8"));
    }
    let plan = parse_plan(plan).map_err(|e| e.to_string())?;
    let cfg = ModelConfig { d_model, heads, blocks, seed, ..ModelConfig::default() };
    let model = build_model(&cfg).map_err(|e| e.to_string())?;
    let (_, report) = compress_model(&model, &plan).map_err(|e| e.to_string())?;
    Ok(Accounting {
        plan: plan.render(),
        layers: report
            .layers
            .into_iter()
            .map(|l| LayerRow {
                name: l.name,
                group: l.group.name(),
                shape: [l.rows, l.cols],
                rank: l.rank,
                params_before: l.params_before,
                params_after: l.params_after,
                recon_rel: l.recon_rel,
            })
            .collect(),
        params_before: report.params_before,
        params_after: report.params_after,
        frames: report.reference_frames,
        flops_before: report.flops_before,
        flops_after: report.flops_after,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = singularSpectrum)]
pub fn singular_spectrum_js(
    rows: usize,
    cols: usize,
    signal_rank: usize,
    noise: f64,
    seed: u32,
) -> Result<String, JsError> {
    to_js(spectrum(rows, cols, signal_rank, noise, seed.into()))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(
    base_lr: f64,
    decay: f64,
    milestones: &str,
    warmup: usize,
    epochs: usize,
) -> Result<String, JsError> {
    to_js(lr_curve(base_lr, decay, milestones, warmup, epochs))
}

#[wasm_bindgen(js_name = planAccounting)]
pub fn plan_accounting_js(
    plan: &str,
    d_model: usize,
    heads: usize,
    blocks: usize,
    seed: u32,
) -> Result<String, JsError> {
    to_js(plan_accounting(plan, d_model, heads, blocks, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_of_planted_rank() {
        let s = spectrum(20, 12, 3, 0.0, 1).unwrap();
        assert_eq!(s.sigma.len(), 12);
        assert!(s.sigma[2] > 1e-6 && s.sigma[3] < 1e-9);
        assert!((s.rel_error[0] - 1.0).abs() < 1e-12);
        assert!(s.rel_error[3] < 1e-9);
        assert!(s.rel_error.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert_eq!(s.params[3], 3 * 32);
        // 7·32 = 224 < 240 ≤ 8·32
        assert_eq!(s.break_even, 7);
    }

    #[test]
    fn spectrum_rejects_bad_input() {
        assert!(spectrum(0, 4, 1, 0.1, 0).is_err());
        assert!(spectrum(4, 4, 1, -1.0, 0).is_err());
        assert!(spectrum(MAX_DIM + 1, 4, 1, 0.1, 0).is_err());
    }

    #[test]
    fn lr_curve_steps() {
        let c = lr_curve(0.0025, 0.1, "5, 25", 0, 30).unwrap();
        assert_eq!(c.len(), 30);
        assert_eq!((c[0], c[5], c[29]), (0.0025, 0.00025, 0.000025));
        assert!(lr_curve(0.1, 0.1, "5,x", 0, 10).is_err());
        assert!(lr_curve(0.1, 0.1, "", 0, 0).is_err());
        assert!(lr_curve(0.1, 0.1, "", 0, MAX_EPOCHS + 1).is_err());
    }

    #[test]
    fn accounting_matches_core() {
        let a = plan_accounting("q=1,k=3", 32, 4, 2, 1).unwrap();
        assert_eq!(a.params_before, 9512);
        assert!(a.params_after < a.params_before && a.flops_after < a.flops_before);
        assert_eq!(a.params_after, a.layers.iter().map(|l| l.params_after).sum::<usize>());
        assert_eq!(a.plan, "q=1,k=3");
        assert!(plan_accounting("v=99", 32, 4, 2, 1).unwrap_err().contains("blocks.0.heads.0.v"));
        assert!(plan_accounting("q=0", 32, 4, 2, 1).is_err());
        assert!(plan_accounting("", 30, 4, 2, 1).is_err());
    }

    #[test]
    fn outputs_are_json() {
        let v: serde_json::Value = serde_json::to_value(plan_accounting("", 8, 2, 1, 0).unwrap()).unwrap();
        assert_eq!(v["layers"].as_array().unwrap().len(), 1 + 3 * 2 + 1 + 1);
        assert!(v["layers"][0]["rank"].is_null());
    }
}
