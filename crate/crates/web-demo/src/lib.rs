//! wasm-bindgen exports behind `www/index.html`. Every export is a plain Rust
//! function too, so the native tests exercise exactly what the page calls.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ripbench::classical::smote;
use ripbench::data::{ManeuverLabel, NUM_CLASSES};
use ripbench::metrics::{accuracy, maneuver_counts, maneuver_prf};
use ripbench::ssm::{ssd_scan, ScanInputs};
use ripbench::tensor::Tensor;
use wasm_bindgen::prelude::*;

const MAX_STEPS: usize = 4096;

/// Output of a one-head, one-channel, one-state scan driven by a unit impulse
/// at t = 0 with B = C = 1, i.e. the decay kernel `exp(-exp(a_log) * dt * t) * dt`.
#[wasm_bindgen]
pub fn scan_impulse(a_log: f64, dt: f64, steps: usize) -> Result<Vec<f64>, String> {
    if !(a_log.is_finite() && dt.is_finite() && dt >= 0.0) {
        return Err("a_log must be finite and dt finite and non-negative".into());
    }
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    let mut x = vec![0.0; steps];
    x[0] = 1.0;
    let col = |v: Vec<f64>| Tensor::new(&[steps, 1], v).map_err(|e| e.to_string());
    let inputs = ScanInputs {
        x: col(x)?,
        dt: col(vec![dt; steps])?,
        b: col(vec![1.0; steps])?,
        c: col(vec![1.0; steps])?,
    };
    let y = ssd_scan(&inputs, &[a_log]).map_err(|e| e.to_string())?;
    Ok(y.data().to_vec())
}

fn parse_labels(text: &str) -> Result<Vec<ManeuverLabel>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<ManeuverLabel>().map_err(|e| e.to_string()))
        .collect()
}

/// Accuracy and maneuver precision/recall/F1 for two label lists
/// (`"RT, LT, ST"`). Returns `[acc, precision, recall, f1, tp, fp, fpp, mp]`.
#[wasm_bindgen]
pub fn maneuver_metrics(preds: &str, targets: &str) -> Result<Vec<f64>, String> {
    let p = parse_labels(preds)?;
    let t = parse_labels(targets)?;
    let acc = accuracy(&p, &t).map_err(|e| e.to_string())?;
    let c = maneuver_counts(&p, &t);
    let (precision, recall, f1) = maneuver_prf(&c);
    Ok(vec![acc, precision, recall, f1, c.tp as f64, c.fp as f64, c.fpp as f64, c.mp as f64])
}

/// SMOTE on 2-D points given as flat `[x0, y0, x1, y1, ...]` with one class
/// per point. Returns rows of `[x, y, class, synthetic]` flattened, originals
/// first.
#[wasm_bindgen]
pub fn smote_2d(points: &[f64], classes: &[u32], k: usize, seed: u64) -> Result<Vec<f64>, String> {
    if points.len() != 2 * classes.len() {
        return Err(format!("{} coordinates for {} classes", points.len(), classes.len()));
    }
    if let Some(c) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(format!("class {c} out of range 0..{NUM_CLASSES}"));
    }
    let x: Vec<Vec<f64>> = points.chunks(2).map(|p| p.to_vec()).collect();
    let y: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ys, _) = smote(&x, &y, k, &mut rng).map_err(|e| e.to_string())?;
    let n = x.len();
    Ok(xs
        .iter()
        .zip(&ys)
        .enumerate()
        .flat_map(|(i, (p, &c))| [p[0], p[1], c as f64, f64::from(u8::from(i >= n))])
        .collect())
}
