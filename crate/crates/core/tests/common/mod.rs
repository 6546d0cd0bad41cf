//! Independent reference implementations shared by integration tests.

#![allow(dead_code)]

/// Greedy herding written directly from its definition: at step k, choose
/// the unselected x minimising ‖μ − mean(selected ∪ {x})‖₂, lowest index
/// first on ties.
pub fn brute_force_herding(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let mu: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64)
        .collect();
    let mut selected: Vec<usize> = Vec::new();
    while selected.len() < m.min(n) {
        let k = selected.len() + 1;
        let mut best: Option<(usize, f64)> = None;
        for x in 0..n {
            if selected.contains(&x) {
                continue;
            }
            let mut dist2 = 0.0;
            for j in 0..d {
                let s: f64 = selected.iter().map(|&i| features[i][j]).sum::<f64>() + features[x][j];
                let diff = mu[j] - s / k as f64;
                dist2 += diff * diff;
            }
            let dist = dist2.sqrt();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((x, dist));
            }
        }
        selected.push(best.unwrap().0);
    }
    selected
}

/// Naive softmax by direct exponentiation.
pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}
