//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the code it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use iconvnext::data::{write_pnm, RawImage};

/// Feature smoothing loss by explicit loops: for each class present, the
/// mean squared distance of its rows to their mean, averaged over classes.
pub fn naive_fsl(features: &[f64], d: usize, labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut center = vec![0.0; d];
        for &i in &members {
            for j in 0..d {
                center[j] += features[i * d + j];
            }
        }
        for v in &mut center {
            *v /= members.len() as f64;
        }
        let mut sum = 0.0;
        for &i in &members {
            for j in 0..d {
                let diff = features[i * d + j] - center[j];
                sum += diff * diff;
            }
        }
        total += sum / members.len() as f64;
    }
    total / classes.len() as f64
}

/// Closed-form feature smoothing gradient `2 / (C_present * N_c) * (f - mean_c)`.
pub fn closed_form_fsl_grad(features: &[f64], d: usize, labels: &[usize]) -> Vec<f64> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let present = groups.len() as f64;
    let mut grad = vec![0.0; features.len()];
    for members in groups.values() {
        let n_c = members.len() as f64;
        for j in 0..d {
            let mean = members.iter().map(|&i| features[i * d + j]).sum::<f64>() / n_c;
            for &i in members {
                grad[i * d + j] = 2.0 / (present * n_c) * (features[i * d + j] - mean);
            }
        }
    }
    grad
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly, ties
/// counting one half.
pub fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        let scale: f64 = (0..n * n).map(|k| m[k].powi(2)).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Sample covariance (divisor `n - 1`) of `n x d` rows.
pub fn sample_covariance(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] = (0..n).map(|i| (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b])).sum::<f64>() / (n - 1) as f64;
        }
    }
    cov
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

/// Writes `counts[k]` tiny grey images into class directory `c{k}`.
pub fn write_tiny_tree(root: &Path, counts: &[usize]) {
    for (k, &n) in counts.iter().enumerate() {
        let dir = root.join(format!("c{k}"));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = RawImage::new(2, 2, 1, vec![(i % 256) as u8, k as u8, 0, 255]).unwrap();
            write_pnm(&dir.join(format!("{i:04}.pgm")), &img).unwrap();
        }
    }
}
