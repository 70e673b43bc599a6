//! Confusion matrix, precision/recall/F1, one-vs-rest ROC/AUC, PCA and the
//! CSV reports built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_class(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_class()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], class_names: &[String]) -> Result<ConfusionMatrix> {
    let k = class_names.len();
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("confusion matrix needs at least one class".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
        if p >= k || y >= k {
            return Err(Error::InvalidArgument(format!("sample {i}: class index out of range (pred {p}, label {y}, K={k})")));
        }
        counts[y][p] += 1;
    }
    Ok(ConfusionMatrix { class_names: class_names.to_vec(), counts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the class was never predicted (precision reported as 0).
    pub precision_undefined: bool,
    /// Set when the class never occurs (recall reported as 0).
    pub recall_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScore>,
    pub macro_avg: Averages,
    /// Support-weighted; weighted recall equals accuracy.
    pub weighted: Averages,
    pub accuracy: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let k = cm.n_class();
    if k == 0 || cm.total() == 0 {
        return Err(Error::InvalidArgument("precision/recall need a nonempty confusion matrix".into()));
    }
    let per_class: Vec<ClassScore> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let (col, row) = (cm.col_sum(c), cm.row_sum(c));
            let precision = if col > 0 { tp / col as f64 } else { 0.0 };
            let recall = if row > 0 { tp / row as f64 } else { 0.0 };
            ClassScore {
                precision,
                recall,
                f1: f1(precision, recall),
                support: row,
                precision_undefined: col == 0,
                recall_undefined: row == 0,
            }
        })
        .collect();
    let n = cm.total() as f64;
    let avg = |w: &dyn Fn(&ClassScore) -> f64| Averages {
        precision: per_class.iter().map(|s| w(s) * s.precision).sum(),
        recall: per_class.iter().map(|s| w(s) * s.recall).sum(),
        f1: per_class.iter().map(|s| w(s) * s.f1).sum(),
    };
    let macro_avg = avg(&|_| 1.0 / k as f64);
    let weighted = avg(&|s| s.support as f64 / n);
    Ok(ClassMetrics { per_class, macro_avg, weighted, accuracy: cm.accuracy() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One-vs-rest curve for one class. `auc` is `None` when the evaluation set
/// has no positives or no negatives for the class.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub class: usize,
    pub points: Vec<RocPoint>,
    pub auc: Option<f64>,
}

/// ROC points from `(inf, 0, 0)` to `(min score, 1, 1)`, one step per
/// distinct score, and the trapezoidal area under them.
pub fn binary_roc(scores: &[f64], positive: &[bool]) -> Option<(Vec<RocPoint>, f64)> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("nonempty");
        let pt = RocPoint { threshold: s, fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 };
        auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
        points.push(pt);
    }
    Some((points, auc))
}

/// Per-class one-vs-rest ROC on an `N x K` matrix of probabilities.
pub fn roc_auc(probabilities: &[f64], n_class: usize, labels: &[usize]) -> Result<Vec<RocCurve>> {
    if n_class == 0 || probabilities.len() != labels.len() * n_class {
        return Err(Error::shape(
            "roc_auc",
            format!("{} scores for {} samples x {n_class} classes", probabilities.len(), labels.len()),
        ));
    }
    for (i, row) in probabilities.chunks(n_class).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("score row {i} sums to {s}, expected probabilities")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_class) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_class} classes")));
    }
    Ok((0..n_class)
        .map(|c| {
            let scores: Vec<f64> = probabilities.chunks(n_class).map(|r| r[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            match binary_roc(&scores, &positive) {
                Some((points, auc)) => RocCurve { class: c, points, auc: Some(auc) },
                None => {
                    log::warn!("AUC undefined for class {c}: evaluation set lacks positives or negatives");
                    RocCurve { class: c, points: Vec::new(), auc: None }
                }
            }
        })
        .collect())
}

/// Row-wise softmax of `N x K` logits, in f64.
pub fn softmax_rows(logits: &[f32], n_class: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n_class) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// `N x k` coordinates, row-major, `k = components.len() <= 3`.
    pub coords: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Unit-length component vectors of length `D`.
    pub components: Vec<Vec<f64>>,
    /// Set when fewer than three directions carry variance.
    pub rank_deficient: bool,
}

impl PcaProjection {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

/// Eigen-decomposition of a symmetric matrix (row-major, `n x n`) by
/// Householder tridiagonalisation and implicit-shift QL iteration.
/// Returns eigenvalues in descending order with eigenvectors as columns
/// of the returned row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigen", format!("{} entries for {n} x {n}", a.len())));
    }
    let mut z = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalise(&mut z, n, &mut d, &mut e);
    ql_implicit(&mut d, &mut e, &mut z, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new] = z[r * n + old];
        }
    }
    Ok((values, vectors))
}

// Householder reduction to tridiagonal form, accumulating the transform in `z`.
fn tridiagonalise(z: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    if n == 0 {
        return;
    }
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| z[i * n + k].abs()).sum();
            if scale == 0.0 {
                e[i] = z[i * n + l];
            } else {
                for k in 0..=l {
                    z[i * n + k] /= scale;
                    h += z[i * n + k] * z[i * n + k];
                }
                let f = z[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[i * n + l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    z[j * n + i] = z[i * n + j] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[j * n + k] * z[i * n + k];
                    }
                    for k in j + 1..=l {
                        g += z[k * n + j] * z[i * n + k];
                    }
                    e[j] = g / h;
                    f += e[j] * z[i * n + j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = z[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        z[j * n + k] -= f * e[k] + g * z[i * n + k];
                    }
                }
            }
        } else {
            e[i] = z[i * n + l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += z[i * n + k] * z[k * n + j];
                }
                for k in 0..i {
                    z[k * n + j] -= g * z[k * n + i];
                }
            }
        }
        d[i] = z[i * n + i];
        z[i * n + i] = 1.0;
        for j in 0..i {
            z[j * n + i] = 0.0;
            z[i * n + j] = 0.0;
        }
    }
}

fn ql_implicit(d: &mut [f64], e: &mut [f64], z: &mut [f64], n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::InvalidArgument("eigensolver did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let f = z[k * n + i + 1];
                    z[k * n + i + 1] = s * z[k * n + i] + c * f;
                    z[k * n + i] = c * z[k * n + i] - s * f;
                }
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Projects mean-centred `N x D` rows onto the top three principal axes of
/// their sample covariance. Each component's sign is fixed so its first
/// entry above 1e-6 in magnitude is positive.
pub fn pca3(features: &[f64], n: usize, d: usize) -> Result<PcaProjection> {
    if n < 4 || d < 3 || features.len() != n * d {
        return Err(Error::shape("pca3", format!("need N >= 4, D >= 3 and N*D values; got N={n}, D={d}, {}", features.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "pca3 input".into() });
    }
    let mut mean = vec![0.0; d];
    for row in features.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = features.chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; d * d];
    for row in centred.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let tol = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let k = values.iter().take(3).take_while(|&&v| trace > 0.0 && v > tol).count();
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + c]).collect();
        let lead = v.iter().copied().find(|x| x.abs() > 1e-6).unwrap_or(0.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    let mut coords = Vec::with_capacity(n * k);
    for row in centred.chunks(d) {
        for comp in &components {
            coords.push(row.iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    let eigenvalues: Vec<f64> = values[..k].to_vec();
    let explained_ratio = eigenvalues.iter().map(|v| v / trace).collect();
    Ok(PcaProjection { coords, explained_ratio, eigenvalues, components, rank_deficient: k < 3 })
}

/// Mean over classes present of the mean squared distance from each
/// feature row to its class centroid.
pub fn intra_class_variance(features: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    if dim == 0 || features.len() != labels.len() * dim || labels.is_empty() {
        return Err(Error::shape("intra_class_variance", format!("{} values for {} rows of {dim}", features.len(), labels.len())));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in features.chunks(dim).zip(labels) {
        counts[c] += 1;
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mut spread = vec![0.0; k];
    for (row, &c) in features.chunks(dim).zip(labels) {
        let n = counts[c] as f64;
        spread[c] += row.iter().zip(&sums[c]).map(|(v, s)| (v - s / n).powi(2)).sum::<f64>();
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    Ok(present.iter().map(|&c| spread[c] / counts[c] as f64).sum::<f64>() / present.len() as f64)
}

/// Everything the evaluation command writes.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub rocs: Vec<RocCurve>,
    pub pca: PcaProjection,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

/// Builds the full report from eval-mode logits and pre-logits features.
pub fn evaluate(
    logits: &[f32],
    prelogits: &[f32],
    feature_dim: usize,
    labels: &[usize],
    class_names: &[String],
    paths: &[PathBuf],
) -> Result<MetricsReport> {
    let k = class_names.len();
    let n = labels.len();
    if logits.len() != n * k || prelogits.len() != n * feature_dim || paths.len() != n {
        return Err(Error::shape("evaluate", format!("inconsistent sizes for {n} samples")));
    }
    let preds: Vec<usize> = logits.chunks(k).map(crate::model::argmax).collect();
    let confusion = confusion_matrix(&preds, labels, class_names)?;
    let metrics = precision_recall_f1(&confusion)?;
    let rocs = roc_auc(&softmax_rows(logits, k), k, labels)?;
    let feats: Vec<f64> = prelogits.iter().map(|&v| v as f64).collect();
    let pca = pca3(&feats, n, feature_dim)?;
    Ok(MetricsReport { confusion, metrics, rocs, pca, labels: labels.to_vec(), paths: paths.to_vec() })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("true\\pred");
    for name in &cm.class_names {
        s.push(',');
        s.push_str(&csv_field(name));
    }
    s.push('\n');
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        s.push_str(&csv_field(name));
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`confusion_csv`] output back into counts.
pub fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<u64>>> {
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    let k = rows.len();
    rows.iter()
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() <= k {
                return Err(Error::InvalidArgument(format!("confusion row {l:?} has fewer than {k} counts")));
            }
            fields[fields.len() - k..]
                .iter()
                .map(|v| v.parse().map_err(|_| Error::InvalidArgument(format!("bad count {v:?}"))))
                .collect()
        })
        .collect()
}

pub fn metrics_csv(cm: &ConfusionMatrix, m: &ClassMetrics) -> String {
    let mut s = String::from("class,precision,recall,f1,support\n");
    for (name, c) in cm.class_names.iter().zip(&m.per_class) {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", csv_field(name), c.precision, c.recall, c.f1, c.support);
    }
    let n = cm.total();
    for (label, a) in [("macro", m.macro_avg), ("weighted", m.weighted)] {
        let _ = writeln!(s, "{label},{:.6},{:.6},{:.6},{n}", a.precision, a.recall, a.f1);
    }
    let _ = writeln!(s, "accuracy,,,{:.6},{n}", m.accuracy);
    s
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.fpr, p.tpr);
    }
    s
}

pub fn auc_csv(class_names: &[String], rocs: &[RocCurve]) -> String {
    let mut s = String::from("class,auc\n");
    for r in rocs {
        if let Some(a) = r.auc {
            let _ = writeln!(s, "{},{a:.6}", csv_field(&class_names[r.class]));
        }
    }
    s
}

pub fn pca_csv(pca: &PcaProjection, labels: &[usize], class_names: &[String], paths: &[PathBuf]) -> String {
    let k = pca.n_components();
    let mut s = String::from("pc1,pc2,pc3,label,path\n");
    for (i, (&y, p)) in labels.iter().zip(paths).enumerate() {
        for c in 0..3 {
            let v = if c < k { pca.coords[i * k + c] } else { 0.0 };
            let _ = write!(s, "{v:.6},");
        }
        let _ = writeln!(s, "{},{}", csv_field(&class_names[y]), csv_field(&p.display().to_string()));
    }
    s
}

/// File-system-safe form of a class name for `roc_<class>.csv`.
pub fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes confusion.csv, metrics.csv, roc_<class>.csv, auc.csv and pca.csv.
pub fn emit_reports(report: &MetricsReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = &report.confusion.class_names;
    let mut files: Vec<(PathBuf, String)> = vec![
        (out_dir.join("confusion.csv"), confusion_csv(&report.confusion)),
        (out_dir.join("metrics.csv"), metrics_csv(&report.confusion, &report.metrics)),
    ];
    for r in report.rocs.iter().filter(|r| r.auc.is_some()) {
        files.push((out_dir.join(format!("roc_{}.csv", file_stem(&names[r.class]))), roc_csv(r)));
    }
    files.push((out_dir.join("auc.csv"), auc_csv(names, &report.rocs)));
    files.push((out_dir.join("pca.csv"), pca_csv(&report.pca, &report.labels, names, &report.paths)));
    for (path, body) in &files {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
