// SPDX-License-Identifier: MIT OR Apache-2.0

//! PCA projection for separability plots and the CSV / JSON report emitters.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, Label};
use crate::error::{Error, Result};
use crate::model::{HookKind, HookPoint, ModelConfig};
use crate::numerics::Tensor;
use crate::probes::{best_probe, ProbeResult};
use crate::steering::ComparisonRow;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Header of the sweep CSV.
pub const SWEEP_CSV_HEADER: &str = "hook,layer,kind,train_acc,test_acc,auc";

/// Header of the PCA CSV.
pub const PCA_CSV_HEADER: &str = "pc1,pc2,label,category";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `[2, width]`, orthonormal rows.
    pub components: Tensor,
    pub explained_variance: [f64; 2],
    /// `[n, 2]` coordinates of the centered input.
    pub projected: Tensor,
    pub mean: Vec<f64>,
    pub labels: Vec<Label>,
    pub categories: Vec<Category>,
}

impl PcaProjection {
    /// Attaches per-row labels and categories for CSV output.
    pub fn with_annotations(mut self, labels: &[Label], categories: &[Category]) -> Result<Self> {
        let n = self.projected.shape()[0];
        if labels.len() != n || categories.len() != n {
            return Err(Error::Shape(format!(
                "{n} projected rows but {} labels and {} categories",
                labels.len(),
                categories.len()
            )));
        }
        self.labels = labels.to_vec();
        self.categories = categories.to_vec();
        Ok(self)
    }
}

/// Makes the largest-magnitude entry positive (first such entry on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// A unit vector orthogonal to `u`, from the standard basis vector with
/// the largest residual.
fn orthogonal_complement(u: &[f64]) -> Vec<f64> {
    let d = u.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let proj = u[j];
        e.iter_mut().zip(u).for_each(|(x, ui)| *x -= proj * ui);
        let n = e.iter().map(|x| x * x).sum::<f64>();
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, e));
        }
    }
    let mut v = best.map(|(_, e)| e).unwrap_or_default();
    normalize(&mut v);
    v
}

/// Top-2 principal components of the rows of `x`.
///
/// The eigendecomposition runs on whichever of the `d × d` covariance or
/// the `n × n` Gram matrix is smaller; both give the same leading
/// eigenpairs. Explained variance uses the `n − 1` denominator.
pub fn pca_2d(x: &Tensor) -> Result<PcaProjection> {
    let (n, d) = x.dims2()?;
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 3 rows, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA to 2 components needs width >= 2, got {d}"
        )));
    }
    x.ensure_finite("PCA input")?;
    let mut mean = vec![0.0f64; d];
    for r in x.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(x.row(i)[j]) - mean[j]);
    let denom = (n - 1) as f64;

    let (mut values, mut vectors): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals = order[..2].iter().map(|&k| eig.eigenvalues[k]).collect();
        let vecs = order[..2]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        (vals, vecs)
    } else {
        let gram = &centered * centered.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let vals = order[..2].iter().map(|&k| eig.eigenvalues[k]).collect();
        let vecs = order[..2]
            .iter()
            .map(|&k| {
                let u = eig.eigenvectors.column(k);
                let mut v: Vec<f64> = (centered.transpose() * u).iter().copied().collect();
                normalize(&mut v);
                v
            })
            .collect();
        (vals, vecs)
    };

    let top = values[0];
    if !(top > 0.0) || top < 1e-12 {
        return Err(Error::DegenerateData(
            "input has zero variance; no principal direction exists".into(),
        ));
    }
    for v in values.iter_mut() {
        if *v < 1e-12 * top {
            *v = 0.0;
        }
    }
    if values[1] == 0.0 {
        vectors[1] = orthogonal_complement(&vectors[0]);
    } else {
        // Re-orthogonalise the second component against the first.
        let dotp: f64 = vectors[0].iter().zip(&vectors[1]).map(|(a, b)| a * b).sum();
        let first = vectors[0].clone();
        vectors[1].iter_mut().zip(&first).for_each(|(b, a)| *b -= dotp * a);
        normalize(&mut vectors[1]);
    }
    for v in vectors.iter_mut() {
        fix_sign(v);
    }

    let mut projected = Vec::with_capacity(n * 2);
    for i in 0..n {
        for v in &vectors {
            let s: f64 = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
            projected.push(s as f32);
        }
    }
    let comps: Vec<f32> = vectors.iter().flatten().map(|&v| v as f32).collect();
    Ok(PcaProjection {
        components: Tensor::from_raw(vec![2, d], comps),
        explained_variance: [values[0], values[1]],
        projected: Tensor::from_raw(vec![n, 2], projected),
        mean,
        labels: Vec::new(),
        categories: Vec::new(),
    })
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Sweep CSV text, sorted by (kind, layer), 4 decimals.
pub fn sweep_csv(results: &[ProbeResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no sweep results to emit".into()));
    }
    let mut rows: Vec<&ProbeResult> = results.iter().collect();
    rows.sort_by_key(|r| (r.hook.kind.as_str(), r.hook.layer));
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            r.hook, r.hook.layer, r.hook.kind, r.train_accuracy, r.test_accuracy, r.auc
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn emit_sweep_csv(results: &[ProbeResult], path: &Path) -> Result<()> {
    write_file(path, &sweep_csv(results)?)
}

pub fn pca_csv(projection: &PcaProjection) -> Result<String> {
    let n = projection.projected.shape()[0];
    if projection.labels.len() != n || projection.categories.len() != n {
        return Err(Error::Shape(format!(
            "PCA projection has {n} rows but {} labels and {} categories",
            projection.labels.len(),
            projection.categories.len()
        )));
    }
    let mut out = String::from(PCA_CSV_HEADER);
    out.push('\n');
    for i in 0..n {
        let p = projection.projected.row(i);
        writeln!(
            out,
            "{:.6},{:.6},{},{}",
            p[0],
            p[1],
            projection.labels[i].as_u8(),
            projection.categories[i]
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn emit_pca_csv(projection: &PcaProjection, path: &Path) -> Result<()> {
    write_file(path, &pca_csv(projection)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hook: HookPoint,
    pub layer: usize,
    pub kind: HookKind,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub auc: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&ProbeResult> for SweepRow {
    fn from(r: &ProbeResult) -> Self {
        SweepRow {
            hook: r.hook,
            layer: r.hook.layer,
            kind: r.hook.kind,
            train_accuracy: r.train_accuracy,
            test_accuracy: r.test_accuracy,
            auc: r.auc,
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub preset: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub engine_version: String,
    pub model: ModelSection,
    pub dataset_id: String,
    pub run_config: serde_json::Value,
    pub sweep: Vec<SweepRow>,
    pub best_hook: Option<SweepRow>,
    pub best_resid_post_hook: Option<SweepRow>,
    pub steering_demos: Vec<ComparisonRow>,
}

impl Report {
    pub fn new(
        model: ModelSection,
        dataset_id: &str,
        run_config: serde_json::Value,
        sweep: &[ProbeResult],
        steering_demos: Vec<ComparisonRow>,
    ) -> Report {
        let resid: Vec<ProbeResult> = sweep
            .iter()
            .filter(|r| r.hook.kind == HookKind::ResidPost)
            .cloned()
            .collect();
        Report {
            format_version: REPORT_FORMAT_VERSION,
            engine_version: env!("CARGO_PKG_VERSION").to_owned(),
            model,
            dataset_id: dataset_id.to_owned(),
            run_config,
            sweep: sweep.iter().map(SweepRow::from).collect(),
            best_hook: best_probe(sweep).map(SweepRow::from),
            best_resid_post_hook: best_probe(&resid).map(SweepRow::from),
            steering_demos,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Writes the run report.
pub fn emit_report_json(report: &Report, path: &Path) -> Result<()> {
    write_file(path, &report.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::Standardizer;

    fn result(kind: HookKind, layer: usize, acc: f64, auc: f64) -> ProbeResult {
        ProbeResult {
            hook: HookPoint { kind, layer },
            weights: vec![0.5],
            bias: 0.0,
            train_accuracy: 1.0,
            test_accuracy: acc,
            auc,
            standardizer: Standardizer {
                mean: vec![0.0],
                std: vec![1.0],
            },
            iterations: 3,
            converged: true,
            n_train: 98,
            n_test: 42,
        }
    }

    #[test]
    fn collinear_points() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![-3.0, -3.0]])
            .unwrap();
        let p = pca_2d(&x).unwrap();
        assert_eq!(p.explained_variance[1], 0.0);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let c0 = p.components.row(0);
        assert!((c0[0] - s).abs() < 1e-6 && (c0[1] - s).abs() < 1e-6, "{c0:?}");
        let c1 = p.components.row(1);
        assert!((c0[0] * c1[0] + c0[1] * c1[1]).abs() < 1e-6);
    }

    #[test]
    fn projecting_components_gives_identity_coordinates() {
        let x = Tensor::from_rows(&[
            vec![2.0, 0.1, -0.3],
            vec![-1.0, 0.4, 0.2],
            vec![0.5, -0.9, 0.0],
            vec![-1.5, 0.4, 0.1],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let p = pca_2d(&x).unwrap();
        for k in 0..2 {
            let c = p.components.row(k);
            for m in 0..2 {
                let coord: f32 = c.iter().zip(p.components.row(m)).map(|(a, b)| a * b).sum();
                let want = if k == m { 1.0 } else { 0.0 };
                assert!((coord - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(
            pca_2d(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            pca_2d(&Tensor::from_rows(&vec![vec![1.0f32, 2.0]; 5]).unwrap()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn wide_input_uses_gram_route() {
        // 4 rows, 10 columns, rank 1.
        let dir: Vec<f32> = (0..10).map(|j| (j as f32 - 4.5) / 10.0).collect();
        let rows: Vec<Vec<f32>> = [1.0f32, -2.0, 0.5, 0.5]
            .iter()
            .map(|&t| dir.iter().map(|d| t * d).collect())
            .collect();
        let p = pca_2d(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(p.explained_variance[1], 0.0);
        let c1 = p.components.row(1);
        let norm: f32 = c1.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        let dotp: f32 = c1.iter().zip(p.components.row(0)).map(|(a, b)| a * b).sum();
        assert!(dotp.abs() < 1e-6);
    }

    #[test]
    fn sweep_csv_layout() {
        let results = vec![
            result(HookKind::ResidPost, 1, 0.976_19, 1.0),
            result(HookKind::AttnZ, 0, 0.5, 0.5),
        ];
        let csv = sweep_csv(&results).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines[1], "blocks.0.attn.hook_z,0,attn_z,1.0000,0.5000,0.5000");
        assert_eq!(lines[2], "blocks.1.hook_resid_post,1,resid_post,1.0000,0.9762,1.0000");
        assert!(sweep_csv(&[]).is_err());
    }

    #[test]
    fn report_best_hook_and_determinism() {
        let sweep = vec![
            result(HookKind::ResidPost, 35, 1.0, 1.0),
            result(HookKind::ResidPost, 16, 1.0, 1.0),
            result(HookKind::ResidPost, 5, 0.833, 0.959),
        ];
        let model = ModelSection {
            preset: "gpt2-large".into(),
            config: ModelConfig::preset("gpt2-large").unwrap(),
        };
        let r = Report::new(model.clone(), "builtin-v1", serde_json::json!({}), &sweep, Vec::new());
        assert_eq!(r.best_hook.as_ref().unwrap().layer, 16);
        let json = r.to_json();
        assert!(json.contains("\"steering_demos\": []"));
        let again = Report::new(model, "builtin-v1", serde_json::json!({}), &sweep, Vec::new());
        assert_eq!(json, again.to_json());
    }

    #[test]
    fn io_errors_name_the_path() {
        let results = vec![result(HookKind::ResidPost, 0, 1.0, 1.0)];
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = emit_sweep_csv(&results, &blocker.join("sweep.csv")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
