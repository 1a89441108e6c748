//! Reverse-chain trajectory projection, silhouette scores and overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::classify_batch;
use crate::training::eval_noise;

/// Linear projection onto the leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims` unit vectors, largest variance first.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    /// Eigenvectors are ordered by eigenvalue (ties by index) and signed so
    /// their largest-magnitude entry is positive.
    pub fn fit(points: &[Vec<f64>], dims: usize) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Data("PCA needs at least one point".into()));
        }
        let d = points[0].len();
        if dims == 0 || dims > d || points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape(format!("cannot project {d}-dimensional points onto {dims} axes")));
        }
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in points {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n as f64;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order[..dims]
            .iter()
            .map(|&c| {
                let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                let lead = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() + 1e-12 { i } else { best });
                let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
                v.into_iter().map(|x| x * sign).collect()
            })
            .collect();
        Ok(Self { mean, components })
    }

    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(p).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over all points with Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    crate::error::ensure_len("silhouette labels", labels.len(), points.len())?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Data("silhouette needs at least two populated clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; classes];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCloud {
    pub t: usize,
    /// Per-image `ŷ0` estimate at this step.
    pub y0_hat: Vec<Vec<f64>>,
    /// Per-image 2-D projection.
    pub coords: Vec<[f64; 2]>,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizReport {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// One cloud per recorded step, in reverse-chain order.
    pub steps: Vec<StepCloud>,
    pub files: Vec<PathBuf>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Side-by-side scatter panels, one per step, on shared axes.
pub fn render_svg(report: &VizReport) -> String {
    let (panel, pad) = (240.0, 20.0);
    let all = report.steps.iter().flat_map(|s| s.coords.iter());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in all {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = |a: usize| if hi[a] > lo[a] { hi[a] - lo[a] } else { 1.0 };
    let width = report.steps.len() as f64 * (panel + pad) + pad;
    let height = panel + 3.0 * pad;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, step) in report.steps.iter().enumerate() {
        let x0 = pad + i as f64 * (panel + pad);
        let y0 = 2.0 * pad;
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">t={} silhouette {:.3}</text>"##,
            x0,
            pad * 1.4,
            step.t,
            step.silhouette
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{panel:.1}" height="{panel:.1}" fill="none" stroke="#999"/>"##
        );
        for (c, &label) in step.coords.iter().zip(&report.labels) {
            let px = x0 + 5.0 + (c[0] - lo[0]) / span(0) * (panel - 10.0);
            let py = y0 + panel - 5.0 - (c[1] - lo[1]) / span(1) * (panel - 10.0);
            let _ = writeln!(
                svg,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
                PALETTE[label % PALETTE.len()]
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_step_csv(path: &Path, step: &StepCloud, labels: &[usize], preds: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let k = step.y0_hat.first().map_or(0, |v| v.len());
    let mut header = vec!["index".to_string(), "label".into(), "prediction".into(), "pc1".into(), "pc2".into()];
    header.extend((0..k).map(|j| format!("y0_{j}")));
    w.write_record(&header).map_err(err)?;
    for (i, (c, y)) in step.coords.iter().zip(&step.y0_hat).enumerate() {
        let mut row = vec![i.to_string(), labels[i].to_string(), preds[i].to_string(), c[0].to_string(), c[1].to_string()];
        row.extend(y.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records the `ŷ0` estimate of every image at each requested reverse step,
/// projects all steps with a PCA fitted on the final estimates and scores
/// class separation per step. With `out_dir`, writes `trajectory_t<k>.csv`
/// per step, `silhouette.csv` and `scatter.svg`.
pub fn trajectory_viz(
    model: &Model,
    data: &Dataset,
    steps_to_record: &[usize],
    inference_steps: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<VizReport> {
    if data.is_empty() {
        return Err(Error::Data("trajectory visualization needs a non-empty dataset".into()));
    }
    if model.denoiser.is_none() {
        return Err(Error::Config(format!("variant {} has no reverse chain to visualize", model.variant)));
    }
    if steps_to_record.is_empty() {
        return Err(Error::Range("at least one step must be recorded".into()));
    }
    let mut record = steps_to_record.to_vec();
    record.sort_unstable_by(|a, b| b.cmp(a));
    record.dedup();

    let mut finals = Vec::with_capacity(data.len());
    let mut per_step: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(data.len()); record.len()];
    let mut predictions = Vec::with_capacity(data.len());
    for (c, chunk) in data.images.chunks(128).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let mut noise: Vec<_> = (0..chunk.len()).map(|i| eval_noise(seed, c * 128 + i)).collect();
        for r in classify_batch(&refs, model, inference_steps, 1, &mut noise, &record)? {
            predictions.push(r.class);
            finals.push(r.y0_hat.0.clone());
            for (slot, p) in per_step.iter_mut().zip(&r.trajectory) {
                slot.push(p.y0_hat.0.clone());
            }
        }
    }
    let pca = Pca::fit(&finals, 2)?;
    let mut steps = Vec::with_capacity(record.len());
    for (t, cloud) in record.iter().zip(per_step) {
        let coords: Vec<[f64; 2]> = cloud
            .iter()
            .map(|p| {
                let v = pca.project(p);
                [v[0], v[1]]
            })
            .collect();
        let flat: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
        steps.push(StepCloud {
            t: *t,
            silhouette: silhouette(&flat, &data.labels)?,
            y0_hat: cloud,
            coords,
        });
    }
    let mut report = VizReport {
        labels: data.labels.clone(),
        predictions,
        steps,
        files: Vec::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for step in &report.steps {
            let path = dir.join(format!("trajectory_t{}.csv", step.t));
            write_step_csv(&path, step, &report.labels, &report.predictions)?;
            report.files.push(path);
        }
        let sil = dir.join("silhouette.csv");
        let mut text = String::from("t,silhouette\n");
        for s in &report.steps {
            let _ = writeln!(text, "{},{}", s.t, s.silhouette);
        }
        std::fs::write(&sil, text).map_err(|e| Error::io(&sil, e))?;
        report.files.push(sil);
        let svg = dir.join("scatter.svg");
        std::fs::write(&svg, render_svg(&report)).map_err(|e| Error::io(&svg, e))?;
        report.files.push(svg);
    }
    Ok(report)
}

/// Grayscale image with the collapsed saliency in red and ROI boxes in green.
pub fn saliency_overlay(model: &Model, image: &Image) -> Result<RgbImage> {
    let dcg = model
        .dcg
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no saliency map", model.variant)))?;
    model.check_image(image)?;
    let out = dcg.infer(&[&image.normalized()])?;
    let sal = &out.saliency[0];
    let map = sal.collapse(dcg.config().channel_collapse);
    let (lo, hi) = map.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let (h, w) = (image.height, image.width);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = (0..image.channels).map(|c| image.at(c, y, x)).sum::<f32>() / image.channels as f32;
            let cell = (y / sal.stride).min(sal.height - 1) * sal.width + (x / sal.stride).min(sal.width - 1);
            let heat = if hi > lo { (map[cell] - lo) / (hi - lo) } else { 0.0 };
            let g = gray.clamp(0.0, 1.0);
            let r = 0.5 * g + 0.5 * heat;
            img.put_pixel(x as u32, y as u32, Rgb([(r * 255.0).round() as u8, (g * 0.5 * 255.0).round() as u8, (g * 0.5 * 255.0).round() as u8]));
        }
    }
    let rois = &out.rois[0];
    for &(oy, ox) in &rois.origins {
        let s = rois.size;
        for i in 0..s {
            for (y, x) in [(oy, ox + i), (oy + s - 1, ox + i), (oy + i, ox), (oy + i, ox + s - 1)] {
                if y < h && x < w {
                    img.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
                }
            }
        }
    }
    Ok(img)
}

/// Writes `saliency_<i>.png` for each image.
pub fn write_saliency_overlays(model: &Model, images: &[&Image], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let path = out_dir.join(format!("saliency_{i}.png"));
        saliency_overlay(model, im)?
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(files)
}
