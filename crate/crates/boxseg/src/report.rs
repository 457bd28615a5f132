//! Run comparison: a markdown/JSON summary table plus loss-curve, PR-curve,
//! and qualitative-grid images assembled from run directories.
//!
//! Plots are deliberately minimal (no text rendering): `report.md` carries
//! the color legend for every image it references.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::engine::StepMetrics;
use crate::eval::{EvalReport, PredictedInstance};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Fixed plot palette; `report.md` names these in series order.
pub const PALETTE: [([u8; 3], &str); 8] = [
    ([214, 69, 65], "red"),
    ([31, 119, 180], "blue"),
    ([44, 160, 44], "green"),
    ([255, 159, 28], "orange"),
    ([148, 103, 189], "purple"),
    ([23, 190, 207], "cyan"),
    ([140, 86, 75], "brown"),
    ([188, 189, 34], "olive"),
];

/// One row of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub mode: String,
    pub miou: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map_50_95: f64,
}

/// Load a metrics stream written by the trainer.
pub fn load_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: format!("{}:{}", path.display(), i + 1),
            detail: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Markdown table over the collected rows.
pub fn comparison_table(rows: &[RunRow]) -> String {
    let mut s = String::from("| run | mode | mIoU | AP50 | AP75 | AP[50:95] |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.name, r.mode, r.miou, r.ap50, r.ap75, r.map_50_95
        ));
    }
    s
}

fn blank_canvas(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([255, 255, 255]))
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    // Bresenham
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Render line series into a PNG; returns the legend (series name, color
/// name) in draw order.
pub fn plot_series(
    series: &[(String, Vec<(f64, f64)>)],
    out: &Path,
) -> Result<Vec<(String, String)>> {
    const W: u32 = 640;
    const H: u32 = 420;
    const M: i64 = 32; // margin
    let mut img = blank_canvas(W, H);

    let (mut xmin, mut xmax) = (f64::MAX, f64::MIN);
    let (mut ymin, mut ymax) = (f64::MAX, f64::MIN);
    for (_, pts) in series {
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() || xmin >= xmax {
        xmax = xmin + 1.0;
    }
    if !ymin.is_finite() || ymin >= ymax {
        ymax = ymin + 1.0;
    }

    // axes
    draw_line(&mut img, M, H as i64 - M, W as i64 - M / 2, H as i64 - M, [0, 0, 0]);
    draw_line(&mut img, M, M / 2, M, H as i64 - M, [0, 0, 0]);

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = M as f64 + (x - xmin) / (xmax - xmin) * (W as f64 - 1.5 * M as f64);
        let py = (H as f64 - M as f64) - (y - ymin) / (ymax - ymin) * (H as f64 - 1.5 * M as f64);
        (px.round() as i64, py.round() as i64)
    };

    let mut legend = Vec::new();
    for (si, (name, pts)) in series.iter().enumerate() {
        let (color, cname) = PALETTE[si % PALETTE.len()];
        legend.push((name.clone(), cname.to_string()));
        for pair in pts.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        // legend swatch in the top-right corner
        let sy = M / 2 + si as i64 * 10;
        for dx in 0..16 {
            for dy in 0..6 {
                let (x, y) = (W as i64 - M / 2 - 20 + dx, sy + dy);
                if x >= 0 && y >= 0 {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
    img.save(out).map_err(|e| Error::Parse {
        file: out.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(legend)
}

/// Qualitative panel: eval images with predicted masks tinted and ground
/// truth boxes outlined.
pub fn qualitative_panel<S: Scalar>(
    samples: &[Sample<S>],
    preds: &[Vec<PredictedInstance>],
    max_images: usize,
) -> RgbImage {
    let n = samples.len().min(preds.len()).min(max_images).max(1);
    let cell_h = samples.first().map(|s| s.image.h()).unwrap_or(64) as u32;
    let cell_w = samples.first().map(|s| s.image.w()).unwrap_or(64) as u32;
    let pad = 2u32;
    let mut canvas = blank_canvas(n as u32 * (cell_w + pad) + pad, cell_h + 2 * pad);
    for (k, (s, pred)) in samples.iter().zip(preds).take(n).enumerate() {
        let ox = pad + k as u32 * (cell_w + pad);
        for y in 0..s.image.h().min(cell_h as usize) {
            for x in 0..s.image.w().min(cell_w as usize) {
                let px = |c: usize| (s.image.get(c, y, x).as_f64() * 255.0).round() as u8;
                let mut rgb = [px(0), px(1), px(2)];
                for (pi, p) in pred.iter().enumerate() {
                    if y < p.mask.h() && x < p.mask.w() && p.mask.get(y, x) == 1 {
                        let (tint, _) = PALETTE[pi % PALETTE.len()];
                        for c in 0..3 {
                            rgb[c] = ((rgb[c] as u16 + tint[c] as u16) / 2) as u8;
                        }
                    }
                }
                canvas.put_pixel(ox + x as u32, pad + y as u32, Rgb(rgb));
            }
        }
        for b in &s.boxes {
            let bf = b.cast::<f64>();
            let (x1, y1) = (bf.x1.round() as i64, bf.y1.round() as i64);
            let (x2, y2) = ((bf.x2.round() as i64 - 1).max(x1), (bf.y2.round() as i64 - 1).max(y1));
            let off = |x: i64, y: i64| (ox as i64 + x, pad as i64 + y);
            let (ax, ay) = off(x1, y1);
            let (bx, by) = off(x2, y2);
            draw_line(&mut canvas, ax, ay, bx, ay, [255, 255, 255]);
            draw_line(&mut canvas, ax, by, bx, by, [255, 255, 255]);
            draw_line(&mut canvas, ax, ay, ax, by, [255, 255, 255]);
            draw_line(&mut canvas, bx, ay, bx, by, [255, 255, 255]);
        }
    }
    canvas
}

/// Assemble the comparison report from run directories.
///
/// Each run directory is expected to contain `config.snapshot.toml`,
/// `metrics.jsonl`, and `eval_report.json` (written by the evaluate
/// command). Produces `report.md`, `summary.json`, `loss_curves.png`, and
/// `pr_curves.png` under `out`.
pub fn generate_report(run_dirs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut loss_series = Vec::new();
    let mut pr_series = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let snapshot = crate::config::RunConfig::load(&dir.join("config.snapshot.toml"))?;
        let report_path = dir.join("eval_report.json");
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path).map_err(|e| {
                Error::Parse {
                    file: report_path.display().to_string(),
                    detail: format!("missing eval report ({e}); run the evaluate command first"),
                }
            })?)
            .map_err(|e| Error::Parse {
                file: report_path.display().to_string(),
                detail: e.to_string(),
            })?;
        rows.push(RunRow {
            name: name.clone(),
            mode: snapshot.mode.as_str().to_string(),
            miou: report.miou,
            ap50: report.ap50,
            ap75: report.ap75,
            map_50_95: report.map_50_95,
        });
        let metrics = load_metrics(&dir.join("metrics.jsonl"))?;
        let total: Vec<(f64, f64)> = metrics
            .iter()
            .map(|m| (m.iter as f64, m.l_det + m.l_box + m.l_pseudo))
            .collect();
        loss_series.push((name.clone(), total));
        if let Some(class0) = report.per_class.first() {
            let pts: Vec<(f64, f64)> = class0
                .pr50
                .iter()
                .map(|p| (p.recall, p.precision))
                .collect();
            if !pts.is_empty() {
                pr_series.push((name.clone(), pts));
            }
        }
    }

    let loss_png = out.join("loss_curves.png");
    let loss_legend = plot_series(&loss_series, &loss_png)?;
    let pr_png = out.join("pr_curves.png");
    let pr_legend = if pr_series.is_empty() {
        Vec::new()
    } else {
        plot_series(&pr_series, &pr_png)?
    };

    let mut md = String::from("# Run comparison\n\n");
    md.push_str(&comparison_table(&rows));
    md.push_str("\n## Loss curves (loss_curves.png)\n\n");
    for (name, color) in &loss_legend {
        md.push_str(&format!("- {color}: {name}\n"));
    }
    if !pr_legend.is_empty() {
        md.push_str("\n## PR curves at IoU 0.5, first class (pr_curves.png)\n\n");
        for (name, color) in &pr_legend {
            md.push_str(&format!("- {color}: {name}\n"));
        }
    }
    md.push_str("\n## Qualitative grids\n\n");
    for dir in run_dirs {
        let q = dir.join("qualitative.png");
        if q.exists() {
            md.push_str(&format!("- {}\n", q.display()));
        }
    }
    let report_md = out.join("report.md");
    std::fs::write(&report_md, md)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    Ok(report_md)
}
