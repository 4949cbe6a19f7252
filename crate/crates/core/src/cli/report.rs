//! Derived figures: low / enhanced / ground-truth triptychs and SVG bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{create_dir, write_text, RunManifest, MANIFEST_FILE};
use crate::data::{Image, SplitName};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

const GAP: usize = 4;

/// Side-by-side composite with white separators.
pub fn triptych(panels: [&Image; 3]) -> Result<Image> {
    let h = panels[0].height;
    if panels.iter().any(|p| p.height != h) {
        return Err(Error::Shape("triptych panels differ in height".into()));
    }
    let width = panels.iter().map(|p| p.width).sum::<usize>() + 2 * GAP;
    let plane = h * width;
    let mut data = vec![1.0f32; 3 * plane];
    let mut x0 = 0;
    for p in panels {
        let src_plane = p.height * p.width;
        for c in 0..3 {
            for y in 0..h {
                let src = &p.data[c * src_plane + y * p.width..][..p.width];
                data[c * plane + y * width + x0..][..p.width].copy_from_slice(src);
            }
        }
        x0 += p.width + GAP;
    }
    Ok(Image {
        height: h,
        width,
        data,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart; missing values are drawn as a `-` label without a bar.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let bar = 36.0;
    let left = 60.0;
    let top = 40.0;
    let plot_h = 220.0;
    let bottom = 140.0;
    let width = left + bar * 1.5 * labels.len().max(1) as f64 + 20.0;
    let height = top + plot_h + bottom;
    let max = values.iter().flatten().cloned().fold(0.0f64, f64::max);
    let max = if max > 0.0 { max * 1.1 } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let base = top + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/><line x1="{left}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#,
        width - 10.0
    );
    for i in 0..=4 {
        let v = max * i as f64 / 4.0;
        let y = base - plot_h * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y + 4.0);
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = left + 10.0 + i as f64 * bar * 1.5;
        let cx = x + bar / 2.0;
        match v {
            Some(v) => {
                let h = plot_h * (v / max).max(0.0);
                let _ = writeln!(
                    s,
                    r##"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="#4a78b5"/><text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"##,
                    base - h,
                    base - h - 3.0
                );
            }
            None => {
                let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">-</text>"#, base - 3.0);
            }
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({cx:.1},{:.1}) rotate(45)">{}</text>"#,
            base + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>> {
    if runs.join(MANIFEST_FILE).is_file() {
        return Ok(vec![runs.to_path_buf()]);
    }
    if !runs.is_dir() {
        return Err(Error::Dataset(format!("{} is not a run directory", runs.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| Error::io(runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("no runs with a {MANIFEST_FILE} under {}", runs.display())));
    }
    Ok(dirs)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn render_eval(dir: &Path, manifest: &RunManifest, out: &Path, m: &mut RunManifest) -> Result<()> {
    let text = fs::read_to_string(dir.join("metrics.json")).map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    let report: MetricReport = serde_json::from_str(&text)?;
    let data_dir = manifest
        .inputs
        .get(1)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Dataset(format!("{}: manifest lacks the dataset path", dir.display())))?;
    let split = manifest.split.unwrap_or(SplitName::Test);
    let split_dir = data_dir.join(split.as_str());
    create_dir(out)?;
    for row in &report.per_image {
        let file = format!("{}.png", row.id);
        let low = Image::load(&split_dir.join("low").join(&file))?;
        let enhanced = Image::load(&dir.join("enhanced").join(&file))?;
        let gt = Image::load(&split_dir.join("gt").join(&file))?;
        let path = out.join(format!("triptych_{}.png", row.id));
        triptych([&low, &enhanced, &gt])?.save(&path)?;
        m.artifacts.push(path.display().to_string());
    }
    let ids: Vec<String> = report.per_image.iter().map(|r| r.id.clone()).collect();
    let charts: [(&str, Vec<Option<f64>>); 3] = [
        ("psnr", report.per_image.iter().map(|r| Some(r.psnr)).collect()),
        ("ssim", report.per_image.iter().map(|r| Some(r.ssim)).collect()),
        ("lpips", report.per_image.iter().map(|r| r.lpips).collect()),
    ];
    for (metric, values) in charts {
        let title = format!("{} per image ({})", metric.to_uppercase(), run_name(dir));
        write_text(&out.join(format!("{metric}.svg")), &bar_chart_svg(&title, &ids, &values), m)?;
    }
    Ok(())
}

fn render_ablation(dir: &Path, out: &Path, m: &mut RunManifest) -> Result<()> {
    create_dir(out)?;
    for grid in ["components", "losses"] {
        let csv_path = dir.join(format!("ablation_{grid}.csv"));
        if !csv_path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut labels = Vec::new();
        let mut cols: [Vec<Option<f64>>; 3] = Default::default();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < 4 {
                return Err(Error::Dataset(format!("{}: malformed row {line:?}", csv_path.display())));
            }
            labels.push(cells[0].to_string());
            for (k, c) in cells[cells.len() - 3..].iter().enumerate() {
                cols[k].push(c.parse::<f64>().ok());
            }
        }
        for (metric, values) in ["psnr", "ssim", "lpips"].iter().zip(&cols) {
            let title = format!("{} by {} row", metric.to_uppercase(), grid);
            let path = out.join(format!("ablation_{grid}_{metric}.svg"));
            write_text(&path, &bar_chart_svg(&title, &labels, values), m)?;
        }
    }
    Ok(())
}

pub fn render(runs: &Path, out: &Path, m: &mut RunManifest) -> Result<()> {
    m.inputs.push(runs.display().to_string());
    for dir in run_dirs(runs)? {
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        let target = out.join(run_name(&dir));
        match manifest.command.as_str() {
            "eval" if manifest.success => render_eval(&dir, &manifest, &target, m)?,
            "ablate" if manifest.success => render_ablation(&dir, &target, m)?,
            other => log::info!("{}: nothing to render for `{other}` run", dir.display()),
        }
    }
    Ok(())
}
