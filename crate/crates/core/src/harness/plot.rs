//! Raster plots: per-round accuracy curves and detector score histograms.
//! Plain pixels without text, so the same ledger always yields the same bytes.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const CLEAN: Rgb<u8> = Rgb([0, 114, 178]);
const ADV: Rgb<u8> = Rgb([213, 94, 0]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// `(round, clean, adversarial)` for every ledger row with accuracies.
pub fn convergence_series(ledger: &Path) -> Result<Vec<(usize, f64, f64)>> {
    if !ledger.is_file() {
        return Err(Error::MissingArtifact {
            phase: "round ledger".into(),
            path: ledger.to_path_buf(),
        });
    }
    let mut r = csv::Reader::from_path(ledger)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (Ok(round), Ok(c), Ok(a)) = (rec[0].parse(), rec[1].parse(), rec[2].parse()) else {
            continue;
        };
        out.push((round, c, a));
    }
    Ok(out)
}

/// Clean and adversarial detector scores from a `split,score` CSV.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut clean, mut adv) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let s: f64 = rec[1]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad score {:?}", &rec[1])))?;
        match &rec[0] {
            "clean" => clean.push(s),
            _ => adv.push(s),
        }
    }
    Ok((clean, adv))
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for i in 0..=4 {
        let y = MARGIN + i * (H - 2 * MARGIN) / 4;
        line(&mut img, (MARGIN as f64, y as f64), ((W - MARGIN) as f64, y as f64), GRID);
    }
    let (x0, y0) = (MARGIN as f64, (H - MARGIN) as f64);
    line(&mut img, (x0, y0), ((W - MARGIN) as f64, y0), AXIS);
    line(&mut img, (x0, y0), (x0, MARGIN as f64), AXIS);
    img
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        put(img, x, y, color);
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn dot(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, x + dx as f64, y + dy as f64, color);
        }
    }
}

/// Maps `(u, v)` in `[0,1]^2` to pixel coordinates inside the axes.
fn to_px(u: f64, v: f64) -> (f64, f64) {
    let span_x = (W - 2 * MARGIN) as f64;
    let span_y = (H - 2 * MARGIN) as f64;
    (MARGIN as f64 + u * span_x, (H - MARGIN) as f64 - v.clamp(0.0, 1.0) * span_y)
}

fn convergence_plot(series: &[(usize, f64, f64)]) -> RgbImage {
    let mut img = canvas();
    let n = series.len();
    let u = |i: usize| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    for (pick, color) in [(1usize, CLEAN), (2, ADV)] {
        let pts: Vec<(f64, f64)> = series
            .iter()
            .enumerate()
            .map(|(i, r)| to_px(u(i), if pick == 1 { r.1 } else { r.2 }))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        for p in pts {
            dot(&mut img, p.0, p.1, color);
        }
    }
    img
}

fn histogram_plot(clean: &[f64], adv: &[f64], bins: usize) -> RgbImage {
    let mut img = canvas();
    let all = clean.iter().chain(adv).copied().filter(|s| s.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s), h.max(s)));
    if !(lo.is_finite() && hi.is_finite()) {
        return img;
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let counts = |scores: &[f64]| {
        let mut c = vec![0usize; bins];
        for &s in scores.iter().filter(|s| s.is_finite()) {
            c[(((s - lo) / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    let (cc, ca) = (counts(clean), counts(adv));
    let peak = cc.iter().chain(&ca).copied().max().unwrap_or(1).max(1) as f64;
    for (b, (&c, &a)) in cc.iter().zip(&ca).enumerate() {
        let left = b as f64 / bins as f64;
        let half = 0.5 / bins as f64;
        for (offset, count, color) in [(0.0, c, CLEAN), (half, a, ADV)] {
            let (x0, y0) = to_px(left + offset, 0.0);
            let (x1, y1) = to_px(left + offset + half, count as f64 / peak);
            for x in x0.round() as i64..x1.round() as i64 {
                line(&mut img, (x as f64, y0), (x as f64, y1), color);
            }
        }
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `plots/convergence.png` from `rounds.csv`, and
/// `plots/detector_scores.png` when `scores.csv` is present.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let series = convergence_series(&run_dir.join("rounds.csv"))?;
    if series.is_empty() {
        return Err(Error::InvalidArgument("round ledger has no evaluated rounds".into()));
    }
    let dir = run_dir.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("convergence.png");
    save(&convergence_plot(&series), &path)?;
    written.push(path);
    let scores = run_dir.join("scores.csv");
    if scores.is_file() {
        let (clean, adv) = read_scores(&scores)?;
        let path = dir.join("detector_scores.png");
        save(&histogram_plot(&clean, &adv, 30), &path)?;
        written.push(path);
    }
    Ok(written)
}
