//! Cross-run summaries: accuracy against the consistency weight γ, and a grid over the
//! reweighting and resampling exponents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::{GlmcError, Result};
use crate::eval::EvalReport;
use crate::maxnorm::median;
use crate::trainer::{CONFIG_FILE, REPORT_FILE};

pub const GAMMA_TABLE_FILE: &str = "gamma.md";
pub const GAMMA_CHART_FILE: &str = "gamma.svg";
pub const KGRID_TABLE_FILE: &str = "kgrid.md";
pub const KGRID_HEATMAP_FILE: &str = "kgrid.png";

/// One finished run, as read back from its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub name: String,
    pub method: Method,
    pub gamma: f64,
    pub reweight_k: f64,
    pub resample_k: f64,
    pub seed: u64,
    pub top1: f64,
    pub few: Option<f64>,
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let cfg = ExperimentConfig::load(Some(&dir.join(CONFIG_FILE)), &[])?;
    let report = EvalReport::read_json(&dir.join(REPORT_FILE))?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        name: cfg.run.name,
        method: cfg.train.method,
        gamma: cfg.rebalance.gamma,
        reweight_k: cfg.rebalance.reweight_k,
        resample_k: cfg.sampler.resample_k,
        seed: cfg.train.seed,
        top1: report.top1_overall,
        few: report.top1_few,
    })
}

pub fn read_runs(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    if dirs.is_empty() {
        return Err(GlmcError::InvalidArgument("no run directories given".into()));
    }
    dirs.iter().map(|d| read_run(d)).collect()
}

/// Median top-1 of the runs sharing a key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy<K> {
    pub key: K,
    pub runs: usize,
    pub median_top1: f64,
    pub median_few: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaKey {
    pub method: Method,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KKey {
    pub reweight_k: f64,
    pub resample_k: f64,
}

fn group_by<K: Copy, F: Fn(&RunRecord) -> (Vec<u64>, K)>(runs: &[RunRecord], key: F) -> Vec<GroupedAccuracy<K>> {
    let mut groups: BTreeMap<Vec<u64>, (K, Vec<&RunRecord>)> = BTreeMap::new();
    for r in runs {
        let (order, k) = key(r);
        groups.entry(order).or_insert_with(|| (k, Vec::new())).1.push(r);
    }
    groups
        .into_values()
        .map(|(key, members)| {
            let top1: Vec<f64> = members.iter().map(|r| r.top1).collect();
            let few: Vec<f64> = members.iter().filter_map(|r| r.few).collect();
            GroupedAccuracy {
                key,
                runs: members.len(),
                median_top1: median(&top1),
                median_few: (!few.is_empty()).then(|| median(&few)),
            }
        })
        .collect()
}

// order-preserving integer image of a non-negative float, for BTreeMap keys
fn ord(v: f64) -> u64 {
    v.to_bits()
}

pub fn gamma_table(runs: &[RunRecord]) -> Vec<GroupedAccuracy<GammaKey>> {
    group_by(runs, |r| {
        (
            vec![matches!(r.method, Method::Ce) as u64, ord(r.gamma)],
            GammaKey {
                method: r.method,
                gamma: r.gamma,
            },
        )
    })
}

/// GLMC runs only.
pub fn k_grid(runs: &[RunRecord]) -> Vec<GroupedAccuracy<KKey>> {
    let glmc: Vec<RunRecord> = runs.iter().filter(|r| r.method == Method::Glmc).cloned().collect();
    group_by(&glmc, |r| {
        (
            vec![ord(r.reweight_k), ord(r.resample_k)],
            KKey {
                reweight_k: r.reweight_k,
                resample_k: r.resample_k,
            },
        )
    })
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

pub fn gamma_markdown(rows: &[GroupedAccuracy<GammaKey>]) -> String {
    let mut s = String::from("| method | gamma | runs | median top-1 (%) | median few (%) |\n|---|---|---|---|---|\n");
    for r in rows {
        let method = match r.key.method {
            Method::Glmc => "glmc",
            Method::Ce => "ce",
        };
        let _ = writeln!(
            s,
            "| {method} | {} | {} | {} | {} |",
            r.key.gamma,
            r.runs,
            pct(Some(r.median_top1)),
            pct(r.median_few)
        );
    }
    s
}

pub fn k_grid_markdown(rows: &[GroupedAccuracy<KKey>]) -> String {
    let mut s = String::from("| reweight_k | resample_k | runs | median top-1 (%) |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.key.reweight_k,
            r.key.resample_k,
            r.runs,
            pct(Some(r.median_top1))
        );
    }
    s
}

/// Line chart of median top-1 against γ for GLMC runs, CE runs as a dashed reference.
pub fn gamma_svg(rows: &[GroupedAccuracy<GammaKey>]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let glmc: Vec<&GroupedAccuracy<GammaKey>> = rows.iter().filter(|r| r.key.method == Method::Glmc).collect();
    let ce: Vec<f64> = rows.iter().filter(|r| r.key.method == Method::Ce).map(|r| r.median_top1).collect();
    let gmax = glmc.iter().map(|r| r.key.gamma).fold(0.0, f64::max).max(1.0);
    let accs: Vec<f64> = glmc.iter().map(|r| r.median_top1).chain(ce.iter().copied()).collect();
    let lo = accs.iter().copied().fold(1.0, f64::min);
    let hi = accs.iter().copied().fold(0.0, f64::max);
    let (lo, hi) = if hi - lo < 1e-3 { (lo - 0.01, hi + 0.01) } else { (lo, hi) };
    let x = |g: f64| m + (w - 2.0 * m) * g / gmax;
    let y = |a: f64| h - m - (h - 2.0 * m) * (a - lo) / (hi - lo);

    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{0}\" stroke=\"black\"/>",
        h - m,
        w - m
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">gamma</text>", w / 2.0, h - 12.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">median top-1 (%)</text>", h / 2.0, h / 2.0);
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>", m - 4.0, y(v) + 4.0, 100.0 * label);
    }
    if let Some(&c) = ce.first() {
        let _ = writeln!(
            s,
            "<line x1=\"{m}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/><text x=\"{1}\" y=\"{2:.1}\" text-anchor=\"end\" fill=\"gray\">CE</text>",
            y(c),
            w - m,
            y(c) - 4.0
        );
    }
    let points: Vec<String> = glmc.iter().map(|r| format!("{:.1},{:.1}", x(r.key.gamma), y(r.median_top1))).collect();
    if !points.is_empty() {
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#08306b\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
    }
    for r in &glmc {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#08306b\"/><text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x(r.key.gamma),
            y(r.median_top1),
            x(r.key.gamma),
            h - m + 16.0,
            r.key.gamma
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of median top-1 over (reweight_k rows, resample_k columns); missing cells are grey.
pub fn k_grid_heatmap(rows: &[GroupedAccuracy<KKey>], cell: u32) -> RgbImage {
    let mut rk: Vec<f64> = rows.iter().map(|r| r.key.reweight_k).collect();
    let mut sk: Vec<f64> = rows.iter().map(|r| r.key.resample_k).collect();
    for v in [&mut rk, &mut sk] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let lo = rows.iter().map(|r| r.median_top1).fold(1.0, f64::min);
    let hi = rows.iter().map(|r| r.median_top1).fold(0.0, f64::max);
    let cell = cell.max(1);
    let mut img = RgbImage::from_pixel((sk.len() as u32).max(1) * cell, (rk.len() as u32).max(1) * cell, Rgb([200, 200, 200]));
    for r in rows {
        let row = rk.iter().position(|&v| v == r.key.reweight_k).unwrap_or(0) as u32;
        let col = sk.iter().position(|&v| v == r.key.resample_k).unwrap_or(0) as u32;
        let f = if hi > lo { (r.median_top1 - lo) / (hi - lo) } else { 1.0 };
        let shade = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
        let px = Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
        for dy in 0..cell {
            for dx in 0..cell {
                img.put_pixel(col * cell + dx, row * cell + dy, px);
            }
        }
    }
    img
}

/// Everything `report` prints and writes.
#[derive(Debug, Clone)]
pub struct Summary {
    pub runs: Vec<RunRecord>,
    pub gamma: Vec<GroupedAccuracy<GammaKey>>,
    pub k_grid: Vec<GroupedAccuracy<KKey>>,
}

impl Summary {
    pub fn from_dirs(dirs: &[PathBuf]) -> Result<Self> {
        let runs = read_runs(dirs)?;
        Ok(Summary {
            gamma: gamma_table(&runs),
            k_grid: k_grid(&runs),
            runs,
        })
    }

    pub fn markdown(&self) -> String {
        format!(
            "## Accuracy against gamma\n\n{}\n## Reweight/resample grid\n\n{}",
            gamma_markdown(&self.gamma),
            k_grid_markdown(&self.k_grid)
        )
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| GlmcError::io(out, e))?;
        let put = |name: &str, text: String| {
            let p = out.join(name);
            fs::write(&p, text).map_err(|e| GlmcError::io(&p, e))
        };
        put(GAMMA_TABLE_FILE, gamma_markdown(&self.gamma))?;
        put(GAMMA_CHART_FILE, gamma_svg(&self.gamma))?;
        put(KGRID_TABLE_FILE, k_grid_markdown(&self.k_grid))?;
        k_grid_heatmap(&self.k_grid, 40).save(out.join(KGRID_HEATMAP_FILE))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, gamma: f64, k: f64, seed: u64, top1: f64) -> RunRecord {
        RunRecord {
            dir: PathBuf::from(format!("run{seed}")),
            name: "r".into(),
            method,
            gamma,
            reweight_k: k,
            resample_k: 0.2,
            seed,
            top1,
            few: Some(top1 / 2.0),
        }
    }

    #[test]
    fn gamma_groups_take_medians() {
        let runs = vec![
            rec(Method::Glmc, 10.0, 1.0, 0, 0.6),
            rec(Method::Glmc, 10.0, 1.0, 1, 0.8),
            rec(Method::Glmc, 10.0, 1.0, 2, 0.7),
            rec(Method::Glmc, 0.0, 1.0, 0, 0.5),
            rec(Method::Ce, 10.0, 1.0, 0, 0.4),
        ];
        let t = gamma_table(&runs);
        assert_eq!(t.len(), 3);
        assert_eq!((t[0].key.gamma, t[0].median_top1), (0.0, 0.5));
        assert_eq!((t[1].key.gamma, t[1].runs, t[1].median_top1), (10.0, 3, 0.7));
        assert_eq!(t[2].key.method, Method::Ce);
        let md = gamma_markdown(&t);
        assert_eq!(md.lines().count(), 5);
        assert!(md.contains("| glmc | 10 | 3 | 70.00 | 35.00 |"));
        let svg = gamma_svg(&t);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn k_grid_layout() {
        let runs = vec![
            rec(Method::Glmc, 10.0, 0.0, 0, 0.5),
            rec(Method::Glmc, 10.0, 1.0, 0, 0.9),
            rec(Method::Ce, 10.0, 2.0, 0, 0.1),
        ];
        let g = k_grid(&runs);
        assert_eq!(g.len(), 2);
        let img = k_grid_heatmap(&g, 4);
        assert_eq!(img.dimensions(), (4, 8));
        assert_eq!(img.get_pixel(0, 0), &Rgb([255, 255, 255]));
        assert_eq!(img.get_pixel(0, 7), &Rgb([8, 48, 107]));
    }
}
