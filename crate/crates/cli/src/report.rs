//! Report assembly: figures for the landscape, barrier and activation
//! layouts, an index of every table, and the tree manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use lrlens::landscape::{LandscapeCurve, PcaLandscape};
use lrlens::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{ExperimentRecord, StackedAtStep};
use crate::manifest;
use crate::output::{read_csv, read_json, write_atomic, write_json, Layout, Provenance, Requirements, SCHEMA_FILES};
use crate::svg::{Figure, HeatPanel, LinePanel, Panel, Series};

pub const FIG_LANDSCAPE: &str = "report/fig1_landscape.svg";
pub const FIG_BARRIERS: &str = "report/fig2_barriers.svg";
pub const FIG_ACTIVATIONS: &str = "report/fig4_activations.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub path: String,
    pub schema: String,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub figures: Vec<String>,
    pub tables: Vec<TableEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub index: ReportIndex,
    pub manifest_hash: String,
}

/// Tables the report reads, by metric, with their producing command.
fn required(layout: &Layout, config: Option<&ExperimentConfig>) -> Vec<(PathBuf, &'static str)> {
    let on = |f: fn(&ExperimentConfig) -> bool| config.is_none_or(f);
    let mut v = vec![(layout.file("runs/summary.csv"), "train")];
    if on(|c| c.metrics.landscape) {
        v.push((layout.file("landscape/summary.csv"), "landscape"));
    }
    if on(|c| c.metrics.pca) {
        v.push((layout.file("pca/summary.csv"), "pca"));
    }
    if on(|c| c.metrics.interp) {
        v.push((layout.file("interp/ccbh.csv"), "interp"));
        v.push((layout.file("interp/imbh.csv"), "interp"));
    }
    if on(|c| c.metrics.spectra) {
        v.push((layout.file("spectra/weights.csv"), "spectra"));
        v.push((layout.file("spectra/deltas.csv"), "spectra"));
    }
    if on(|c| c.metrics.activations) {
        v.push((layout.file("activations/layers.csv"), "activations"));
        v.push((layout.file("activations/stacked.json"), "activations"));
    }
    v
}

fn f(s: &str) -> f64 {
    s.parse().expect("schema-validated float")
}

fn u(s: &str) -> u64 {
    s.parse().expect("schema-validated integer")
}

fn provenance_note(prov: &Provenance) -> String {
    format!("lrlens {} config_hash={} seed={}", env!("CARGO_PKG_VERSION"), prov.config_hash, prov.seed)
}

/// Per run, the series `(step, value)` from column `col` of `rows`.
fn by_run(rows: &[Vec<String>], col: usize, keep: impl Fn(&[String]) -> bool) -> BTreeMap<(String, String), Vec<(f64, f64)>> {
    let mut out: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(r)) {
        out.entry((r[0].clone(), r[1].clone())).or_default().push((u(&r[2]) as f64, f(&r[col])));
    }
    out
}

fn method_order(config: &ExperimentConfig) -> Vec<String> {
    config.methods.iter().map(|m| m.name().to_string()).collect()
}

fn landscape_figure(layout: &Layout, config: &ExperimentConfig, prov: &Provenance) -> Result<Figure> {
    let (_, land) = read_csv(&layout.file("landscape/summary.csv"), "landscape_summary")?;
    let (_, pca) = read_csv(&layout.file("pca/summary.csv"), "pca_summary")?;
    let first_k = config.grids.pca_components[0].to_string();
    let sharp = by_run(&land, 3, |_| true);
    let sigma = by_run(&pca, 6, |r| r[3] == first_k);
    let methods = method_order(config);
    let mut rows: [Vec<Panel>; 4] = Default::default();
    for size in &config.sizes {
        let mut random = Vec::new();
        let mut principal = Vec::new();
        let mut sig = Vec::new();
        let mut sh = Vec::new();
        for m in &methods {
            let key = (size.name.clone(), m.clone());
            let Some(steps) = sharp.get(&key) else { continue };
            let last = steps.iter().map(|(s, _)| *s as u64).max().unwrap_or(0);
            let step = format!("step-{last:06}");
            let p = layout.file(&format!("landscape/curves/{}/{m}/{step}.json", size.name));
            Requirements::default().need(&p, "landscape").check()?;
            let (_, curve): (_, LandscapeCurve) = read_json(&p, "landscape_curve")?;
            random.push(Series { name: m.clone(), points: curve.alphas.iter().copied().zip(curve.centered_mean()).collect() });
            let p = layout.file(&format!("pca/curves/{}/{m}/{step}.json", size.name));
            Requirements::default().need(&p, "pca").check()?;
            let (_, pl): (_, PcaLandscape) = read_json(&p, "pca_landscape")?;
            let zero = pl.curve.grid.zero_index();
            let row = &pl.curve.losses[0];
            principal.push(Series { name: m.clone(), points: pl.curve.alphas.iter().copied().zip(row.iter().map(|v| v - row[zero])).collect() });
            if let Some(s) = sigma.get(&key) {
                sig.push(Series { name: m.clone(), points: s.clone() });
            }
            sh.push(Series { name: m.clone(), points: steps.clone() });
        }
        let line = |title: String, x: &str, y: &str, series| Panel::Line(LinePanel { title, x_label: x.into(), y_label: y.into(), series });
        rows[0].push(line(format!("{}: random directions (final)", size.name), "α", "ΔL", random));
        rows[1].push(line(format!("{}: top singular direction k={first_k} (final)", size.name), "α", "ΔL", principal));
        rows[2].push(line(format!("{}: top singular value σ₁", size.name), "step", "σ₁", sig));
        rows[3].push(line(format!("{}: sharpness", size.name), "step", "S", sh));
    }
    Ok(Figure {
        title: "1-D loss landscape".into(),
        columns: config.sizes.len(),
        panels: rows.into_iter().flatten().collect(),
        provenance: provenance_note(prov),
    })
}

fn grid_from(cells: &BTreeMap<(String, String), f64>, rows: &[String], cols: &[String]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| cols.iter().map(|c| cells.get(&(r.clone(), c.clone())).copied().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn barrier_figure(layout: &Layout, config: &ExperimentConfig, prov: &Provenance) -> Result<Figure> {
    let (_, cc) = read_csv(&layout.file("interp/ccbh.csv"), "ccbh")?;
    let (_, im) = read_csv(&layout.file("interp/imbh.csv"), "imbh")?;
    let methods = method_order(config);
    let mut panels = Vec::new();
    for size in &config.sizes {
        let mut cells = BTreeMap::new();
        let mut pairs: BTreeSet<(u64, u64)> = BTreeSet::new();
        for r in cc.iter().filter(|r| r[0] == size.name) {
            let pair = (u(&r[2]), u(&r[3]));
            pairs.insert(pair);
            cells.insert((r[1].clone(), format!("{}→{}", pair.0, pair.1)), f(&r[4]));
        }
        let cols: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}→{b}")).collect();
        let rows: Vec<String> = methods.iter().filter(|m| cells.keys().any(|(r, _)| r == *m)).cloned().collect();
        panels.push(Panel::Heat(HeatPanel {
            title: format!("{}: CCBH", size.name),
            values: grid_from(&cells, &rows, &cols),
            rows,
            cols,
        }));
        let mut cells = BTreeMap::new();
        let mut steps = BTreeSet::new();
        let mut pair_rows = Vec::new();
        for r in im.iter().filter(|r| r[0] == size.name) {
            let label = format!("{} | {}", r[1], r[2]);
            if !pair_rows.contains(&label) {
                pair_rows.push(label.clone());
            }
            steps.insert(u(&r[3]));
            cells.insert((label, r[3].clone()), f(&r[4]));
        }
        let cols: Vec<String> = steps.iter().map(u64::to_string).collect();
        panels.push(Panel::Heat(HeatPanel {
            title: format!("{}: IMBH", size.name),
            values: grid_from(&cells, &pair_rows, &cols),
            rows: pair_rows,
            cols,
        }));
    }
    Ok(Figure { title: "Barrier heights: CCBH and IMBH".into(), columns: 2, panels, provenance: provenance_note(prov) })
}

fn activation_figure(layout: &Layout, config: &ExperimentConfig, prov: &Provenance) -> Result<Figure> {
    let (_, stacked): (_, Vec<StackedAtStep>) = read_json(&layout.file("activations/stacked.json"), "stacked_deviation")?;
    let methods = method_order(config);
    let mut panels = Vec::new();
    for size in &config.sizes {
        let entries: Vec<&StackedAtStep> = stacked.iter().filter(|s| s.size == size.name).collect();
        let cols: Vec<String> = entries.iter().map(|s| s.step.to_string()).collect();
        let rows: Vec<String> = methods
            .iter()
            .filter(|m| entries.iter().any(|e| e.deviations.iter().any(|d| &d.label == *m)))
            .cloned()
            .collect();
        for (title, pick) in [("layer-averaged", true), ("last layer", false)] {
            let mut cells = BTreeMap::new();
            for e in &entries {
                for d in &e.deviations {
                    cells.insert((d.label.clone(), e.step.to_string()), if pick { d.layer_mean } else { d.last_layer });
                }
            }
            panels.push(Panel::Heat(HeatPanel {
                title: format!("{}: deviation ({title})", size.name),
                values: grid_from(&cells, &rows, &cols),
                rows: rows.clone(),
                cols: cols.clone(),
            }));
        }
    }
    Ok(Figure {
        title: "Activation deviation from the full-rank baseline".into(),
        columns: 2,
        panels,
        provenance: provenance_note(prov),
    })
}

/// Every CSV under the tree whose provenance line names a known schema.
fn index_tables(root: &Path) -> Result<Vec<TableEntry>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        let p = entry.path();
        if !entry.file_type().is_file() || p.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let first = text.lines().next().unwrap_or_default();
        let Some(tag) = first.split_whitespace().find_map(|f| f.strip_prefix("schema=")) else { continue };
        let name = tag.split('/').next().unwrap_or_default();
        if !SCHEMA_FILES.iter().any(|(n, _)| *n == name) {
            continue;
        }
        let (_, rows) = read_csv(p, name)?;
        let rel = p.strip_prefix(root).expect("under root");
        let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        out.push(TableEntry { path: rel.join("/"), schema: tag.to_string(), rows: rows.len() });
    }
    Ok(out)
}

/// Renders the figures enabled by the experiment's metric suite, indexes
/// every table and rewrites the manifest.
pub fn cmd_report(dir: &Path) -> Result<ReportSummary> {
    let layout = Layout::new(dir);
    let exp = layout.file("experiment.json");
    if !exp.exists() {
        let mut req = Requirements::default();
        req.need(&exp, "train");
        for (p, producer) in required(&layout, None) {
            req.need(&p, producer);
        }
        req.check()?;
        unreachable!("experiment.json is listed as missing");
    }
    let (prov, record): (Provenance, ExperimentRecord) = read_json(&exp, "experiment")?;
    let config = record.config;
    let mut req = Requirements::default();
    for (p, producer) in required(&layout, Some(&config)) {
        req.need(&p, producer);
    }
    req.check()?;
    let mut figures = Vec::new();
    let mut emit = |rel: &str, fig: Figure| -> Result<()> {
        write_atomic(&layout.file(rel), fig.render().as_bytes())?;
        figures.push(rel.to_string());
        Ok(())
    };
    if config.metrics.landscape && config.metrics.pca {
        emit(FIG_LANDSCAPE, landscape_figure(&layout, &config, &prov)?)?;
    }
    if config.metrics.interp {
        emit(FIG_BARRIERS, barrier_figure(&layout, &config, &prov)?)?;
    }
    if config.metrics.activations {
        emit(FIG_ACTIVATIONS, activation_figure(&layout, &config, &prov)?)?;
    }
    let index = ReportIndex { figures, tables: index_tables(dir)? };
    write_json(&layout.file("report/index.json"), "report_index", &prov, &index)?;
    let manifest_hash = manifest::write(dir, &prov)?;
    Ok(ReportSummary { index, manifest_hash })
}
