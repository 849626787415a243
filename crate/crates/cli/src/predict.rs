//! Feature assembly and the downstream-score predictor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use lrlens::linalg::SeededRng;
use lrlens::predictor::{
    cross_validate, per_group_spearman, sign_consistency_screen, CvScheme, FeatureMatrix, FitResult, RowLabel, FEATURES,
};
use lrlens::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::Context;
use crate::output::{float, read_csv, write_csv, write_json, Layout, Provenance, Requirements};

pub type FeatureRows = BTreeMap<RowLabel, BTreeMap<String, f64>>;

fn parse_f64(s: &str) -> f64 {
    s.parse().expect("schema-validated float")
}

fn parse_u64(s: &str) -> u64 {
    s.parse().expect("schema-validated integer")
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Inputs the feature table is built from, each with its producer.
pub fn feature_inputs(layout: &Layout) -> Vec<(std::path::PathBuf, &'static str)> {
    vec![
        (layout.file("runs/summary.csv"), "train"),
        (layout.file("interp/ccbh.csv"), "interp"),
        (layout.file("activations/layers.csv"), "activations"),
        (layout.file("spectra/deltas.csv"), "spectra"),
        (layout.file("spectra/weights.csv"), "spectra"),
    ]
}

/// Per-checkpoint features for every checkpoint after initialisation.
pub fn assemble_features(layout: &Layout) -> Result<FeatureRows> {
    let mut req = Requirements::default();
    for (p, producer) in feature_inputs(layout) {
        req.need(&p, producer);
    }
    req.check()?;
    let mut seen: Option<(std::path::PathBuf, Provenance)> = None;
    let mut read = |path: std::path::PathBuf, schema: &str| -> Result<Vec<Vec<String>>> {
        let (prov, rows) = read_csv(&path, schema)?;
        match &seen {
            Some((first, p)) if *p != prov => {
                return Err(Error::MissingInputs(vec![format!(
                    "{} and {} come from different configs; re-run the commands that produce them",
                    first.display(),
                    path.display()
                )]))
            }
            Some(_) => {}
            None => seen = Some((path, prov)),
        }
        Ok(rows)
    };
    type Key = (String, String, u64);
    let mut acc: BTreeMap<Key, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut push = |k: Key, f: &'static str, v: f64| acc.entry(k).or_default().entry(f).or_default().push(v);

    let runs = read(layout.file("runs/summary.csv"), "run_summary")?;
    for r in &runs {
        push((r[0].clone(), r[1].clone(), parse_u64(&r[2])), "val_loss", parse_f64(&r[4]));
    }
    let ccbh = read(layout.file("interp/ccbh.csv"), "ccbh")?;
    for r in &ccbh {
        push((r[0].clone(), r[1].clone(), parse_u64(&r[3])), "barrier_consec", parse_f64(&r[4]));
    }
    let acts = read(layout.file("activations/layers.csv"), "activations")?;
    for r in &acts {
        let k = (r[0].clone(), r[1].clone(), parse_u64(&r[2]));
        push(k.clone(), "act_l2_mean", parse_f64(&r[4]));
        push(k, "act_cka_mean", parse_f64(&r[6]));
    }
    let deltas = read(layout.file("spectra/deltas.csv"), "spectra_deltas")?;
    for r in deltas.iter().filter(|r| r[10] == "false") {
        let k = (r[0].clone(), r[1].clone(), parse_u64(&r[3]));
        push(k.clone(), "eff_rank_dW", parse_f64(&r[6]));
        push(k.clone(), "stable_rank_dW", parse_f64(&r[7]));
        push(k, "spectral_gap_dW", parse_f64(&r[8]));
    }
    let weights = read(layout.file("spectra/weights.csv"), "spectra_weights")?;
    for r in weights.iter().filter(|r| r[9] == "false") {
        let k = (r[0].clone(), r[1].clone(), parse_u64(&r[2]));
        push(k.clone(), "stable_rank_W", parse_f64(&r[6]));
        push(k, "threshold_rank_W", parse_f64(&r[8]));
    }
    Ok(acc
        .into_iter()
        .filter(|((_, _, step), _)| *step > 0)
        .map(|((size, method, step), feats)| {
            (RowLabel::new(method, size, step), feats.into_iter().map(|(f, v)| (f.to_string(), mean(&v))).collect())
        })
        .collect())
}

pub fn write_features(path: &Path, prov: &Provenance, rows: &FeatureRows) -> Result<()> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|(l, feats)| {
            let mut row = vec![l.method.clone(), l.size.clone(), l.step.to_string()];
            row.extend(FEATURES.iter().map(|f| float(feats.get(*f).copied().unwrap_or(f64::NAN))));
            row
        })
        .collect();
    write_csv(path, "features", prov, &out)
}

pub fn read_features(path: &Path) -> Result<(Provenance, FeatureRows)> {
    Requirements::default().need(path, "predict").check()?;
    let (prov, rows) = read_csv(path, "features")?;
    Ok((
        prov,
        rows.iter()
            .map(|r| {
                let label = RowLabel::new(r[0].clone(), r[1].clone(), parse_u64(&r[2]));
                let feats = FEATURES.iter().zip(&r[3..]).map(|(f, v)| (f.to_string(), parse_f64(v))).collect();
                (label, feats)
            })
            .collect(),
    ))
}

pub fn read_targets(path: &Path) -> Result<BTreeMap<RowLabel, f64>> {
    Requirements::default().need(path, "predict").check()?;
    let (_, rows) = read_csv(path, "target")?;
    Ok(rows.iter().map(|r| (RowLabel::new(r[0].clone(), r[1].clone(), parse_u64(&r[2])), parse_f64(&r[3]))).collect())
}

/// Desk-scale stand-in for a downstream score: negative validation loss
/// plus seeded Gaussian noise per checkpoint.
pub fn synthetic_targets(rows: &FeatureRows, seed: u64, noise: f64) -> Result<BTreeMap<RowLabel, f64>> {
    rows.iter()
        .map(|(label, feats)| {
            let loss = feats.get("val_loss").copied().filter(|v| v.is_finite()).ok_or_else(|| Error::MissingFeature {
                feature: "val_loss".into(),
                checkpoint: label.to_string(),
            })?;
            let mut rng = SeededRng::new(seed).child_named("synthetic-target").child_named(&label.to_string());
            Ok((label.clone(), -loss + noise * rng.normal()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub feature: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub dropped: Vec<Dropped>,
    pub result: FitResult,
}

/// Validation loss plus the screened features, minus any that some fold
/// cannot standardise or that would leave a fold without residual degrees
/// of freedom.
fn usable_features(full: &FeatureMatrix, candidates: &[String], scheme: CvScheme) -> (Vec<String>, Vec<Dropped>) {
    let groups: BTreeSet<&str> = full.labels.iter().map(|l| scheme.group(l)).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let min_train =
        groups.iter().map(|g| full.labels.iter().filter(|l| scheme.group(l) != *g).count()).min().unwrap_or(0);
    for name in candidates {
        let j = full.names.iter().position(|n| n == name).expect("candidate is a column");
        let constant_fold = groups.iter().find(|g| {
            let vals: Vec<f64> =
                (0..full.len()).filter(|&i| scheme.group(&full.labels[i]) != **g).map(|i| full.x[i][j]).collect();
            vals.iter().all(|v| *v == vals[0])
        });
        if let Some(g) = constant_fold {
            dropped.push(Dropped { feature: name.clone(), reason: format!("constant on the rows fitted without `{g}`") });
        } else if kept.len() + 2 >= min_train {
            dropped.push(Dropped { feature: name.clone(), reason: "too few training rows per fold".into() });
        } else {
            kept.push(name.clone());
        }
    }
    (kept, dropped)
}

fn scheme_name(s: CvScheme) -> &'static str {
    s.name()
}

/// Screens, fits and writes predictor outputs into `out`.
pub fn fit_and_write(
    out: &Layout,
    prov: &Provenance,
    rows: &FeatureRows,
    targets: &BTreeMap<RowLabel, f64>,
    schemes: &[CvScheme],
) -> Result<Vec<(CvScheme, SchemeReport)>> {
    let full = FeatureMatrix::build(&FEATURES, rows, targets)?;
    let table = per_group_spearman(&full)?;
    let mut gs_rows = Vec::new();
    for row in &table {
        for (g, r) in row.groups.iter().zip(&row.rho) {
            gs_rows.push(vec![row.feature.clone(), g.clone(), float(*r)]);
        }
    }
    write_csv(&out.file("predict/group_spearman.csv"), "group_spearman", prov, &gs_rows)?;
    let screen = sign_consistency_screen(&table);
    let screen_rows: Vec<Vec<String>> =
        screen.iter().map(|s| vec![s.feature.clone(), float(s.median_abs_rho), s.sign.to_string()]).collect();
    write_csv(&out.file("predict/screen.csv"), "screen", prov, &screen_rows)?;

    let mut candidates = vec!["val_loss".to_string()];
    candidates.extend(screen.iter().map(|s| s.feature.clone()).filter(|f| f != "val_loss"));
    let mut reports = Vec::new();
    let mut pred_rows = Vec::new();
    for &scheme in schemes {
        let (names, dropped) = usable_features(&full, &candidates, scheme);
        if names.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no usable features after screening", scheme_name(scheme))));
        }
        let result = cross_validate(&full.select(&names)?, scheme)?;
        for f in &result.folds {
            for &i in &f.held_out {
                let l = &full.labels[i];
                pred_rows.push(vec![
                    scheme_name(scheme).into(),
                    l.method.clone(),
                    l.size.clone(),
                    l.step.to_string(),
                    f.held_out_group.clone(),
                    float(full.target[i]),
                    float(result.predictions[i]),
                ]);
            }
        }
        let report = SchemeReport { dropped, result };
        write_json(&out.file(&format!("predict/{}.json", scheme_name(scheme))), "fit_result", prov, &report)?;
        reports.push((scheme, report));
    }
    write_csv(&out.file("predict/predictions.csv"), "predictions", prov, &pred_rows)?;
    Ok(reports)
}

/// Schemes with at least two groups in `rows`.
pub fn available_schemes(rows: &FeatureRows) -> Vec<CvScheme> {
    [CvScheme::Loso, CvScheme::Lomo]
        .into_iter()
        .filter(|s| rows.keys().map(|l| s.group(l)).collect::<BTreeSet<_>>().len() >= 2)
        .collect()
}

/// Assembles features from the experiment tree and fits the predictor.
pub fn cmd_predict(ctx: &Context, schemes: Option<&[CvScheme]>) -> Result<Vec<(CvScheme, SchemeReport)>> {
    let rows = assemble_features(&ctx.layout)?;
    write_features(&ctx.layout.file("predict/features.csv"), &ctx.prov, &rows)?;
    let p = &ctx.config().predict;
    let targets = if p.target == "synthetic" {
        let t = synthetic_targets(&rows, ctx.config().seed, p.target_noise)?;
        let out: Vec<Vec<String>> =
            t.iter().map(|(l, v)| vec![l.method.clone(), l.size.clone(), l.step.to_string(), float(*v)]).collect();
        write_csv(&ctx.layout.file("predict/target.csv"), "target", &ctx.prov, &out)?;
        t
    } else {
        read_targets(&ctx.loaded.base_dir.join(&p.target))?
    };
    let schemes = schemes.map(<[_]>::to_vec).unwrap_or_else(|| available_schemes(&rows));
    fit_and_write(&ctx.layout, &ctx.prov, &rows, &targets, &schemes)
}
