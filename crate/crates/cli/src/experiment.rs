//! Training and metric commands over the experiment's output tree.

use std::collections::BTreeMap;

use lrlens::activations::{capture, compare, stacked_deviation, ActReport, StackedDeviation};
use lrlens::checkpoint::{self, Checkpoint, CheckpointMeta};
use lrlens::interp::{ccbh, imbh, interpolation_space, BarrierResult, BetaGrid};
use lrlens::landscape::{self, landscape_pca, landscape_random, LandscapeCurve, PcaLandscape, PerturbGrid, RandomOptions};
use lrlens::model::{Batch, ParamSet, TinyLm};
use lrlens::objective::ValidationLoss;
use lrlens::spectra::{deltas_sweep, weights_sweep, whole_run_spectra, RoleSpectrum, SpectralReport};
use lrlens::train::{train, Dataset, Method, RunRecord, RunSink};
use lrlens::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Loaded, SizeConfig};
use crate::output::{float, read_json, write_csv, write_json, Layout, Provenance, Requirements};

/// A loaded config bound to its output tree and provenance.
#[derive(Clone, Debug)]
pub struct Context {
    pub loaded: Loaded,
    pub layout: Layout,
    pub prov: Provenance,
}

/// Restricts a command to some sizes and methods; empty means all.
#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub sizes: Vec<String>,
    pub methods: Vec<Method>,
}

/// What `experiment.json` records about the config that produced a tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
}

impl ExperimentRecord {
    /// The output location is recorded as `.` so a tree's bytes do not
    /// depend on where it was written.
    pub fn of(config: &ExperimentConfig) -> Self {
        Self { config: ExperimentConfig { output_dir: ".".into(), ..config.clone() } }
    }
}

impl Context {
    pub fn new(loaded: Loaded) -> Result<Self> {
        let prov = Provenance { config_hash: loaded.config_hash()?, seed: loaded.config.seed };
        Ok(Self { layout: Layout::new(loaded.output_dir()), loaded, prov })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let c = self.config();
        let tokens: Vec<u32> = self.loaded.read_corpus()?.into_iter().map(u32::from).collect();
        Dataset::new(tokens, c.data.seq_len, c.data.val_sequences, c.seed)
    }

    /// `(size, method)` pairs in config order, filtered by `sel`.
    pub fn runs(&self, sel: &Selection) -> Result<Vec<(SizeConfig, Method)>> {
        let c = self.config();
        let mut unknown: Vec<String> = sel
            .sizes
            .iter()
            .filter(|s| c.size(s).is_none())
            .map(|s| format!("--size {s}: not a configured size"))
            .collect();
        unknown.extend(
            sel.methods.iter().filter(|m| !c.methods.contains(m)).map(|m| format!("--method {m}: not a configured method")),
        );
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        Ok(c.sizes
            .iter()
            .filter(|s| sel.sizes.is_empty() || sel.sizes.contains(&s.name))
            .flat_map(|s| {
                c.methods
                    .iter()
                    .filter(|m| sel.methods.is_empty() || sel.methods.contains(m))
                    .map(move |m| (s.clone(), *m))
            })
            .collect())
    }

    fn sizes(&self, sel: &Selection) -> Vec<SizeConfig> {
        self.config().sizes.iter().filter(|s| sel.sizes.is_empty() || sel.sizes.contains(&s.name)).cloned().collect()
    }

    fn methods(&self, sel: &Selection) -> Vec<Method> {
        self.config().methods.iter().filter(|m| sel.methods.is_empty() || sel.methods.contains(m)).copied().collect()
    }

    /// Loads the run record and checkpoints of one trained run.
    pub fn load_run(&self, size: &str, method: Method) -> Result<(RunRecord, Vec<Checkpoint>)> {
        let path = self.layout.run_record(size, method.name());
        Requirements::default().need(&path, "train").check()?;
        let (prov, record): (Provenance, RunRecord) = read_json(&path, "run_record")?;
        if prov != self.prov {
            return Err(Error::MissingInputs(vec![format!(
                "{} was written by config {} but the current config is {} (re-run `lrlens train`)",
                path.display(),
                prov.config_hash,
                self.prov.config_hash
            )]));
        }
        if let Some(reason) = &record.aborted {
            return Err(Error::Numerical { layer: format!("{size}/{method} run aborted: {reason}") });
        }
        let mut req = Requirements::default();
        for c in &record.checkpoints {
            req.need(&self.layout.checkpoint(size, method.name(), c.step), "train");
        }
        req.check()?;
        let ckpts = record
            .checkpoints
            .iter()
            .map(|c| checkpoint::load(&self.layout.checkpoint(size, method.name(), c.step)))
            .collect::<Result<Vec<_>>>()?;
        Ok((record, ckpts))
    }

    fn validation_objective(&self, data: &Dataset, model: &lrlens::model::ModelConfig) -> Result<ValidationLoss> {
        Ok(ValidationLoss::new(TinyLm::new(model.clone())?, data.validation().to_vec()))
    }

    fn require_train(&self, sel: &Selection) -> Result<()> {
        let mut req = Requirements::default();
        for (s, m) in self.runs(sel)? {
            req.need(&self.layout.run_record(&s.name, m.name()), "train");
        }
        req.check()
    }
}

struct FileSink<'a> {
    layout: &'a Layout,
    size: String,
    meta: CheckpointMeta,
    record: Option<RunRecord>,
}

impl RunSink for FileSink<'_> {
    fn checkpoint(&mut self, step: u64, params: &ParamSet) -> Result<String> {
        let meta = CheckpointMeta { step, ..self.meta.clone() };
        checkpoint::save(&self.layout.checkpoint(&self.size, self.meta.method.name(), step), params, &meta)?;
        Ok(format!("step-{step:06}"))
    }

    fn finish(&mut self, record: &RunRecord) -> Result<()> {
        self.record = Some(record.clone());
        Ok(())
    }
}

fn step_name(step: u64) -> String {
    format!("step-{step:06}")
}

/// Trains every selected run, skipping runs whose record already matches
/// the current config, and writes `runs/summary.csv`.
pub fn cmd_train(ctx: &Context, sel: &Selection) -> Result<Vec<(String, RunRecord)>> {
    let data = ctx.dataset()?;
    write_json(&ctx.layout.file("experiment.json"), "experiment", &ctx.prov, &ExperimentRecord::of(ctx.config()))?;
    let jobs = ctx.runs(sel)?;
    let results: Vec<Result<(String, RunRecord)>> = jobs
        .par_iter()
        .map(|(size, method)| {
            if let Ok((record, _)) = ctx.load_run(&size.name, *method) {
                return Ok((size.name.clone(), record));
            }
            // Checkpoints from an older config must not linger next to the new ones.
            let dir = ctx.layout.run_dir(&size.name, method.name());
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let model = ctx.config().model_config(size, *method);
            let cfg = ctx.config().train_config(*method);
            let mut sink = FileSink {
                layout: &ctx.layout,
                size: size.name.clone(),
                meta: CheckpointMeta { model: model.clone(), method: *method, step: 0, seed: ctx.config().seed },
                record: None,
            };
            let path = ctx.layout.run_record(&size.name, method.name());
            match train(&model, &cfg, &data, &mut sink) {
                Ok(record) => {
                    write_json(&path, "run_record", &ctx.prov, &record)?;
                    Ok((size.name.clone(), record))
                }
                Err(e) => {
                    let record = sink.record.take().unwrap_or(RunRecord {
                        method: *method,
                        model,
                        train: cfg,
                        checkpoints: Vec::new(),
                        aborted: Some(e.to_string()),
                    });
                    write_json(&path, "run_record", &ctx.prov, &record)?;
                    Err(e)
                }
            }
        })
        .collect();
    // Aborted runs still appear in the summary with their partial record.
    write_run_summary(ctx)?;
    results.into_iter().collect()
}

/// Summary over every configured run that has a record on disk.
fn write_run_summary(ctx: &Context) -> Result<()> {
    let mut rows = Vec::new();
    for (size, method) in ctx.runs(&Selection::default())? {
        let path = ctx.layout.run_record(&size.name, method.name());
        if !path.exists() {
            continue;
        }
        let (_, record): (Provenance, RunRecord) = read_json(&path, "run_record")?;
        for c in &record.checkpoints {
            rows.push(vec![size.name.clone(), method.name().into(), c.step.to_string(), float(c.train_loss), float(c.val_loss)]);
        }
    }
    write_csv(&ctx.layout.file("runs/summary.csv"), "run_summary", &ctx.prov, &rows)
}

fn perturb_grid(c: &ExperimentConfig) -> Result<PerturbGrid> {
    PerturbGrid::new(c.grids.alpha_max, c.grids.num_offsets)
}

/// Random-direction landscape of every checkpoint of the selected runs.
pub fn cmd_landscape(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.require_train(sel)?;
    let data = ctx.dataset()?;
    let c = ctx.config();
    let opts = RandomOptions {
        grid: perturb_grid(c)?,
        directions: c.grids.directions,
        seed: c.seed,
        normalize: c.grids.normalize_directions,
    };
    let mut rows = Vec::new();
    for (size, method) in ctx.runs(sel)? {
        let (_, ckpts) = ctx.load_run(&size.name, method)?;
        let objective = ctx.validation_objective(&data, &ckpts[0].meta.model)?;
        let curves: Vec<LandscapeCurve> =
            ckpts.par_iter().map(|ck| landscape_random(&objective, &ck.params, &opts)).collect::<Result<_>>()?;
        for (ck, curve) in ckpts.iter().zip(&curves) {
            let rel = format!("landscape/curves/{}/{}/{}.json", size.name, method, step_name(ck.meta.step));
            write_json(&ctx.layout.file(&rel), "landscape_curve", &ctx.prov, curve)?;
            let (s, dv) = (curve.sharpness(), curve.direction_variance());
            rows.push(vec![
                size.name.clone(),
                method.name().into(),
                ck.meta.step.to_string(),
                float(s.value),
                float(dv.value),
                (s.divergent || dv.divergent).to_string(),
            ]);
        }
    }
    write_csv(&ctx.layout.file("landscape/summary.csv"), "landscape_summary", &ctx.prov, &rows)
}

/// Landscape along the top singular directions of each checkpoint.
pub fn cmd_pca(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.require_train(sel)?;
    let data = ctx.dataset()?;
    let c = ctx.config();
    let grid = perturb_grid(c)?;
    let mut rows = Vec::new();
    for (size, method) in ctx.runs(sel)? {
        let (_, ckpts) = ctx.load_run(&size.name, method)?;
        let objective = ctx.validation_objective(&data, &ckpts[0].meta.model)?;
        let results: Vec<PcaLandscape> = ckpts
            .par_iter()
            .map(|ck| landscape_pca(&objective, &ck.params, &grid, &c.grids.pca_components))
            .collect::<Result<_>>()?;
        for (ck, pca) in ckpts.iter().zip(&results) {
            let rel = format!("pca/curves/{}/{}/{}.json", size.name, method, step_name(ck.meta.step));
            write_json(&ctx.layout.file(&rel), "pca_landscape", &ctx.prov, pca)?;
            for (row, k) in pca.curve.losses.iter().zip(&pca.components) {
                let single = std::slice::from_ref(row);
                let s = landscape::sharpness(single, grid.zero_index());
                let (_, var) = landscape::mean_and_variance(single);
                let dv = landscape::direction_variance(&var, grid.zero_index());
                rows.push(vec![
                    size.name.clone(),
                    method.name().into(),
                    ck.meta.step.to_string(),
                    k.to_string(),
                    float(s.value),
                    float(dv.value),
                    float(pca.top_sigma),
                ]);
            }
        }
    }
    write_csv(&ctx.layout.file("pca/summary.csv"), "pca_summary", &ctx.prov, &rows)
}

#[derive(Serialize)]
struct CcbhEntry<'a> {
    step_from: u64,
    step_to: u64,
    barrier: &'a BarrierResult,
}

#[derive(Serialize)]
struct ImbhEntry<'a> {
    step: u64,
    barrier: &'a BarrierResult,
}

/// Consecutive-checkpoint barriers per run and same-step barriers between
/// method pairs. CoLA pairs are skipped: it has no dense weight space.
pub fn cmd_interp(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.require_train(sel)?;
    let data = ctx.dataset()?;
    let grid = BetaGrid::new(ctx.config().grids.beta_points)?;
    let mut ccbh_rows = Vec::new();
    let mut imbh_rows = Vec::new();
    for size in ctx.sizes(sel) {
        let methods = ctx.methods(sel);
        let mut runs: BTreeMap<Method, Vec<Checkpoint>> = BTreeMap::new();
        for &m in &methods {
            runs.insert(m, ctx.load_run(&size.name, m)?.1);
        }
        for &m in &methods {
            let (model, points) = interpolation_space(&runs[&m])?;
            let objective = ctx.validation_objective(&data, &model)?;
            let series = ccbh(&objective, &points, &grid)?;
            let entries: Vec<CcbhEntry> =
                series.iter().map(|(a, b, r)| CcbhEntry { step_from: *a, step_to: *b, barrier: r }).collect();
            write_json(&ctx.layout.file(&format!("interp/curves/ccbh/{}/{m}.json", size.name)), "ccbh_curves", &ctx.prov, &entries)?;
            for (a, b, r) in &series {
                ccbh_rows.push(vec![
                    size.name.clone(),
                    m.name().into(),
                    a.to_string(),
                    b.to_string(),
                    float(r.height),
                    float(r.argmax_beta),
                ]);
            }
        }
        let dense: Vec<Method> = methods.iter().copied().filter(|m| *m != Method::Cola).collect();
        let objective = ctx.validation_objective(&data, &ctx.config().dense_model_config(&size))?;
        for (i, &a) in dense.iter().enumerate() {
            for &b in &dense[i + 1..] {
                let series = imbh(&objective, &runs[&a], &runs[&b], &grid)?;
                let entries: Vec<ImbhEntry> = series.iter().map(|(s, r)| ImbhEntry { step: *s, barrier: r }).collect();
                let rel = format!("interp/curves/imbh/{}/{a}__{b}.json", size.name);
                write_json(&ctx.layout.file(&rel), "imbh_curves", &ctx.prov, &entries)?;
                for (s, r) in &series {
                    imbh_rows.push(vec![
                        size.name.clone(),
                        a.name().into(),
                        b.name().into(),
                        s.to_string(),
                        float(r.height),
                        float(r.argmax_beta),
                    ]);
                }
            }
        }
    }
    write_csv(&ctx.layout.file("interp/ccbh.csv"), "ccbh", &ctx.prov, &ccbh_rows)?;
    write_csv(&ctx.layout.file("interp/imbh.csv"), "imbh", &ctx.prov, &imbh_rows)
}

fn spectral_rows(prefix: &[String], report: &SpectralReport) -> Vec<Vec<String>> {
    report
        .tensors
        .iter()
        .map(|t| {
            let mut row = prefix.to_vec();
            row.push(t.key.clone());
            row.push(t.role.clone());
            match &t.metrics {
                Some(m) => {
                    row.extend([float(m.eff_rank), float(m.stable_rank), float(m.spectral_gap), m.threshold_rank.to_string()]);
                    row.push("false".into());
                }
                None => {
                    row.extend([float(f64::NAN), float(f64::NAN), float(f64::NAN), "0".into()]);
                    row.push("true".into());
                }
            }
            row
        })
        .collect()
}

/// Spectra of the weights at each checkpoint, of each consecutive update,
/// and the pooled whole-run update spectrum per role.
pub fn cmd_spectra(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.require_train(sel)?;
    let c = ctx.config();
    let mut weight_rows = Vec::new();
    let mut delta_rows = Vec::new();
    for (size, method) in ctx.runs(sel)? {
        let (_, ckpts) = ctx.load_run(&size.name, method)?;
        for (step, report) in weights_sweep(&ckpts, c.grids.tau)? {
            weight_rows.extend(spectral_rows(&[size.name.clone(), method.name().into(), step.to_string()], &report));
        }
        for (a, b, report) in deltas_sweep(&ckpts, c.grids.tau)? {
            delta_rows.extend(spectral_rows(
                &[size.name.clone(), method.name().into(), a.to_string(), b.to_string()],
                &report,
            ));
        }
        let roles: Vec<RoleSpectrum> = whole_run_spectra(&ckpts, &c.grids.spectrum_roles, c.grids.tau)?;
        write_json(&ctx.layout.file(&format!("spectra/roles/{}/{method}.json", size.name)), "role_spectra", &ctx.prov, &roles)?;
    }
    write_csv(&ctx.layout.file("spectra/weights.csv"), "spectra_weights", &ctx.prov, &weight_rows)?;
    write_csv(&ctx.layout.file("spectra/deltas.csv"), "spectra_deltas", &ctx.prov, &delta_rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedAtStep {
    pub size: String,
    pub step: u64,
    pub deviations: Vec<StackedDeviation>,
}

fn probe_batches(ctx: &Context, data: &Dataset) -> Vec<Batch> {
    data.validation().iter().take(ctx.config().grids.activation_batches).cloned().collect()
}

/// Per-layer comparison of every method's hidden states with the full-rank
/// run of the same size at the same step, plus the stacked deviation of the
/// low-rank methods at each step after initialisation.
pub fn cmd_activations(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.require_train(sel)?;
    let data = ctx.dataset()?;
    let batches = probe_batches(ctx, &data);
    let mut rows = Vec::new();
    let mut stacked = Vec::new();
    for size in ctx.sizes(sel) {
        let (_, reference) = ctx.load_run(&size.name, Method::FullRank)?;
        let ref_model = TinyLm::new(reference[0].meta.model.clone())?;
        let ref_acts: BTreeMap<u64, Vec<lrlens::Matrix>> = reference
            .par_iter()
            .map(|ck| Ok((ck.meta.step, capture(&ref_model, &ck.params, &batches)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let mut by_step: BTreeMap<u64, Vec<(String, ActReport)>> = BTreeMap::new();
        for method in ctx.methods(sel) {
            let (_, ckpts) = ctx.load_run(&size.name, method)?;
            let model = TinyLm::new(ckpts[0].meta.model.clone())?;
            let reports: Vec<(u64, ActReport)> = ckpts
                .par_iter()
                .filter(|ck| ref_acts.contains_key(&ck.meta.step))
                .map(|ck| Ok((ck.meta.step, compare(&ref_acts[&ck.meta.step], &capture(&model, &ck.params, &batches)?)?)))
                .collect::<Result<_>>()?;
            for (step, rep) in reports {
                for l in &rep.layers {
                    rows.push(vec![
                        size.name.clone(),
                        method.name().into(),
                        step.to_string(),
                        l.layer.to_string(),
                        float(l.d_l2),
                        float(l.cos),
                        float(l.cka),
                    ]);
                }
                if method != Method::FullRank && step > 0 {
                    by_step.entry(step).or_default().push((method.name().into(), rep));
                }
            }
        }
        for (step, reports) in by_step {
            stacked.push(StackedAtStep { size: size.name.clone(), step, deviations: stacked_deviation(&reports)? });
        }
    }
    write_csv(&ctx.layout.file("activations/layers.csv"), "activations", &ctx.prov, &rows)?;
    write_json(&ctx.layout.file("activations/stacked.json"), "stacked_deviation", &ctx.prov, &stacked)
}
