use lrlens::activations::{act_cos, act_l2, capture, compare, linear_cka, stacked_deviation, COS_EPS};
use lrlens::checkpoint::{Checkpoint, CheckpointMeta};
use lrlens::interp::{barrier, barrier_height, ccbh, imbh, interp_losses, interpolation_space, BetaGrid};
use lrlens::landscape::{
    landscape_pca, landscape_random, mean_and_variance, pca_direction, random_direction, PerturbGrid, RandomOptions,
};
use lrlens::linalg::{gaussian_direction, singular_values, SeededRng};
use lrlens::model::{Batch, LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role, TinyLm};
use lrlens::objective::{Objective, ValidationLoss};
use lrlens::spectra::{
    deltas_sweep, effective_rank, spectral_matrices, spectral_report, stable_rank, weights_sweep, whole_run_spectra,
    SpectralMetrics, DEFAULT_TAU,
};
use lrlens::train::{train, Dataset, MemorySink, Method, TrainConfig};
use lrlens::{Error, Matrix};

/// `½ Σ h ⊙ θ²` over the tensors named in `h`.
struct Quadratic {
    h: ParamSet,
}

impl Objective for Quadratic {
    fn loss(&self, p: &ParamSet) -> lrlens::Result<f64> {
        let mut total = 0.0;
        for (k, h) in self.h.iter() {
            let t = p.tensor(k)?;
            total += h.as_slice().iter().zip(t.as_slice()).map(|(h, x)| 0.5 * h * x * x).sum::<f64>();
        }
        Ok(total)
    }
}

fn quad_keys() -> Vec<(ParamKey, (usize, usize))> {
    vec![
        (ParamKey::layer(0, Role::Wq, Part::Weight), (4, 3)),
        (ParamKey::layer(0, Role::Wup, Part::Weight), (2, 5)),
    ]
}

fn quad_setup(h_of: impl Fn(usize) -> f64, theta: f64) -> (Quadratic, ParamSet) {
    let mut idx = 0;
    let mut h = ParamSet::new();
    let mut p = ParamSet::new();
    for (k, (r, c)) in quad_keys() {
        h.insert(k, Matrix::from_fn(r, c, |_, _| {
            idx += 1;
            h_of(idx - 1)
        }));
        p.insert(k, Matrix::from_fn(r, c, |i, j| theta * (1.0 + i as f64 - j as f64)));
    }
    // A non-projection tensor must be left alone by every direction.
    p.insert(ParamKey::global(Role::Embed), Matrix::from_fn(3, 2, |i, j| (i + j) as f64));
    (Quadratic { h }, p)
}

fn quad_form(h: &ParamSet, d: &ParamSet) -> f64 {
    h.iter()
        .map(|(k, hm)| hm.as_slice().iter().zip(d.tensor(k).unwrap().as_slice()).map(|(a, b)| a * b * b).sum::<f64>())
        .sum()
}

#[test]
fn quadratic_probe_matches_closed_form() {
    let (q, p) = quad_setup(|i| 0.5 + (i % 4) as f64, 0.0);
    let opts = RandomOptions { grid: PerturbGrid::new(0.4, 4).unwrap(), directions: 500, seed: 3, normalize: false };
    let curve = landscape_random(&q, &p, &opts).unwrap();
    let trace: f64 = q.h.iter().map(|(_, m)| m.as_slice().iter().sum::<f64>()).sum();
    let h2: f64 = q.h.iter().map(|(_, m)| m.as_slice().iter().map(|v| v * v).sum::<f64>()).sum();
    let se = (2.0 * h2 / 500.0).sqrt() / trace;
    // Sample quadratic forms of the same directions give the exact expectation.
    let forms: Vec<f64> = (0..500).map(|i| quad_form(&q.h, &random_direction(&p, 3, i, false))).collect();
    let sample = forms.iter().sum::<f64>() / 500.0;
    let mean_a2 = curve.alphas.iter().filter(|a| **a > 0.0).map(|a| a * a).sum::<f64>() / 4.0;
    let s = curve.sharpness().value;
    assert!((s - 0.5 * mean_a2 * sample).abs() < 1e-12);
    assert!((s / (0.5 * mean_a2 * trace) - 1.0).abs() < 4.0 * se, "MC mismatch");
    for (j, &a) in curve.alphas.iter().enumerate() {
        let centered = curve.mean[j] - curve.mean[opts.grid.zero_index()];
        assert!((centered - 0.5 * a * a * sample).abs() < 1e-12);
        assert!((centered - 0.5 * a * a * trace).abs() <= 4.0 * se * 0.5 * a * a * trace + 1e-15);
    }
    let (mean, var) = mean_and_variance(&curve.losses);
    for j in 0..curve.alphas.len() {
        assert!((mean[j] - curve.mean[j]).abs() <= 1e-12);
        assert!((var[j] - curve.variance[j]).abs() <= 1e-12);
    }
    assert!(s >= 0.0);
}

#[test]
fn anisotropic_curvature_has_larger_direction_variance() {
    let opts = RandomOptions { grid: PerturbGrid::new(0.5, 3).unwrap(), directions: 200, seed: 9, normalize: false };
    let (iso, p) = quad_setup(|_| 1.0, 0.3);
    let (aniso, _) = quad_setup(|i| if i == 0 { 100.0 } else { 1.0 }, 0.3);
    let dv_iso = landscape_random(&iso, &p, &opts).unwrap().direction_variance().value;
    let dv_aniso = landscape_random(&aniso, &p, &opts).unwrap().direction_variance().value;
    assert!(dv_aniso > dv_iso, "{dv_aniso} vs {dv_iso}");
}

#[test]
fn directions_skip_non_projection_tensors() {
    let (_, p) = quad_setup(|_| 1.0, 1.0);
    let d = random_direction(&p, 1, 0, false);
    assert_eq!(d.len(), 2);
    assert!(!d.contains(&ParamKey::global(Role::Embed)));
    let normalized = random_direction(&p, 1, 0, true);
    for (k, t) in normalized.iter() {
        assert!((t.frobenius_norm() - p.tensor(k).unwrap().frobenius_norm()).abs() < 1e-12);
    }
}

#[test]
fn pca_direction_of_diagonal_weight() {
    let mut p = ParamSet::new();
    let key = ParamKey::layer(0, Role::Wv, Part::Weight);
    p.insert(key, Matrix::diag(&[3.0, 2.0, 1.0]));
    let (d, info) = pca_direction(&p, 1).unwrap();
    let want = Matrix::from_fn(3, 3, |i, j| if i == 0 && j == 0 { 3.0 } else { 0.0 });
    assert!(d.tensor(&key).unwrap().sub(&want).unwrap().max_abs() < 1e-12);
    assert_eq!(info[0].sigma_k, 3.0);
    assert!((d.tensor(&key).unwrap().frobenius_norm() - 3.0).abs() < 1e-12);
    assert!(pca_direction(&p, 4).is_err());
}

#[test]
fn rank_one_weight_has_flat_second_component() {
    let key = ParamKey::layer(0, Role::Wq, Part::Weight);
    let mut p = ParamSet::new();
    p.insert(key, Matrix::from_fn(3, 4, |i, j| (i + 1) as f64 * (j as f64 - 1.5)));
    let mut h = ParamSet::new();
    h.insert(key, Matrix::from_fn(3, 4, |_, _| 1.0));
    let q = Quadratic { h };
    let grid = PerturbGrid::new(1.0, 2).unwrap();
    let pca = landscape_pca(&q, &p, &grid, &[1, 2]).unwrap();
    let base = q.loss(&p).unwrap();
    assert!(pca.curve.losses[1].iter().all(|&v| (v - base).abs() < 1e-12));
    // α = −1 cancels the weight, α = +1 doubles it.
    assert!(pca.curve.losses[0][0].abs() < 1e-12);
    assert!((pca.curve.losses[0][4] - 4.0 * base).abs() < 1e-9);
    assert_eq!(pca.curve.losses[0][grid.zero_index()], base);
    assert_eq!(pca.top_sigma, pca.tensors[0][0].sigma_1);
}

fn small_model(kind: LayerKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        layer_kind: kind,
        rank: 4,
        seed: 21,
        sltrain_density: 0.25,
        ..ModelConfig::default()
    }
}

fn dataset() -> Dataset {
    let text = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt")).unwrap();
    Dataset::new(text[..30_000].iter().map(|&b| b as u32).collect(), 16, 8, 2).unwrap()
}

fn run(method: Method, lr: f64, seed: u64) -> Vec<Checkpoint> {
    let model = ModelConfig { seed, ..small_model(method.layer_kind()) };
    let cfg = TrainConfig {
        method,
        steps: 30,
        batch_size: 4,
        lr,
        rank: 4,
        galore_refresh: 10,
        relora_reset: 15,
        checkpoint_every: 10,
        seed,
        ..TrainConfig::default()
    };
    let mut sink = MemorySink::default();
    train(&model, &cfg, &dataset(), &mut sink).unwrap();
    sink.checkpoints
        .into_iter()
        .map(|(step, params)| Checkpoint { meta: CheckpointMeta { model: model.clone(), method, step, seed }, params })
        .collect()
}

fn val_objective(model: &ModelConfig) -> ValidationLoss {
    ValidationLoss::new(TinyLm::new(model.clone()).unwrap(), dataset().validation().to_vec())
}

#[test]
fn model_landscape_is_consistent_and_reproducible() {
    let ckpt = run(Method::FullRank, 1e-2, 1).pop().unwrap();
    let obj = val_objective(&ckpt.meta.model);
    let before = ckpt.params.clone();
    let opts = RandomOptions { grid: PerturbGrid::new(0.5, 2).unwrap(), directions: 3, seed: 4, normalize: false };
    let a = landscape_random(&obj, &ckpt.params, &opts).unwrap();
    let b = landscape_random(&obj, &ckpt.params, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(ckpt.params, before, "parameters restored bitwise");
    let base = obj.loss(&ckpt.params).unwrap();
    assert!(a.losses.iter().all(|r| r[2] == base));
    let single = landscape_random(&obj, &ckpt.params, &RandomOptions { directions: 1, ..opts }).unwrap();
    assert!(single.variance.iter().all(|&v| v == 0.0));
    assert_eq!(single.direction_variance().value, 0.0);
}

#[test]
fn divergent_probes_become_sentinels() {
    let ckpt = run(Method::FullRank, 1e-2, 1).pop().unwrap();
    let obj = val_objective(&ckpt.meta.model);
    let opts = RandomOptions { grid: PerturbGrid::new(1e200, 1).unwrap(), directions: 1, seed: 0, normalize: false };
    let curve = landscape_random(&obj, &ckpt.params, &opts).unwrap();
    assert!(curve.losses[0][0].is_infinite());
    let s = curve.sharpness();
    assert!(s.divergent && s.value == f64::INFINITY);
}

#[test]
fn interpolation_between_equal_points_is_flat() {
    let c = run(Method::FullRank, 1e-2, 1).pop().unwrap();
    let obj = val_objective(&c.meta.model);
    let r = barrier(&obj, ("a", &c.params), ("a", &c.params), &BetaGrid::default()).unwrap();
    assert_eq!(r.height, 0.0);
    assert!(r.curve.losses.iter().all(|&v| v == r.curve.losses[0]));
    let two = interp_losses(&obj, &c.params, &c.params, &BetaGrid::new(2).unwrap()).unwrap();
    assert_eq!(two.len(), 2);
}

#[test]
fn quadratic_interpolation_matches_closed_form() {
    let (q, a) = quad_setup(|i| 1.0 + i as f64 * 0.1, 1.0);
    let mut b = a.clone();
    for (k, t) in b.iter_mut() {
        if k.is_projection() {
            *t = t.scale(-1.0);
        }
    }
    let grid = BetaGrid::new(11).unwrap();
    let losses = interp_losses(&q, &a, &b, &grid).unwrap();
    for (i, beta) in grid.betas().into_iter().enumerate() {
        // θ(β) = (1 − 2β)·θ_A on the quadratic tensors.
        let want = (1.0 - 2.0 * beta).powi(2) * q.loss(&a).unwrap();
        assert!((losses[i] - want).abs() < 1e-12);
    }
    let (bh, _) = barrier_height(&losses).unwrap();
    assert!(bh <= 0.0);
}

#[test]
fn barrier_is_symmetric_and_endpoint_consistent() {
    let r = run(Method::FullRank, 1e-2, 1);
    let obj = val_objective(&r[0].meta.model);
    let grid = BetaGrid::default();
    let ab = barrier(&obj, ("a", &r[1].params), ("b", &r[3].params), &grid).unwrap();
    let ba = barrier(&obj, ("b", &r[3].params), ("a", &r[1].params), &grid).unwrap();
    assert_eq!(ab.height, ba.height);
    let rev: Vec<f64> = ba.curve.losses.iter().rev().copied().collect();
    assert_eq!(ab.curve.losses, rev);
    assert!((ab.curve.losses[0] - obj.loss(&r[1].params).unwrap()).abs() <= 1e-10);
    assert!((ab.curve.losses[10] - obj.loss(&r[3].params).unwrap()).abs() <= 1e-10);
}

#[test]
fn consecutive_barriers_cover_adjacent_pairs() {
    let r = run(Method::Sltrain, 1e-2, 1);
    let (cfg, points) = interpolation_space(&r).unwrap();
    assert_eq!(cfg.layer_kind, LayerKind::Dense);
    let series = ccbh(&val_objective(&cfg), &points, &BetaGrid::new(5).unwrap()).unwrap();
    let pairs: Vec<(u64, u64)> = series.iter().map(|(a, b, _)| (*a, *b)).collect();
    assert_eq!(pairs, vec![(0, 10), (10, 20), (20, 30)]);
    assert!(ccbh(&val_objective(&cfg), &points[..1], &BetaGrid::default()).unwrap().is_empty());

    let frozen = run(Method::FullRank, 0.0, 1);
    let (cfg, points) = interpolation_space(&frozen).unwrap();
    let series = ccbh(&val_objective(&cfg), &points, &BetaGrid::new(5).unwrap()).unwrap();
    assert!(series.iter().all(|(_, _, b)| b.height == 0.0));

    // CoLA stays in its own parameterisation.
    let cola = run(Method::Cola, 1e-2, 1);
    let (cfg, points) = interpolation_space(&cola).unwrap();
    assert_eq!(cfg.layer_kind, LayerKind::Cola);
    assert_eq!(ccbh(&val_objective(&cfg), &points, &BetaGrid::new(3).unwrap()).unwrap().len(), 3);
}

#[test]
fn inter_method_barriers() {
    let full = run(Method::FullRank, 1e-2, 1);
    let dense = val_objective(&full[0].meta.model);
    let grid = BetaGrid::new(5).unwrap();
    let same = imbh(&dense, &full, &full, &grid).unwrap();
    assert_eq!(same.len(), 4);
    assert!(same.iter().all(|(_, b)| b.height == 0.0));

    let relora = run(Method::Relora, 1e-2, 1);
    let cross = imbh(&dense, &full, &relora, &grid).unwrap();
    assert_eq!(cross.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
    // Shared-seed init coincides in dense space.
    assert_eq!(cross[0].1.height, 0.0);

    let other_seed = run(Method::FullRank, 1e-2, 2);
    let seeds = imbh(&dense, &full, &other_seed, &grid).unwrap();
    assert!(seeds.last().unwrap().1.height > 0.0);

    assert!(matches!(imbh(&dense, &full[..1], &full[1..], &grid), Err(Error::EmptyIntersection)));
    let cola = run(Method::Cola, 1e-2, 1);
    assert!(matches!(imbh(&dense, &full, &cola, &grid), Err(Error::UnsupportedMethod(_))));
}

fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let g: Matrix = gaussian_direction(n, n, &mut rng);
    let q = nalgebra::DMatrix::from_row_slice(n, n, g.as_slice()).qr().q();
    Matrix::from_fn(n, n, |i, j| q[(i, j)])
}

#[test]
fn spectral_metrics_are_rotation_and_scale_invariant() {
    let mut rng = SeededRng::new(5);
    let w: Matrix = gaussian_direction(7, 5, &mut rng);
    let rotated = random_orthogonal(7, 1).matmul(&w).unwrap().matmul(&random_orthogonal(5, 2)).unwrap();
    let m = |x: &Matrix| SpectralMetrics::from_singular_values(&singular_values(x).unwrap(), DEFAULT_TAU).unwrap();
    let (a, b, c) = (m(&w), m(&rotated), m(&w.scale(3.3)));
    for other in [b, c] {
        assert!((a.eff_rank - other.eff_rank).abs() < 1e-10);
        assert!((a.stable_rank - other.stable_rank).abs() < 1e-10);
        assert!((a.spectral_gap - other.spectral_gap).abs() < 1e-10);
    }
    assert_eq!(a.threshold_rank, b.threshold_rank);
    assert!(a.eff_rank <= 5.0 + 1e-12 && a.stable_rank <= 5.0 + 1e-12);
    assert!(a.eff_rank >= 1.0 && a.stable_rank >= 1.0);
    // Singular values agree with an independent decomposition.
    let ours = singular_values(&w).unwrap();
    let mut theirs: Vec<f64> = nalgebra::DMatrix::from_row_slice(7, 5, w.as_slice()).singular_values().iter().copied().collect();
    theirs.sort_by(|x, y| y.total_cmp(x));
    for (x, y) in ours.iter().zip(&theirs) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn low_rank_matrix_bounds() {
    let mut rng = SeededRng::new(6);
    let u: Matrix = gaussian_direction(8, 2, &mut rng);
    let v: Matrix = gaussian_direction(2, 6, &mut rng);
    let sv = singular_values(&u.matmul(&v).unwrap()).unwrap();
    assert!(effective_rank(&sv).unwrap() <= 2.0 + 1e-9);
    assert!(stable_rank(&sv).unwrap() <= 2.0 + 1e-9);
}

#[test]
fn spectral_sweeps() {
    let full = run(Method::FullRank, 1e-2, 1);
    let weights = weights_sweep(&full, DEFAULT_TAU).unwrap();
    assert_eq!(weights.len(), 4);
    for (_, rep) in &weights {
        assert_eq!(rep.tensors.len(), 2 * 7);
        assert_eq!(rep.degenerate_count(), 0);
        for t in &rep.tensors {
            let again = SpectralMetrics::from_singular_values(&t.singular_values, rep.tau).unwrap();
            let m = t.metrics.unwrap();
            assert!((again.eff_rank - m.eff_rank).abs() <= 1e-10);
            assert!(m.spectral_gap >= 0.0 && m.spectral_gap <= 1.0);
        }
    }
    let deltas = deltas_sweep(&full, DEFAULT_TAU).unwrap();
    assert_eq!(deltas.iter().map(|(a, b, _)| (*a, *b)).collect::<Vec<_>>(), vec![(0, 10), (10, 20), (20, 30)]);

    let frozen = run(Method::FullRank, 0.0, 1);
    for (_, _, rep) in deltas_sweep(&frozen, DEFAULT_TAU).unwrap() {
        assert_eq!(rep.degenerate_count(), rep.tensors.len());
        assert!(rep.mean.is_none());
    }

    // Shared init: identical step-0 reports across methods in dense space.
    let galore = run(Method::Galore, 1e-2, 1);
    let relora = run(Method::Relora, 1e-2, 1);
    let w0 = |r: &[Checkpoint]| weights_sweep(&r[..1], DEFAULT_TAU).unwrap().remove(0).1;
    assert_eq!(w0(&full), w0(&galore));
    assert_eq!(w0(&full), w0(&relora));

    let cola = run(Method::Cola, 1e-2, 1);
    let mats = spectral_matrices(&cola[0].meta.model, &cola[0].params).unwrap();
    assert_eq!(mats.len(), 2 * 7 * 2);
    assert!(mats.iter().any(|m| m.role == "wq.a") && mats.iter().any(|m| m.role == "wq.b"));

    let per_role = whole_run_spectra(&full, &["wq".into(), "wv".into(), "wup".into()], DEFAULT_TAU).unwrap();
    assert_eq!(per_role.iter().map(|r| r.role.as_str()).collect::<Vec<_>>(), vec!["wq", "wup", "wv"]);
    assert_eq!(per_role[0].singular_values.len(), 2 * 16);
    let report = spectral_report(&mats, DEFAULT_TAU).unwrap();
    assert!(report.by_role.contains_key("wdown.b"));
}

fn random_pair(rows: usize, cols: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = SeededRng::new(seed);
    (gaussian_direction(rows, cols, &mut rng), gaussian_direction(rows, cols, &mut rng))
}

#[test]
fn l2_and_cosine_match_scalar_loops() {
    let (a, b) = random_pair(16, 8, 1);
    let (mut l2, mut cos) = (0.0, 0.0);
    for i in 0..16 {
        let (mut d, mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..8 {
            let (x, y) = (a.get(i, j), b.get(i, j));
            d += (x - y) * (x - y);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        l2 += d.sqrt() / 16.0;
        cos += ab / (aa.sqrt() * bb.sqrt() + COS_EPS) / 16.0;
    }
    assert!((act_l2(&a, &b).unwrap() - l2).abs() < 1e-12);
    assert!((act_cos(&a, &b, COS_EPS).unwrap() - cos).abs() < 1e-12);
}

/// CKA through centred sample-space kernels: HSIC(K, L) / √(HSIC(K, K) HSIC(L, L)).
fn kernel_cka(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows();
    let x = nalgebra::DMatrix::from_row_slice(n, a.cols(), a.as_slice());
    let y = nalgebra::DMatrix::from_row_slice(n, b.cols(), b.as_slice());
    let h = nalgebra::DMatrix::<f64>::identity(n, n) - nalgebra::DMatrix::from_element(n, n, 1.0 / n as f64);
    let k = &h * (&x * x.transpose()) * &h;
    let l = &h * (&y * y.transpose()) * &h;
    let hsic = |p: &nalgebra::DMatrix<f64>, q: &nalgebra::DMatrix<f64>| (p * q).trace();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

#[test]
fn cka_matches_kernel_form_and_invariances() {
    let (a, b) = random_pair(20, 6, 2);
    let cka = linear_cka(&a, &b).unwrap();
    assert!((cka - kernel_cka(&a, &b)).abs() < 1e-12);
    assert!((cka - linear_cka(&b, &a).unwrap()).abs() < 1e-12);
    assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let q = random_orthogonal(6, 3);
    assert!((linear_cka(&a, &a.matmul(&q).unwrap()).unwrap() - 1.0).abs() < 1e-8);
    assert!((linear_cka(&a, &a.scale(3.7)).unwrap() - 1.0).abs() < 1e-10);
    let perm = Matrix::from_fn(6, 6, |i, j| if j == (i + 2) % 6 { 1.0 } else { 0.0 });
    assert!((linear_cka(&a.matmul(&perm).unwrap(), &b).unwrap() - cka).abs() < 1e-12);
    assert!((0.0..=1.0 + 1e-10).contains(&cka));
}

#[test]
fn l2_triangle_inequality() {
    for seed in 0..20 {
        let (a, b) = random_pair(10, 4, seed);
        let (c, _) = random_pair(10, 4, seed + 100);
        let ab = act_l2(&a, &b).unwrap();
        let bc = act_l2(&b, &c).unwrap();
        let ac = act_l2(&a, &c).unwrap();
        assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn model_activation_comparison() {
    let full = run(Method::FullRank, 1e-2, 1);
    let model = TinyLm::new(full[0].meta.model.clone()).unwrap();
    let val: Vec<Batch> = dataset().validation().to_vec();
    let reference: Vec<Vec<Matrix>> = full.iter().map(|c| capture(&model, &c.params, &val).unwrap()).collect();
    assert_eq!(reference[0].len(), 3);
    assert_eq!(reference[0][0].shape(), (8 * 16, 16));
    let selfcmp = compare(&reference[3], &reference[3]).unwrap();
    for l in &selfcmp.layers {
        assert_eq!(l.d_l2, 0.0);
        assert!(l.cos > 1.0 - 1e-6 && l.cos <= 1.0);
        assert!((l.cka - 1.0).abs() < 1e-10);
    }
    let cola = run(Method::Cola, 1e-2, 1);
    let cola_lm = TinyLm::new(cola[0].meta.model.clone()).unwrap();
    let mut cells = 0;
    let mut reports = Vec::new();
    for (c, r) in cola.iter().zip(&reference) {
        let rep = compare(r, &capture(&cola_lm, &c.params, &val).unwrap()).unwrap();
        cells += rep.layers.len();
        for l in &rep.layers {
            assert!((-1.0..=1.0).contains(&l.cos));
            assert!(l.cka >= -1e-10 && l.cka <= 1.0 + 1e-10);
        }
        reports.push((format!("step-{}", c.meta.step), rep));
    }
    assert_eq!(cells, 4 * 3);
    let z = stacked_deviation(&reports).unwrap();
    assert_eq!(z.len(), 4);
    assert!(z.iter().all(|s| s.per_layer.len() == 3 && s.layer_mean.is_finite()));
    let shallow = vec![reference[0][0].clone()];
    assert!(matches!(compare(&reference[0], &shallow), Err(Error::Schema(_))));
}
