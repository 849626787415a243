//! Gradient and forward-pass checks for the decoder against independent oracles.

use lrlens::linalg::SeededRng;
use lrlens::model::{
    Batch, ColaActivation, LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role, TinyLm,
};
use lrlens::Matrix;

fn small_config(kind: LayerKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 16,
        layer_kind: kind,
        rank: 4,
        seed: 17,
        sltrain_density: 0.25,
        ..ModelConfig::default()
    }
}

fn random_batch(rows: usize, seq: usize, vocab: usize, seed: u64) -> Batch {
    let mut rng = SeededRng::new(seed);
    let tokens = (0..rows * seq).map(|_| rng.below(vocab) as u32).collect();
    Batch::new(rows, seq, tokens).unwrap()
}

/// Initial weights are tiny, so push every tensor away from init to make the
/// gradient check exercise nonlinear regimes (and nonzero adapter up factors).
fn jittered_params(model: &TinyLm, seed: u64) -> ParamSet {
    let mut rng = SeededRng::new(seed);
    let mut p = model.init_params();
    for (_, m) in p.iter_mut() {
        for x in m.as_mut_slice() {
            *x += 0.3 * rng.normal();
        }
    }
    p
}

fn gradient_check(kind: LayerKind) {
    let model = TinyLm::new(small_config(kind)).unwrap();
    let params = jittered_params(&model, 5);
    let batch = random_batch(2, 7, 23, 9);
    let (loss, grads) = model.forward_grads(&params, &batch).unwrap();
    assert_eq!(loss, model.forward_loss(&params, &batch).unwrap());
    assert_eq!(grads.keys().collect::<Vec<_>>(), params.keys().collect::<Vec<_>>());

    let keys: Vec<ParamKey> = params.keys().copied().collect();
    let mut rng = SeededRng::new(1234);
    let eps = 1e-5;
    let mut checked = 0;
    // Every tensor gets probed at least once, then 20 extra random coordinates.
    let mut probes: Vec<(ParamKey, usize)> = Vec::new();
    for k in &keys {
        probes.push((*k, rng.below(params.get(k).unwrap().len())));
    }
    for _ in 0..20 {
        let k = keys[rng.below(keys.len())];
        probes.push((k, rng.below(params.get(&k).unwrap().len())));
    }
    for (key, idx) in probes {
        if kind == LayerKind::Sltrain && key.part == Part::Sparse {
            let mask = model.sparse_mask(key.layer.unwrap(), key.role).unwrap();
            if !mask[idx] {
                assert_eq!(grads.get(&key).unwrap().as_slice()[idx], 0.0, "{key} off-support");
                continue;
            }
        }
        let mut plus = params.clone();
        plus.get_mut(&key).unwrap().as_mut_slice()[idx] += eps;
        let mut minus = params.clone();
        minus.get_mut(&key).unwrap().as_mut_slice()[idx] -= eps;
        let fd = (model.forward_loss(&plus, &batch).unwrap() - model.forward_loss(&minus, &batch).unwrap())
            / (2.0 * eps);
        let g = grads.get(&key).unwrap().as_slice()[idx];
        let denom = g.abs().max(fd.abs()).max(1e-6);
        let rel = (g - fd).abs() / denom;
        assert!(rel <= 1e-4, "{kind:?} {key}[{idx}]: analytic {g:e} vs fd {fd:e} (rel {rel:e})");
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn gradients_match_finite_differences_dense() {
    gradient_check(LayerKind::Dense);
}

#[test]
fn gradients_match_finite_differences_cola() {
    gradient_check(LayerKind::Cola);
}

#[test]
fn gradients_match_finite_differences_sltrain() {
    gradient_check(LayerKind::Sltrain);
}

#[test]
fn gradients_match_finite_differences_adapter() {
    gradient_check(LayerKind::Adapter);
}

#[test]
fn zeroed_head_gives_uniform_loss() {
    let cfg = small_config(LayerKind::Dense);
    let model = TinyLm::new(cfg.clone()).unwrap();
    let mut p = model.init_params();
    let head = p.get_mut(&ParamKey::global(Role::Head)).unwrap();
    *head = Matrix::zeros(head.rows(), head.cols());
    let loss = model.forward_loss(&p, &random_batch(3, 5, 23, 1)).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let model = TinyLm::new(small_config(LayerKind::Cola)).unwrap();
    let p = jittered_params(&model, 2);
    let b = random_batch(2, 8, 23, 3);
    assert_eq!(
        model.forward_loss(&p, &b).unwrap().to_bits(),
        model.forward_loss(&p, &b).unwrap().to_bits()
    );
}

#[test]
fn future_only_token_has_zero_embedding_gradient() {
    // Token 22 appears only in the final column. Its embedding feeds no
    // prediction, but it is a target, so its head row must get gradient.
    let model = TinyLm::new(small_config(LayerKind::Dense)).unwrap();
    let p = jittered_params(&model, 8);
    let mut rng = SeededRng::new(4);
    let rows: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let mut r: Vec<u32> = (0..6).map(|_| rng.below(22) as u32).collect();
            r.push(22);
            r
        })
        .collect();
    let (_, g) = model.forward_grads(&p, &Batch::from_rows(&rows).unwrap()).unwrap();
    let embed = g.get(&ParamKey::global(Role::Embed)).unwrap();
    assert!(embed.row(22).iter().all(|&x| x == 0.0));
    let head = g.get(&ParamKey::global(Role::Head)).unwrap();
    assert!(head.row(22).iter().any(|&x| x != 0.0));
}

#[test]
fn duplicated_batch_gives_same_gradients() {
    let model = TinyLm::new(small_config(LayerKind::Sltrain)).unwrap();
    let p = jittered_params(&model, 3);
    let b = random_batch(2, 6, 23, 5);
    let (l1, g1) = model.forward_grads(&p, &b).unwrap();
    let (l2, g2) = model.forward_grads(&p, &b.concat(&b).unwrap()).unwrap();
    assert!((l1 - l2).abs() < 1e-13);
    assert!(g1.max_abs_diff(&g2).unwrap() < 1e-13);
}

#[test]
fn hidden_state_shapes_and_embedding_layer() {
    let cfg = ModelConfig { d_model: 32, n_heads: 2, n_layers: 2, ..small_config(LayerKind::Dense) };
    let model = TinyLm::new(cfg).unwrap();
    let p = model.init_params();
    let b = random_batch(2, 8, 23, 6);
    let hs = model.capture_hidden_states(&p, &b).unwrap();
    assert_eq!(hs.len(), 3);
    assert!(hs.iter().all(|h| h.shape() == (16, 32)));
    let embed = p.get(&ParamKey::global(Role::Embed)).unwrap();
    for (pos, &t) in b.tokens().iter().enumerate() {
        assert_eq!(hs[0].row(pos), embed.row(t as usize));
    }
    assert_eq!(hs, model.capture_hidden_states(&p.clone(), &b).unwrap());
}

#[test]
fn perturbing_a_token_leaves_earlier_positions_unchanged() {
    let model = TinyLm::new(small_config(LayerKind::Adapter)).unwrap();
    let p = jittered_params(&model, 12);
    let b = random_batch(1, 10, 23, 7);
    let logits = model.logits(&p, &b).unwrap();
    for t in 1..10 {
        let mut toks = b.tokens().to_vec();
        toks[t] = (toks[t] + 5) % 23;
        let changed = model.logits(&p, &Batch::new(1, 10, toks).unwrap()).unwrap();
        for pos in 0..t {
            assert_eq!(logits.row(pos), changed.row(pos), "position {pos} moved when token {t} changed");
        }
    }
}

#[test]
fn loss_is_invariant_to_batch_row_order() {
    let model = TinyLm::new(small_config(LayerKind::Cola)).unwrap();
    let p = jittered_params(&model, 13);
    let b = random_batch(4, 6, 23, 8);
    let rows: Vec<Vec<u32>> = (0..4).rev().map(|r| b.row(r).to_vec()).collect();
    let permuted = Batch::from_rows(&rows).unwrap();
    let a = model.forward_loss(&p, &b).unwrap();
    let c = model.forward_loss(&p, &permuted).unwrap();
    assert!((a - c).abs() < 1e-12);
}

#[test]
fn full_rank_identity_cola_reproduces_dense_layer() {
    // With r = d_model = d_ff, identity nonlinearity and A = I, the CoLA
    // projection B·I·x equals a dense layer with W = B.
    let base = ModelConfig { d_model: 16, d_ff: 16, rank: 16, ..small_config(LayerKind::Dense) };
    let dense = TinyLm::new(base.clone()).unwrap();
    let cola_cfg = ModelConfig { layer_kind: LayerKind::Cola, cola_activation: ColaActivation::Identity, ..base };
    let cola = TinyLm::new(cola_cfg).unwrap();
    let pd = jittered_params(&dense, 21);
    let mut pc = cola.init_params();
    for (k, m) in pc.iter_mut() {
        *m = match k.part {
            Part::A => Matrix::identity(16),
            Part::B => pd.get(&k.dense_key()).unwrap().clone(),
            _ => pd.get(k).unwrap().clone(),
        };
    }
    let b = random_batch(2, 6, 23, 4);
    let diff = dense.logits(&pd, &b).unwrap().sub(&cola.logits(&pc, &b).unwrap()).unwrap().max_abs();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn rejects_out_of_vocab_tokens_and_long_sequences() {
    let model = TinyLm::new(small_config(LayerKind::Dense)).unwrap();
    let p = model.init_params();
    assert!(model.forward_loss(&p, &Batch::new(1, 3, vec![1, 2, 23]).unwrap()).is_err());
    assert!(model.forward_loss(&p, &random_batch(1, 17, 23, 0)).is_err());
}

#[test]
fn non_finite_weights_report_the_layer() {
    let model = TinyLm::new(small_config(LayerKind::Dense)).unwrap();
    let mut p = model.init_params();
    p.get_mut(&ParamKey::layer(1, Role::Wup, Part::Weight)).unwrap().as_mut_slice()[0] = f64::NAN;
    match model.forward_loss(&p, &random_batch(1, 4, 23, 0)) {
        Err(lrlens::Error::Numerical { layer }) => assert_eq!(layer, "layers.1"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}

mod reference {
    //! Straightforward scalar-loop decoder used as an independent oracle.
    use super::*;

    fn w(p: &ParamSet, name: &str) -> (Vec<f64>, usize, usize) {
        let m = p.get(&name.parse().unwrap()).unwrap();
        (m.as_slice().to_vec(), m.rows(), m.cols())
    }

    fn matvec(wt: &(Vec<f64>, usize, usize), x: &[f64]) -> Vec<f64> {
        let (data, rows, cols) = wt;
        (0..*rows).map(|i| (0..*cols).map(|j| data[i * cols + j] * x[j]).sum()).collect()
    }

    fn silu(z: f64) -> f64 {
        z / (1.0 + (-z).exp())
    }

    fn project(model: &TinyLm, p: &ParamSet, l: usize, role: &str, x: &[f64]) -> Vec<f64> {
        let cfg = model.config();
        let base = format!("layers.{l}.{role}");
        match cfg.layer_kind {
            LayerKind::Dense => matvec(&w(p, &base), x),
            LayerKind::Adapter => {
                let y = matvec(&w(p, &base), x);
                let u = matvec(&w(p, &format!("{base}.a")), x);
                let z = matvec(&w(p, &format!("{base}.b")), &u);
                y.iter().zip(z).map(|(a, b)| a + b).collect()
            }
            LayerKind::Cola => {
                let z: Vec<f64> = matvec(&w(p, &format!("{base}.a")), x).into_iter().map(silu).collect();
                matvec(&w(p, &format!("{base}.b")), &z)
            }
            LayerKind::Sltrain => {
                let u = matvec(&w(p, &format!("{base}.a")), x);
                let y = matvec(&w(p, &format!("{base}.b")), &u);
                let (s, rows, cols) = w(p, &format!("{base}.s"));
                let role: Role = role.parse().unwrap();
                let mask = model.sparse_mask(l, role).unwrap();
                (0..rows)
                    .map(|i| {
                        y[i] + (0..cols).filter(|&j| mask[i * cols + j]).map(|j| s[i * cols + j] * x[j]).sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    fn norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = (ms + eps).sqrt();
        x.iter().zip(g).map(|(v, gg)| v / r * gg).collect()
    }

    fn rope(x: &mut [f64], t: usize, cfg: &ModelConfig) {
        let hd = cfg.head_dim();
        for h in 0..cfg.n_heads {
            for i in 0..hd / 2 {
                let theta = t as f64 * cfg.rope_base.powf(-((2 * i) as f64) / hd as f64);
                let (a, b) = (x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
                x[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
                x[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }

    pub fn loss(model: &TinyLm, p: &ParamSet, batch: &Batch) -> f64 {
        let cfg = model.config();
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let embed = w(p, "embed");
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..batch.rows() {
            let toks = batch.row(r);
            let mut xs: Vec<Vec<f64>> =
                toks.iter().map(|&t| embed.0[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
            for l in 0..cfg.n_layers {
                let g1 = w(p, &format!("layers.{l}.attn_norm")).0;
                let g2 = w(p, &format!("layers.{l}.mlp_norm")).0;
                let xn: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &g1, cfg.norm_eps)).collect();
                let mut qs: Vec<Vec<f64>> = xn.iter().map(|x| project(model, p, l, "wq", x)).collect();
                let mut ks: Vec<Vec<f64>> = xn.iter().map(|x| project(model, p, l, "wk", x)).collect();
                let vs: Vec<Vec<f64>> = xn.iter().map(|x| project(model, p, l, "wv", x)).collect();
                for t in 0..toks.len() {
                    rope(&mut qs[t], t, cfg);
                    rope(&mut ks[t], t, cfg);
                }
                for t in 0..toks.len() {
                    let mut att = vec![0.0; d];
                    for h in 0..cfg.n_heads {
                        let sl = h * hd..(h + 1) * hd;
                        let scores: Vec<f64> = (0..=t)
                            .map(|s| {
                                qs[t][sl.clone()].iter().zip(&ks[s][sl.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                        for s in 0..=t {
                            let pr = (scores[s] - m).exp() / z;
                            for j in sl.clone() {
                                att[j] += pr * vs[s][j];
                            }
                        }
                    }
                    let o = project(model, p, l, "wo", &att);
                    for j in 0..d {
                        xs[t][j] += o[j];
                    }
                    let h2 = norm(&xs[t], &g2, cfg.norm_eps);
                    let gate = project(model, p, l, "wgate", &h2);
                    let up = project(model, p, l, "wup", &h2);
                    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
                    let dn = project(model, p, l, "wdown", &act);
                    for j in 0..d {
                        xs[t][j] += dn[j];
                    }
                }
            }
            let gf = w(p, "final_norm").0;
            let head = w(p, "head");
            for t in 0..toks.len() - 1 {
                let logits = matvec(&head, &norm(&xs[t], &gf, cfg.norm_eps));
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - logits[toks[t + 1] as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}

#[test]
fn forward_loss_matches_naive_reference_for_every_kind() {
    for kind in [LayerKind::Dense, LayerKind::Cola, LayerKind::Sltrain, LayerKind::Adapter] {
        let cfg = ModelConfig { d_model: 32, n_heads: 4, ..small_config(kind) };
        let model = TinyLm::new(cfg).unwrap();
        let p = jittered_params(&model, 31);
        let b = random_batch(2, 9, 23, 77);
        let fast = model.forward_loss(&p, &b).unwrap();
        let slow = reference::loss(&model, &p, &b);
        assert!((fast - slow).abs() < 1e-10, "{kind:?}: {fast} vs {slow}");
    }
}
