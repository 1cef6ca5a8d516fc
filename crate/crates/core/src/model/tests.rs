use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{antenna_block, embed, lstm_final, reglu_ffn, Scope};
use super::*;
use crate::diffcore::{grad_check_store, DiffError, ParamStore, Tape, Tensor, Var};
use crate::sigsynth::{apply_channel, draw_channel, SignalRng};

fn random_frames(n: usize, nr: usize, len: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * nr * len * 2)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::new(&[n, nr, len, 2], data).unwrap()
}

fn small(nt: usize, len: usize, variant: Variant) -> ModelConfig {
    ModelConfig {
        nt,
        nr: nt,
        len,
        ..ModelConfig::tiny(3)
    }
    .with_variant(variant)
}

/// Reorders the antenna axis (axis 1) of a `[N×A×...]` buffer.
fn permute_antennas(data: &[f64], n: usize, a: usize, perm: &[usize]) -> Vec<f64> {
    let inner = data.len() / (n * a);
    let mut out = Vec::with_capacity(data.len());
    for b in 0..n {
        for &src in perm {
            let start = (b * a + src) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn shape_pipeline() {
    for n in [2, 4] {
        for len in [64, 128, 256] {
            let cfg = small(n, len, Variant::Full);
            let model = Camd::<f64>::new(cfg.clone(), 1).unwrap();
            let mut tape = Tape::new();
            let r = tape.constant(&random_frames(1, n, len, 2));
            let t = model.forward_traced(&mut tape, r).unwrap();
            let le = len / 4;
            assert_eq!(tape.shape(t.compensation.unwrap()), [1, n, n, 1, 2]);
            assert_eq!(tape.shape(t.compensated.unwrap()), [1, n, len, 2]);
            assert_eq!(tape.shape(t.embedded), [1, n, le, cfg.width]);
            assert_eq!(tape.shape(t.attended.unwrap()), [1, n, le, cfg.width]);
            assert_eq!(tape.shape(t.temporal.unwrap()), [1, n, cfg.width]);
            assert_eq!(tape.shape(t.logits), [1, 3]);
        }
    }
}

#[test]
fn default_config_gives_finite_logits() {
    let cfg = ModelConfig {
        num_classes: 5,
        ..ModelConfig::default()
    };
    let model = Camd::<f32>::new(cfg, 3).unwrap();
    let frame: Vec<f32> = random_frames(1, 2, 256, 4)
        .data()
        .iter()
        .map(|&v| v as f32)
        .collect();
    let logits = model.predict_logits(&[&frame]).unwrap();
    assert_eq!(logits.len(), 1);
    assert_eq!(logits[0].len(), 5);
    assert!(logits[0].iter().all(|v| v.is_finite()));
}

#[test]
fn every_variant_runs() {
    for v in Variant::ALL {
        let cfg = small(2, 32, v);
        let model = Camd::<f64>::new(cfg, 5).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(&random_frames(3, 2, 32, 6));
        let logits = model.forward(&mut tape, r).unwrap();
        assert_eq!(tape.shape(logits), [3, 3], "{v}");
        assert!(tape.value(logits).iter().all(|x| x.is_finite()), "{v}");
    }
}

#[test]
fn rejects_mismatched_and_non_finite_input() {
    let model = Camd::<f64>::new(ModelConfig::tiny(3), 1).unwrap();
    let mut tape = Tape::new();
    let r = tape.constant(&random_frames(1, 2, 32, 1));
    assert!(matches!(
        model.forward(&mut tape, r),
        Err(ModelError::Input(_))
    ));
    let mut bad = random_frames(1, 2, 16, 1);
    bad.data_mut()[3] = f64::NAN;
    let r = tape.constant(&bad);
    assert!(matches!(
        model.forward(&mut tape, r),
        Err(ModelError::NonFinite)
    ));
    assert!(model.cc_predict_frame(bad.data()).is_err());
}

// ---- compensation ----------------------------------------------------------

#[test]
fn cc_predict_starts_at_identity() {
    let cfg = small(2, 64, Variant::Full);
    let model = Camd::<f64>::new(cfg, 9).unwrap();
    let frame = random_frames(1, 2, 64, 10);
    let h = model.cc_predict_frame(frame.data()).unwrap();
    assert_eq!(h, CompensationTensor::identity(2, 64));
    assert_eq!((h.nr, h.nt, h.len), (2, 2, 64));
    assert_eq!(h.to_interleaved().len(), 2 * 2 * 64 * 2);
}

#[test]
fn cc_predict_is_constant_over_time() {
    let cfg = small(2, 32, Variant::Full);
    let mut model = Camd::<f64>::new(cfg, 9).unwrap();
    let id = model.params().id("cc.head.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in model.params_mut().tensor_mut(id).data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let h = model
        .cc_predict_frame(random_frames(1, 2, 32, 2).data())
        .unwrap();
    assert!(h.is_time_constant());
    assert_ne!(h, CompensationTensor::identity(2, 32));
}

#[test]
fn cc_predict_needs_the_module() {
    let model = Camd::<f64>::new(small(2, 32, Variant::NoCc), 0).unwrap();
    assert!(matches!(
        model.cc_predict_frame(&[0.0; 2 * 32 * 2]),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn cc_apply_identity_is_exact() {
    let r = random_frames(1, 3, 20, 4);
    let out = cc_apply(&CompensationTensor::identity(3, 20), r.data()).unwrap();
    assert_eq!(out, r.data());
}

#[test]
fn cc_apply_by_j_rotates() {
    let r = random_frames(1, 2, 10, 5);
    let id = CompensationTensor::<f64>::identity(2, 10);
    let j = CompensationTensor::new(2, 2, 10, id.h_q.clone(), id.h_i.clone()).unwrap();
    let out = cc_apply(&j, r.data()).unwrap();
    for (o, x) in out.chunks_exact(2).zip(r.data().chunks_exact(2)) {
        assert_eq!(o[0], -x[1]);
        assert_eq!(o[1], x[0]);
    }
}

#[test]
fn cc_apply_rejects_bad_shapes() {
    let h = CompensationTensor::<f64>::identity(2, 8);
    assert!(cc_apply(&h, &[0.0; 10]).is_err());
    assert!(CompensationTensor::<f64>::new(2, 2, 8, vec![0.0; 3], vec![0.0; 32]).is_err());
}

proptest! {
    #[test]
    fn cc_apply_is_linear(seed in any::<u64>(), a in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || (0..2 * 2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let h = CompensationTensor::new(2, 2, 6, plane(), plane()).unwrap();
        let r = random_frames(1, 2, 6, seed ^ 1);
        let scaled: Vec<f64> = r.data().iter().map(|v| a * v).collect();
        let lhs = cc_apply(&h, &scaled).unwrap();
        let rhs: Vec<f64> = cc_apply(&h, r.data()).unwrap().iter().map(|v| a * v).collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-10);
    }
}

type Complex = (f64, f64);

fn cmul(a: Complex, b: Complex) -> Complex {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn cdiv(a: Complex, b: Complex) -> Complex {
    let d = b.0 * b.0 + b.1 * b.1;
    ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
}

/// Gauss–Jordan inverse with partial pivoting; `None` when singular.
#[allow(clippy::needless_range_loop)]
fn complex_inverse(m: &[Vec<Complex>]) -> Option<Vec<Vec<Complex>>> {
    let n = m.len();
    let mut a: Vec<Vec<Complex>> = m
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let mut row = row.clone();
            row.extend((0..n).map(|c| if c == r { (1.0, 0.0) } else { (0.0, 0.0) }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            let mx = a[x][col].0.hypot(a[x][col].1);
            let my = a[y][col].0.hypot(a[y][col].1);
            mx.total_cmp(&my)
        })?;
        if a[pivot][col].0.hypot(a[pivot][col].1) < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v = cdiv(*v, p);
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in 0..2 * n {
                    let t = cmul(f, a[col][c]);
                    a[r][c].0 -= t.0;
                    a[r][c].1 -= t.1;
                }
            }
        }
    }
    Some(a.into_iter().map(|row| row[n..].to_vec()).collect())
}

fn frobenius(m: &[Vec<Complex>]) -> f64 {
    m.iter()
        .flatten()
        .map(|z| z.0 * z.0 + z.1 * z.1)
        .sum::<f64>()
        .sqrt()
}

#[test]
fn pseudo_inverse_recovers_symbols() {
    let mut rng = SignalRng::new(2024);
    let len = 16;
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    while accepted < 1000 {
        let n = if accepted % 2 == 0 { 2 } else { 4 };
        let ch = draw_channel(n, n, &mut rng).unwrap();
        let m: Vec<Vec<Complex>> = (0..n)
            .map(|j| (0..n).map(|i| ch.coeff(j, i)).collect())
            .collect();
        let Some(inv) = complex_inverse(&m) else {
            continue;
        };
        // ‖H‖_F·‖H⁻¹‖_F bounds the spectral condition number from above
        if frobenius(&m) * frobenius(&inv) >= 10.0 {
            continue;
        }
        accepted += 1;
        let s: Vec<f64> = (0..n * len * 2).map(|_| rng.normal()).collect();
        let r = apply_channel(&ch, &s).unwrap();
        // r̂_i = Σ_j Ĥ^{j,i} r_j, so Ĥ^{j,i} = (H⁻¹)_{i,j}
        let mut h_i = Vec::new();
        let mut h_q = Vec::new();
        for j in 0..n {
            for row in inv.iter() {
                let z = row[j];
                h_i.extend(std::iter::repeat_n(z.0, len));
                h_q.extend(std::iter::repeat_n(z.1, len));
            }
        }
        let h = CompensationTensor::new(n, n, len, h_i, h_q).unwrap();
        let rhat = cc_apply(&h, &r).unwrap();
        let err: f64 = rhat.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = s.iter().map(|v| v * v).sum();
        worst = worst.max((err / norm).sqrt());
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

// ---- embedding, attention, temporal stage ----------------------------------

fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, seed)
}

#[test]
fn embed_shrinks_and_is_equivariant() {
    let cfg = small(4, 64, Variant::NoCc);
    let store = store_for(&cfg, 3);
    let x = random_frames(2, 4, 64, 7);
    let perm = [2, 0, 3, 1];
    let run = |data: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut s = Scope {
            tape: &mut tape,
            store: &store,
        };
        let v = s.tape.constant(data);
        let y = embed(&mut s, "", v, &cfg.conv_stack(), cfg.padding()).unwrap();
        (tape.shape(y).to_vec(), tape.value(y).to_vec())
    };
    let (shape, base) = run(&x);
    assert_eq!(shape, [2, 4, 16, cfg.width]);
    let px = Tensor::new(&[2, 4, 64, 2], permute_antennas(x.data(), 2, 4, &perm)).unwrap();
    let (_, permuted) = run(&px);
    assert!(max_abs_diff(&permuted, &permute_antennas(&base, 2, 4, &perm)) <= 1e-12);
}

#[test]
fn embed_of_zero_with_zero_biases_is_zero() {
    let cfg = small(2, 64, Variant::NoCc);
    let store = store_for(&cfg, 3);
    let mut tape = Tape::new();
    let mut s = Scope {
        tape: &mut tape,
        store: &store,
    };
    let v = s.tape.constant(&Tensor::zeros(&[1, 2, 64, 2]));
    let y = embed(&mut s, "", v, &cfg.conv_stack(), cfg.padding()).unwrap();
    assert!(tape.value(y).iter().all(|&x| x == 0.0));
}

#[test]
fn embed_rejects_short_frames() {
    let cfg = ModelConfig {
        len: 8,
        ..ModelConfig::tiny(3)
    };
    assert!(cfg.validate().is_err());
    assert!(Camd::<f64>::new(cfg, 0).is_err());
}

fn block_output(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    heads: usize,
) -> (Vec<usize>, Vec<f64>, Vec<usize>, Vec<f64>) {
    let mut tape = Tape::new();
    let mut s = Scope {
        tape: &mut tape,
        store,
    };
    let v = s.tape.constant(x);
    let out = antenna_block(&mut s, "block0", v, heads).unwrap();
    (
        tape.shape(out.x).to_vec(),
        tape.value(out.x).to_vec(),
        tape.shape(out.attention).to_vec(),
        tape.value(out.attention).to_vec(),
    )
}

fn random_features(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = small(4, 64, Variant::NoCc);
    let store = store_for(&cfg, 11);
    for seed in 0..5 {
        let x = random_features(&[2, 4, 5, cfg.width], seed);
        let (_, _, shape, attn) = block_output(&store, &x, cfg.heads);
        assert_eq!(shape, [2 * 5 * cfg.heads, 4, 4]);
        for row in attn.chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_antenna_attention_is_one() {
    let cfg = small(4, 64, Variant::NoCc);
    let store = store_for(&cfg, 11);
    let x = random_features(&[1, 1, 3, cfg.width], 1);
    let (shape, _, ashape, attn) = block_output(&store, &x, cfg.heads);
    assert_eq!(shape, [1, 1, 3, cfg.width]);
    assert_eq!(ashape, [3 * cfg.heads, 1, 1]);
    assert!(attn.iter().all(|&a| a == 1.0));
}

#[test]
fn antenna_block_is_equivariant() {
    let cfg = small(4, 64, Variant::NoCc);
    let store = store_for(&cfg, 12);
    let x = random_features(&[2, 4, 6, cfg.width], 3);
    let perm = [3, 1, 0, 2];
    let (_, base, _, _) = block_output(&store, &x, cfg.heads);
    let px = Tensor::new(x.shape(), permute_antennas(x.data(), 2, 4, &perm)).unwrap();
    let (_, permuted, _, _) = block_output(&store, &px, cfg.heads);
    assert!(max_abs_diff(&permuted, &permute_antennas(&base, 2, 4, &perm)) <= 1e-5);
}

#[test]
fn antenna_block_rejects_indivisible_heads() {
    let cfg = small(2, 64, Variant::NoCc);
    let store = store_for(&cfg, 1);
    let mut tape = Tape::new();
    let mut s = Scope {
        tape: &mut tape,
        store: &store,
    };
    let v = s.tape.constant(&Tensor::zeros(&[1, 2, 3, cfg.width]));
    assert!(matches!(
        antenna_block(&mut s, "block0", v, 3),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn reglu_by_hand() {
    let mut store = ParamStore::new();
    for w in ["w1", "w2", "w3"] {
        store.add(
            format!("f.ffn.{w}"),
            Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        );
    }
    let mut tape = Tape::new();
    let mut s = Scope {
        tape: &mut tape,
        store: &store,
    };
    let x = s.tape.constant(&Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let y = reglu_ffn(&mut s, "f", x).unwrap();
    assert_eq!(tape.value(y), [4.0]);
    let mut tape = Tape::new();
    let mut s = Scope {
        tape: &mut tape,
        store: &store,
    };
    let x = s.tape.constant(&Tensor::new(&[1, 1], vec![-2.0]).unwrap());
    let y = reglu_ffn(&mut s, "f", x).unwrap();
    assert_eq!(tape.value(y), [0.0]);
}

#[test]
fn identical_antennas_pool_to_their_state() {
    let cfg = small(4, 64, Variant::NoCc);
    let model = Camd::<f64>::new(cfg.clone(), 4).unwrap();
    let one = random_frames(1, 1, 64, 8);
    let mut data = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(one.data());
    }
    let mut tape = Tape::new();
    let r = tape.constant(&Tensor::new(&[1, 4, 64, 2], data).unwrap());
    let t = model.forward_traced(&mut tape, r).unwrap();
    let state = tape.value(t.temporal.unwrap()).to_vec();
    let pooled = tape.value(t.pooled);
    assert!(max_abs_diff(pooled, &state[..cfg.width]) <= 1e-12);
}

#[test]
fn temporal_stage_is_invariant() {
    let cfg = small(4, 64, Variant::NoCc);
    let store = store_for(&cfg, 5);
    let x = random_features(&[2, 4, 6, cfg.width], 9);
    let perm = [1, 3, 2, 0];
    let run = |data: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut s = Scope {
            tape: &mut tape,
            store: &store,
        };
        let v = s.tape.constant(data);
        let h = lstm_final(&mut s, "", v, 2).unwrap();
        let pooled = s.tape.mean_axis(h, 1).unwrap();
        tape.value(pooled).to_vec()
    };
    let base = run(&x);
    let px = Tensor::new(x.shape(), permute_antennas(x.data(), 2, 4, &perm)).unwrap();
    assert!(max_abs_diff(&run(&px), &base) <= 1e-5);
}

#[test]
fn no_cc_logits_are_permutation_invariant() {
    let cfg = small(4, 64, Variant::NoCc);
    let model = Camd::<f64>::new(cfg, 6).unwrap();
    let x = random_frames(2, 4, 64, 13);
    let perm = [2, 3, 1, 0];
    let px = permute_antennas(x.data(), 2, 4, &perm);
    let frames = |d: &[f64]| {
        let per = 4 * 64 * 2;
        model
            .predict_logits(&[&d[..per], &d[per..]])
            .unwrap()
            .concat()
    };
    assert!(max_abs_diff(&frames(x.data()), &frames(&px)) <= 1e-5);
}

#[test]
fn zero_classifier_gives_uniform_softmax() {
    let cfg = ModelConfig {
        num_classes: 5,
        ..small(2, 32, Variant::Full)
    };
    let mut model = Camd::<f64>::new(cfg, 1).unwrap();
    let id = model.params().id("classifier.w").unwrap();
    model.params_mut().tensor_mut(id).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let r = tape.constant(&random_frames(3, 2, 32, 1));
    let logits = model.forward(&mut tape, r).unwrap();
    let probs = tape.softmax(logits).unwrap();
    assert!(tape.value(probs).iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let loss = tape.cross_entropy(logits, &[0, 3, 4]).unwrap();
    assert!((tape.value(loss)[0] - 5f64.ln()).abs() < 1e-12);
}

// ---- gradients -------------------------------------------------------------

fn as_diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => DiffError::Argument {
            op: "model",
            detail: other.to_string(),
        },
    }
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = ModelConfig::tiny(3);
    let mut store = init_params::<f64>(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for name in ["cc.head.w", "cc.head.b"] {
        let id = store.id(name).unwrap();
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let frames = random_frames(2, 2, 16, 23);
    let labels = [0, 2];
    let report = grad_check_store(
        |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var, DiffError> {
            let r = tape.constant(&frames);
            let t = forward_with(&cfg, store, tape, r).map_err(as_diff)?;
            tape.cross_entropy(t.logits, &labels)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.coordinates, count_params(&cfg));
    assert!(
        report.max_rel_error <= 1e-3,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn gradient_reaches_compensation_head() {
    let cfg = ModelConfig::tiny(3);
    let mut model = Camd::<f64>::new(cfg, 2).unwrap();
    let mut tape = Tape::new();
    let r = tape.constant(&random_frames(4, 2, 16, 3));
    let logits = model.forward(&mut tape, r).unwrap();
    let loss = tape.cross_entropy(logits, &[0, 1, 2, 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    tape.accumulate_param_grads(&grads, model.params_mut());
    let id = model.params().id("cc.head.w").unwrap();
    let g = model.params().tensor(id).grad().unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
}

// ---- complexity and checkpoints --------------------------------------------

#[test]
fn single_layer_counts() {
    assert_eq!(linear_params(4, 3, true), 15);
    assert_eq!(conv_params(3, 2, 4), 28);
}

#[test]
fn count_params_matches_serialized_tables() {
    for v in Variant::ALL {
        for cfg in [ModelConfig::default().with_variant(v), small(4, 64, v)] {
            let model = Camd::<f32>::new(cfg.clone(), 0).unwrap();
            let bytes = encode_checkpoint(&model).unwrap();
            assert_eq!(
                checkpoint_scalar_count(&bytes).unwrap(),
                count_params(&cfg),
                "{v}"
            );
            assert_eq!(model.num_params(), count_params(&cfg), "{v}");
        }
    }
}

#[test]
fn default_config_size_is_near_the_published_figure() {
    let cfg = ModelConfig::default();
    let params = count_params(&cfg) as f64;
    let flops = estimate_flops(&cfg) as f64;
    // sanity reference only; the architecture is not fully pinned down
    assert!((params / 211_130.0 - 1.0).abs() < 0.15, "{params}");
    assert!(flops > 22.2e6 && flops < 4.0 * 22.2e6, "{flops}");
}

#[test]
fn single_domain_variants_match_complexity() {
    let full = count_params(&ModelConfig::default().with_variant(Variant::NoCc)) as f64;
    for v in [
        Variant::TransformerOnly,
        Variant::LstmOnly,
        Variant::CnnOnly,
    ] {
        let p = count_params(&ModelConfig::default().with_variant(v)) as f64;
        assert!((p / full - 1.0).abs() < 0.35, "{v}: {p} vs {full}");
    }
}

#[test]
fn initialization_is_deterministic() {
    let cfg = ModelConfig::tiny(4);
    let a = encode_checkpoint(&Camd::<f32>::new(cfg.clone(), 7).unwrap()).unwrap();
    let b = encode_checkpoint(&Camd::<f32>::new(cfg.clone(), 7).unwrap()).unwrap();
    let c = encode_checkpoint(&Camd::<f32>::new(cfg, 8).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn initializers_follow_layout() {
    let cfg = ModelConfig::tiny(3);
    let store = init_params::<f64>(&cfg, 1);
    let get = |n: &str| store.tensor(store.id(n).unwrap()).data().to_vec();
    let b = get("lstm0.b");
    let c = cfg.width;
    assert!(b[..c].iter().all(|&v| v == 0.0));
    assert!(b[c..2 * c].iter().all(|&v| v == 1.0));
    assert!(b[2 * c..].iter().all(|&v| v == 0.0));
    assert!(get("block1.ln2.gamma").iter().all(|&v| v == 1.0));
    assert!(get("cc.head.w").iter().all(|&v| v == 0.0));
    let bound = 1.0 / (c as f64).sqrt();
    let w = get("block0.attn.wq");
    assert!(w.iter().all(|v| v.abs() <= bound) && w.iter().any(|&v| v != 0.0));
    let names: Vec<_> = param_layout(&cfg).into_iter().map(|s| s.name).collect();
    assert_eq!(names.first().unwrap(), "cc.embed.proj.w");
    assert_eq!(names.last().unwrap(), "classifier.b");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cmdw");
    let model = Camd::<f32>::new(ModelConfig::tiny(3), 5).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back: Camd<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(
        encode_checkpoint(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );
    let frame = vec![0.25f32; 2 * 16 * 2];
    assert_eq!(
        back.predict_logits(&[&frame]).unwrap(),
        model.predict_logits(&[&frame]).unwrap()
    );
}

fn param_entry(name: &str, dims: &[u32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let n: u32 = dims.iter().product();
    out.extend(std::iter::repeat_n(0u8, 4 * n as usize));
    out
}

#[test]
fn checkpoint_rejects_bad_tables() {
    let model = Camd::<f32>::new(ModelConfig::tiny(3), 5).unwrap();
    let good = encode_checkpoint(&model).unwrap();

    let mut unknown = good.clone();
    unknown.extend(param_entry("mystery", &[2]));
    assert!(matches!(
        decode_checkpoint::<f32>(&unknown),
        Err(ModelError::UnknownParam(n)) if n == "mystery"
    ));

    let mut duplicate = good.clone();
    duplicate.extend(param_entry("classifier.b", &[3]));
    assert!(matches!(
        decode_checkpoint::<f32>(&duplicate),
        Err(ModelError::DuplicateParam(_))
    ));

    let mut wrong_shape = good.clone();
    wrong_shape.extend(param_entry("classifier.b", &[4]));
    assert!(matches!(
        decode_checkpoint::<f32>(&wrong_shape),
        Err(ModelError::ShapeMismatch { .. })
    ));

    // drop the final parameter (classifier.b, 3 floats)
    let entry = param_entry("classifier.b", &[3]).len();
    let missing = &good[..good.len() - entry];
    assert!(matches!(
        decode_checkpoint::<f32>(missing),
        Err(ModelError::MissingParam(n)) if n == "classifier.b"
    ));

    assert!(matches!(
        decode_checkpoint::<f32>(&good[..good.len() - 2]),
        Err(ModelError::Truncated(_))
    ));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(
        decode_checkpoint::<f32>(&magic),
        Err(ModelError::BadMagic)
    ));

    let mut version = good;
    version[4] = 9;
    assert!(matches!(
        decode_checkpoint::<f32>(&version),
        Err(ModelError::Version { found: 9, .. })
    ));
}
