//! Finite-difference check of every differentiable operation and of the
//! whole network on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{
    grad_check, grad_check_store, lstm_cell, lstm_cell_projected, Activation, DiffError,
    GradCheckReport, LstmWeights, ParamStore, Tape, Tensor, Var,
};
use crate::model::{forward_with, init_params, ModelConfig, ModelError, Variant};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network check.
pub const MODEL_TOLERANCE: f64 = 1e-3;

const OP_STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Coordinates whose probes straddled a ReLU kink.
    pub skipped: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry reaches the loss.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, DiffError> {
    let r = tape.constant(&random(tape.shape(out), seed ^ 0x5EED));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: Build,
}

fn case(name: &'static str, inputs: &[&[usize]], build: Build) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[2, 3, 4], &[4, 3]], |t, v| {
            t.linear(v[0], v[1])
        }),
        case("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], |t, v| {
            t.batch_matmul(v[0], v[1], false)
        }),
        case("batch_matmul_t", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
            t.batch_matmul(v[0], v[1], true)
        }),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[3, 4]], |t, v| Ok(t.scale(v[0], -1.5))),
        case("add_bias", &[&[2, 3, 4], &[4]], |t, v| {
            t.add_bias(v[0], v[1])
        }),
        case("relu", &[&[12]], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[&[10]], |t, v| {
            Ok(t.activation(v[0], Activation::Sigmoid))
        }),
        case("tanh", &[&[10]], |t, v| {
            Ok(t.activation(v[0], Activation::Tanh))
        }),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        case("cross_entropy", &[&[4, 3]], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        case("conv1d_s1", &[&[2, 8, 3], &[3, 3, 2], &[2]], |t, v| {
            t.conv1d(v[0], v[1], v[2], 1, 1)
        }),
        case("conv1d_s2", &[&[2, 8, 3], &[3, 3, 2], &[2]], |t, v| {
            t.conv1d(v[0], v[1], v[2], 2, 1)
        }),
        case("reshape", &[&[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("slice", &[&[2, 3, 4]], |t, v| t.slice(v[0], 2, 1, 2)),
        case("index_axis", &[&[2, 3, 4]], |t, v| t.index_axis(v[0], 1, 2)),
        case("stack", &[&[2, 3], &[2, 3]], |t, v| {
            t.stack(&[v[0], v[1], v[0]], 1)
        }),
        case("mean_axis", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1)),
        case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        case("cc_apply", &[&[2, 3, 2, 1, 2], &[2, 3, 5, 2]], |t, v| {
            t.cc_apply(v[0], v[1])
        }),
        case(
            "cc_apply_per_slot",
            &[&[2, 3, 2, 5, 2], &[2, 3, 5, 2]],
            |t, v| t.cc_apply(v[0], v[1]),
        ),
        case(
            "lstm_cell",
            &[&[2, 3], &[2, 2], &[2, 2], &[3, 8], &[2, 8], &[8]],
            |t, v| {
                let w = LstmWeights {
                    w_ih: v[3],
                    w_hh: v[4],
                    bias: v[5],
                };
                let (h1, c1) = lstm_cell(t, v[0], v[1], v[2], &w)?;
                let (h2, c2) = lstm_cell(t, v[0], h1, c1, &w)?;
                t.add(h2, c2)
            },
        ),
        case(
            "lstm_cell_projected",
            &[&[2, 8], &[2, 2], &[2, 2], &[2, 8]],
            |t, v| {
                let (h, c) = lstm_cell_projected(t, v[0], v[1], v[2], v[3])?;
                t.add(h, c)
            },
        ),
    ]
}

fn row(name: &str, report: GradCheckReport, tolerance: f64) -> GradCheckRow {
    GradCheckRow {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance,
        coordinates: report.coordinates,
        skipped: report.skipped,
    }
}

/// Checks each operation against central differences in `f64`.
pub fn check_ops() -> Result<Vec<GradCheckRow>, DiffError> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = 100 + 10 * i as u64;
            let inputs: Vec<Tensor<f64>> = c
                .inputs
                .iter()
                .enumerate()
                .map(|(k, s)| random(s, seed + k as u64))
                .collect();
            let build = c.build;
            let report = grad_check(
                |tape, v| {
                    let out = build(tape, v)?;
                    if tape.shape(out).iter().product::<usize>() == 1 {
                        Ok(out)
                    } else {
                        project(tape, out, seed)
                    }
                },
                &inputs,
                OP_STEP,
            )?;
            Ok(row(c.name, report, OP_TOLERANCE))
        })
        .collect()
}

/// Checks the cross-entropy gradient of every parameter of a tiny network.
/// The compensation head is moved off its zero init so its gradient path
/// is exercised.
pub fn check_model(cfg: &ModelConfig, seed: u64) -> Result<GradCheckRow, ModelError> {
    cfg.validate()?;
    let mut store: ParamStore<f64> = init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCC);
    for name in ["cc.head.w", "cc.head.b"] {
        if let Some(id) = store.id(name) {
            for v in store.tensor_mut(id).data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let n = 2;
    let frames = random(&[n, cfg.nr, cfg.len, 2], seed + 1);
    let labels: Vec<usize> = (0..n).map(|i| (i * 2) % cfg.num_classes).collect();
    let report = grad_check_store(
        |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let r = tape.constant(&frames);
            let trace = forward_with(cfg, store, tape, r).map_err(|e| match e {
                ModelError::Diff(d) => d,
                other => DiffError::Argument {
                    op: "forward",
                    detail: other.to_string(),
                },
            })?;
            tape.cross_entropy(trace.logits, &labels)
        },
        &mut store,
        MODEL_STEP,
    )?;
    Ok(row(
        &format!("camd_{}", cfg.variant.name()),
        report,
        MODEL_TOLERANCE,
    ))
}

/// Every operation, then the tiny full network.
pub fn run_suite() -> Result<Vec<GradCheckRow>, ModelError> {
    let mut rows = check_ops()?;
    rows.push(check_model(
        &ModelConfig::tiny(3).with_variant(Variant::Full),
        21,
    )?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        let rows = check_ops().unwrap();
        assert_eq!(rows.len(), op_cases().len());
        for r in &rows {
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0, "{r:?}");
        }
    }

    #[test]
    fn every_variant_passes_end_to_end() {
        for v in Variant::ALL {
            let r = check_model(&ModelConfig::tiny(3).with_variant(v), 5).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
