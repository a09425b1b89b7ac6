//! Finite-difference verification of every differentiable op and of three
//! end-to-end composites: the encoder stack, the contrastive loss and the
//! full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::contrastive_loss;
use crate::corpus::{EncodedReport, PatchFeatures, BOS, CLS, EOS, PAD, SEP};
use crate::encoders::{Denominator, FusionConfig, ModelConfig};
use crate::error::Result;
use crate::model::{Ablation, Model};
use crate::tensor::{grad_check_with, OpKind, ParamStore, Tape, Tensor, Var};
use crate::trainer::TrainConfig;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const THRESHOLD: f64 = 1e-4;
/// Smallest denominator for parameter checks. Some parameter gradients are
/// exactly zero (attention key biases cancel in the softmax), where central
/// differences only see roundoff of order `ε·|f| / h`; the floor sits well
/// above that noise and scales with it.
pub const PARAM_FLOOR: f64 = 1e-6;

fn param_floor(loss: f64) -> f64 {
    PARAM_FLOOR.max(1e5 * f64::EPSILON * loss.abs() / STEP)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub threshold: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// One line per check.
    pub fn render(&self) -> String {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{:<4} {:<22} max rel error {:.3e}\n",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_error
                )
            })
            .collect()
    }
}

type Probe = fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<f64>;

/// Contracts a tensor-valued output to a scalar with fixed random weights,
/// so every output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

fn check_unary(
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
    x: Tensor,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let w = randn(rng, out_shape);
    grad_check_with(
        |t, v| {
            let y = f(t, v[0])?;
            weighted_sum(t, y, &w)
        },
        &[x],
        STEP,
        fault,
    )
}

fn check_binary(
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
    a: Tensor,
    b: Tensor,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let w = randn(rng, out_shape);
    grad_check_with(
        |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted_sum(t, y, &w)
        },
        &[a, b],
        STEP,
        fault,
    )
}

fn op_checks() -> Vec<(&'static str, Probe)> {
    vec![
        ("add", |r, f| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[3, 4]));
            check_binary(r, f, a, b, &[3, 4], |t, a, b| t.add(a, b))
        }),
        ("sub", |r, f| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[3, 4]));
            check_binary(r, f, a, b, &[3, 4], |t, a, b| t.sub(a, b))
        }),
        ("mul", |r, f| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[3, 4]));
            check_binary(r, f, a, b, &[3, 4], |t, a, b| t.mul(a, b))
        }),
        ("scale", |r, f| {
            let a = randn(r, &[2, 5]);
            check_unary(r, f, a, &[2, 5], |t, a| Ok(t.scale(a, -1.7)))
        }),
        ("add_row", |r, f| {
            let (a, b) = (randn(r, &[4, 3]), randn(r, &[3]));
            check_binary(r, f, a, b, &[4, 3], |t, a, b| t.add_row(a, b))
        }),
        ("add_const", |r, f| {
            let a = randn(r, &[3, 3]);
            let c = randn(r, &[3, 3]);
            check_unary(r, f, a, &[3, 3], move |t, a| t.add_const(a, &c))
        }),
        ("matmul", |r, f| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[4, 2]));
            check_binary(r, f, a, b, &[3, 2], |t, a, b| t.matmul(a, b))
        }),
        ("matmul_nt", |r, f| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[5, 4]));
            check_binary(r, f, a, b, &[3, 5], |t, a, b| t.matmul_nt(a, b))
        }),
        ("transpose", |r, f| {
            let a = randn(r, &[2, 5]);
            check_unary(r, f, a, &[5, 2], |t, a| t.transpose(a))
        }),
        ("softmax", |r, f| {
            let a = randn(r, &[3, 5]);
            check_unary(r, f, a, &[3, 5], |t, a| Ok(t.softmax(a)))
        }),
        ("relu", |r, f| {
            let a = away_from_zero(r, &[3, 4]);
            check_unary(r, f, a, &[3, 4], |t, a| Ok(t.relu(a)))
        }),
        ("gelu", |r, f| {
            let a = randn(r, &[3, 4]);
            check_unary(r, f, a, &[3, 4], |t, a| Ok(t.gelu(a)))
        }),
        ("layer_norm", |r, f| {
            let x = randn(r, &[3, 5]);
            let g = randn(r, &[5]);
            let b = randn(r, &[5]);
            let w = randn(r, &[3, 5]);
            grad_check_with(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    weighted_sum(t, y, &w)
                },
                &[x, g, b],
                STEP,
                f,
            )
        }),
        ("gather_rows", |r, f| {
            let a = randn(r, &[4, 3]);
            check_unary(r, f, a, &[5, 3], |t, a| t.gather_rows(a, &[2, 0, 2, 3, 1]))
        }),
        ("concat_rows", |r, f| {
            let (a, b) = (randn(r, &[2, 3]), randn(r, &[3, 3]));
            check_binary(r, f, a, b, &[5, 3], |t, a, b| t.concat_rows(&[a, b]))
        }),
        ("concat_cols", |r, f| {
            let (a, b) = (randn(r, &[3, 2]), randn(r, &[3, 4]));
            check_binary(r, f, a, b, &[3, 6], |t, a, b| t.concat_cols(&[a, b]))
        }),
        ("slice_cols", |r, f| {
            let a = randn(r, &[3, 6]);
            check_unary(r, f, a, &[3, 3], |t, a| t.slice_cols(a, 2, 3))
        }),
        ("mean_rows", |r, f| {
            let a = randn(r, &[4, 3]);
            check_unary(r, f, a, &[3], |t, a| t.mean(a, 0))
        }),
        ("mean_cols", |r, f| {
            let a = randn(r, &[4, 3]);
            check_unary(r, f, a, &[4], |t, a| t.mean(a, 1))
        }),
        ("sum", |r, f| {
            let a = randn(r, &[3, 3]);
            check_unary(r, f, a, &[], |t, a| Ok(t.sum(a)))
        }),
        ("reshape", |r, f| {
            let a = randn(r, &[2, 6]);
            check_unary(r, f, a, &[3, 4], |t, a| t.reshape(a, &[3, 4]))
        }),
        ("normalize_rows", |r, f| {
            let a = randn(r, &[3, 4]);
            check_unary(r, f, a, &[3, 4], |t, a| t.normalize_rows(a))
        }),
        ("cosine_sim", |r, f| {
            let (a, b) = (randn(r, &[5]), randn(r, &[5]));
            check_binary(r, f, a, b, &[], |t, a, b| t.cosine_sim(a, b))
        }),
        ("cross_entropy", |r, f| {
            let a = randn(r, &[4, 5]);
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(1..5)).collect();
            grad_check_with(|t, v| t.cross_entropy(v[0], &targets, Some(0)), &[a], STEP, f)
        }),
        ("masked_nll", |r, f| {
            let a = randn(r, &[3, 4]);
            let allowed: Vec<bool> = (0..12).map(|i| i % 4 != i / 4).collect();
            grad_check_with(|t, v| t.masked_nll(v[0], &[1, 2, 3], &allowed), &[a], STEP, f)
        }),
    ]
}

fn tiny_config(projected: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_text_layers: 1,
        n_image_layers: 1,
        n_decoder_layers: 1,
        d_ff: 12,
        max_len: 16,
        patch_dim: 3,
        vocab_size: 11,
        init_std: 0.4,
        fusion: FusionConfig {
            projected,
            scaled: projected,
        },
        ..ModelConfig::default()
    }
}

fn tiny_report(rng: &mut ChaCha8Rng, id: usize) -> EncodedReport {
    let mut word = || rng.gen_range(6..11);
    let token_ids = vec![CLS, word(), word(), SEP, CLS, word(), SEP, PAD];
    let target_ids = vec![BOS, word(), word(), word(), EOS];
    EncodedReport {
        id: format!("probe-{id}"),
        token_ids,
        cls_positions: vec![0, 4],
        target_ids,
        patches: PatchFeatures::new(Tensor::randn(&[3, 3], 1.0, rng)).expect("finite"),
    }
}

/// Compares backward parameter gradients of `loss` with central differences
/// on a few randomly chosen entries of every parameter.
fn param_check(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
    per_param: usize,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let l = loss(&mut tape, store)?;
    let floor = param_floor(tape.value(l).item());
    let grads = tape.backward(l)?;
    store.zero_grad();
    store.accumulate(&tape, &grads);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.value(l).item())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).numel();
        for _ in 0..per_param.min(n) {
            let i = rng.gen_range(0..n);
            let x0 = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = x0 + STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0 - STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k][i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn encoder_stack(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let mut model = Model::new(tiny_config(false), rng.gen())?;
    let report = tiny_report(rng, 0);
    let w_h = randn(rng, &[report.token_ids.len(), 8]);
    let w_c = randn(rng, &[3, 8]);
    let (visual, text, image) = (model.visual.clone(), model.text.clone(), model.image.clone());
    param_check(&mut model.store, rng, fault, 3, |tape, store| {
        let im = visual.forward(tape, store, &report.patches)?;
        let c = image.forward(tape, store, im, None)?;
        let (h, _) = text.forward(tape, store, &report.token_ids, &report.cls_positions, None)?;
        let a = weighted_sum(tape, h, &w_h)?;
        let b = weighted_sum(tape, c, &w_c)?;
        tape.add(a, b)
    })
}

fn contrastive(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let q = 3;
    let inputs: Vec<Tensor> = (0..2 * q).map(|_| randn(rng, &[4])).collect();
    let denominator = if rng.gen_bool(0.5) {
        Denominator::WithPositive
    } else {
        Denominator::NegativesOnly
    };
    grad_check_with(
        |t, v| contrastive_loss(t, &v[..q], &v[q..], 0.5, denominator),
        &inputs,
        STEP,
        fault,
    )
}

fn full_model(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let projected = rng.gen_bool(0.5);
    let mut model = Model::new(
        ModelConfig {
            tau: 0.5,
            ..tiny_config(projected)
        },
        rng.gen(),
    )?;
    let batch = vec![tiny_report(rng, 0), tiny_report(rng, 1)];
    let cfg = TrainConfig {
        batch_size: 2,
        lambda: 0.5,
        ablation: Ablation::BaseApDca,
        ..TrainConfig::default()
    };
    let snapshot = model.clone();
    let loss = move |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let m = Model {
            store: store.clone(),
            ..snapshot.clone()
        };
        let mut gens = Vec::new();
        let (mut zi, mut zt) = (Vec::new(), Vec::new());
        for r in &batch {
            let (l, g) = m.report_loss(tape, r, cfg.ablation)?;
            gens.push(l);
            zi.extend(g.z_image);
            zt.extend(g.z_text);
        }
        let gen = tape.add(gens[0], gens[1])?;
        let gen = tape.scale(gen, 0.5);
        let con = contrastive_loss(tape, &zi, &zt, m.config.tau, m.config.denominator)?;
        let con = tape.scale(con, cfg.lambda);
        tape.add(gen, con)
    };
    param_check(&mut model.store, rng, fault, 2, loss)
}

fn composite_checks() -> Vec<(&'static str, Probe)> {
    vec![
        ("encoder_stack", encoder_stack),
        ("contrastive_loss", contrastive),
        ("full_model_loss", full_model),
    ]
}

/// Runs every check once per seed. `fault` corrupts one backward rule on the
/// analytic side, which must make the affected checks fail.
pub fn gradcheck_all(seeds: &[u64], fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (name, probe) in op_checks().into_iter().chain(composite_checks()) {
        let mut worst: f64 = 0.0;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(name.len() as u64));
            worst = worst.max(probe(&mut rng, fault)?);
        }
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
            passed: worst <= THRESHOLD,
        });
    }
    Ok(GradcheckReport {
        seeds: seeds.len(),
        threshold: THRESHOLD,
        results,
    })
}

/// Op kinds that can be named for fault injection.
pub fn fault_kind(name: &str) -> Option<OpKind> {
    use OpKind::*;
    Some(match name {
        "add" => Add,
        "sub" => Sub,
        "mul" => Mul,
        "scale" => Scale,
        "add_row" => AddRow,
        "add_const" => AddConst,
        "matmul" => MatMul,
        "matmul_nt" => MatMulNT,
        "transpose" => Transpose,
        "softmax" => Softmax,
        "relu" => Relu,
        "gelu" => Gelu,
        "layer_norm" => LayerNorm,
        "gather_rows" => GatherRows,
        "concat_rows" => ConcatRows,
        "concat_cols" => ConcatCols,
        "slice_cols" => SliceCols,
        "mean" => Mean,
        "sum" => Sum,
        "reshape" => Reshape,
        "normalize_rows" => NormalizeRows,
        "cross_entropy" => CrossEntropy,
        "masked_nll" => MaskedNll,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_build_passes_on_two_seeds() {
        let report = gradcheck_all(&[0, 1], None).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.results.len(), op_checks().len() + 3);
        assert_eq!(report.render().lines().count(), report.results.len());
    }

    #[test]
    fn corrupted_softmax_is_caught() {
        let report = gradcheck_all(&[0], Some(OpKind::Softmax)).unwrap();
        assert!(!report.passed());
        let failing: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failing.contains(&"softmax"));
        assert!(failing.contains(&"full_model_loss"));
    }

    #[test]
    fn fault_names_resolve() {
        assert_eq!(fault_kind("matmul"), Some(OpKind::MatMul));
        assert_eq!(fault_kind("nope"), None);
    }
}
