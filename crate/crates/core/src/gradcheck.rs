//! Central finite-difference verification of every backward rule.
//!
//! Each registered op gets a randomized scenario: inputs become parameters,
//! the op output reduces to a scalar through a fixed-weight sum, and the
//! analytic gradients are compared against central differences. The same
//! machinery drives the `gradcheck` CLI subcommand and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Every tape op with a backward rule, as exposed to the checker.
pub const ALL_OPS: &[&str] = &[
    "matmul",
    "matvec",
    "vecmat",
    "add",
    "sub",
    "elementwise_mul",
    "mul_scalar",
    "scale",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "softmax",
    "dropout",
    "mean",
    "sum",
    "abs",
    "square",
    "ln",
    "clamp",
    "rows_mean",
    "weighted_sum",
];

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// |a - n| <= abs_tol + rel_tol * max(|a|, |n|)
pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_TOLERANCE + REL_TOLERANCE * analytic.abs().max(numeric.abs())
}

/// Central finite differences of a scalar function over every parameter
/// element. The closure must be a deterministic function of the set.
pub fn finite_diff_grads(
    params: &mut ParamSet,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let id = ParamId(i);
        let n = params.get(id).numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = params.get(id).data[j];
            params.get_mut(id).data[j] = orig + h;
            let plus = f(params)?;
            params.get_mut(id).data[j] = orig - h;
            let minus = f(params)?;
            params.get_mut(id).data[j] = orig;
            g[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare analytic grads (accumulated in the set) against FD grads.
pub fn compare_grads(params: &ParamSet, numeric: &[Vec<f64>]) -> (f64, f64, bool) {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut passed = true;
    for (i, (_, _, t)) in params.iter().enumerate() {
        let analytic = t.grad.as_ref().expect("grad buffer");
        for (a, n) in analytic.iter().zip(&numeric[i]) {
            let abs = (a - n).abs();
            max_abs = max_abs.max(abs);
            let denom = a.abs().max(n.abs());
            if denom > ABS_TOLERANCE {
                max_rel = max_rel.max(abs / denom);
            }
            passed &= within_tolerance(*a, *n);
        }
    }
    (max_abs, max_rel, passed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Keep values away from the kink so FD stays valid for relu/abs/clamp.
fn rand_vec_off_kink(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() > 10.0 * FD_STEP) {
                break v;
            }
        })
        .collect()
}

struct Scenario {
    params: ParamSet,
    build: Box<dyn Fn(&mut Tape, &ParamSet, &[ParamId]) -> Result<Var>>,
    ids: Vec<ParamId>,
}

fn scenario(op: &'static str, rng: &mut ChaCha8Rng) -> Scenario {
    let mut params = ParamSet::new();
    let mut ids = Vec::new();
    let mut add = |params: &mut ParamSet, ids: &mut Vec<ParamId>, name: &str, t: Tensor| {
        ids.push(params.add(name, t));
    };

    let reduce_weights: Vec<f64> = rand_vec(rng, 64);
    let rw = move |tape: &mut Tape, out: Var| -> Result<Var> {
        let n = tape.value(out).len();
        tape.weighted_sum(out, reduce_weights[..n].to_vec())
    };

    let build: Box<dyn Fn(&mut Tape, &ParamSet, &[ParamId]) -> Result<Var>> = match op {
        "matmul" => {
            add(&mut params, &mut ids, "a", Tensor::new(vec![3, 4], rand_vec(rng, 12)).unwrap());
            add(&mut params, &mut ids, "b", Tensor::new(vec![4, 2], rand_vec(rng, 8)).unwrap());
            Box::new(move |tape, ps, ids| {
                let a = tape.param(ps, ids[0])?;
                let b = tape.param(ps, ids[1])?;
                let y = tape.matmul(a, b)?;
                rw(tape, y)
            })
        }
        "matvec" => {
            add(&mut params, &mut ids, "w", Tensor::new(vec![3, 5], rand_vec(rng, 15)).unwrap());
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 5)));
            Box::new(move |tape, ps, ids| {
                let w = tape.param(ps, ids[0])?;
                let x = tape.param(ps, ids[1])?;
                let y = tape.matvec(w, x)?;
                rw(tape, y)
            })
        }
        "vecmat" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 4)));
            add(&mut params, &mut ids, "m", Tensor::new(vec![4, 3], rand_vec(rng, 12)).unwrap());
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let m = tape.param(ps, ids[1])?;
                let y = tape.vecmat(x, m)?;
                rw(tape, y)
            })
        }
        "add" | "sub" | "elementwise_mul" => {
            add(&mut params, &mut ids, "a", Tensor::vector(rand_vec(rng, 6)));
            add(&mut params, &mut ids, "b", Tensor::vector(rand_vec(rng, 6)));
            let kind = op;
            Box::new(move |tape, ps, ids| {
                let a = tape.param(ps, ids[0])?;
                let b = tape.param(ps, ids[1])?;
                let y = match kind {
                    "add" => tape.add(a, b)?,
                    "sub" => tape.sub(a, b)?,
                    _ => tape.mul(a, b)?,
                };
                rw(tape, y)
            })
        }
        "mul_scalar" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 5)));
            add(&mut params, &mut ids, "s", Tensor::scalar(rng.gen_range(-1.5..1.5)));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let s = tape.param(ps, ids[1])?;
                let y = tape.mul_scalar(x, s)?;
                rw(tape, y)
            })
        }
        "scale" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 5)));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.scale(x, 0.37)?;
                rw(tape, y)
            })
        }
        "concat" => {
            add(&mut params, &mut ids, "a", Tensor::vector(rand_vec(rng, 3)));
            add(&mut params, &mut ids, "b", Tensor::vector(rand_vec(rng, 4)));
            Box::new(move |tape, ps, ids| {
                let a = tape.param(ps, ids[0])?;
                let b = tape.param(ps, ids[1])?;
                let y = tape.concat(&[a, b])?;
                rw(tape, y)
            })
        }
        "stack" => {
            add(&mut params, &mut ids, "a", Tensor::vector(rand_vec(rng, 4)));
            add(&mut params, &mut ids, "b", Tensor::vector(rand_vec(rng, 4)));
            Box::new(move |tape, ps, ids| {
                let a = tape.param(ps, ids[0])?;
                let b = tape.param(ps, ids[1])?;
                let y = tape.stack(&[a, b])?;
                rw(tape, y)
            })
        }
        "sigmoid" | "tanh" | "square" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 6)));
            let kind = op;
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = match kind {
                    "sigmoid" => tape.sigmoid(x)?,
                    "tanh" => tape.tanh(x)?,
                    _ => tape.square(x)?,
                };
                rw(tape, y)
            })
        }
        "relu" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec_off_kink(rng, 6, &[0.0])));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.relu(x)?;
                rw(tape, y)
            })
        }
        "leaky_relu" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec_off_kink(rng, 6, &[0.0])));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.leaky_relu(x, 0.2)?;
                rw(tape, y)
            })
        }
        "softmax" => {
            add(&mut params, &mut ids, "x", Tensor::new(vec![2, 4], rand_vec(rng, 8)).unwrap());
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.softmax(x)?;
                rw(tape, y)
            })
        }
        "dropout" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 8)));
            let mask: Vec<bool> = (0..8).map(|_| rng.gen::<f64>() < 0.7).collect();
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.dropout_with_mask(x, 0.7, mask.clone())?;
                rw(tape, y)
            })
        }
        "mean" | "sum" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 7)));
            let kind = op;
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = if kind == "mean" { tape.mean(x)? } else { tape.sum(x)? };
                rw(tape, y)
            })
        }
        "abs" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec_off_kink(rng, 6, &[0.0])));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.abs(x)?;
                rw(tape, y)
            })
        }
        "ln" => {
            let data: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
            add(&mut params, &mut ids, "x", Tensor::vector(data));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.ln(x)?;
                rw(tape, y)
            })
        }
        "clamp" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec_off_kink(rng, 6, &[-0.8, 0.8])));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                let y = tape.clamp(x, -0.8, 0.8)?;
                rw(tape, y)
            })
        }
        "rows_mean" => {
            add(&mut params, &mut ids, "m", Tensor::new(vec![4, 3], rand_vec(rng, 12)).unwrap());
            Box::new(move |tape, ps, ids| {
                let m = tape.param(ps, ids[0])?;
                // index 1 repeats so scatter accumulation is exercised
                let y = tape.rows_mean(m, vec![0, 1, 1, 3])?;
                rw(tape, y)
            })
        }
        "weighted_sum" => {
            add(&mut params, &mut ids, "x", Tensor::vector(rand_vec(rng, 6)));
            Box::new(move |tape, ps, ids| {
                let x = tape.param(ps, ids[0])?;
                tape.weighted_sum(x, vec![0.3, -1.2, 0.5, 2.0, -0.1, 0.9])
            })
        }
        other => panic!("unknown op in gradcheck registry: {other}"),
    };

    Scenario { params, build, ids }
}

/// Check one op at one seed. `fault` corrupts that op's backward rule, which
/// the checker must then report as a failure (test fixture only).
pub fn check_op_with_fault(op: &'static str, seed: u64, fault: bool) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0p as u64);
    let Scenario { mut params, build, ids } = scenario(op, &mut rng);

    let mut tape = Tape::new();
    if fault {
        tape.inject_backward_fault(op);
    }
    let loss = build(&mut tape, &params, &ids)?;
    tape.backward(loss)?;
    params.zero_grads();
    tape.accumulate_param_grads(&mut params)?;

    let numeric = finite_diff_grads(
        &mut params,
        |ps| {
            let mut t = Tape::new();
            let loss = build(&mut t, ps, &ids)?;
            Ok(t.scalar_value(loss))
        },
        FD_STEP,
    )?;
    let (max_abs, max_rel, passed) = compare_grads(&params, &numeric);
    Ok(OpCheck { op, max_abs_err: max_abs, max_rel_err: max_rel, passed })
}

pub fn check_op(op: &'static str, seed: u64) -> Result<OpCheck> {
    check_op_with_fault(op, seed, false)
}

/// Check every registered op across a seed range; each op reports its worst
/// errors over the seeds.
pub fn check_all_ops(seeds: impl Iterator<Item = u64> + Clone) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for op in ALL_OPS {
        let mut worst = OpCheck { op, max_abs_err: 0.0, max_rel_err: 0.0, passed: true };
        for seed in seeds.clone() {
            let c = check_op(op, seed)?;
            worst.max_abs_err = worst.max_abs_err.max(c.max_abs_err);
            worst.max_rel_err = worst.max_rel_err.max(c.max_rel_err);
            worst.passed &= c.passed;
        }
        out.push(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_across_twenty_seeds() {
        let checks = check_all_ops(0..20).unwrap();
        assert_eq!(checks.len(), ALL_OPS.len());
        for c in checks {
            assert!(
                c.passed,
                "op {} failed gradcheck: abs={:.3e} rel={:.3e}",
                c.op, c.max_abs_err, c.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_backward_rule_fails_only_that_op() {
        let bad = check_op_with_fault("elementwise_mul", 3, true).unwrap();
        assert!(!bad.passed, "fault injection must be detected");
        // Sibling ops stay green with no fault present.
        for op in ["add", "sigmoid", "matvec"] {
            assert!(check_op(op, 3).unwrap().passed);
        }
    }

    #[test]
    fn registry_covers_every_checked_op() {
        for op in ALL_OPS {
            assert!(check_op(op, 0).is_ok(), "op {op} missing a scenario");
        }
    }
}
