//! Analytic gradients against central finite differences.
//!
//! The finite-difference side always runs in `f64`; the analytic side runs
//! in the scalar type under test, so a 32-bit check measures how far the
//! single-precision backward pass drifts from the true derivative.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::CAUSAL_FILL;
use super::{OpKind, Result, Scalar, Tape, Tensor, TensorError, Var};

/// A scalar function of named parameters that can be rebuilt at any precision.
pub trait Differentiable {
    fn parameters(&self) -> Vec<(String, Tensor<f64>)>;
    /// Builds the loss from `params`, registered in [`Self::parameters`] order.
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Gradients smaller than
    /// this are effectively compared by absolute error, since the rounding
    /// noise of a central difference on an `f64` loss is about `ε·|L|/step`.
    pub floor: f64,
    pub max_params: usize,
    #[serde(skip)]
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 3e-4,
            max_params: 5000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub bits: u32,
    pub tolerance: f64,
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// Largest offenders, worst first.
    pub worst: Vec<GradEntry>,
    /// Op kinds whose isolated check fails, with their error (only on failure).
    pub failing_ops: Vec<(OpKind, f64)>,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}-bit grad check {}: {} entries, max rel error {:.3e} (tol {:.1e})",
            self.bits,
            if self.passed { "passed" } else { "FAILED" },
            self.n_checked,
            self.max_rel_error,
            self.tolerance
        );
        for e in self.worst.iter().take(3) {
            s.push_str(&format!(
                "\n  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            ));
        }
        for (op, err) in &self.failing_ops {
            s.push_str(&format!("\n  suspect op {op}: rel error {err:.3e}"));
        }
        s
    }
}

pub(crate) fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss_f64<D: Differentiable>(model: &D, params: &[(String, Tensor<f64>)]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| tape.leaf(p)).collect();
    let l = model.loss(&mut tape, &vars)?;
    Ok(tape.value(l)[0])
}

/// Compares every parameter gradient computed at precision `T` with
/// central differences of the `f64` loss.
pub fn grad_check<T: Scalar, D: Differentiable>(model: &D, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = model.parameters();
    let total: usize = params.iter().map(|(_, p)| p.numel()).sum();
    if total > cfg.max_params {
        return Err(TensorError::Parameter {
            op: "grad_check",
            msg: format!("{total} parameters exceed the limit of {}", cfg.max_params),
        });
    }

    let mut tape = Tape::<T>::new();
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, p)| tape.param(&p.cast::<T>()))
        .collect();
    let loss = model.loss(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(&v, (_, p))| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    let ops = tape.ops_used();

    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(total);
    for pi in 0..params.len() {
        for idx in 0..params[pi].1.numel() {
            let orig = probe[pi].1.data[idx];
            probe[pi].1.data[idx] = orig + cfg.step;
            let up = loss_f64(model, &probe)?;
            probe[pi].1.data[idx] = orig - cfg.step;
            let down = loss_f64(model, &probe)?;
            probe[pi].1.data[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[pi][idx];
            entries.push(GradEntry {
                param: params[pi].0.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, cfg.floor),
            });
        }
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = entries.first().map_or(0.0, |e| e.rel_error);
    let passed = max_rel_error < cfg.tolerance && max_rel_error.is_finite();
    let failing_ops = if passed {
        Vec::new()
    } else {
        localize(&ops, cfg.fault)?
    };
    entries.truncate(10);
    Ok(GradCheckReport {
        passed,
        bits: T::BITS,
        tolerance: cfg.tolerance,
        n_checked: total,
        max_rel_error,
        worst: entries,
        failing_ops,
    })
}

fn localize(ops: &BTreeSet<OpKind>, fault: Option<OpKind>) -> Result<Vec<(OpKind, f64)>> {
    let mut out = Vec::new();
    for &op in ops {
        let err = op_unit_check(op, fault)?;
        if err > 1e-6 {
            out.push((op, err));
        }
    }
    Ok(out)
}

/// Isolated vector-Jacobian check of a single op kind on small random
/// inputs (64-bit). Returns the max relative error.
pub fn op_unit_check(kind: OpKind, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ kind as u64);
    let mut rand_t = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
            .with_grad()
    };
    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let (inputs, build): (Vec<Tensor<f64>>, Build) = match kind {
        OpKind::Leaf => return Ok(0.0),
        OpKind::Add => (vec![rand_t(&[2, 3]), rand_t(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        OpKind::AddBroadcast => (
            vec![rand_t(&[2, 3]), rand_t(&[3])],
            Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        ),
        OpKind::Mul => (vec![rand_t(&[2, 3]), rand_t(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        OpKind::MulBroadcast => (
            vec![rand_t(&[2, 3]), rand_t(&[3])],
            Box::new(|t, v| t.mul_broadcast(v[0], v[1])),
        ),
        OpKind::Scale => (vec![rand_t(&[4])], Box::new(|t, v| t.scale(v[0], 0.7))),
        OpKind::Matmul => (
            vec![rand_t(&[2, 2, 3]), rand_t(&[3, 2]), rand_t(&[2, 4, 2])],
            Box::new(|t, v| {
                let x = t.matmul(v[0], v[1])?;
                t.matmul_t(x, v[2])
            }),
        ),
        OpKind::Transpose => (vec![rand_t(&[2, 3, 2])], Box::new(|t, v| t.transpose(v[0], 0, 2))),
        OpKind::Reshape => (vec![rand_t(&[2, 3])], Box::new(|t, v| t.reshape(v[0], vec![3, 2]))),
        OpKind::Embedding => (vec![rand_t(&[4, 2])], Box::new(|t, v| t.embedding(v[0], &[1, 3, 1]))),
        OpKind::Softmax => (vec![rand_t(&[2, 3, 2])], Box::new(|t, v| t.softmax(v[0], 1))),
        OpKind::LayerNorm => (vec![rand_t(&[2, 5])], Box::new(|t, v| t.layer_norm(v[0], 1e-5))),
        OpKind::Gelu => (vec![rand_t(&[6])], Box::new(|t, v| t.gelu(v[0]))),
        OpKind::Dropout => (vec![rand_t(&[8])], Box::new(|t, v| t.dropout(v[0], 0.4, 11))),
        OpKind::CausalMask => (vec![rand_t(&[2, 3, 3])], Box::new(|t, v| t.causal_mask(v[0]))),
        OpKind::FillColumns => (
            vec![rand_t(&[2, 4])],
            Box::new(|t, v| t.fill_columns(v[0], &[false, true, false, true], -3.0)),
        ),
        OpKind::CrossEntropy => (
            vec![rand_t(&[3, 4])],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3], Some(0))),
        ),
        OpKind::Sum => (vec![rand_t(&[5])], Box::new(|t, v| t.sum(v[0]))),
    };

    let mut tape = Tape::<f64>::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = build(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(0.5..1.5)).collect();
    tape.backward_with(out, weights.clone())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let weighted = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
        let o = build(&mut t, &vs)?;
        // masked fill values are constant and would swamp the difference
        Ok(t.value(o)
            .iter()
            .zip(&weights)
            .filter(|(a, _)| **a != CAUSAL_FILL)
            .map(|(a, b)| a * b)
            .sum())
    };
    let h = 1e-5;
    let mut probe = inputs.clone();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = probe[i].data[j];
            probe[i].data[j] = orig + h;
            let up = weighted(&probe)?;
            probe[i].data[j] = orig - h;
            let down = weighted(&probe)?;
            probe[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(analytic[i][j], numeric, 1e-6));
        }
    }
    Ok(worst)
}
