//! Finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_row, Tape, Var};
use crate::error::Result;
use crate::loss::{self, DistillLossSpec, LossVariant};
use crate::model::{LmModel, LmState, ModelConfig};
use crate::regularization::{self, DropoutSpec, RegContext};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients near zero are
/// judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// `(input, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step, tol)
}

/// Checks the gradient of a scalar function of several tensors against
/// central differences, element by element.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, input.numel());
        for (e, &grad) in analytic.iter().enumerate() {
            let orig = input.data()[e];
            probe[ti].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad, numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = Some((ti, e));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so that
/// every output element influences the loss differently.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut rng, tape.value(y).shape(), -1.0, 1.0);
    let m = tape.mul_const(y, &w)?;
    Ok(tape.sum(m))
}

/// One named op scenario: random inputs for a seed plus the scalar function.
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn softplus_grad(x: f64, _y: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scenarios covering every op the tape records.
pub fn op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            inputs: |r| {
                vec![
                    random_tensor(r, &[3, 4], -1.0, 1.0),
                    random_tensor(r, &[4, 2], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 1)
            },
        },
        OpCheck {
            name: "transpose",
            inputs: |r| vec![random_tensor(r, &[3, 2], -1.0, 1.0)],
            f: |t, v| {
                let y = t.transpose(v[0])?;
                weighted_sum(t, y, 2)
            },
        },
        OpCheck {
            name: "add",
            inputs: |r| {
                vec![
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.square(y);
                weighted_sum(t, y, 3)
            },
        },
        OpCheck {
            name: "sub",
            inputs: |r| {
                vec![
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.square(y);
                weighted_sum(t, y, 4)
            },
        },
        OpCheck {
            name: "mul",
            inputs: |r| {
                vec![
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, 5)
            },
        },
        OpCheck {
            name: "add_row",
            inputs: |r| vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[4], -1.0, 1.0)],
            f: |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.tanh(y);
                weighted_sum(t, y, 6)
            },
        },
        OpCheck {
            name: "mul_col",
            inputs: |r| {
                vec![
                    random_tensor(r, &[3, 4], -1.0, 1.0),
                    random_tensor(r, &[3, 1], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.mul_col(v[0], v[1])?;
                weighted_sum(t, y, 7)
            },
        },
        OpCheck {
            name: "mul_const",
            inputs: |r| vec![random_tensor(r, &[2, 5], -1.0, 1.0)],
            f: |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                let mask = random_tensor(&mut rng, &[2, 5], 0.0, 2.0);
                let y = t.mul_const(v[0], &mask)?;
                let y = t.square(y);
                weighted_sum(t, y, 8)
            },
        },
        OpCheck {
            name: "scale+add_scalar",
            inputs: |r| vec![random_tensor(r, &[2, 2], -1.0, 1.0)],
            f: |t, v| {
                let y = t.scale(v[0], -1.7);
                let y = t.add_scalar(y, 0.3);
                let y = t.square(y);
                weighted_sum(t, y, 9)
            },
        },
        OpCheck {
            name: "sigmoid",
            inputs: |r| vec![random_tensor(r, &[3, 3], -3.0, 3.0)],
            f: |t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y, 10)
            },
        },
        OpCheck {
            name: "tanh",
            inputs: |r| vec![random_tensor(r, &[3, 3], -3.0, 3.0)],
            f: |t, v| {
                let y = t.tanh(v[0]);
                weighted_sum(t, y, 11)
            },
        },
        OpCheck {
            name: "exp",
            inputs: |r| vec![random_tensor(r, &[2, 3], -1.0, 1.0)],
            f: |t, v| {
                let y = t.exp(v[0]);
                weighted_sum(t, y, 12)
            },
        },
        OpCheck {
            name: "log",
            inputs: |r| vec![random_tensor(r, &[2, 3], 0.5, 2.0)],
            f: |t, v| {
                let y = t.log(v[0])?;
                weighted_sum(t, y, 13)
            },
        },
        OpCheck {
            name: "square",
            inputs: |r| vec![random_tensor(r, &[2, 3], -1.0, 1.0)],
            f: |t, v| {
                let y = t.square(v[0]);
                weighted_sum(t, y, 14)
            },
        },
        OpCheck {
            name: "map",
            inputs: |r| vec![random_tensor(r, &[2, 3], -2.0, 2.0)],
            f: |t, v| {
                let y = t.map(v[0], |x| x.exp().ln_1p(), softplus_grad);
                weighted_sum(t, y, 15)
            },
        },
        OpCheck {
            name: "softmax_rows",
            inputs: |r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)],
            f: |t, v| {
                let y = t.softmax_rows(v[0])?;
                weighted_sum(t, y, 16)
            },
        },
        OpCheck {
            name: "log_softmax_rows",
            inputs: |r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)],
            f: |t, v| {
                let y = t.log_softmax_rows(v[0])?;
                weighted_sum(t, y, 17)
            },
        },
        OpCheck {
            name: "sum",
            inputs: |r| vec![random_tensor(r, &[2, 4], -1.0, 1.0)],
            f: |t, v| {
                let y = t.square(v[0]);
                Ok(t.sum(y))
            },
        },
        OpCheck {
            name: "mean",
            inputs: |r| vec![random_tensor(r, &[2, 4], -1.0, 1.0)],
            f: |t, v| {
                let y = t.square(v[0]);
                t.mean(y)
            },
        },
        OpCheck {
            name: "slice_cols",
            inputs: |r| vec![random_tensor(r, &[3, 6], -1.0, 1.0)],
            f: |t, v| {
                let a = t.slice_cols(v[0], 1, 4)?;
                let b = t.slice_cols(v[0], 3, 6)?;
                let y = t.mul(a, b)?;
                weighted_sum(t, y, 18)
            },
        },
        OpCheck {
            name: "concat_rows",
            inputs: |r| {
                vec![
                    random_tensor(r, &[2, 3], -1.0, 1.0),
                    random_tensor(r, &[1, 3], -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.concat_rows(&[v[0], v[1], v[0]], 3)?;
                let y = t.tanh(y);
                weighted_sum(t, y, 19)
            },
        },
        OpCheck {
            name: "gather_rows",
            inputs: |r| vec![random_tensor(r, &[4, 3], -1.0, 1.0)],
            f: |t, v| {
                let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
                let y = t.square(y);
                weighted_sum(t, y, 20)
            },
        },
        OpCheck {
            name: "mixture_logsumexp",
            inputs: |r| {
                vec![
                    random_tensor(r, &[3, 2], -1.0, 1.0),
                    random_tensor(r, &[3, 4], -2.0, 2.0),
                    random_tensor(r, &[3, 4], -2.0, 2.0),
                ]
            },
            f: |t, v| {
                let prior = t.log_softmax_rows(v[0])?;
                let a = t.log_softmax_rows(v[1])?;
                let b = t.log_softmax_rows(v[2])?;
                let y = t.mixture_logsumexp(prior, &[a, b])?;
                weighted_sum(t, y, 21)
            },
        },
        OpCheck {
            name: "weighted_nll",
            inputs: |r| vec![random_tensor(r, &[3, 4], -2.0, 2.0)],
            f: |t, v| {
                let lp = t.log_softmax_rows(v[0])?;
                t.weighted_nll(lp, &[2, 0, 3], &[0.5, 1.0, 2.0])
            },
        },
        OpCheck {
            name: "soft_cross_entropy",
            inputs: |r| vec![random_tensor(r, &[3, 4], -2.0, 2.0)],
            f: |t, v| {
                let q = Tensor::from_rows(&[
                    vec![0.1, 0.2, 0.3, 0.4],
                    vec![0.0, 1.0, 0.0, 0.0],
                    vec![0.25, 0.25, 0.25, 0.25],
                ])?;
                let lp = t.log_softmax_rows(v[0])?;
                t.soft_cross_entropy(lp, &q)
            },
        },
    ]
}

/// Runs one scenario across seeds, keeping the worst report.
pub fn run_op_check(check: &OpCheck, seeds: &[u64], step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (check.inputs)(&mut rng);
        let report = grad_check_many(check.f, &inputs, step, tol)?;
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_err > w.max_rel_err || report.max_rel_err.is_nan())
        {
            worst = Some(report);
        }
    }
    let mut worst = worst.expect("at least one seed");
    worst.pass = worst.max_rel_err <= tol;
    Ok(worst)
}

/// Tiny model (V=10, one 8-wide LSTM layer, two experts) with every dropout
/// site active, trust-regularized loss against a random teacher and AR/TAR,
/// checked with respect to all parameters.
pub fn model_grad_check(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        dropout: DropoutSpec {
            input_rate: 0.2,
            output_rate: 0.25,
            hidden_rate: 0.3,
            embed_rate: 0.1,
            other_rate: 0.2,
            ar_weight: 2.0,
            tar_weight: 1.0,
        },
        ..ModelConfig::default()
    };
    let model = LmModel::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51));
    let (batch, steps, v) = (2, 3, config.vocab_size);
    let tokens: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..v)).collect();
    let q_rows: Vec<Vec<f64>> = (0..batch * steps)
        .map(|_| {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut p = vec![0.0; v];
            softmax_row(&logits, &mut p);
            p
        })
        .collect();
    let q = Tensor::from_rows(&q_rows)?;
    let mut state = LmState::zeros(&config, batch);
    for (h, c) in &mut state.layers {
        *h = random_tensor(&mut rng, h.shape(), -0.5, 0.5);
        *c = random_tensor(&mut rng, c.shape(), -0.5, 0.5);
    }
    let spec = DistillLossSpec {
        variant: LossVariant::TrustReg,
        alpha: 0.1,
        temperature: 1.0,
    };
    let inputs: Vec<Tensor> = model.tensors().to_vec();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = model.bind_vars(tape, vars.to_vec())?;
        let mut ctx = RegContext::train(seed);
        ctx.begin_sequence();
        let out = model.forward(tape, &bound, &tokens, batch, &state, &mut ctx)?;
        let l = loss::distill_loss(tape, out.log_probs, &spec, &targets, Some(&q))?;
        let d = &config.dropout;
        match regularization::activation_reg(tape, &out.dropped_outputs, &out.raw_outputs, d.ar_weight, d.tar_weight)? {
            Some(p) => tape.add(l, p),
            None => Ok(l),
        }
    };
    grad_check_many(f, &inputs, step, tol)
}
