//! Cross-entropy, teacher cross-entropy, fixed interpolation and the
//! trust-regularized combination.
//!
//! All losses take log-probabilities (the model's native output) and return a
//! scalar averaged over positions. Natural log throughout.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cap on the teacher's probability of the hard label inside the trust weight,
/// so that `log(1 − Q[y])` stays finite.
pub const TRUST_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    CeOnly,
    KlOnly,
    FixedInterp,
    TrustReg,
}

impl LossVariant {
    pub fn needs_teacher(self) -> bool {
        self != LossVariant::CeOnly
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::CeOnly => "ce_only",
            LossVariant::KlOnly => "kl_only",
            LossVariant::FixedInterp => "fixed_interp",
            LossVariant::TrustReg => "trust_reg",
        })
    }
}

impl FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce_only" => Ok(LossVariant::CeOnly),
            "kl_only" => Ok(LossVariant::KlOnly),
            "fixed_interp" => Ok(LossVariant::FixedInterp),
            "trust_reg" => Ok(LossVariant::TrustReg),
            _ => Err(format!("expected ce_only|kl_only|fixed_interp|trust_reg, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillLossSpec {
    pub variant: LossVariant,
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for DistillLossSpec {
    fn default() -> Self {
        DistillLossSpec {
            variant: LossVariant::CeOnly,
            alpha: 0.1,
            temperature: 1.0,
        }
    }
}

impl DistillLossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 1.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be >= 1, got {}",
                self.temperature
            )));
        }
        match self.variant {
            LossVariant::FixedInterp if !(0.0..=1.0).contains(&self.alpha) => Err(Error::config(format!(
                "fixed_interp needs alpha in [0, 1], got {}",
                self.alpha
            ))),
            LossVariant::TrustReg if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(Error::config(format!("trust_reg needs alpha > 0, got {}", self.alpha)))
            }
            _ => Ok(()),
        }
    }
}

/// Teacher distributions `q [N × V]` with the hard labels `y [N]`.
#[derive(Clone, Debug)]
pub struct SoftLabelBatch {
    q: Tensor,
    y: Vec<usize>,
}

impl SoftLabelBatch {
    pub fn new(q: Tensor, y: Vec<usize>) -> Result<Self> {
        let (n, v) = q.dims2()?;
        if n != y.len() {
            return Err(Error::Dimension {
                op: "soft_labels",
                lhs: q.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        for (i, &label) in y.iter().enumerate().take(n) {
            let s: f64 = q.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-6 || q.row(i).iter().any(|&p| p < 0.0) {
                return Err(Error::Data(format!("teacher row {i} is not a distribution (sum {s})")));
            }
            if label >= v {
                return Err(Error::Data(format!("hard label {label} at position {i} out of range")));
            }
        }
        Ok(SoftLabelBatch { q, y })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }
}

/// `R(y) = −α · log(1 − Q[y])` with `Q[y]` capped at `1 − TRUST_EPS`.
pub fn trust_weight(q_row: &[f64], y: usize, alpha: f64) -> f64 {
    let qy = q_row[y].min(1.0 - TRUST_EPS);
    -alpha * (1.0 - qy).ln()
}

/// Mean of `−log P[i, y[i]]`.
pub fn ce_loss(tape: &mut Tape, log_probs: Var, y: &[usize]) -> Result<Var> {
    let ones = vec![1.0; y.len()];
    tape.weighted_nll(log_probs, y, &ones)
}

/// Mean of `−Σ_x Q[i, x] · log P[i, x]`; differs from `KL(Q‖P)` by the
/// teacher entropy, a constant in the student's parameters.
pub fn kl_loss(tape: &mut Tape, log_probs: Var, q: &Tensor) -> Result<Var> {
    tape.soft_cross_entropy(log_probs, q)
}

/// `α · CE + (1 − α) · KL`.
pub fn fixed_interp_loss(tape: &mut Tape, log_probs: Var, batch: &SoftLabelBatch, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "fixed_interp needs alpha in [0, 1], got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return ce_loss(tape, log_probs, batch.y());
    }
    if alpha == 0.0 {
        return kl_loss(tape, log_probs, batch.q());
    }
    let ce = ce_loss(tape, log_probs, batch.y())?;
    let kl = kl_loss(tape, log_probs, batch.q())?;
    let ce = tape.scale(ce, alpha);
    let kl = tape.scale(kl, 1.0 - alpha);
    tape.add(ce, kl)
}

/// Per position `R(y_i) · (−log P[i, y_i]) + (−Σ_x Q[i, x] log P[i, x])`,
/// averaged. `R` is computed from the fixed teacher and carries no gradient.
pub fn tr_loss(tape: &mut Tape, log_probs: Var, batch: &SoftLabelBatch, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::config(format!("trust_reg needs alpha > 0, got {alpha}")));
    }
    let q = batch.q();
    let weights: Vec<f64> = batch
        .y()
        .iter()
        .enumerate()
        .map(|(i, &y)| trust_weight(q.row(i), y, alpha))
        .collect();
    let ce = tape.weighted_nll(log_probs, batch.y(), &weights)?;
    let kl = kl_loss(tape, log_probs, q)?;
    tape.add(ce, kl)
}

/// The training objective selected by `spec`. `q` is required for every
/// variant except `ce_only`.
pub fn distill_loss(
    tape: &mut Tape,
    log_probs: Var,
    spec: &DistillLossSpec,
    y: &[usize],
    q: Option<&Tensor>,
) -> Result<Var> {
    if spec.variant == LossVariant::CeOnly {
        return ce_loss(tape, log_probs, y);
    }
    let q = q.ok_or_else(|| Error::config(format!("loss {} needs teacher distributions", spec.variant)))?;
    let batch = SoftLabelBatch::new(q.clone(), y.to_vec())?;
    match spec.variant {
        LossVariant::KlOnly => kl_loss(tape, log_probs, batch.q()),
        LossVariant::FixedInterp => fixed_interp_loss(tape, log_probs, &batch, spec.alpha),
        LossVariant::TrustReg => tr_loss(tape, log_probs, &batch, spec.alpha),
        LossVariant::CeOnly => unreachable!(),
    }
}

/// `softmax(logits / τ)` row-wise, `τ ≥ 1`.
pub fn temperature_softmax(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau >= 1.0) {
        return Err(Error::config(format!("temperature must be >= 1, got {tau}")));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("temperature_softmax: non-finite logits".into()));
    }
    let (m, n) = logits.dims2()?;
    let mut out = vec![0.0; m * n];
    let mut scaled = vec![0.0; n];
    for i in 0..m {
        for (s, &x) in scaled.iter_mut().zip(logits.row(i)) {
            *s = x / tau;
        }
        autodiff::softmax_row(&scaled, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over rows of `KL(Q‖P) = Σ_x Q ln(Q / P)`, the distillation fidelity
/// metric. `log_p` holds student log-probabilities.
pub fn mean_kl_divergence(q: &Tensor, log_p: &Tensor) -> Result<f64> {
    let (m, n) = q.dims2()?;
    if log_p.dims2()? != (m, n) {
        return Err(Error::Dimension {
            op: "mean_kl_divergence",
            lhs: q.shape().to_vec(),
            rhs: log_p.shape().to_vec(),
        });
    }
    if m == 0 {
        return Err(Error::Data("KL over zero positions".into()));
    }
    let mut total = 0.0;
    for i in 0..m {
        for (&qx, &lp) in q.row(i).iter().zip(log_p.row(i)) {
            if qx > 0.0 {
                total += qx * (qx.ln() - lp);
            }
        }
    }
    Ok(total / m as f64)
}
