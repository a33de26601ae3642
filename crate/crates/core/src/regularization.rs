//! Dropout variants and activation regularization.
//!
//! Masks use inverted scaling (survivors divided by `1 - rate`) so evaluation
//! needs no mask at all. Within one sequence a mask for a given role is drawn
//! once and reused at every time step.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    /// Variational dropout on the embedded input to the first LSTM layer.
    pub input_rate: f64,
    /// Variational dropout on every LSTM layer's output.
    pub output_rate: f64,
    /// DropConnect on the hidden-to-hidden weights.
    pub hidden_rate: f64,
    /// Whole-word dropout on the embedding matrix.
    pub embed_rate: f64,
    /// Variational dropout on the mixture-of-softmaxes latent.
    pub other_rate: f64,
    pub ar_weight: f64,
    pub tar_weight: f64,
}

impl Default for DropoutSpec {
    /// Everything off.
    fn default() -> Self {
        DropoutSpec {
            input_rate: 0.0,
            output_rate: 0.0,
            hidden_rate: 0.0,
            embed_rate: 0.0,
            other_rate: 0.0,
            ar_weight: 0.0,
            tar_weight: 0.0,
        }
    }
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("input_rate", self.input_rate),
            ("output_rate", self.output_rate),
            ("hidden_rate", self.hidden_rate),
            ("embed_rate", self.embed_rate),
            ("other_rate", self.other_rate),
        ] {
            check_rate(r).map_err(|_| Error::config(format!("{name} must be in [0, 1), got {r}")))?;
        }
        for (name, w) in [("ar_weight", self.ar_weight), ("tar_weight", self.tar_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        *self == DropoutSpec::default()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a mask is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Embedding,
    Input,
    Output,
    DropConnect,
    Latent,
}

/// Per-sequence mask cache for one training loop.
#[derive(Debug)]
pub struct RegContext {
    mode: Mode,
    seed: u64,
    sequence: u64,
    masks: HashMap<(Role, usize), Tensor>,
}

impl RegContext {
    pub fn new(mode: Mode, seed: u64) -> Self {
        RegContext {
            mode,
            seed,
            sequence: 0,
            masks: HashMap::new(),
        }
    }

    pub fn eval() -> Self {
        RegContext::new(Mode::Eval, 0)
    }

    pub fn train(seed: u64) -> Self {
        RegContext::new(Mode::Train, seed)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    /// Starts a new sequence: cached masks are dropped and the next masks
    /// come from a fresh stream.
    pub fn begin_sequence(&mut self) {
        self.sequence += 1;
        self.masks.clear();
    }

    fn rng_for(&self, role: Role, layer: usize) -> ChaCha8Rng {
        let role_id = role as u64 + 1;
        let mut h = self.seed ^ 0x6a09_e667_f3bc_c908;
        for v in [self.sequence, role_id, layer as u64] {
            h = splitmix(h ^ v);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    fn cached(
        &mut self,
        role: Role,
        layer: usize,
        shape: &[usize],
        make: impl FnOnce(&mut ChaCha8Rng) -> Tensor,
    ) -> Result<Tensor> {
        if let Some(m) = self.masks.get(&(role, layer)) {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: "mask reuse",
                    lhs: m.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            return Ok(m.clone());
        }
        let mut rng = self.rng_for(role, layer);
        let m = make(&mut rng);
        self.masks.insert((role, layer), m.clone());
        Ok(m)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn bernoulli_scaled(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..n)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

/// Elementwise Bernoulli(1 - rate) mask scaled by `1 / (1 - rate)`.
///
/// Eval mode and `rate == 0` give all ones.
pub fn variational_mask(shape: &[usize], rate: f64, ctx: &mut RegContext, role: Role, layer: usize) -> Result<Tensor> {
    check_rate(rate)?;
    if !ctx.is_train() || rate == 0.0 {
        return Ok(Tensor::full(shape, 1.0));
    }
    let n = shape.iter().product();
    ctx.cached(role, layer, shape, |rng| {
        Tensor::new(shape.to_vec(), bernoulli_scaled(rng, n, rate)).expect("shape")
    })
}

/// Weight-level mask for recurrent weights, or `None` when it would be the
/// identity.
pub fn drop_connect_mask(shape: &[usize], rate: f64, ctx: &mut RegContext, layer: usize) -> Result<Option<Tensor>> {
    check_rate(rate)?;
    if !ctx.is_train() || rate == 0.0 {
        return Ok(None);
    }
    variational_mask(shape, rate, ctx, Role::DropConnect, layer).map(Some)
}

/// Applies DropConnect to a weight matrix outside the tape.
pub fn drop_connect(weights: &Tensor, rate: f64, ctx: &mut RegContext, layer: usize) -> Result<Tensor> {
    match drop_connect_mask(weights.shape(), rate, ctx, layer)? {
        None => Ok(weights.clone()),
        Some(mask) => {
            let data = weights.data().iter().zip(mask.data()).map(|(w, m)| w * m).collect();
            Tensor::new(weights.shape().to_vec(), data)
        }
    }
}

/// Mask of shape `[vocab, dim]` whose rows are all zero (dropped word) or all
/// `1 / (1 - rate)`; `None` when it would be the identity.
pub fn embedding_mask(vocab: usize, dim: usize, rate: f64, ctx: &mut RegContext) -> Result<Option<Tensor>> {
    check_rate(rate)?;
    if !ctx.is_train() || rate == 0.0 {
        return Ok(None);
    }
    let mask = ctx.cached(Role::Embedding, 0, &[vocab, dim], |rng| {
        let rows = bernoulli_scaled(rng, vocab, rate);
        let data = rows.iter().flat_map(|&r| std::iter::repeat_n(r, dim)).collect();
        Tensor::matrix(vocab, dim, data).expect("shape")
    })?;
    Ok(Some(mask))
}

/// Applies embedding dropout to an embedding matrix outside the tape.
pub fn embedding_dropout(embedding: &Tensor, rate: f64, ctx: &mut RegContext) -> Result<Tensor> {
    let (v, e) = embedding.dims2()?;
    match embedding_mask(v, e, rate, ctx)? {
        None => Ok(embedding.clone()),
        Some(mask) => {
            let data = embedding.data().iter().zip(mask.data()).map(|(w, m)| w * m).collect();
            Tensor::matrix(v, e, data)
        }
    }
}

/// Multiplies `x` by a mask on the tape, skipping the op for `None`.
pub fn apply_mask(tape: &mut Tape, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        Some(m) => tape.mul_const(x, m),
        None => Ok(x),
    }
}

/// `ar_w · mean(dropped²) + tar_w · mean((raw[t+1] − raw[t])²)` over
/// `[batch×T×H]` activations; the temporal term is 0 when `T == 1`.
pub fn activation_penalty(h_dropped: &Tensor, h_raw: &Tensor, ar_w: f64, tar_w: f64) -> Result<f64> {
    let [b, t, h] = *h_raw.shape() else {
        return Err(Error::Contract(format!(
            "activations must be [batch, T, H], got {:?}",
            h_raw.shape()
        )));
    };
    if h_dropped.shape() != h_raw.shape() {
        return Err(Error::Dimension {
            op: "activation_penalty",
            lhs: h_dropped.shape().to_vec(),
            rhs: h_raw.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(Error::Contract("activation penalty needs T >= 1".into()));
    }
    let ar = h_dropped.data().iter().map(|v| v * v).sum::<f64>() / h_dropped.numel() as f64;
    let mut tar = 0.0;
    if t > 1 {
        let raw = h_raw.data();
        let mut s = 0.0;
        for bi in 0..b {
            for ti in 0..t - 1 {
                for hi in 0..h {
                    let d = raw[(bi * t + ti + 1) * h + hi] - raw[(bi * t + ti) * h + hi];
                    s += d * d;
                }
            }
        }
        tar = s / (b * (t - 1) * h) as f64;
    }
    Ok(ar_w * ar + tar_w * tar)
}

/// Tape form of [`activation_penalty`] over per-step `[batch×H]` outputs.
/// Returns `None` when both weights are zero.
pub fn activation_reg(tape: &mut Tape, dropped: &[Var], raw: &[Var], ar_w: f64, tar_w: f64) -> Result<Option<Var>> {
    if dropped.is_empty() || raw.len() != dropped.len() {
        return Err(Error::Contract(
            "activation regularization needs T >= 1 aligned steps".into(),
        ));
    }
    let mut total: Option<Var> = None;
    if ar_w > 0.0 {
        let cols = tape.value(dropped[0]).dims2()?.1;
        let all = tape.concat_rows(dropped, cols)?;
        let sq = tape.square(all);
        let m = tape.mean(sq)?;
        total = Some(tape.scale(m, ar_w));
    }
    if tar_w > 0.0 && raw.len() > 1 {
        let mut diffs = Vec::with_capacity(raw.len() - 1);
        for w in raw.windows(2) {
            diffs.push(tape.sub(w[1], w[0])?);
        }
        let cols = tape.value(diffs[0]).dims2()?.1;
        let all = tape.concat_rows(&diffs, cols)?;
        let sq = tape.square(all);
        let m = tape.mean(sq)?;
        let term = tape.scale(m, tar_w);
        total = Some(match total {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_all_ones() {
        let mut ctx = RegContext::train(1);
        let m = variational_mask(&[3, 4], 0.0, &mut ctx, Role::Input, 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_reused_within_sequence_fresh_across() {
        let mut ctx = RegContext::train(9);
        ctx.begin_sequence();
        let t0 = variational_mask(&[4, 16], 0.5, &mut ctx, Role::Output, 1).unwrap();
        let t5 = variational_mask(&[4, 16], 0.5, &mut ctx, Role::Output, 1).unwrap();
        assert_eq!(t0, t5);
        ctx.begin_sequence();
        let next = variational_mask(&[4, 16], 0.5, &mut ctx, Role::Output, 1).unwrap();
        assert_ne!(t0, next);
    }

    #[test]
    fn mask_mean_preserves_expectation() {
        let mut ctx = RegContext::train(3);
        let m = variational_mask(&[100_000], 0.5, &mut ctx, Role::Input, 0).unwrap();
        let mean = m.data().iter().sum::<f64>() / m.numel() as f64;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
    }

    #[test]
    fn rate_one_is_config_error() {
        let mut ctx = RegContext::train(0);
        let err = variational_mask(&[2], 1.0, &mut ctx, Role::Input, 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let w = Tensor::zeros(&[2, 2]);
        assert!(drop_connect(&w, 1.5, &mut ctx, 0).is_err());
        assert!(embedding_dropout(&w, 1.0, &mut ctx).is_err());
    }

    #[test]
    fn drop_connect_identity_cases() {
        let w = Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let mut train = RegContext::train(4);
        assert_eq!(drop_connect(&w, 0.0, &mut train, 0).unwrap(), w);
        let mut eval = RegContext::eval();
        assert_eq!(drop_connect(&w, 0.9, &mut eval, 0).unwrap(), w);
    }

    #[test]
    fn drop_connect_reproducible() {
        let w = Tensor::full(&[32, 32], 1.0);
        let run = || {
            let mut ctx = RegContext::train(1234);
            ctx.begin_sequence();
            drop_connect(&w, 0.225, &mut ctx, 0).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.data().contains(&0.0));
    }

    #[test]
    fn embedding_dropout_zeroes_whole_rows() {
        let emb = Tensor::full(&[10_000, 3], 2.0);
        let mut ctx = RegContext::train(11);
        ctx.begin_sequence();
        let dropped = embedding_dropout(&emb, 0.1, &mut ctx).unwrap();
        let mut zero_rows = 0;
        for r in 0..10_000 {
            let row = dropped.row(r);
            assert!(row.iter().all(|&v| v == row[0]));
            if row[0] == 0.0 {
                zero_rows += 1;
            } else {
                assert!((row[0] - 2.0 / 0.9).abs() < 1e-12);
            }
        }
        let frac = zero_rows as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
        assert_eq!(embedding_dropout(&emb, 0.0, &mut ctx).unwrap(), emb);
    }

    #[test]
    fn dropped_word_is_zero_at_every_position() {
        let emb = Tensor::full(&[50, 2], 1.0);
        let mut ctx = RegContext::train(2);
        ctx.begin_sequence();
        let first = embedding_dropout(&emb, 0.5, &mut ctx).unwrap();
        let word = (0..50).find(|&r| first.row(r)[0] == 0.0).expect("some row dropped");
        for _step in 0..5 {
            let again = embedding_dropout(&emb, 0.5, &mut ctx).unwrap();
            assert!(again.row(word).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn activation_penalty_hand_values() {
        let h = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(activation_penalty(&h, &h, 1.0, 1.0).unwrap(), 9.0);
        let zeros = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(activation_penalty(&zeros, &zeros, 2.0, 1.0).unwrap(), 0.0);
        let constant = Tensor::full(&[2, 3, 4], 0.7);
        assert_eq!(activation_penalty(&constant, &constant, 0.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn tape_penalty_matches_plain() {
        // batch 2, T 3, H 2
        let raw = Tensor::new(
            vec![2, 3, 2],
            vec![0.1, 0.5, -0.3, 0.2, 0.9, 0.0, 1.0, -1.0, 0.4, 0.4, 0.3, -0.7],
        )
        .unwrap();
        let dropped = raw.map(|v| v * 1.5);
        let expected = activation_penalty(&dropped, &raw, 2.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let step = |t: &Tensor, ti: usize| {
            let mut rows = Vec::new();
            for b in 0..2 {
                let off = (b * 3 + ti) * 2;
                rows.push(t.data()[off..off + 2].to_vec());
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let d: Vec<Var> = (0..3).map(|t| tape.constant(step(&dropped, t))).collect();
        let r: Vec<Var> = (0..3).map(|t| tape.constant(step(&raw, t))).collect();
        let p = activation_reg(&mut tape, &d, &r, 2.0, 1.0).unwrap().unwrap();
        assert!((tape.value(p).data()[0] - expected).abs() < 1e-12);
    }
}
