//! Embedding → stacked LSTM → bottleneck → mixture-of-softmaxes language model.
//!
//! The head follows the high-rank construction: a prior network gives `K`
//! mixture weights, each expert maps the bottleneck through its own `tanh`
//! projection into the word-embedding space, and all experts share one output
//! matrix (the transposed embedding when tied). The mixture is combined in
//! log space, so the model hands out log-probabilities directly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::regularization::{self, DropoutSpec, RegContext, Role};
use crate::tensor::Tensor;

/// Where the bottleneck of width `bottleneck_dim` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bottleneck {
    /// The last LSTM layer is `bottleneck_dim` wide and feeds the head directly.
    Recurrent,
    /// All LSTM layers are `hidden_dim` wide, followed by a linear
    /// `hidden_dim → bottleneck_dim` projection.
    Projection,
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::Recurrent => "recurrent",
            Bottleneck::Projection => "projection",
        })
    }
}

impl FromStr for Bottleneck {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "recurrent" => Ok(Bottleneck::Recurrent),
            "projection" => Ok(Bottleneck::Projection),
            _ => Err(format!("expected recurrent|projection, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub lstm_layers: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_experts: usize,
    pub tie_embeddings: bool,
    /// Width of each expert projection; defaults to `embed_dim`.
    pub expert_dim: Option<usize>,
    pub bottleneck: Bottleneck,
    pub dropout: DropoutSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            lstm_layers: 1,
            hidden_dim: 8,
            bottleneck_dim: 4,
            num_experts: 2,
            tie_embeddings: true,
            expert_dim: None,
            bottleneck: Bottleneck::Projection,
            dropout: DropoutSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn expert_width(&self) -> usize {
        self.expert_dim.unwrap_or(self.embed_dim)
    }

    /// Hidden width of LSTM layer `l`.
    pub fn layer_width(&self, l: usize) -> usize {
        if self.bottleneck == Bottleneck::Recurrent && l + 1 == self.lstm_layers {
            self.bottleneck_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.layer_width(l - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("lstm_layers", self.lstm_layers),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("num_experts", self.num_experts),
            ("expert_dim", self.expert_width()),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.tie_embeddings && self.expert_width() != self.embed_dim {
            return Err(Error::config(format!(
                "tie_embeddings needs expert_dim ({}) == embed_dim ({})",
                self.expert_width(),
                self.embed_dim
            )));
        }
        self.dropout.validate()
    }

    /// Parameter shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, k, b, ep) = (
            self.vocab_size,
            self.embed_dim,
            self.num_experts,
            self.bottleneck_dim,
            self.expert_width(),
        );
        let mut shapes = vec![("embedding".to_string(), vec![v, e])];
        for l in 0..self.lstm_layers {
            let (inp, h) = (self.layer_input(l), self.layer_width(l));
            shapes.push((format!("lstm.{l}.w_ih"), vec![inp, 4 * h]));
            shapes.push((format!("lstm.{l}.w_hh"), vec![h, 4 * h]));
            shapes.push((format!("lstm.{l}.bias"), vec![4 * h]));
        }
        if self.bottleneck == Bottleneck::Projection {
            shapes.push(("bottleneck.weight".into(), vec![self.hidden_dim, b]));
            shapes.push(("bottleneck.bias".into(), vec![b]));
        }
        shapes.push(("mos.prior".into(), vec![b, k]));
        shapes.push(("mos.latent.weight".into(), vec![b, k * ep]));
        shapes.push(("mos.latent.bias".into(), vec![k * ep]));
        if !self.tie_embeddings {
            shapes.push(("output.weight".into(), vec![ep, v]));
        }
        shapes.push(("output.bias".into(), vec![v]));
        shapes
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, e, k, b, ep) = (
            self.vocab_size,
            self.embed_dim,
            self.num_experts,
            self.bottleneck_dim,
            self.expert_width(),
        );
        let lstm: usize = (0..self.lstm_layers)
            .map(|l| {
                let (inp, h) = (self.layer_input(l), self.layer_width(l));
                4 * h * (inp + h + 1)
            })
            .sum();
        let projection = match self.bottleneck {
            Bottleneck::Projection => self.hidden_dim * b + b,
            Bottleneck::Recurrent => 0,
        };
        let output = if self.tie_embeddings { 0 } else { ep * v };
        v * e + lstm + projection + b * k + b * k * ep + k * ep + output + v
    }
}

/// Indices of each parameter in [`LmModel::parameters`].
#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    lstm: Vec<[usize; 3]>,
    bottleneck: Option<[usize; 2]>,
    prior: usize,
    latent_w: usize,
    latent_b: usize,
    output: Option<usize>,
    output_bias: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut i = 0;
        let mut next = || {
            i += 1;
            i - 1
        };
        let embedding = next();
        let lstm = (0..cfg.lstm_layers).map(|_| [next(), next(), next()]).collect();
        let bottleneck = (cfg.bottleneck == Bottleneck::Projection).then(|| [next(), next()]);
        let prior = next();
        let latent_w = next();
        let latent_b = next();
        let output = (!cfg.tie_embeddings).then(&mut next);
        let output_bias = next();
        Layout {
            embedding,
            lstm,
            bottleneck,
            prior,
            latent_w,
            latent_b,
            output,
            output_bias,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Per-layer `(h, c)` pairs, each `[batch × width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl LmState {
    pub fn zeros(cfg: &ModelConfig, batch: usize) -> Self {
        LmState {
            layers: (0..cfg.lstm_layers)
                .map(|l| {
                    let w = cfg.layer_width(l);
                    (Tensor::zeros(&[batch, w]), Tensor::zeros(&[batch, w]))
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.shape()[0])
    }
}

/// LSTM weights for one layer as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Mixture-of-softmaxes head weights as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub prior: Var,
    pub latent_w: Var,
    pub latent_b: Var,
    /// `[E' × V]`; the transposed embedding when tied.
    pub output: Var,
    pub output_bias: Var,
    pub num_experts: usize,
}

/// A model's parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub lstm: Vec<LstmVars>,
    pub bottleneck: Option<(Var, Var)>,
    pub head: HeadVars,
}

pub struct ForwardOutput {
    /// `[batch·T × V]` log-probabilities, row `b·T + t`.
    pub log_probs: Var,
    pub state: LmState,
    /// Final LSTM layer outputs per time step, before dropout.
    pub raw_outputs: Vec<Var>,
    /// Final LSTM layer outputs per time step, after dropout.
    pub dropped_outputs: Vec<Var>,
}

/// One LSTM step with gate order `i, f, g, o`:
/// `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
    let width = tape.value(h).dims2()?.1;
    let xi = tape.matmul(x, w.w_ih)?;
    let hh = tape.matmul(h, w.w_hh)?;
    let gates = tape.add(xi, hh)?;
    let gates = tape.add_row(gates, w.bias)?;
    let i = tape.slice_cols(gates, 0, width)?;
    let f = tape.slice_cols(gates, width, 2 * width)?;
    let g = tape.slice_cols(gates, 2 * width, 3 * width)?;
    let o = tape.slice_cols(gates, 3 * width, 4 * width)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Log of `Σ_k π_k(h) · softmax(W_out · tanh(proj_k(h)) + b)` per row of the
/// bottleneck activations `h [N × B]`. `latent_mask`, if given, is applied to
/// the `[N × K·E']` expert latents.
pub fn mos_forward(tape: &mut Tape, h: Var, head: &HeadVars, latent_mask: Option<&Tensor>) -> Result<Var> {
    let prior_logits = tape.matmul(h, head.prior)?;
    let log_prior = tape.log_softmax_rows(prior_logits)?;
    let latent = tape.matmul(h, head.latent_w)?;
    let latent = tape.add_row(latent, head.latent_b)?;
    let latent = tape.tanh(latent);
    let latent = regularization::apply_mask(tape, latent, latent_mask)?;
    let width = tape.value(head.output).dims2()?.0;
    let mut components = Vec::with_capacity(head.num_experts);
    for k in 0..head.num_experts {
        let z = tape.slice_cols(latent, k * width, (k + 1) * width)?;
        let logits = tape.matmul(z, head.output)?;
        let logits = tape.add_row(logits, head.output_bias)?;
        components.push(tape.log_softmax_rows(logits)?);
    }
    tape.mixture_logsumexp(log_prior, &components)
}

impl LmModel {
    /// Uniform init in `±1/sqrt(hidden_dim)`, embedding in `±0.1`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (config.hidden_dim as f64).sqrt();
        let shapes = config.parameter_shapes();
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (i, (name, shape)) in shapes.into_iter().enumerate() {
            let range = if i == 0 { 0.1 } else { r };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-range..=range)).collect();
            params.push(Tensor::new(shape, data)?.with_requires_grad(true));
            names.push(name);
        }
        let layout = Layout::new(&config);
        Ok(LmModel {
            config,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors in canonical order.
    pub fn from_parameters(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((want_name, want_shape), (name, t)) in shapes.into_iter().zip(tensors) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t.with_requires_grad(true));
        }
        let layout = Layout::new(&config);
        Ok(LmModel {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the regularization settings used by future forwards.
    pub fn set_dropout(&mut self, dropout: DropoutSpec) -> Result<()> {
        dropout.validate()?;
        self.config.dropout = dropout;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Sum of allocated parameter elements.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Sets every parameter to zero. The resulting model predicts the uniform
    /// distribution everywhere.
    pub fn zero_parameters(&mut self) {
        for p in &mut self.params {
            p.data_mut().fill(0.0);
        }
    }

    /// Records the parameters on `tape`. They receive gradients iff the
    /// tensors have `requires_grad` set and `trainable` is true.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p)
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.bind_vars(tape, vars)
    }

    /// Wraps already-recorded parameter vars, one per tensor in canonical
    /// order.
    pub fn bind_vars(&self, tape: &mut Tape, vars: Vec<Var>) -> Result<BoundModel> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let l = &self.layout;
        let output = match l.output {
            Some(i) => vars[i],
            None => tape.transpose(vars[l.embedding])?,
        };
        Ok(BoundModel {
            embedding: vars[l.embedding],
            lstm: l
                .lstm
                .iter()
                .map(|&[a, b, c]| LstmVars {
                    w_ih: vars[a],
                    w_hh: vars[b],
                    bias: vars[c],
                })
                .collect(),
            bottleneck: l.bottleneck.map(|[w, b]| (vars[w], vars[b])),
            head: HeadVars {
                prior: vars[l.prior],
                latent_w: vars[l.latent_w],
                latent_b: vars[l.latent_b],
                output,
                output_bias: vars[l.output_bias],
                num_experts: self.config.num_experts,
            },
            vars,
        })
    }

    /// Runs `tokens` (`batch × T`, row-major by lane) through the model from
    /// `state`. Dropout is active iff `ctx` is in train mode; masks come from
    /// the context's current sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[usize],
        batch: usize,
        state: &LmState,
        ctx: &mut RegContext,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let reg = &cfg.dropout;
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Contract(format!(
                "{} tokens do not split into {batch} lanes",
                tokens.len()
            )));
        }
        if state.layers.len() != cfg.lstm_layers || state.batch() != batch {
            return Err(Error::Contract(format!(
                "state has {} layers for batch {}, model needs {} layers for batch {batch}",
                state.layers.len(),
                state.batch(),
                cfg.lstm_layers
            )));
        }
        let steps = tokens.len() / batch;
        if let Some(pos) = tokens.iter().position(|&t| t >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {} at lane {}, step {} is out of range for vocabulary of {}",
                tokens[pos],
                pos / steps,
                pos % steps,
                cfg.vocab_size
            )));
        }

        let emb_mask = regularization::embedding_mask(cfg.vocab_size, cfg.embed_dim, reg.embed_rate, ctx)?;
        let lookup = regularization::apply_mask(tape, bound.embedding, emb_mask.as_ref())?;
        let mut recurrent = Vec::with_capacity(cfg.lstm_layers);
        for (l, w) in bound.lstm.iter().enumerate() {
            let shape = tape.value(w.w_hh).shape().to_vec();
            let mask = regularization::drop_connect_mask(&shape, reg.hidden_rate, ctx, l)?;
            recurrent.push(LstmVars {
                w_hh: regularization::apply_mask(tape, w.w_hh, mask.as_ref())?,
                ..*w
            });
        }
        let input_mask = mask_or_none(&[batch, cfg.embed_dim], reg.input_rate, ctx, Role::Input, 0)?;
        let output_masks = (0..cfg.lstm_layers)
            .map(|l| mask_or_none(&[batch, cfg.layer_width(l)], reg.output_rate, ctx, Role::Output, l))
            .collect::<Result<Vec<_>>>()?;

        let mut hc: Vec<(Var, Var)> = state
            .layers
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let mut raw_outputs = Vec::with_capacity(steps);
        let mut dropped_outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = (0..batch).map(|b| tokens[b * steps + t]).collect();
            let mut x = tape.gather_rows(lookup, &ids)?;
            x = regularization::apply_mask(tape, x, input_mask.as_ref())?;
            for (l, w) in recurrent.iter().enumerate() {
                let (h, c) = lstm_step(tape, x, hc[l].0, hc[l].1, w)?;
                hc[l] = (h, c);
                x = regularization::apply_mask(tape, h, output_masks[l].as_ref())?;
                if l + 1 == cfg.lstm_layers {
                    raw_outputs.push(h);
                    dropped_outputs.push(x);
                }
            }
        }
        let new_state = LmState {
            layers: hc
                .iter()
                .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
                .collect(),
        };

        let top = cfg.layer_width(cfg.lstm_layers - 1);
        let stacked = tape.concat_rows(&dropped_outputs, top)?;
        // time-major → lane-major
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| (0..steps).map(move |t| t * batch + b))
            .collect();
        let stacked = tape.gather_rows(stacked, &order)?;
        let hb = match bound.bottleneck {
            Some((w, b)) => {
                let z = tape.matmul(stacked, w)?;
                tape.add_row(z, b)?
            }
            None => stacked,
        };
        let latent_width = cfg.num_experts * cfg.expert_width();
        let latent_mask = match mask_or_none(&[batch, latent_width], reg.other_rate, ctx, Role::Latent, 0)? {
            Some(m) => Some(expand_lanes(&m, steps)?),
            None => None,
        };
        let log_probs = mos_forward(tape, hb, &bound.head, latent_mask.as_ref())?;
        Ok(ForwardOutput {
            log_probs,
            state: new_state,
            raw_outputs,
            dropped_outputs,
        })
    }

    /// Eval-mode forward returning `[batch·T × V]` log-probabilities.
    pub fn predict(&self, tokens: &[usize], batch: usize, state: &LmState) -> Result<(Tensor, LmState)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let mut ctx = RegContext::eval();
        let out = self.forward(&mut tape, &bound, tokens, batch, state, &mut ctx)?;
        Ok((tape.value(out.log_probs).clone(), out.state))
    }
}

fn mask_or_none(shape: &[usize], rate: f64, ctx: &mut RegContext, role: Role, layer: usize) -> Result<Option<Tensor>> {
    if !ctx.is_train() || rate == 0.0 {
        return Ok(None);
    }
    regularization::variational_mask(shape, rate, ctx, role, layer).map(Some)
}

/// Repeats each lane row of a `[batch × d]` mask `steps` times, matching the
/// lane-major row order of the head input.
fn expand_lanes(mask: &Tensor, steps: usize) -> Result<Tensor> {
    let (batch, d) = mask.dims2()?;
    let mut data = Vec::with_capacity(batch * steps * d);
    for b in 0..batch {
        for _ in 0..steps {
            data.extend_from_slice(mask.row(b));
        }
    }
    Tensor::matrix(batch * steps, d, data)
}
