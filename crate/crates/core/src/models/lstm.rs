//! LSTM cells (vanilla, shared-gate S, input-accumulator A), stacks and
//! sequence encoders.

use serde::{Deserialize, Serialize};

use super::layers::{stack_time, time_step, Builder};
use crate::tensor::{Bindings, Graph, ParamId, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LstmVariant {
    Vanilla,
    /// One input gate and one forget gate shared by every cell.
    S,
    /// Adds an input accumulator memory `c'` with its own gates.
    A,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Final memory cells `c`.
    #[default]
    Memory,
    /// Final gated outputs `h`.
    Hidden,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
    /// Accumulator `(c', d)` for variant A.
    pub acc: Option<(Var, Var)>,
}

/// Gate activations (after σ) from one step.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub output: Var,
    pub input: Var,
    pub forget: Var,
    pub acc_input: Option<Var>,
    pub acc_forget: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub variant: LstmVariant,
    pub input_dim: usize,
    pub cells: usize,
    /// `[M, G]`.
    pub w_x: ParamId,
    /// `[N, G]`, or `[N + M, G]` for variant A (rows for `h` then `d`).
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    /// Width of the gate pre-activation vector.
    pub fn gate_width(variant: LstmVariant, input_dim: usize, cells: usize) -> usize {
        match variant {
            LstmVariant::Vanilla => 4 * cells,
            LstmVariant::S => 2 * cells + 2,
            LstmVariant::A => 4 * cells + 2 * input_dim,
        }
    }

    fn shared_gate_width(&self) -> usize {
        match self.variant {
            LstmVariant::S => 1,
            _ => self.cells,
        }
    }

    fn recurrent_dim(variant: LstmVariant, input_dim: usize, cells: usize) -> usize {
        match variant {
            LstmVariant::A => cells + input_dim,
            _ => cells,
        }
    }

    pub fn num_params(variant: LstmVariant, input_dim: usize, cells: usize) -> usize {
        let g = Self::gate_width(variant, input_dim, cells);
        (input_dim + Self::recurrent_dim(variant, input_dim, cells) + 1) * g
    }

    pub fn new(b: &mut Builder, name: &str, variant: LstmVariant, input_dim: usize, cells: usize) -> Self {
        let g = Self::gate_width(variant, input_dim, cells);
        let r = Self::recurrent_dim(variant, input_dim, cells);
        let w_x = b.weight(&format!("{name}/w_x"), input_dim, g);
        let w_h = b.weight(&format!("{name}/w_h"), r, g);
        let mut bias = vec![0.0; g];
        let n = cells;
        let k = if variant == LstmVariant::S { 1 } else { n };
        // forget gates start open
        let f = 2 * n + k;
        bias[f..f + k].iter_mut().for_each(|v| *v = 1.0);
        if variant == LstmVariant::A {
            let f2 = 4 * n + input_dim;
            bias[f2..f2 + input_dim].iter_mut().for_each(|v| *v = 1.0);
        }
        let bias = b.tensor(&format!("{name}/bias"), Tensor::vector(bias));
        Self { variant, input_dim, cells, w_x, w_h, bias }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[batch, self.cells]));
        let c = g.constant(Tensor::zeros(&[batch, self.cells]));
        let acc = (self.variant == LstmVariant::A).then(|| {
            let c2 = g.constant(Tensor::zeros(&[batch, self.input_dim]));
            let d = g.constant(Tensor::zeros(&[batch, self.input_dim]));
            (c2, d)
        });
        LstmState { h, c, acc }
    }

    /// `x W_x + b` for a whole `[B, T, M]` sequence at once.
    pub fn project_inputs(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w_x])?;
        g.add_bias(y, p[self.bias])
    }

    /// One step given the projected input `x W_x + b` (`[B, G]`) and, for
    /// variant A, the raw input `x_t` (`[B, M]`).
    pub fn step_projected(
        &self,
        g: &mut Graph,
        p: &Bindings,
        state: &LstmState,
        projected: Var,
        x_t: Var,
    ) -> Result<(LstmState, Gates)> {
        let n = self.cells;
        let k = self.shared_gate_width();
        let rec = match state.acc {
            Some((_, d)) => g.concat(&[state.h, d], 1)?,
            None => state.h,
        };
        let r = g.matmul(rec, p[self.w_h])?;
        let pre = g.add(projected, r)?;
        let o = g.slice(pre, 1, 0, n)?;
        let m = g.slice(pre, 1, n, 2 * n)?;
        let i = g.slice(pre, 1, 2 * n, 2 * n + k)?;
        let f = g.slice(pre, 1, 2 * n + k, 2 * n + 2 * k)?;
        let (so, si, sf) = (g.sigmoid(o)?, g.sigmoid(i)?, g.sigmoid(f)?);
        let gm = g.tanh(m)?;
        let keep = g.mul(sf, state.c)?;
        let write = g.mul(si, gm)?;
        let c = g.add(keep, write)?;
        let gc = g.tanh(c)?;
        let h = g.mul(so, gc)?;
        let mut gates = Gates { output: so, input: si, forget: sf, acc_input: None, acc_forget: None };
        let acc = match state.acc {
            Some((c_prev, _)) => {
                let mdim = self.input_dim;
                let i2 = g.slice(pre, 1, 4 * n, 4 * n + mdim)?;
                let f2 = g.slice(pre, 1, 4 * n + mdim, 4 * n + 2 * mdim)?;
                let (si2, sf2) = (g.sigmoid(i2)?, g.sigmoid(f2)?);
                let keep = g.mul(sf2, c_prev)?;
                let write = g.mul(si2, x_t)?;
                let c2 = g.add(keep, write)?;
                let d = g.l2_normalize(c2, 1)?;
                gates.acc_input = Some(si2);
                gates.acc_forget = Some(sf2);
                Some((c2, d))
            }
            None => None,
        };
        Ok((LstmState { h, c, acc }, gates))
    }

    /// One step on a raw input `x_t` of shape `[B, M]`.
    pub fn step(&self, g: &mut Graph, p: &Bindings, state: &LstmState, x_t: Var) -> Result<(LstmState, Gates)> {
        let projected = {
            let y = g.matmul(x_t, p[self.w_x])?;
            g.add_bias(y, p[self.bias])?
        };
        self.step_projected(g, p, state, projected, x_t)
    }

    /// Runs over `[B, T, M]`. Returns per-step outputs `h_t` in input time
    /// order and the final state (after the last processed step).
    pub fn run(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        init: Option<LstmState>,
        reverse: bool,
    ) -> Result<(Vec<Var>, LstmState)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(TensorError::ShapeMismatch { op: "lstm", lhs: shape, rhs: vec![self.input_dim] });
        }
        let (b, t) = (shape[0], shape[1]);
        let proj = self.project_inputs(g, p, x)?;
        let mut state = init.unwrap_or_else(|| self.zero_state(g, b));
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let pt = time_step(g, proj, step)?;
            let xt = if self.variant == LstmVariant::A { time_step(g, x, step)? } else { pt };
            let (next, _) = self.step_projected(g, p, &state, pt, xt)?;
            outs[step] = Some(next.h);
            state = next;
        }
        Ok((outs.into_iter().map(|o| o.expect("every step visited")).collect(), state))
    }
}

/// Result of running a stack or an encoder over a sequence.
#[derive(Clone, Debug)]
pub struct SeqOutput {
    /// `[B, T, N_out]` top-layer outputs.
    pub outputs: Var,
    /// Top-layer output at the final time step, `[B, N_out]`.
    pub last_h: Var,
    /// Sequence representation, `[B, R]`.
    pub rep: Var,
}

fn representation(g: &mut Graph, finals: &[LstmState], rep: Representation) -> Result<Var> {
    let parts: Vec<Var> = finals
        .iter()
        .map(|s| match rep {
            Representation::Memory => s.c,
            Representation::Hidden => s.h,
        })
        .collect();
    g.concat(&parts, 1)
}

/// Multi-layer unidirectional LSTM.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmCell>,
    pub representation: Representation,
}

impl LstmStack {
    pub fn new(
        b: &mut Builder,
        name: &str,
        variant: LstmVariant,
        input_dim: usize,
        cells: usize,
        layers: usize,
        representation: Representation,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| LstmCell::new(b, &format!("{name}/l{l}"), variant, if l == 0 { input_dim } else { cells }, cells))
            .collect();
        Self { layers, representation }
    }

    pub fn num_params(variant: LstmVariant, input_dim: usize, cells: usize, layers: usize) -> usize {
        (0..layers).map(|l| LstmCell::num_params(variant, if l == 0 { input_dim } else { cells }, cells)).sum()
    }

    pub fn cells(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cells)
    }

    pub fn rep_dim(&self) -> usize {
        self.layers.iter().map(|l| l.cells).sum()
    }

    /// Runs every layer; returns the output plus final per-layer states.
    pub fn run_states(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<(SeqOutput, Vec<LstmState>)> {
        let mut input = x;
        let mut finals = Vec::with_capacity(self.layers.len());
        let mut last = None;
        for layer in &self.layers {
            let (outs, state) = layer.run(g, p, input, None, false)?;
            last = outs.last().copied();
            input = stack_time(g, &outs)?;
            finals.push(state);
        }
        let rep = representation(g, &finals, self.representation)?;
        Ok((SeqOutput { outputs: input, last_h: last.expect("nonempty"), rep }, finals))
    }

    pub fn run(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<SeqOutput> {
        Ok(self.run_states(g, p, x)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// One stack over the concatenated modalities.
    #[default]
    Single,
    /// Independent stacks for rgb and audio.
    Parallel,
    /// First layer runs both directions; later layers run forward.
    BidirectionalFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: LstmVariant,
    pub mode: EncoderMode,
    pub layers: usize,
    pub cells: usize,
    /// Audio stack width in parallel mode.
    pub audio_cells: usize,
    pub representation: Representation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: LstmVariant::Vanilla,
            mode: EncoderMode::Single,
            layers: 1,
            cells: 64,
            audio_cells: 16,
            representation: Representation::Memory,
        }
    }
}

#[derive(Clone, Debug)]
enum EncoderNet {
    Single(LstmStack),
    Parallel { rgb: LstmStack, audio: LstmStack, rgb_dim: usize },
    Bidirectional { fw: LstmCell, bw: LstmCell, upper: Option<LstmStack> },
}

/// Frame-sequence encoder producing a fixed-size representation.
#[derive(Clone, Debug)]
pub struct Encoder {
    net: EncoderNet,
    representation: Representation,
}

impl Encoder {
    /// `rgb_dim` is where parallel mode splits the feature axis; pass the
    /// full width when the input has no modality split.
    pub fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig, input_dim: usize, rgb_dim: usize) -> Self {
        let rep = cfg.representation;
        let net = match cfg.mode {
            EncoderMode::Single => {
                EncoderNet::Single(LstmStack::new(b, name, cfg.variant, input_dim, cfg.cells, cfg.layers, rep))
            }
            EncoderMode::Parallel => EncoderNet::Parallel {
                rgb: LstmStack::new(b, &format!("{name}/rgb"), cfg.variant, rgb_dim, cfg.cells, cfg.layers, rep),
                audio: LstmStack::new(
                    b,
                    &format!("{name}/audio"),
                    cfg.variant,
                    input_dim - rgb_dim,
                    cfg.audio_cells,
                    cfg.layers,
                    rep,
                ),
                rgb_dim,
            },
            EncoderMode::BidirectionalFirst => EncoderNet::Bidirectional {
                fw: LstmCell::new(b, &format!("{name}/fw"), cfg.variant, input_dim, cfg.cells),
                bw: LstmCell::new(b, &format!("{name}/bw"), cfg.variant, input_dim, cfg.cells),
                upper: (cfg.layers > 1).then(|| {
                    LstmStack::new(b, &format!("{name}/upper"), cfg.variant, 2 * cfg.cells, cfg.cells, cfg.layers - 1, rep)
                }),
            },
        };
        Self { net, representation: rep }
    }

    pub fn num_params(cfg: &EncoderConfig, input_dim: usize, rgb_dim: usize) -> usize {
        match cfg.mode {
            EncoderMode::Single => LstmStack::num_params(cfg.variant, input_dim, cfg.cells, cfg.layers),
            EncoderMode::Parallel => {
                LstmStack::num_params(cfg.variant, rgb_dim, cfg.cells, cfg.layers)
                    + LstmStack::num_params(cfg.variant, input_dim - rgb_dim, cfg.audio_cells, cfg.layers)
            }
            EncoderMode::BidirectionalFirst => {
                2 * LstmCell::num_params(cfg.variant, input_dim, cfg.cells)
                    + if cfg.layers > 1 {
                        LstmStack::num_params(cfg.variant, 2 * cfg.cells, cfg.cells, cfg.layers - 1)
                    } else {
                        0
                    }
            }
        }
    }

    pub fn rep_dim(&self) -> usize {
        match &self.net {
            EncoderNet::Single(s) => s.rep_dim(),
            EncoderNet::Parallel { rgb, audio, .. } => rgb.rep_dim() + audio.rep_dim(),
            EncoderNet::Bidirectional { fw, bw, upper } => fw.cells + bw.cells + upper.as_ref().map_or(0, LstmStack::rep_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.net {
            EncoderNet::Single(s) => s.cells(),
            EncoderNet::Parallel { rgb, audio, .. } => rgb.cells() + audio.cells(),
            EncoderNet::Bidirectional { fw, bw, upper } => upper.as_ref().map_or(fw.cells + bw.cells, LstmStack::cells),
        }
    }

    /// Encodes `[B, T, D]` frames.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<SeqOutput> {
        let t = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 3 || t == 0 {
            return Err(TensorError::InvalidArgument { op: "encode_sequence", reason: "empty frame sequence".into() });
        }
        match &self.net {
            EncoderNet::Single(s) => s.run(g, p, x),
            EncoderNet::Parallel { rgb, audio, rgb_dim } => {
                let d = g.shape(x)[2];
                let xr = g.slice(x, 2, 0, *rgb_dim)?;
                let xa = g.slice(x, 2, *rgb_dim, d)?;
                let r = rgb.run(g, p, xr)?;
                let a = audio.run(g, p, xa)?;
                Ok(SeqOutput {
                    outputs: g.concat(&[r.outputs, a.outputs], 2)?,
                    last_h: g.concat(&[r.last_h, a.last_h], 1)?,
                    rep: g.concat(&[r.rep, a.rep], 1)?,
                })
            }
            EncoderNet::Bidirectional { fw, bw, upper } => {
                let (fo, fs) = fw.run(g, p, x, None, false)?;
                let (bo, bs) = bw.run(g, p, x, None, true)?;
                let both: Vec<Var> = fo.iter().zip(&bo).map(|(&a, &b)| g.concat(&[a, b], 1)).collect::<Result<_>>()?;
                let seq = stack_time(g, &both)?;
                let mut finals = vec![fs, bs];
                let (outputs, last_h) = match upper {
                    Some(u) => {
                        let (out, states) = u.run_states(g, p, seq)?;
                        finals.extend(states);
                        (out.outputs, out.last_h)
                    }
                    None => (seq, *both.last().expect("nonempty")),
                };
                let rep = representation(g, &finals, self.representation)?;
                Ok(SeqOutput { outputs, last_h, rep })
            }
        }
    }
}
