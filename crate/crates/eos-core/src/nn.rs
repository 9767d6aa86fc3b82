//! The Q-network family: one 3×3 stride-1 valid convolution, one fully
//! connected layer, and an algorithm-specific head (action values for DQN,
//! per-action atom logits for C51). ReLU after the conv and FC layers.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::kernels;
use crate::autodiff::{AdError, Layout, NodeId, ParamVector, Tape, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("observation has {got} values, spec expects {want}")]
    ObsShape { got: usize, want: usize },
    #[error("operation requires a {want} head, network has {got}")]
    WrongHead { want: &'static str, got: &'static str },
    #[error("support has {got} atoms, head expects {want}")]
    SupportMismatch { got: usize, want: usize },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Dqn { num_actions: usize },
    C51 { num_actions: usize, num_atoms: usize },
}

impl Head {
    pub fn num_actions(&self) -> usize {
        match *self {
            Head::Dqn { num_actions } | Head::C51 { num_actions, .. } => num_actions,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            Head::Dqn { num_actions } => num_actions,
            Head::C51 { num_actions, num_atoms } => num_actions * num_atoms,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Head::Dqn { .. } => "DQN",
            Head::C51 { .. } => "C51",
        }
    }
}

/// Architecture constants. Only the input channel count and head vary
/// between games and algorithms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QNetworkSpec {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub fc_width: usize,
    pub head: Head,
}

impl QNetworkSpec {
    pub fn new(input: (usize, usize, usize), head: Head) -> Self {
        QNetworkSpec {
            input_h: input.0,
            input_w: input.1,
            input_c: input.2,
            conv_filters: 16,
            kernel: 3,
            fc_width: 128,
            head,
        }
    }

    pub fn dqn_breakout() -> Self {
        QNetworkSpec::new((10, 10, 4), Head::Dqn { num_actions: 3 })
    }

    pub fn c51_breakout(num_atoms: usize) -> Self {
        QNetworkSpec::new((10, 10, 4), Head::C51 { num_actions: 3, num_atoms })
    }

    /// Spatial size after the valid, stride-1 convolution.
    pub fn conv_out(&self) -> (usize, usize) {
        (self.input_h - self.kernel + 1, self.input_w - self.kernel + 1)
    }

    pub fn flat_width(&self) -> usize {
        let (h, w) = self.conv_out();
        h * w * self.conv_filters
    }

    pub fn obs_len(&self) -> usize {
        self.input_h * self.input_w * self.input_c
    }

    pub fn layout(&self) -> Arc<Layout> {
        Arc::new(Layout::new(&[
            ("conv.w", vec![self.kernel, self.kernel, self.input_c, self.conv_filters]),
            ("conv.b", vec![self.conv_filters]),
            ("fc.w", vec![self.flat_width(), self.fc_width]),
            ("fc.b", vec![self.fc_width]),
            ("head.w", vec![self.fc_width, self.head.output_width()]),
            ("head.b", vec![self.head.output_width()]),
        ]))
    }

    pub fn param_count(&self) -> usize {
        self.layout().total_len()
    }
}

/// Weights uniform in (−1/√fan_in, +1/√fan_in), biases zero; deterministic
/// per seed.
pub fn init_params(spec: &QNetworkSpec, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.total_len());
    let fan_ins = [
        spec.kernel * spec.kernel * spec.input_c,
        0,
        spec.flat_width(),
        0,
        spec.fc_width,
        0,
    ];
    for (seg, &fan_in) in layout.segments().iter().zip(&fan_ins) {
        if fan_in == 0 {
            values.extend(std::iter::repeat(0.0).take(seg.len()));
        } else {
            let bound = 1.0 / (fan_in as f32).sqrt();
            values.extend((0..seg.len()).map(|_| rng.gen_range(-bound..bound)));
        }
    }
    ParamVector::new(layout, values).expect("layout sized by construction")
}

/// Records the network forward pass on a tape: obs [B,H,W,C] to raw head
/// outputs [B, head_width]. `params` must follow [`QNetworkSpec::layout`]
/// segment order.
pub fn build_forward(
    tape: &mut Tape,
    spec: &QNetworkSpec,
    params: &[NodeId],
    obs: NodeId,
) -> Result<NodeId, AdError> {
    let [conv_w, conv_b, fc_w, fc_b, head_w, head_b] = params else {
        panic!("expected 6 parameter segments");
    };
    let batch = tape.value(obs).shape()[0];
    let conv = tape.corr2d(obs, *conv_w)?;
    let conv = tape.add_chan_bias(conv, *conv_b)?;
    let conv = tape.relu(conv);
    let flat = tape.reshape(conv, vec![batch, spec.flat_width()])?;
    let fc = tape.matmul(flat, *fc_w)?;
    let fc = tape.add_row_vec(fc, *fc_b)?;
    let fc = tape.relu(fc);
    let head = tape.matmul(fc, *head_w)?;
    tape.add_row_vec(head, *head_b)
}

fn add_bias_relu(x: &mut [f32], bias: &[f32], relu: bool) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Tape-free forward pass for rollouts and target computation. Uses the
/// same kernels as the recorded path, so both produce identical values.
pub fn forward_raw(spec: &QNetworkSpec, params: &ParamVector, obs: &[f32], batch: usize) -> Vec<f32> {
    debug_assert_eq!(obs.len(), batch * spec.obs_len());
    let segs = params.layout().segments();
    let val = |i: usize| &params.values()[segs[i].offset..segs[i].offset + segs[i].len()];
    let (ho, wo) = spec.conv_out();
    let mut conv = kernels::corr2d(
        obs,
        val(0),
        batch,
        spec.input_h,
        spec.input_w,
        spec.input_c,
        spec.kernel,
        spec.kernel,
        spec.conv_filters,
    );
    add_bias_relu(&mut conv, val(1), true);
    let mut fc = kernels::matmul(&conv, val(2), batch, ho * wo * spec.conv_filters, spec.fc_width);
    add_bias_relu(&mut fc, val(3), true);
    let mut head = kernels::matmul(&fc, val(4), batch, spec.fc_width, spec.head.output_width());
    add_bias_relu(&mut head, val(5), false);
    head
}

/// A spec plus its parameters; the unit stored in checkpoints.
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub spec: QNetworkSpec,
    pub params: ParamVector,
    pub seed: u64,
}

impl QNetwork {
    pub fn init(spec: QNetworkSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        QNetwork { spec, params, seed }
    }

    fn check_obs(&self, obs: &[f32]) -> Result<(), NnError> {
        if obs.len() != self.spec.obs_len() {
            return Err(NnError::ObsShape { got: obs.len(), want: self.spec.obs_len() });
        }
        Ok(())
    }

    /// Action values for one observation. DQN: raw head outputs. C51:
    /// Q(s,a) = Σ_i z_i·p_i(s,a) over the provided atom support.
    pub fn q_values(&self, obs: &[f32], atoms: Option<&[f32]>) -> Result<Vec<f32>, NnError> {
        self.check_obs(obs)?;
        let raw = forward_raw(&self.spec, &self.params, obs, 1);
        match self.spec.head {
            Head::Dqn { .. } => Ok(raw),
            Head::C51 { num_actions, num_atoms } => {
                let atoms = atoms.ok_or(NnError::SupportMismatch { got: 0, want: num_atoms })?;
                if atoms.len() != num_atoms {
                    return Err(NnError::SupportMismatch { got: atoms.len(), want: num_atoms });
                }
                let probs = kernels::softmax_rows(&raw, num_actions, num_atoms);
                Ok(probs
                    .chunks_exact(num_atoms)
                    .map(|p| p.iter().zip(atoms).map(|(&pi, &z)| pi * z).sum())
                    .collect())
            }
        }
    }

    /// Per-action atom logits θ_i(s,a), shape (num_actions, num_atoms);
    /// softmax over the atom axis yields p_i(s,a).
    pub fn dist_logits(&self, obs: &[f32]) -> Result<Vec<f32>, NnError> {
        self.check_obs(obs)?;
        match self.spec.head {
            Head::Dqn { .. } => Err(NnError::WrongHead { want: "C51", got: self.spec.head.name() }),
            Head::C51 { .. } => Ok(forward_raw(&self.spec, &self.params, obs, 1)),
        }
    }

    /// Builds the forward program on `tape` against fresh parameter leaves,
    /// returning (param nodes, head output node).
    pub fn record_forward(&self, tape: &mut Tape, obs: Tensor) -> Result<(Vec<NodeId>, NodeId), AdError> {
        let param_nodes: Vec<NodeId> =
            self.params.unflatten().into_iter().map(|t| tape.param(t)).collect();
        let x = tape.leaf(obs);
        let out = build_forward(tape, &self.spec, &param_nodes, x)?;
        Ok((param_nodes, out))
    }
}
