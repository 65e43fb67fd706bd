//! Differentiable building blocks. Each layer stores [`ParamId`]s into a
//! shared [`ParamStore`] and records its computation on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PartitionedAdjacency;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var, BN_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::random_uniform(shape, -bound, bound, rng)
}

/// Temporal convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.dilation == 0 {
            return Err(Error::Config("kernel and dilation must be at least 1".into()));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.causal && self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "acausal convolution needs an odd kernel, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Number of input samples that can reach one output of a stack of
/// temporal convolutions.
pub fn receptive_field(kernel: usize, dilations: &[usize]) -> usize {
    1 + (kernel - 1) * dilations.iter().sum::<usize>()
}

/// Channel map applied independently at every sample (and node).
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Conv1x1 {
            weight: store.add(format!("{name}.weight"), uniform_init(&[cin, cout], cin, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Dilated temporal convolution with kernel `[k, C_in, C_out]`, shared
/// across nodes when the input is `[T, N, C]`.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shape = [spec.kernel, spec.channels_in, spec.channels_out];
        Ok(TemporalConv {
            spec,
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&shape, spec.kernel * spec.channels_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[spec.channels_out])),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dilated_conv(x, w, b, self.spec.dilation, self.spec.causal)
    }
}

/// Batch normalization over all axes except the channel axis (last).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b)?;
                let n = tape.value(x).rows() as f64;
                // running variance tracks the unbiased estimate
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..mean.len() {
                    self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                    self.running_var[c] =
                        (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(x, g, b, &self.running_mean, &self.running_var),
        }
    }
}

/// Where the learnable mask `M_p` enters the graph convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// `(A_p ⊙ M_p) f W_p`: the mask reweights existing edges.
    #[default]
    Hadamard,
    /// `A_p f W_p M_p`: the mask is a right factor acting on the node axis.
    RightMultiply,
}

/// Spatial graph convolution `Σ_p` over the three partitions.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub weights: [ParamId; 3],
    pub masks: [ParamId; 3],
    pub mask_mode: MaskMode,
}

impl GraphConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        num_nodes: usize,
        mask_mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Self {
        let labels = ["self", "closer", "farther"];
        let weights = labels.map(|p| {
            store.add(format!("{name}.weight_{p}"), uniform_init(&[channels, channels], channels, rng))
        });
        let masks = labels.map(|p| store.add(format!("{name}.mask_{p}"), Tensor::ones(&[num_nodes, num_nodes])));
        GraphConv {
            weights,
            masks,
            mask_mode,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adjacency: &PartitionedAdjacency,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != adjacency.num_nodes() {
            return Err(Error::Dimension {
                op: "graph_conv",
                left: shape,
                right: vec![adjacency.num_nodes(), adjacency.num_nodes()],
            });
        }
        let mut acc: Option<Var> = None;
        for p in 0..3 {
            let a = tape.constant(adjacency.matrices[p].clone());
            let m = tape.param(store, self.masks[p]);
            let w = tape.param(store, self.weights[p]);
            let y = match self.mask_mode {
                MaskMode::Hadamard => {
                    let am = tape.mul(a, m)?;
                    let mixed = tape.node_mix(am, x, false)?;
                    tape.matmul(mixed, w)?
                }
                MaskMode::RightMultiply => {
                    let mixed = tape.node_mix(a, x, false)?;
                    let y = tape.matmul(mixed, w)?;
                    // (Y M)[t, j, c] = Σ_i Y[t, i, c] M[i, j]
                    tape.node_mix(m, y, true)?
                }
            };
            acc = Some(match acc {
                None => y,
                Some(s) => tape.add(s, y)?,
            });
        }
        Ok(acc.expect("three partitions"))
    }
}

/// Dilated conv → BN → ReLU → residual add.
#[derive(Clone, Debug)]
pub struct TcnBlock {
    pub conv: TemporalConv,
    pub bn: BatchNorm,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.channels_in != spec.channels_out {
            return Err(Error::Config(format!(
                "residual block needs equal channels, got {} -> {}",
                spec.channels_in, spec.channels_out
            )));
        }
        Ok(TcnBlock {
            conv: TemporalConv::new(store, &format!("{name}.conv"), spec, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.channels_out),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        tape.add(y, x)
    }
}

/// Graph conv → BN → ReLU → dilated temporal conv → BN → ReLU → residual.
#[derive(Clone, Debug)]
pub struct StGcnBlock {
    pub gcn: GraphConv,
    pub bn_spatial: BatchNorm,
    pub conv: TemporalConv,
    pub bn_temporal: BatchNorm,
}

impl StGcnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        num_nodes: usize,
        mask_mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.channels_in != spec.channels_out {
            return Err(Error::Config(format!(
                "residual block needs equal channels, got {} -> {}",
                spec.channels_in, spec.channels_out
            )));
        }
        let c = spec.channels_out;
        Ok(StGcnBlock {
            gcn: GraphConv::new(store, &format!("{name}.gcn"), c, num_nodes, mask_mode, rng),
            bn_spatial: BatchNorm::new(store, &format!("{name}.bn_spatial"), c),
            conv: TemporalConv::new(store, &format!("{name}.tconv"), spec, rng)?,
            bn_temporal: BatchNorm::new(store, &format!("{name}.bn_temporal"), c),
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        adjacency: &PartitionedAdjacency,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = self.gcn.forward(tape, store, adjacency, x)?;
        let y = self.bn_spatial.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv.forward(tape, store, y)?;
        let y = self.bn_temporal.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        tape.add(y, x)
    }
}

/// Mean over the joints of a `[T, N, C]` feature map.
pub fn spatial_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_nodes(x)
}

/// One LSTM direction. Gate blocks are ordered input, forget, candidate,
/// output along the `4H` axis.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let h4 = 4 * hidden;
        LstmDirection {
            w_ih: store.add(format!("{name}.w_ih"), uniform_init(&[cin, h4], cin, rng)),
            w_hh: store.add(format!("{name}.w_hh"), uniform_init(&[hidden, h4], hidden, rng)),
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(&[h4])),
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(&[h4])),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let wi = tape.param(store, self.w_ih);
        let wh = tape.param(store, self.w_hh);
        let bi = tape.param(store, self.b_ih);
        let bh = tape.param(store, self.b_hh);
        tape.lstm(x, wi, wh, bi, bh, reverse)
    }
}

/// Tape handles for one direction's weights, used by [`lstm_step`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// A single LSTM update built from primitive ops. `x_t: [1, C]`,
/// `h_prev, c_prev: [1, H]`. Returns `(h_t, c_t)`.
pub fn lstm_step(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, w: LstmVars) -> Result<(Var, Var)> {
    let h = tape.value(h_prev).last_dim();
    let zx = tape.matmul(x_t, w.w_ih)?;
    let zx = tape.add_bias(zx, w.b_ih)?;
    let zh = tape.matmul(h_prev, w.w_hh)?;
    let zh = tape.add_bias(zh, w.b_hh)?;
    let z = tape.add(zx, zh)?;
    let zi = tape.slice_last(z, 0, h)?;
    let zj = tape.slice_last(z, h, h)?;
    let zc = tape.slice_last(z, 2 * h, h)?;
    let zo = tape.slice_last(z, 3 * h, h)?;
    let i = tape.sigmoid(zi);
    let j = tape.sigmoid(zj);
    let cand = tape.tanh(zc);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(j, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_t = tape.mul(tc, o)?;
    Ok((h_t, c))
}

/// Forward (and optionally backward) LSTM over a `[T, C]` sequence with
/// the two directions concatenated per sample.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward_dir: LstmDirection,
    pub backward_dir: Option<LstmDirection>,
}

impl BiLstmLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let forward_dir = LstmDirection::new(store, &format!("{name}.fwd"), cin, hidden, rng);
        let backward_dir =
            bidirectional.then(|| LstmDirection::new(store, &format!("{name}.bwd"), cin, hidden, rng));
        BiLstmLayer {
            forward_dir,
            backward_dir,
        }
    }

    pub fn output_width(&self) -> usize {
        self.forward_dir.hidden * if self.backward_dir.is_some() { 2 } else { 1 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.forward_dir.forward(tape, store, x, false)?;
        match &self.backward_dir {
            Some(bwd) => {
                let b = bwd.forward(tape, store, x, true)?;
                tape.concat_last(&[f, b])
            }
            None => Ok(f),
        }
    }
}

/// 1×1 map to class logits followed by a softmax over classes.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub conv: Conv1x1,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        PredictionHead {
            conv: Conv1x1::new(store, name, channels, classes, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.conv.forward(tape, store, x)?;
        Ok(tape.softmax(logits))
    }
}
