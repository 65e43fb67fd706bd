//! Finite-difference checks for every layer and a small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphLayout, PartitionedAdjacency};
use crate::layers::{
    BatchNorm, BiLstmLayer, Conv1x1, ConvSpec, GraphConv, LstmDirection, LstmVars, MaskMode, Mode, StGcnBlock,
    TcnBlock, TemporalConv, lstm_step,
};
use crate::loss::{combined_loss, LossConfig};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::tensor::{grad_check_params, GradCheckReport, ParamStore, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Instances whose unperturbed evaluation lies closer than this to a
/// non-differentiable point are redrawn: a central difference straddling a
/// kink measures neither one-sided derivative.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub instances: usize,
    /// instances redrawn for sitting within [`KINK_MARGIN`] of a kink
    pub redrawn: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub const LAYERS: [&str; 12] = [
    "dilated_conv_causal",
    "dilated_conv_acausal",
    "conv1x1",
    "graph_conv_hadamard",
    "graph_conv_right_multiply",
    "batch_norm",
    "lstm_step",
    "bilstm",
    "tcn_block",
    "stgcn_block",
    "prediction_head",
    "ms_gcn_end_to_end",
];

// Project a layer output to a scalar with fixed random weights so every
// output entry contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, proj: &Tensor) -> Result<Var> {
    let w = tape.constant(proj.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

// Gradient check plus the kink gap of the first, unperturbed evaluation.
fn smooth_check<F>(store: &mut ParamStore, mut f: F) -> Result<(GradCheckReport, f64)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut gap = None;
    let report = grad_check_params(store, |tape, st| {
        let out = f(tape, st)?;
        gap.get_or_insert(tape.kink_gap());
        Ok(out)
    })?;
    Ok((report, gap.unwrap_or(f64::INFINITY)))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

fn check_one(layer: &str, seed: u64) -> Result<(GradCheckReport, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut store = ParamStore::new();
    let s = &mut store;
    let t = r.gen_range(4..9);
    match layer {
        "dilated_conv_causal" | "dilated_conv_acausal" => {
            let spec = ConvSpec {
                kernel: 3,
                dilation: r.gen_range(1..4),
                causal: layer.ends_with("_causal"),
                channels_in: 2,
                channels_out: 3,
            };
            let conv = TemporalConv::new(s, "c", spec, r)?;
            s.get_mut(conv.bias).value = rand_tensor(&[3], r);
            let x = rand_tensor(&[t, 2], r);
            let proj = rand_tensor(&[t, 3], r);
            smooth_check(s, |tape, st| {
                let xv = tape.constant(x.clone());
                let y = conv.forward(tape, st, xv)?;
                project(tape, y, &proj)
            })
        }
        "conv1x1" => {
            let conv = Conv1x1::new(s, "c", 3, 2, r);
            let x = rand_tensor(&[t, 2, 3], r);
            let proj = rand_tensor(&[t, 2, 2], r);
            smooth_check(s, |tape, st| {
                let xv = tape.constant(x.clone());
                let y = conv.forward(tape, st, xv)?;
                project(tape, y, &proj)
            })
        }
        "graph_conv_hadamard" | "graph_conv_right_multiply" => {
            let mode = if layer.ends_with("hadamard") {
                MaskMode::Hadamard
            } else {
                MaskMode::RightMultiply
            };
            let adj = PartitionedAdjacency::from_layout(&GraphLayout::chain(3)?)?;
            let gc = GraphConv::new(s, "g", 2, 3, mode, r);
            for id in gc.masks {
                s.get_mut(id).value = Tensor::random_uniform(&[3, 3], 0.5, 1.5, r);
            }
            let x = rand_tensor(&[t, 3, 2], r);
            let proj = rand_tensor(&[t, 3, 2], r);
            smooth_check(s, |tape, st| {
                let xv = tape.constant(x.clone());
                let y = gc.forward(tape, st, &adj, xv)?;
                project(tape, y, &proj)
            })
        }
        "batch_norm" => {
            let mut bn = BatchNorm::new(s, "bn", 3);
            s.get_mut(bn.gamma).value = Tensor::random_uniform(&[3], 0.5, 1.5, r);
            s.get_mut(bn.beta).value = rand_tensor(&[3], r);
            let x_id = s.add("x", rand_tensor(&[t, 2, 3], r));
            let proj = rand_tensor(&[t, 2, 3], r);
            smooth_check(s, |tape, st| {
                let xv = tape.param(st, x_id);
                let y = bn.forward(tape, st, xv, Mode::Train)?;
                project(tape, y, &proj)
            })
        }
        "lstm_step" => {
            let dir = LstmDirection::new(s, "l", 2, 3, r);
            for id in [dir.b_ih, dir.b_hh] {
                s.get_mut(id).value = rand_tensor(&[12], r);
            }
            let x_id = s.add("x", rand_tensor(&[1, 2], r));
            let h_id = s.add("h", rand_tensor(&[1, 3], r));
            let c_id = s.add("c", rand_tensor(&[1, 3], r));
            let ph = rand_tensor(&[1, 3], r);
            let pc = rand_tensor(&[1, 3], r);
            smooth_check(s, |tape, st| {
                let w = LstmVars {
                    w_ih: tape.param(st, dir.w_ih),
                    w_hh: tape.param(st, dir.w_hh),
                    b_ih: tape.param(st, dir.b_ih),
                    b_hh: tape.param(st, dir.b_hh),
                };
                let (x, h, c) = (tape.param(st, x_id), tape.param(st, h_id), tape.param(st, c_id));
                let (h1, c1) = lstm_step(tape, x, h, c, w)?;
                let a = project(tape, h1, &ph)?;
                let b = project(tape, c1, &pc)?;
                tape.add(a, b)
            })
        }
        "bilstm" => {
            let layer = BiLstmLayer::new(s, "b", 2, 3, true, r);
            let x_id = s.add("x", rand_tensor(&[t, 2], r));
            let proj = rand_tensor(&[t, 6], r);
            smooth_check(s, |tape, st| {
                let xv = tape.param(st, x_id);
                let y = layer.forward(tape, st, xv)?;
                project(tape, y, &proj)
            })
        }
        "tcn_block" => {
            let spec = ConvSpec {
                kernel: 3,
                dilation: r.gen_range(1..3),
                causal: r.gen_bool(0.5),
                channels_in: 3,
                channels_out: 3,
            };
            let mut block = TcnBlock::new(s, "t", spec, r)?;
            let x_id = s.add("x", rand_tensor(&[t, 3], r));
            let proj = rand_tensor(&[t, 3], r);
            smooth_check(s, |tape, st| {
                let xv = tape.param(st, x_id);
                let y = block.forward(tape, st, xv, Mode::Train)?;
                project(tape, y, &proj)
            })
        }
        "stgcn_block" => {
            let spec = ConvSpec {
                kernel: 3,
                dilation: r.gen_range(1..3),
                causal: r.gen_bool(0.5),
                channels_in: 2,
                channels_out: 2,
            };
            let adj = PartitionedAdjacency::from_layout(&GraphLayout::chain(3)?)?;
            let mode = if r.gen_bool(0.5) {
                MaskMode::Hadamard
            } else {
                MaskMode::RightMultiply
            };
            let mut block = StGcnBlock::new(s, "b", spec, 3, mode, r)?;
            let x_id = s.add("x", rand_tensor(&[t, 3, 2], r));
            let proj = rand_tensor(&[t, 3, 2], r);
            smooth_check(s, |tape, st| {
                let xv = tape.param(st, x_id);
                let y = block.forward(tape, st, &adj, xv, Mode::Train)?;
                project(tape, y, &proj)
            })
        }
        "prediction_head" => {
            let head = crate::layers::PredictionHead::new(s, "h", 3, 4, r);
            s.get_mut(head.conv.bias).value = rand_tensor(&[4], r);
            let x_id = s.add("x", rand_tensor(&[t, 3], r));
            let proj = rand_tensor(&[t, 4], r);
            smooth_check(s, |tape, st| {
                let xv = tape.param(st, x_id);
                let y = head.forward(tape, st, xv)?;
                project(tape, y, &proj)
            })
        }
        "ms_gcn_end_to_end" => {
            let mut cfg = ModelConfig::new(ModelKind::MsGcn, GraphLayout::chain(3)?, 2, 2);
            cfg.filters = 3;
            cfg.layers_per_stage = 2;
            cfg.causal = r.gen_bool(0.5);
            let mut model = Model::new(cfg, seed)?;
            let x = rand_tensor(&[8, 3, 2], r);
            let labels: Vec<usize> = (0..8).map(|_| r.gen_range(0..2)).collect();
            let loss = LossConfig {
                detach_prev: false,
                ..LossConfig::default()
            };
            let mut store = std::mem::take(&mut model.store);
            let out = smooth_check(&mut store, |tape, st| {
                model.store = st.clone();
                let xv = tape.constant(x.clone());
                let stages = model.forward_tape(tape, xv, Mode::Train)?;
                combined_loss(tape, &stages, &labels, &loss)
            });
            model.store = store;
            out
        }
        other => panic!("unknown layer {other}"),
    }
}

/// Run `instances` seeded checks per layer, redrawing instances that sit on
/// a kink. Fails if more than ten draws per instance are needed.
pub fn gradient_suite(layers: &[&str], instances: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    layers
        .iter()
        .map(|&layer| {
            let mut worst = 0.0f64;
            let (mut done, mut redrawn) = (0, 0);
            let mut draw = 0u64;
            while done < instances {
                if draw >= 10 * instances as u64 {
                    return Err(Error::Domain {
                        op: "gradient_suite",
                        detail: format!("{layer}: {redrawn} of {draw} instances were within {KINK_MARGIN} of a kink"),
                    });
                }
                let (r, gap) = check_one(layer, seed.wrapping_mul(1000).wrapping_add(draw))?;
                draw += 1;
                if gap < KINK_MARGIN {
                    redrawn += 1;
                    continue;
                }
                worst = worst.max(r.max_rel_error);
                done += 1;
            }
            Ok(LayerCheck {
                layer: layer.to_string(),
                instances,
                redrawn,
                max_rel_error: worst,
            })
        })
        .collect()
}
