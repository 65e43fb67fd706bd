//! The five segmentation architectures and their checkpoint format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::graph::{GraphLayout, PartitionedAdjacency};
use crate::layers::{
    BatchNorm, BiLstmLayer, Conv1x1, ConvSpec, MaskMode, Mode, PredictionHead, StGcnBlock, TcnBlock,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSGCNCKP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bilstm,
    Tcn,
    Stgcn,
    MsTcn,
    MsGcn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Bilstm,
        ModelKind::Tcn,
        ModelKind::Stgcn,
        ModelKind::MsTcn,
        ModelKind::MsGcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bilstm => "bilstm",
            ModelKind::Tcn => "tcn",
            ModelKind::Stgcn => "stgcn",
            ModelKind::MsTcn => "ms-tcn",
            ModelKind::MsGcn => "ms-gcn",
        }
    }

    pub fn is_graph(self) -> bool {
        matches!(self, ModelKind::Stgcn | ModelKind::MsGcn)
    }

    pub fn is_multi_stage(self) -> bool {
        matches!(self, ModelKind::MsTcn | ModelKind::MsGcn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DilationSchedule {
    /// 1, 2, 4, ... per layer
    #[default]
    Doubling,
    /// 1 for every layer
    Regular,
}

impl DilationSchedule {
    pub fn dilations(self, layers: usize) -> Vec<usize> {
        match self {
            DilationSchedule::Doubling => (0..layers).map(|i| 1usize << i).collect(),
            DilationSchedule::Regular => vec![1; layers],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub filters: usize,
    pub kernel: usize,
    pub layers_per_stage: usize,
    pub refinement_stages: usize,
    pub dilation: DilationSchedule,
    pub causal: bool,
    pub num_classes: usize,
    pub in_channels: usize,
    pub layout: GraphLayout,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub mask_mode: MaskMode,
}

impl ModelConfig {
    /// Defaults: 64 filters, kernel 3, 10 layers per stage,
    /// 3 refinement stages, doubling dilations, acausal.
    pub fn new(kind: ModelKind, layout: GraphLayout, in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind,
            filters: 64,
            kernel: 3,
            layers_per_stage: 10,
            refinement_stages: 3,
            dilation: DilationSchedule::Doubling,
            causal: false,
            num_classes,
            in_channels,
            layout,
            lstm_hidden: 64,
            lstm_layers: 2,
            mask_mode: MaskMode::Hadamard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        if self.kind == ModelKind::Bilstm {
            if self.lstm_hidden == 0 || self.lstm_layers == 0 {
                return Err(Error::Config("lstm needs at least one layer and one cell".into()));
            }
        } else {
            if self.filters == 0 || self.layers_per_stage == 0 {
                return Err(Error::Config("filters and layers_per_stage must be positive".into()));
            }
            if self.layers_per_stage >= usize::BITS as usize {
                return Err(Error::Config("too many layers for a doubling schedule".into()));
            }
            self.conv_spec(1).validate()?;
        }
        if self.kind.is_multi_stage() && self.refinement_stages == 0 {
            return Err(Error::Config("multi-stage models need at least one refinement stage".into()));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.dilation.dilations(self.layers_per_stage)
    }

    pub fn num_stages(&self) -> usize {
        if self.kind.is_multi_stage() {
            1 + self.refinement_stages
        } else {
            1
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.layout.num_nodes
    }

    fn conv_spec(&self, dilation: usize) -> ConvSpec {
        ConvSpec {
            kernel: self.kernel,
            dilation,
            causal: self.causal,
            channels_in: self.filters,
            channels_out: self.filters,
        }
    }
}

/// Per-stage `T × L` class probabilities, first stage first.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedPrediction {
    pub stages: Vec<Tensor>,
}

impl StagedPrediction {
    pub fn last(&self) -> &Tensor {
        self.stages.last().expect("at least one stage")
    }

    /// Per-sample argmax of the final stage.
    pub fn labels(&self) -> Vec<usize> {
        self.last().argmax_rows()
    }
}

#[derive(Clone, Debug)]
pub struct RefinementStage {
    pub adjust: Conv1x1,
    pub blocks: Vec<TcnBlock>,
    pub head: PredictionHead,
}

impl RefinementStage {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let adjust = Conv1x1::new(store, &format!("{name}.adjust"), cfg.num_classes, cfg.filters, rng);
        let blocks = cfg
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| TcnBlock::new(store, &format!("{name}.block{i}"), cfg.conv_spec(d), rng))
            .collect::<Result<_>>()?;
        let head = PredictionHead::new(store, &format!("{name}.head"), cfg.filters, cfg.num_classes, rng);
        Ok(RefinementStage { adjust, blocks, head })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, prev: Var, mode: Mode) -> Result<Var> {
        let mut h = self.adjust.forward(tape, store, prev)?;
        for b in &mut self.blocks {
            h = b.forward(tape, store, h, mode)?;
        }
        self.head.forward(tape, store, h)
    }

    fn batch_norms(&mut self) -> Vec<&mut BatchNorm> {
        self.blocks.iter_mut().map(|b| &mut b.bn).collect()
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Lstm(Vec<BiLstmLayer>),
    Tcn { adjust: Conv1x1, blocks: Vec<TcnBlock> },
    Gcn { adjust: Conv1x1, blocks: Vec<StGcnBlock> },
}

/// A built model: configuration, parameters and layer structure.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    input_bn: BatchNorm,
    backbone: Backbone,
    head: PredictionHead,
    refinements: Vec<RefinementStage>,
    adjacency: PartitionedAdjacency,
}

impl Model {
    /// Build with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let adjacency = PartitionedAdjacency::from_layout(&config.layout)?;
        let n = config.num_nodes();
        let flat = n * config.in_channels;
        let bn_channels = if config.kind.is_graph() { config.in_channels } else { flat };
        let input_bn = BatchNorm::new(s, "input_bn", bn_channels);

        let (backbone, width) = match config.kind {
            ModelKind::Bilstm => {
                let bidir = !config.causal;
                let mut layers: Vec<BiLstmLayer> = Vec::new();
                let mut cin = flat;
                for i in 0..config.lstm_layers {
                    let layer = BiLstmLayer::new(s, &format!("stage0.lstm{i}"), cin, config.lstm_hidden, bidir, rng);
                    cin = layer.output_width();
                    layers.push(layer);
                }
                (Backbone::Lstm(layers), cin)
            }
            ModelKind::Tcn | ModelKind::MsTcn => {
                let adjust = Conv1x1::new(s, "stage0.adjust", flat, config.filters, rng);
                let blocks = config
                    .dilations()
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| TcnBlock::new(s, &format!("stage0.block{i}"), config.conv_spec(d), rng))
                    .collect::<Result<_>>()?;
                (Backbone::Tcn { adjust, blocks }, config.filters)
            }
            ModelKind::Stgcn | ModelKind::MsGcn => {
                let adjust = Conv1x1::new(s, "stage0.adjust", config.in_channels, config.filters, rng);
                let blocks = config
                    .dilations()
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| {
                        StGcnBlock::new(s, &format!("stage0.block{i}"), config.conv_spec(d), n, config.mask_mode, rng)
                    })
                    .collect::<Result<_>>()?;
                (Backbone::Gcn { adjust, blocks }, config.filters)
            }
        };
        let head = PredictionHead::new(s, "stage0.head", width, config.num_classes, rng);
        let refinements = (1..config.num_stages())
            .map(|k| RefinementStage::new(s, &format!("stage{k}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            config,
            store,
            input_bn,
            backbone,
            head,
            refinements,
            adjacency,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn refinements_mut(&mut self) -> &mut [RefinementStage] {
        &mut self.refinements
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.num_nodes(), self.config.in_channels];
        if x.ndim() != 3 || x.shape()[1..] != want || x.shape()[0] == 0 {
            return Err(Error::Dimension {
                op: "model_input",
                left: x.shape().to_vec(),
                right: vec![0, want[0], want[1]],
            });
        }
        Ok(())
    }

    /// Record the whole network on `tape`. `x` must hold a `[T, N, C]`
    /// tensor. Returns one probability `Var` per stage.
    pub fn forward_tape(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Vec<Var>> {
        self.check_input(tape.value(x))?;
        let t = tape.value(x).shape()[0];
        let store = &self.store;
        let flat = self.config.num_nodes() * self.config.in_channels;
        let h = match &mut self.backbone {
            Backbone::Lstm(layers) => {
                let mut h = tape.reshape(x, &[t, flat])?;
                h = self.input_bn.forward(tape, store, h, mode)?;
                for l in layers.iter() {
                    h = l.forward(tape, store, h)?;
                }
                h
            }
            Backbone::Tcn { adjust, blocks } => {
                let mut h = tape.reshape(x, &[t, flat])?;
                h = self.input_bn.forward(tape, store, h, mode)?;
                h = adjust.forward(tape, store, h)?;
                for b in blocks.iter_mut() {
                    h = b.forward(tape, store, h, mode)?;
                }
                h
            }
            Backbone::Gcn { adjust, blocks } => {
                let mut h = self.input_bn.forward(tape, store, x, mode)?;
                h = adjust.forward(tape, store, h)?;
                for b in blocks.iter_mut() {
                    h = b.forward(tape, store, &self.adjacency, h, mode)?;
                }
                tape.mean_nodes(h)?
            }
        };
        let mut stages = vec![self.head.forward(tape, store, h)?];
        for r in &mut self.refinements {
            let prev = *stages.last().unwrap();
            stages.push(r.forward(tape, store, prev, mode)?);
        }
        Ok(stages)
    }

    /// Apply refinement stage `index` (0-based, so stage `index + 2` of the
    /// model) to a probability sequence.
    pub fn refine(&mut self, index: usize, prev: &Tensor, mode: Mode) -> Result<Tensor> {
        let n = self.refinements.len();
        let stage = self
            .refinements
            .get_mut(index)
            .ok_or_else(|| Error::Config(format!("refinement stage {index} out of range ({n} stages)")))?;
        let mut tape = Tape::new();
        let p = tape.constant(prev.clone());
        let out = stage.forward(&mut tape, &self.store, p, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Forward pass without gradients.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<StagedPrediction> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.forward_tape(&mut tape, xv, mode)?;
        Ok(StagedPrediction {
            stages: vars.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    /// Inference with batch-norm running statistics.
    pub fn predict(&mut self, x: &Tensor) -> Result<StagedPrediction> {
        self.forward(x, Mode::Eval)
    }

    pub fn batch_norms(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.input_bn];
        match &mut self.backbone {
            Backbone::Lstm(_) => {}
            Backbone::Tcn { blocks, .. } => out.extend(blocks.iter_mut().map(|b| &mut b.bn)),
            Backbone::Gcn { blocks, .. } => {
                for b in blocks.iter_mut() {
                    out.push(&mut b.bn_spatial);
                    out.push(&mut b.bn_temporal);
                }
            }
        }
        for r in &mut self.refinements {
            out.extend(r.batch_norms());
        }
        out
    }

    /// Named tensors making up the full model state: parameters followed by
    /// batch-norm running statistics.
    pub fn state_tensors(&mut self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for bn in self.batch_norms() {
            let c = bn.running_mean.len();
            out.push((format!("{}.running_mean", bn.name), Tensor::new(&[c], bn.running_mean.clone()).unwrap()));
            out.push((format!("{}.running_var", bn.name), Tensor::new(&[c], bn.running_var.clone()).unwrap()));
        }
        out
    }

    pub fn to_bytes(&mut self) -> Vec<u8> {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        container::encode(CHECKPOINT_MAGIC, &header, &self.state_tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(CHECKPOINT_MAGIC, bytes)?;
        let config: ModelConfig =
            serde_json::from_str(&c.header).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        let mut expected: std::collections::HashMap<String, Tensor> = c.tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = expected
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in model.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = take(&p.name, &shape)?;
        }
        for bn in model.batch_norms() {
            let c = bn.running_mean.len();
            bn.running_mean = take(&format!("{}.running_mean", bn.name), &[c])?.into_data();
            bn.running_var = take(&format!("{}.running_var", bn.name), &[c])?.into_data();
        }
        if let Some(name) = expected.keys().next() {
            return Err(Error::Format(format!("checkpoint has unexpected tensor {name}")));
        }
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::layout_preset;
    use rand::SeedableRng;

    fn small(kind: ModelKind, causal: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(kind, GraphLayout::chain(3).unwrap(), 2, 4);
        cfg.filters = 6;
        cfg.layers_per_stage = 3;
        cfg.refinement_stages = 2;
        cfg.lstm_hidden = 5;
        cfg.causal = causal;
        cfg
    }

    fn input(t: usize, n: usize, c: usize, seed: u64) -> Tensor {
        Tensor::random_uniform(&[t, n, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn every_stage_is_a_distribution_of_full_length() {
        for kind in ModelKind::ALL {
            let mut m = Model::new(small(kind, false), 1).unwrap();
            let out = m.forward(&input(9, 3, 2, 2), Mode::Train).unwrap();
            assert_eq!(out.stages.len(), m.config().num_stages());
            for s in &out.stages {
                assert_eq!(s.shape(), &[9, 4]);
                for r in 0..9 {
                    assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn published_shape_for_gait_preset() {
        let layout = layout_preset("fog-gait").unwrap();
        let mut cfg = ModelConfig::new(ModelKind::MsGcn, layout, 6, 5);
        cfg.filters = 8;
        let mut m = Model::new(cfg, 0).unwrap();
        let out = m.predict(&input(64, 9, 6, 3)).unwrap();
        assert_eq!(out.stages.len(), 4);
        assert!(out.stages.iter().all(|s| s.shape() == [64, 5]));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let mut m = Model::new(small(ModelKind::MsGcn, false), 1).unwrap();
        let err = m.forward(&input(5, 4, 2, 0), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn default_dilations_double() {
        let cfg = ModelConfig::new(ModelKind::MsGcn, GraphLayout::chain(2).unwrap(), 6, 3);
        assert_eq!(cfg.dilations(), vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(DilationSchedule::Regular.dilations(3), vec![1, 1, 1]);
    }

    #[test]
    fn tcn_block_parameter_count() {
        let mut store = ParamStore::new();
        let spec = ConvSpec {
            kernel: 3,
            dilation: 1,
            causal: false,
            channels_in: 64,
            channels_out: 64,
        };
        TcnBlock::new(&mut store, "b", spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_scalars(), 12_480);
        let mut store = ParamStore::new();
        Conv1x1::new(&mut store, "c", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.num_scalars(), 9);
    }

    #[test]
    fn multi_stage_variants_differ_only_in_first_stage() {
        let mut tcn = Model::new(small(ModelKind::MsTcn, false), 0).unwrap();
        let mut gcn = Model::new(small(ModelKind::MsGcn, false), 0).unwrap();
        let later = |m: &mut Model| -> usize {
            m.store.iter().filter(|p| !p.name.starts_with("stage0") && p.name != "input_bn.gamma" && p.name != "input_bn.beta").map(|p| p.value.len()).sum()
        };
        assert_eq!(later(&mut tcn), later(&mut gcn));
        assert_ne!(tcn.parameter_count(), gcn.parameter_count());
    }

    #[test]
    fn chained_refinements_reproduce_forward_stages() {
        let mut m = Model::new(small(ModelKind::MsGcn, false), 4).unwrap();
        let x = input(12, 3, 2, 5);
        let out = m.predict(&x).unwrap();
        let mut p = out.stages[0].clone();
        for k in 0..2 {
            p = m.refine(k, &p, Mode::Eval).unwrap();
            assert_eq!(p, out.stages[k + 1]);
        }
    }

    #[test]
    fn zero_refinement_weights_give_uniform_output() {
        let mut m = Model::new(small(ModelKind::MsTcn, false), 4).unwrap();
        let ids: Vec<_> = m.store.ids().filter(|&id| m.store.get(id).name.starts_with("stage1")).collect();
        for id in ids {
            let p = m.store.get_mut(id);
            if !p.name.ends_with("gamma") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let prev = Tensor::random_uniform(&[7, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = m.refine(0, &prev, Mode::Eval).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        for kind in ModelKind::ALL {
            let mut m = Model::new(small(kind, true), 9).unwrap();
            let x = input(6, 3, 2, 1);
            m.forward(&x, Mode::Train).unwrap();
            let bytes = m.to_bytes();
            let mut back = Model::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        }
    }

    #[test]
    fn causal_models_ignore_future_input() {
        for kind in ModelKind::ALL {
            let mut m = Model::new(small(kind, true), 2).unwrap();
            let x = input(10, 3, 2, 3);
            let mut y = x.clone();
            for v in &mut y.data_mut()[7 * 6..] {
                *v += 1.0;
            }
            let a = m.predict(&x).unwrap();
            let b = m.predict(&y).unwrap();
            for (sa, sb) in a.stages.iter().zip(&b.stages) {
                assert_eq!(&sa.data()[..7 * 4], &sb.data()[..7 * 4], "{kind}");
            }
        }
    }

    #[test]
    fn single_stage_gcn_equals_first_stage_of_multi_stage() {
        let mut single = Model::new(small(ModelKind::Stgcn, false), 3).unwrap();
        let mut multi = Model::new(small(ModelKind::MsGcn, false), 3).unwrap();
        let x = input(8, 3, 2, 6);
        let a = single.forward(&x, Mode::Train).unwrap();
        let b = multi.forward(&x, Mode::Train).unwrap();
        assert_eq!(a.stages[0], b.stages[0]);
    }
}
