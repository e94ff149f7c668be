//! The expression network: two convolution stages with optional batch norm
//! and attention, followed by a three-layer dense head with optional
//! dropout.
//!
//! ```text
//! Conv(3→5,k3) [BN] ReLU MaxPool [Attention]
//! Conv(5→11,k3) [BN] ReLU MaxPool [Dropout]
//! Flatten Dense(→d1) ReLU [Dropout] Dense(→d2) ReLU [Dropout] Dense(→2)
//! ```
//!
//! Class indices: 0 = Happy, 1 = Sad.

mod gradcam;

pub use gradcam::{Heatmap, GRADCAM_SIZE};

use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, SeBlock, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Dense, Dropout, Flatten, Layer, MaxPool2d, Mode, Param, Relu};
use crate::tensor::{Rng, Scalar, Shape4, Tensor4};

pub const CLASS_NAMES: [&str; 2] = ["happy", "sad"];
pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    None,
    Se,
    Cbam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_batchnorm: bool,
    pub use_dropout: bool,
    pub attention: AttentionKind,
    pub dense_widths: [usize; 2],
    /// `[spatial, head1, head2]`.
    pub dropout_rates: [f64; 3],
    pub input_size: usize,
    pub num_classes: usize,
    pub reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_batchnorm: false,
            use_dropout: false,
            attention: AttentionKind::None,
            dense_widths: [128, 64],
            dropout_rates: [0.25, 0.5, 0.5],
            input_size: DEFAULT_INPUT_SIZE,
            num_classes: 2,
            reduction: DEFAULT_REDUCTION,
            seed: 42,
        }
    }
}

/// Smallest square input that survives both conv/pool stages.
pub const MIN_INPUT_SIZE: usize = 10;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.dense_widths.contains(&0) {
            return Err(Error::Config("dense widths must be >= 1".into()));
        }
        if self.input_size < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "input_size must be >= {MIN_INPUT_SIZE}, got {}",
                self.input_size
            )));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
        }
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction must be >= 1".into()));
        }
        Ok(())
    }
}

/// A named experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub config: ModelConfig,
}

/// The eight ablation configurations in reporting order, built on `base`
/// (whose toggles are overwritten).
pub fn experiment_configs_from(base: &ModelConfig) -> Vec<Experiment> {
    use AttentionKind::{Cbam, None, Se};
    let table = [
        ("Experiment 1: Without Regularization", false, false, None),
        ("Experiment 2: With Attention Block (SE Block)", false, false, Se),
        (
            "Experiment 3: With CBAM (Channel + Spatial Attention)",
            false,
            false,
            Cbam,
        ),
        ("Experiment 4: With BatchNorm", true, false, None),
        ("Experiment 5: With Dropout", false, true, None),
        ("Experiment 6: With BatchNorm and Dropout", true, true, None),
        (
            "Experiment 7: With BatchNorm, Dropout, and SE Attention",
            true,
            true,
            Se,
        ),
        (
            "Experiment 8: With BatchNorm, Dropout, and CBAM Attention",
            true,
            true,
            Cbam,
        ),
    ];
    table
        .into_iter()
        .map(|(name, bn, dropout, attention)| Experiment {
            name: name.to_string(),
            config: ModelConfig {
                use_batchnorm: bn,
                use_dropout: dropout,
                attention,
                ..base.clone()
            },
        })
        .collect()
}

pub fn experiment_configs() -> Vec<Experiment> {
    experiment_configs_from(&ModelConfig::default())
}

/// One position of the layer sequence.
#[derive(Clone, Debug)]
pub enum Stage<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu),
    MaxPool(MaxPool2d),
    Se(SeBlock<T>),
    Cbam(Cbam<T>),
    Dropout(Dropout<T>),
    Flatten(Flatten),
    Dense(Dense<T>),
}

impl<T: Scalar> Stage<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Conv(_) => "conv",
            Stage::BatchNorm(_) => "batchnorm",
            Stage::Relu(_) => "relu",
            Stage::MaxPool(_) => "maxpool",
            Stage::Se(_) => "se",
            Stage::Cbam(_) => "cbam",
            Stage::Dropout(_) => "dropout",
            Stage::Flatten(_) => "flatten",
            Stage::Dense(_) => "dense",
        }
    }

    pub fn layer(&self) -> &dyn Layer<T> {
        match self {
            Stage::Conv(l) => l,
            Stage::BatchNorm(l) => l,
            Stage::Relu(l) => l,
            Stage::MaxPool(l) => l,
            Stage::Se(l) => l,
            Stage::Cbam(l) => l,
            Stage::Dropout(l) => l,
            Stage::Flatten(l) => l,
            Stage::Dense(l) => l,
        }
    }

    pub fn layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            Stage::Conv(l) => l,
            Stage::BatchNorm(l) => l,
            Stage::Relu(l) => l,
            Stage::MaxPool(l) => l,
            Stage::Se(l) => l,
            Stage::Cbam(l) => l,
            Stage::Dropout(l) => l,
            Stage::Flatten(l) => l,
            Stage::Dense(l) => l,
        }
    }
}

// Initialisation substream per architecture slot, so a given seed yields the
// same conv weights whichever optional stages are present.
mod slot {
    pub const CONV1: u64 = 1;
    pub const ATTENTION: u64 = 5;
    pub const CONV2: u64 = 6;
    pub const DROPOUT_SPATIAL: u64 = 10;
    pub const DENSE1: u64 = 12;
    pub const DROPOUT_HEAD1: u64 = 14;
    pub const DENSE2: u64 = 15;
    pub const DROPOUT_HEAD2: u64 = 17;
    pub const DENSE3: u64 = 18;
}

#[derive(Clone, Debug)]
pub struct ExpressionNet<T = f32> {
    config: ModelConfig,
    stages: Vec<Stage<T>>,
    names: Vec<String>,
    // Index of the second conv stage's ReLU, the Grad-CAM target.
    cam_stage: usize,
}

impl<T: Scalar> ExpressionNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let rng = |slot| Rng::substream(seed, slot);
        let s = config.input_size;
        let after_stage1 = (s - 2) / 2;
        let after_stage2 = (after_stage1 - 2) / 2;
        let flat = 11 * after_stage2 * after_stage2;
        let [d1, d2] = config.dense_widths;
        let [p_spatial, p_head1, p_head2] = config.dropout_rates;

        let mut stages: Vec<(String, Stage<T>)> = Vec::new();
        let mut push = |name: &str, stage| stages.push((name.to_string(), stage));
        push(
            "conv1",
            Stage::Conv(Conv2d::new("conv1", 3, 5, 3, &mut rng(slot::CONV1))),
        );
        if config.use_batchnorm {
            push("bn1", Stage::BatchNorm(BatchNorm2d::new("bn1", 5)));
        }
        push("relu1", Stage::Relu(Relu::new()));
        push("pool1", Stage::MaxPool(MaxPool2d::new()));
        match config.attention {
            AttentionKind::None => {}
            AttentionKind::Se => push(
                "se",
                Stage::Se(SeBlock::new("se", 5, config.reduction, &mut rng(slot::ATTENTION))),
            ),
            AttentionKind::Cbam => push(
                "cbam",
                Stage::Cbam(Cbam::new("cbam", 5, config.reduction, &mut rng(slot::ATTENTION))),
            ),
        }
        push(
            "conv2",
            Stage::Conv(Conv2d::new("conv2", 5, 11, 3, &mut rng(slot::CONV2))),
        );
        if config.use_batchnorm {
            push("bn2", Stage::BatchNorm(BatchNorm2d::new("bn2", 11)));
        }
        push("relu2", Stage::Relu(Relu::new()));
        push("pool2", Stage::MaxPool(MaxPool2d::new()));
        if config.use_dropout {
            push(
                "dropout1",
                Stage::Dropout(Dropout::new(p_spatial, rng(slot::DROPOUT_SPATIAL))?),
            );
        }
        push("flatten", Stage::Flatten(Flatten::new()));
        push(
            "dense1",
            Stage::Dense(Dense::new("dense1", flat, d1, &mut rng(slot::DENSE1))),
        );
        push("relu3", Stage::Relu(Relu::new()));
        if config.use_dropout {
            push(
                "dropout2",
                Stage::Dropout(Dropout::new(p_head1, rng(slot::DROPOUT_HEAD1))?),
            );
        }
        push(
            "dense2",
            Stage::Dense(Dense::new("dense2", d1, d2, &mut rng(slot::DENSE2))),
        );
        push("relu4", Stage::Relu(Relu::new()));
        if config.use_dropout {
            push(
                "dropout3",
                Stage::Dropout(Dropout::new(p_head2, rng(slot::DROPOUT_HEAD2))?),
            );
        }
        push(
            "dense3",
            Stage::Dense(Dense::new("dense3", d2, config.num_classes, &mut rng(slot::DENSE3))),
        );

        let (names, stages): (Vec<String>, Vec<Stage<T>>) = stages.into_iter().unzip();
        let cam_stage = names
            .iter()
            .position(|n| n == "relu2")
            .expect("relu2 is always present");
        Ok(Self {
            config,
            stages,
            names,
            cam_stage,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stage_names(&self) -> &[String] {
        &self.names
    }

    pub fn input_shape(&self, n: usize) -> Shape4 {
        let s = self.config.input_size;
        [n, INPUT_CHANNELS, s, s]
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        let expected = self.input_shape(shape[0]);
        if shape != expected || shape[0] == 0 {
            return Err(Error::contract(format!(
                "model input must be [n>=1, 3, {s}, {s}], got {shape:?}",
                s = self.config.input_size
            )));
        }
        Ok(())
    }

    /// Raw class scores `[n, 2, 1, 1]`.
    pub fn forward_logits(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.forward(x, mode)
    }

    /// Eval-mode argmax predictions (ties go to class 0).
    pub fn predict(&mut self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok((0..logits.n()).map(|i| argmax(logits.sample(i))).collect())
    }

    /// `(stage name, output shape)` for every stage, starting with the input.
    pub fn shape_trace(&self, n: usize) -> Result<Vec<(String, Shape4)>> {
        let mut shape = self.input_shape(n);
        let mut trace = vec![("input".to_string(), shape)];
        for (name, stage) in self.names.iter().zip(&self.stages) {
            shape = stage.layer().output_shape(shape)?;
            trace.push((name.clone(), shape));
        }
        Ok(trace)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Freezes or releases the masks of every dropout stage.
    pub fn set_freeze_dropout(&mut self, freeze: bool) {
        for stage in &mut self.stages {
            if let Stage::Dropout(d) = stage {
                d.set_freeze_mask(freeze);
            }
        }
    }

    pub fn dropout_rngs(&self) -> Vec<Rng> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Dropout(d) => Some(d.rng().clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_dropout_rngs(&mut self, rngs: Vec<Rng>) -> Result<()> {
        let slots = self.stages.iter().filter(|s| matches!(s, Stage::Dropout(_))).count();
        if rngs.len() != slots {
            return Err(Error::Format(format!(
                "expected {slots} dropout rng states, got {}",
                rngs.len()
            )));
        }
        let mut rngs = rngs.into_iter();
        for stage in &mut self.stages {
            if let Stage::Dropout(d) = stage {
                d.set_rng(rngs.next().expect("counted above"));
            }
        }
        Ok(())
    }

    /// Every tensor that defines the model's state: parameters followed by
    /// batch-norm running statistics, in a fixed order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out: Vec<(String, &Tensor4<T>)> =
            self.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        for (name, stage) in self.names.iter().zip(&self.stages) {
            if let Stage::BatchNorm(bn) = stage {
                out.push((format!("{name}.running_mean"), &bn.running_mean));
                out.push((format!("{name}.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        let mut out = Vec::new();
        let mut stats = Vec::new();
        for (name, stage) in self.names.iter().zip(self.stages.iter_mut()) {
            if let Stage::BatchNorm(bn) = stage {
                out.push((bn.gamma.name.clone(), &mut bn.gamma.value));
                out.push((bn.beta.name.clone(), &mut bn.beta.value));
                stats.push((format!("{name}.running_mean"), &mut bn.running_mean));
                stats.push((format!("{name}.running_var"), &mut bn.running_var));
            } else {
                for p in stage.layer_mut().params_mut() {
                    out.push((p.name.clone(), &mut p.value));
                }
            }
        }
        out.extend(stats);
        out
    }

    /// Converts every tensor to another precision (used for 64-bit checks).
    pub fn cast<U: Scalar>(&self) -> Result<ExpressionNet<U>> {
        let mut net = ExpressionNet::<U>::new(self.config.clone())?;
        let source = self.state_tensors();
        for ((name, dst), (src_name, src)) in net.state_tensors_mut().into_iter().zip(source) {
            debug_assert_eq!(name, src_name);
            *dst = src.cast();
        }
        net.set_dropout_rngs(self.dropout_rngs())?;
        Ok(net)
    }
}

impl<T: Scalar> Layer<T> for ExpressionNet<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let mut h = self.stages[0].layer_mut().forward(x, mode)?;
        for stage in &mut self.stages[1..] {
            h = stage.layer_mut().forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = dy.clone();
        for stage in self.stages.iter_mut().rev() {
            g = stage.layer_mut().backward(&g)?;
        }
        Ok(g)
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        Ok([input[0], self.config.num_classes, 1, 1])
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|s| s.layer().params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.layer_mut().params_mut())
            .collect()
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}
