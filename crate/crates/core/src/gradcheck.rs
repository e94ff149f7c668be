//! Central finite-difference gradient checks in 64-bit mode.
//!
//! A layer is checked against the scalar objective `L = Σ r ⊙ layer(x)` for a
//! random `r`: the analytic gradients from `backward(r)` are compared with
//! `(L(θ + h) − L(θ − h)) / 2h` on a sample of input and parameter
//! coordinates.

use crate::attention::{Cbam, SeBlock, DEFAULT_REDUCTION};
use crate::error::Result;
use crate::model::{experiment_configs, ExpressionNet, ModelConfig};
use crate::nn::{softmax_cross_entropy, BatchNorm2d, Conv2d, Dense, Dropout, Layer, MaxPool2d, Mode, Relu};
use crate::tensor::{Rng, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Coordinates sampled per tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            coords_per_tensor: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where `max_rel_error` occurred, e.g. `"input[17]"` or `"conv1.weight[3]"`.
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped_kinks: 0,
        }
    }

    /// Folds another report in, keeping the worst error.
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

// Coordinates agreeing this well are never examined for kinks.
const KINK_SCREEN: f64 = 1e-7;

enum Target {
    Input,
    Param(usize),
}

/// Checks input and parameter gradients of `layer` at `x`.
///
/// Layers with stochastic forwards (dropout) must have their masks frozen by
/// the caller so every evaluation sees the same function.
pub fn check_layer<L: Layer<f64>>(
    layer: &mut L,
    x: &Tensor4<f64>,
    mode: Mode,
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    layer.zero_grads();
    let y = layer.forward(x, mode)?;
    let r = Tensor4::from_fn(y.shape(), |_| rng.normal());
    let dx = layer.backward(&r)?;
    let param_grads: Vec<(String, Tensor4<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut report = GradCheckReport::empty();
    let mut x = x.clone();
    for k in sample_coords(x.len(), opts.coords_per_tensor, rng) {
        let outcome = probe(layer, &mut x, mode, &r, Target::Input, k, dx.data()[k], opts)?;
        report.record(outcome, || format!("input[{k}]"));
    }
    for (pi, (name, grad)) in param_grads.iter().enumerate() {
        for k in sample_coords(grad.len(), opts.coords_per_tensor, rng) {
            let outcome = probe(layer, &mut x, mode, &r, Target::Param(pi), k, grad.data()[k], opts)?;
            report.record(outcome, || format!("{name}[{k}]"));
        }
    }
    Ok(report)
}

enum Outcome {
    Checked(f64),
    Kink,
}

impl GradCheckReport {
    fn record(&mut self, outcome: Outcome, location: impl FnOnce() -> String) {
        match outcome {
            Outcome::Kink => self.skipped_kinks += 1,
            Outcome::Checked(rel) => {
                if rel > self.max_rel_error || self.checked == 0 {
                    self.max_rel_error = rel;
                    self.worst = location();
                }
                self.checked += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn probe<L: Layer<f64>>(
    layer: &mut L,
    x: &mut Tensor4<f64>,
    mode: Mode,
    r: &Tensor4<f64>,
    target: Target,
    k: usize,
    analytic: f64,
    opts: &GradCheckOptions,
) -> Result<Outcome> {
    let h = opts.step;
    let eval_at = |layer: &mut L, x: &mut Tensor4<f64>, delta: f64| -> Result<f64> {
        let original = read(layer, x, &target, k);
        write(layer, x, &target, k, original + delta);
        let y = layer.forward(x, mode);
        write(layer, x, &target, k, original);
        y?.dot(r)
    };
    let plus = eval_at(layer, x, h)?;
    let minus = eval_at(layer, x, -h)?;
    let numeric = (plus - minus) / (2.0 * h);
    let rel = relative_error(analytic, numeric, opts.floor);
    if rel <= KINK_SCREEN {
        return Ok(Outcome::Checked(rel));
    }
    let centre = eval_at(layer, x, 0.0)?;
    let right = (plus - centre) / h;
    let left = (centre - minus) / h;
    // At a kink the one-sided slopes jump; on a smooth function they differ
    // only by ~h·|f''|, far below any discrepancy worth reporting.
    if (right - left).abs() >= (analytic - numeric).abs() {
        return Ok(Outcome::Kink);
    }
    Ok(Outcome::Checked(rel))
}

fn read<L: Layer<f64>>(layer: &L, x: &Tensor4<f64>, target: &Target, k: usize) -> f64 {
    match target {
        Target::Input => x.data()[k],
        Target::Param(pi) => layer.params()[*pi].value.data()[k],
    }
}

fn write<L: Layer<f64>>(layer: &mut L, x: &mut Tensor4<f64>, target: &Target, k: usize, v: f64) {
    match target {
        Target::Input => x.data_mut()[k] = v,
        Target::Param(pi) => layer.params_mut()[*pi].value.data_mut()[k] = v,
    }
}

fn sample_coords(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// Random tensor whose entries all have magnitude at least `margin`, keeping
/// element-wise kinks at 0 out of reach of the finite-difference step.
pub fn away_from_zero(shape: Shape4, margin: f64, rng: &mut Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let magnitude = margin + rng.uniform();
        if rng.chance(0.5) {
            magnitude
        } else {
            -magnitude
        }
    })
}

/// Tolerance for individual layers.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Tolerance for the assembled tiny network.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= self.tolerance
    }
}

/// Every layer plus the tiny network, `trials` random draws each.
pub fn run_suite(trials: usize, seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    type Check = fn(&mut Rng, &GradCheckOptions) -> Result<GradCheckReport>;
    let checks: [(&'static str, Check, f64); 11] = [
        ("conv2d", check_conv, LAYER_TOLERANCE),
        ("batchnorm2d (train)", check_batchnorm_train, LAYER_TOLERANCE),
        ("batchnorm2d (eval)", check_batchnorm_eval, LAYER_TOLERANCE),
        ("relu", check_relu, LAYER_TOLERANCE),
        ("maxpool2d", check_maxpool, LAYER_TOLERANCE),
        ("dense", check_dense, LAYER_TOLERANCE),
        ("dropout (mask fixed)", check_dropout, LAYER_TOLERANCE),
        ("se_block", check_se, LAYER_TOLERANCE),
        ("cbam", check_cbam, LAYER_TOLERANCE),
        ("softmax_xent", check_softmax_xent, LAYER_TOLERANCE),
        ("tiny model (8 configs)", check_tiny_model, MODEL_TOLERANCE),
    ];
    let mut entries = Vec::new();
    for (index, (name, check, tolerance)) in checks.into_iter().enumerate() {
        let mut report = GradCheckReport::empty();
        for trial in 0..trials {
            let mut rng = Rng::substream(seed, (index * 1_000_000 + trial) as u64);
            report.merge(check(&mut rng, opts)?);
        }
        entries.push(SuiteEntry {
            name,
            trials,
            tolerance,
            report,
        });
    }
    Ok(entries)
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn randomize(values: &mut Tensor4<f64>, scale: f64, rng: &mut Rng) {
    for v in values.data_mut() {
        *v = rng.normal() * scale;
    }
}

fn check_conv(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 3),
        between(rng, 3, 7),
        between(rng, 3, 7),
    ];
    let mut layer = Conv2d::new("conv", shape[1], between(rng, 1, 4), 3, rng);
    randomize(&mut layer.bias.value, 0.5, rng);
    let x = Tensor4::from_fn(shape, |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

fn random_batchnorm(channels: usize, rng: &mut Rng) -> BatchNorm2d<f64> {
    let mut layer = BatchNorm2d::new("bn", channels);
    for v in layer.gamma.value.data_mut() {
        *v = 0.5 + rng.uniform();
    }
    randomize(&mut layer.beta.value, 0.5, rng);
    layer
}

fn check_batchnorm_train(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 2, 3),
        between(rng, 1, 3),
        between(rng, 3, 5),
        between(rng, 3, 5),
    ];
    let mut layer = random_batchnorm(shape[1], rng);
    let x = Tensor4::from_fn(shape, |_| 1.0 + 2.0 * rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

fn check_batchnorm_eval(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 3),
        between(rng, 2, 5),
        between(rng, 2, 5),
    ];
    let mut layer = random_batchnorm(shape[1], rng);
    randomize(&mut layer.running_mean, 1.0, rng);
    for v in layer.running_var.data_mut() {
        *v = 0.2 + rng.uniform();
    }
    let x = Tensor4::from_fn(shape, |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Eval, rng, opts)
}

fn check_relu(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 3),
        between(rng, 2, 5),
        between(rng, 2, 5),
    ];
    let x = away_from_zero(shape, 1e-3, rng);
    check_layer(&mut Relu::new(), &x, Mode::Train, rng, opts)
}

fn check_maxpool(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 3),
        between(rng, 2, 7),
        between(rng, 2, 7),
    ];
    // Distinct values at least 1e-2 apart keep every window's winner stable.
    let mut ranks: Vec<usize> = (0..shape.iter().product()).collect();
    rng.shuffle(&mut ranks);
    let x = Tensor4::from_vec(shape, ranks.into_iter().map(|r| r as f64 * 1e-2 - 0.5).collect())?;
    check_layer(&mut MaxPool2d::new(), &x, Mode::Train, rng, opts)
}

fn check_dense(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n, din, dout) = (between(rng, 1, 4), between(rng, 1, 6), between(rng, 1, 5));
    let mut layer = Dense::new("dense", din, dout, rng);
    randomize(&mut layer.bias.value, 0.5, rng);
    let x = Tensor4::from_fn([n, din, 1, 1], |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

fn check_dropout(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 4),
        between(rng, 1, 4),
        between(rng, 1, 4),
    ];
    let rate = [0.25, 0.5][rng.below(2)];
    let mut layer = Dropout::new(rate, Rng::new(rng.next_u64()))?;
    layer.set_freeze_mask(true);
    let x = Tensor4::from_fn(shape, |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

fn check_se(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [
        between(rng, 1, 3),
        between(rng, 1, 5),
        between(rng, 2, 6),
        between(rng, 2, 6),
    ];
    let mut layer = SeBlock::new("se", shape[1], DEFAULT_REDUCTION, rng);
    randomize(&mut layer.fc1.bias.value, 0.5, rng);
    randomize(&mut layer.fc2.bias.value, 0.5, rng);
    let x = Tensor4::from_fn(shape, |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

fn check_cbam(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [between(rng, 1, 2), between(rng, 2, 4), 8, 8];
    let mut layer = Cbam::new("cbam", shape[1], DEFAULT_REDUCTION, rng);
    randomize(&mut layer.fc1.bias.value, 0.5, rng);
    randomize(&mut layer.fc2.bias.value, 0.5, rng);
    let x = Tensor4::from_fn(shape, |_| rng.normal());
    check_layer(&mut layer, &x, Mode::Train, rng, opts)
}

/// Softmax cross-entropy as a layer producing the scalar loss `[1,1,1,1]`.
struct XentProbe {
    labels: Vec<usize>,
    grad: Option<Tensor4<f64>>,
}

impl Layer<f64> for XentProbe {
    fn forward(&mut self, x: &Tensor4<f64>, _mode: Mode) -> Result<Tensor4<f64>> {
        let (loss, grad) = softmax_cross_entropy(x, &self.labels)?;
        self.grad = Some(grad);
        Ok(Tensor4::full([1, 1, 1, 1], loss))
    }

    fn backward(&mut self, dy: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let grad = self
            .grad
            .take()
            .ok_or_else(|| crate::nn::missing_cache("softmax_xent"))?;
        Ok(grad.scale(dy.data()[0]))
    }

    fn output_shape(&self, _input: Shape4) -> Result<Shape4> {
        Ok([1, 1, 1, 1])
    }
}

fn check_softmax_xent(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let n = between(rng, 1, 6);
    let labels = (0..n).map(|_| rng.below(2)).collect();
    let x = Tensor4::from_fn([n, 2, 1, 1], |_| 3.0 * rng.normal());
    check_layer(&mut XentProbe { labels, grad: None }, &x, Mode::Train, rng, opts)
}

/// Input side of the tiny network used by the full-model check.
pub const TINY_INPUT_SIZE: usize = 16;

/// The tiny clone of experiment `index`: 3×16×16 input, dense widths [8, 4].
pub fn tiny_config(index: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: TINY_INPUT_SIZE,
        dense_widths: [8, 4],
        seed,
        ..experiment_configs()[index % 8].config.clone()
    }
}

fn check_tiny_model(rng: &mut Rng, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::empty();
    for index in 0..8 {
        let mut net = ExpressionNet::<f64>::new(tiny_config(index, rng.next_u64()))?;
        for p in net.params_mut() {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                randomize(&mut p.value, 0.1, rng);
            }
        }
        net.set_freeze_dropout(true);
        let x = Tensor4::from_fn(net.input_shape(2), |_| rng.uniform());
        report.merge(check_layer(&mut net, &x, Mode::Train, rng, opts)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A dense layer whose reported input gradient is deliberately scaled.
        struct Broken(Dense<f64>);
        impl Layer<f64> for Broken {
            fn forward(&mut self, x: &Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>> {
                self.0.forward(x, mode)
            }
            fn backward(&mut self, dy: &Tensor4<f64>) -> Result<Tensor4<f64>> {
                Ok(self.0.backward(dy)?.scale(1.01))
            }
            fn output_shape(&self, s: crate::tensor::Shape4) -> Result<crate::tensor::Shape4> {
                self.0.output_shape(s)
            }
        }
        let mut rng = Rng::new(5);
        let mut layer = Broken(Dense::new("d", 5, 4, &mut rng));
        let x = Tensor4::from_fn([3, 5, 1, 1], |_| rng.normal());
        let report = check_layer(&mut layer, &x, Mode::Train, &mut rng, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error > 5e-3, "{report:?}");
        assert!(report.worst.starts_with("input"));
    }

    #[test]
    fn suite_passes_on_a_few_trials() {
        for entry in run_suite(3, 11, &GradCheckOptions::default()).unwrap() {
            println!(
                "{:24} {:.3e} ({})",
                entry.name, entry.report.max_rel_error, entry.report.worst
            );
            assert!(entry.passed(), "{entry:?}");
        }
    }

    #[test]
    fn sampling_is_bounded_and_sorted() {
        let mut rng = Rng::new(1);
        assert_eq!(sample_coords(5, 24, &mut rng), vec![0, 1, 2, 3, 4]);
        let s = sample_coords(1000, 24, &mut rng);
        assert_eq!(s.len(), 24);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
