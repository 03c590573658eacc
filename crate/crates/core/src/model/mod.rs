//! Network builders, forward passes and head replacement.

mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchStats, Tape, Var};
use crate::init::InitSpec;
use crate::param::{ParamSnapshot, Parameter};
use crate::pruning::Mask;
use crate::tensor::Tensor;

pub use train::{
    evaluate, train, EarlyStopping, EpochRecord, Evaluation, TrainConfig, TrainError, TrainTrace,
};

/// Exponential-moving-average decay for batch-norm inference statistics.
pub const BN_DECAY: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;
pub const HEAD_NAME: &str = "head";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("snapshot does not match model: {0}")]
    SnapshotMismatch(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One residual stage: `repeats` basic blocks of `channels` width, the
/// first of which uses `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stage {
    pub stride: usize,
    pub channels: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    MiniResnet { plan: Vec<Stage> },
}

impl Architecture {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::MiniResnet { .. } => "mini-resnet",
        }
    }

    /// `mlp` with 300-100 hidden units.
    pub fn default_mlp() -> Self {
        Architecture::Mlp { hidden: vec![300, 100] }
    }

    /// `((1, 8, n), (2, 16, n), (2, 32, n))`.
    pub fn default_resnet(repeats: usize) -> Self {
        Architecture::MiniResnet {
            plan: vec![
                Stage { stride: 1, channels: 8, repeats },
                Stage { stride: 2, channels: 16, repeats },
                Stage { stride: 2, channels: 32, repeats },
            ],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { hidden } => {
                let widths: Vec<_> = hidden.iter().map(|h| h.to_string()).collect();
                write!(f, "mlp:{}", widths.join(","))
            }
            Architecture::MiniResnet { plan } => {
                let stages: Vec<_> = plan
                    .iter()
                    .map(|s| format!("{}x{}x{}", s.stride, s.channels, s.repeats))
                    .collect();
                write!(f, "mini-resnet:{}", stages.join(","))
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    /// Parses `mlp:300,100` or `mini-resnet:1x8x2,2x16x2,2x32x2`; bare `mlp`
    /// and `mini-resnet` give the default layouts.
    fn from_str(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::InvalidSpec(format!("cannot parse architecture {s:?}"));
        match s {
            "mlp" => return Ok(Architecture::default_mlp()),
            "mini-resnet" => return Ok(Architecture::default_resnet(2)),
            _ => {}
        }
        let (kind, body) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "mlp" => {
                let hidden = if body.is_empty() {
                    Vec::new()
                } else {
                    body.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?
                };
                Ok(Architecture::Mlp { hidden })
            }
            "mini-resnet" => {
                let plan = body
                    .split(',')
                    .map(|stage| {
                        let v: Vec<usize> = stage
                            .split('x')
                            .map(|t| t.trim().parse())
                            .collect::<Result<_, _>>()
                            .map_err(|_| bad())?;
                        match v.as_slice() {
                            &[stride, channels, repeats] => Ok(Stage { stride, channels, repeats }),
                            _ => Err(bad()),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Architecture::MiniResnet { plan })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_shape: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            arch,
            input_shape,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "input shape must be [C, H, W], got {:?}",
                self.input_shape
            )));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(ModelError::InvalidSpec("hidden widths must be positive".into()));
                }
            }
            Architecture::MiniResnet { plan } => {
                if plan.is_empty() {
                    return Err(ModelError::InvalidSpec("block plan must be non-empty".into()));
                }
                if plan.iter().any(|s| s.stride == 0 || s.channels == 0 || s.repeats == 0) {
                    return Err(ModelError::InvalidSpec("stage stride, channels and repeats must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_shape_string(&self) -> String {
        self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// Whether inference uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
    pub head_name: String,
}

/// Running-statistic updates gathered during a training-mode forward pass.
pub struct BnUpdate {
    mean_index: usize,
    var_index: usize,
    stats: BatchStats<f32>,
}

pub struct Forward {
    pub logits: Var,
    /// Tape variable of each parameter, `None` for non-trainable ones.
    pub param_vars: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Draws a fresh model from `init`. Weights are Xavier-uniform, biases and
/// batch-norm shifts zero, batch-norm scales one.
pub fn build_model(spec: &ModelSpec, init: &InitSpec) -> Result<ModelState, ModelError> {
    spec.validate()?;
    let mut params = Vec::new();
    let linear = |params: &mut Vec<Parameter>, name: &str, fan_in: usize, fan_out: usize, prunable_weight: bool| {
        let w = init.draw(&[fan_in, fan_out], fan_in, fan_out, &format!("{name}.weight"));
        params.push(Parameter::new(format!("{name}.weight"), w, prunable_weight, true));
        params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false, true));
    };
    match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut width = spec.input_len();
            for (i, &h) in hidden.iter().enumerate() {
                linear(&mut params, &format!("fc{i}"), width, h, true);
                width = h;
            }
            linear(&mut params, HEAD_NAME, width, spec.num_classes, true);
        }
        Architecture::MiniResnet { plan } => {
            let conv = |params: &mut Vec<Parameter>, name: &str, out_c: usize, in_c: usize, k: usize| {
                let fan_in = in_c * k * k;
                let fan_out = out_c * k * k;
                let w = init.draw(&[out_c, in_c, k, k], fan_in, fan_out, &format!("{name}.weight"));
                params.push(Parameter::new(format!("{name}.weight"), w, true, true));
            };
            let bn = |params: &mut Vec<Parameter>, name: &str, c: usize| {
                params.push(Parameter::new(format!("{name}.gamma"), Tensor::ones(&[c]), false, true));
                params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[c]), false, true));
                params.push(Parameter::new(format!("{name}.running_mean"), Tensor::zeros(&[c]), false, false));
                params.push(Parameter::new(format!("{name}.running_var"), Tensor::ones(&[c]), false, false));
            };
            let mut in_c = spec.input_shape[0];
            let stem_c = plan[0].channels;
            conv(&mut params, "stem.conv", stem_c, in_c, 3);
            bn(&mut params, "stem.bn", stem_c);
            in_c = stem_c;
            for (si, stage) in plan.iter().enumerate() {
                for b in 0..stage.repeats {
                    let stride = if b == 0 { stage.stride } else { 1 };
                    let prefix = format!("stage{}.block{b}", si + 1);
                    conv(&mut params, &format!("{prefix}.conv1"), stage.channels, in_c, 3);
                    bn(&mut params, &format!("{prefix}.bn1"), stage.channels);
                    conv(&mut params, &format!("{prefix}.conv2"), stage.channels, stage.channels, 3);
                    bn(&mut params, &format!("{prefix}.bn2"), stage.channels);
                    if stride != 1 || in_c != stage.channels {
                        conv(&mut params, &format!("{prefix}.shortcut.conv"), stage.channels, in_c, 1);
                        bn(&mut params, &format!("{prefix}.shortcut.bn"), stage.channels);
                    }
                    in_c = stage.channels;
                }
            }
            linear(&mut params, HEAD_NAME, in_c, spec.num_classes, true);
        }
    }
    Ok(ModelState {
        spec: spec.clone(),
        params,
        head_name: HEAD_NAME.to_string(),
    })
}

impl ModelState {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn is_head(&self, name: &str) -> bool {
        name.strip_prefix(&self.head_name).is_some_and(|rest| rest.starts_with('.'))
    }

    pub fn prunable_count(&self) -> usize {
        self.params.iter().filter(|p| p.prunable).map(|p| p.value.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot::capture(&self.params)
    }

    /// Overwrites every parameter value from `snap`; names and shapes must agree.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<(), ModelError> {
        if snap.len() != self.params.len() {
            return Err(ModelError::SnapshotMismatch(format!(
                "{} entries for {} parameters",
                snap.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter().zip(&snap.entries) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(ModelError::SnapshotMismatch(format!(
                    "{} {:?} vs {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(&snap.entries) {
            p.value = t.clone();
        }
        Ok(())
    }

    /// Fingerprint of every parameter outside the head.
    pub fn trunk_fingerprint(&self) -> u64 {
        crate::param::fingerprint(
            self.params
                .iter()
                .filter(|p| !self.is_head(&p.name))
                .map(|p| (p.name.as_str(), &p.value)),
        )
    }

    /// Records a forward pass of `x: [B, C, H, W]` on `tape`. Masked weights
    /// enter the graph as zeros whether or not they are zero in `self`.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Tensor<f32>, mode: Mode, mask: Option<&Mask>) -> Result<Forward, ModelError> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(ModelError::InputShape {
                expected: self.spec.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let mut param_vars = Vec::with_capacity(self.params.len());
        let mut leaf_vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let value = match mask.and_then(|m| m.entry(&p.name)) {
                Some(bits) => {
                    let mut v = p.value.clone();
                    for (w, &keep) in v.data_mut().iter_mut().zip(bits) {
                        if !keep {
                            *w = 0.0;
                        }
                    }
                    v
                }
                None => p.value.clone(),
            };
            let track = p.trainable && mode == Mode::Train;
            let var = tape.leaf(value, track);
            param_vars.push(track.then_some(var));
            leaf_vars.push(var);
        }
        let mut ctx = Ctx {
            model: self,
            tape,
            vars: &leaf_vars,
            mode,
            bn_updates: Vec::new(),
        };
        let input = ctx.tape.constant(x);
        let logits = match &self.spec.arch {
            Architecture::Mlp { hidden } => ctx.mlp(input, hidden.len())?,
            Architecture::MiniResnet { plan } => ctx.resnet(input, plan)?,
        };
        Ok(Forward {
            logits,
            param_vars,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            for (r, &b) in self.params[u.mean_index].value.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = BN_DECAY * *r + (1.0 - BN_DECAY) * b;
            }
            for (r, &b) in self.params[u.var_index].value.data_mut().iter_mut().zip(&u.stats.var) {
                *r = BN_DECAY * *r + (1.0 - BN_DECAY) * b;
            }
        }
    }
}

struct Ctx<'a> {
    model: &'a ModelState,
    tape: &'a mut Tape<f32>,
    vars: &'a [Var],
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Var {
        let i = self.model.index_of(name).unwrap_or_else(|| panic!("model has no parameter {name}"));
        self.vars[i]
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let gamma = self.var(&format!("{name}.gamma"));
        let beta = self.var(&format!("{name}.beta"));
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    mean_index: self.model.index_of(&mean_name).unwrap(),
                    var_index: self.model.index_of(&var_name).unwrap(),
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let m = self.model.param(&mean_name).unwrap().value.data();
                let v = self.model.param(&var_name).unwrap().value.data();
                Ok(self.tape.batch_norm_eval(x, gamma, beta, m, v, BN_EPS)?)
            }
        }
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, padding: usize) -> Result<Var, ModelError> {
        let w = self.var(&format!("{name}.weight"));
        Ok(self.tape.conv2d(x, w, stride, padding)?)
    }

    fn mlp(&mut self, x: Var, depth: usize) -> Result<Var, ModelError> {
        let mut h = self.tape.flatten(x)?;
        for i in 0..depth {
            h = self.linear(h, &format!("fc{i}"))?;
            h = self.tape.relu(h)?;
        }
        self.linear(h, HEAD_NAME)
    }

    fn resnet(&mut self, x: Var, plan: &[Stage]) -> Result<Var, ModelError> {
        let mut h = self.conv(x, "stem.conv", 1, 1)?;
        h = self.bn(h, "stem.bn")?;
        h = self.tape.relu(h)?;
        for (si, stage) in plan.iter().enumerate() {
            for b in 0..stage.repeats {
                let stride = if b == 0 { stage.stride } else { 1 };
                let prefix = format!("stage{}.block{b}", si + 1);
                let mut y = self.conv(h, &format!("{prefix}.conv1"), stride, 1)?;
                y = self.bn(y, &format!("{prefix}.bn1"))?;
                y = self.tape.relu(y)?;
                y = self.conv(y, &format!("{prefix}.conv2"), 1, 1)?;
                y = self.bn(y, &format!("{prefix}.bn2"))?;
                let shortcut = if self.model.index_of(&format!("{prefix}.shortcut.conv.weight")).is_some() {
                    let s = self.conv(h, &format!("{prefix}.shortcut.conv"), stride, 0)?;
                    self.bn(s, &format!("{prefix}.shortcut.bn"))?
                } else {
                    h
                };
                y = self.tape.add(y, shortcut)?;
                h = self.tape.relu(y)?;
            }
        }
        let pooled = self.tape.global_avg_pool(h)?;
        let flat = self.tape.flatten(pooled)?;
        self.linear(flat, HEAD_NAME)
    }
}

/// Returns a copy of `model` whose classification head is freshly drawn from
/// `init` with `num_classes` outputs. All other parameters are copied bit
/// for bit.
pub fn replace_head(model: &ModelState, num_classes: usize, init: &InitSpec) -> Result<ModelState, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::InvalidSpec(format!("num_classes must be at least 2, got {num_classes}")));
    }
    let mut out = model.clone();
    out.spec.num_classes = num_classes;
    let w_name = format!("{}.weight", model.head_name);
    let b_name = format!("{}.bias", model.head_name);
    let wi = out
        .index_of(&w_name)
        .ok_or_else(|| ModelError::InvalidSpec(format!("model has no {w_name}")))?;
    let fan_in = out.params[wi].value.shape()[0];
    // A separate stream from the one build_model uses, so the same seed
    // still yields a fresh head.
    let w = init.draw(&[fan_in, num_classes], fan_in, num_classes, &format!("{w_name}#replacement"));
    let prunable = out.params[wi].prunable;
    out.params[wi] = Parameter::new(w_name, w, prunable, true);
    let bi = out
        .index_of(&b_name)
        .ok_or_else(|| ModelError::InvalidSpec(format!("model has no {b_name}")))?;
    out.params[bi] = Parameter::new(b_name, Tensor::zeros(&[num_classes]), false, true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Mlp { hidden: vec![300, 100] }, vec![1, 28, 28], 10).unwrap()
    }

    #[test]
    fn lenet_300_100_prunable_count() {
        let m = build_model(&mlp_spec(), &InitSpec::xavier(0)).unwrap();
        assert_eq!(m.prunable_count(), 784 * 300 + 300 * 100 + 100 * 10);
        assert_eq!(m.prunable_count(), 266_200);
    }

    #[test]
    fn building_is_deterministic() {
        let a = build_model(&mlp_spec(), &InitSpec::xavier(5)).unwrap();
        let b = build_model(&mlp_spec(), &InitSpec::xavier(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resnet_forward_shape() {
        let spec = ModelSpec::new(Architecture::default_resnet(2), vec![3, 32, 32], 10).unwrap();
        let m = build_model(&spec, &InitSpec::xavier(1)).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, Tensor::full(&[1, 3, 32, 32], 0.1), Mode::Eval, None).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[1, 10]);
    }

    #[test]
    fn architecture_round_trips_through_text() {
        for arch in [Architecture::default_mlp(), Architecture::default_resnet(3)] {
            let text = arch.to_string();
            assert_eq!(text.parse::<Architecture>().unwrap(), arch);
        }
        assert!("conv:3".parse::<Architecture>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(Architecture::default_mlp(), vec![1, 4, 4], 1).is_err());
        assert!(ModelSpec::new(Architecture::MiniResnet { plan: vec![] }, vec![3, 8, 8], 2).is_err());
    }

    #[test]
    fn head_replacement_isolation() {
        let m = build_model(&mlp_spec(), &InitSpec::xavier(0)).unwrap();
        let r = replace_head(&m, 19, &InitSpec::xavier(0)).unwrap();
        assert_eq!(m.trunk_fingerprint(), r.trunk_fingerprint());
        for (a, b) in m.params.iter().zip(&r.params) {
            if !m.is_head(&a.name) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(r.param("head.weight").unwrap().value.shape(), &[100, 19]);
        assert_eq!(r.spec.num_classes, 19);
        let old_head = 100 * 10 + 10;
        let new_head = 100 * 19 + 19;
        assert_eq!(r.param_count(), m.param_count() - old_head + new_head);
    }

    #[test]
    fn same_width_replacement_redraws_head() {
        let m = build_model(&mlp_spec(), &InitSpec::xavier(0)).unwrap();
        let r = replace_head(&m, 10, &InitSpec::xavier(0)).unwrap();
        let (a, b) = (m.param("head.weight").unwrap(), r.param("head.weight").unwrap());
        assert_eq!(a.value.shape(), b.value.shape());
        assert_ne!(a.value, b.value);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = build_model(&mlp_spec(), &InitSpec::xavier(0)).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward(&mut tape, Tensor::zeros(&[2, 3, 28, 28]), Mode::Eval, None),
            Err(ModelError::InputShape { .. })
        ));
    }
}
