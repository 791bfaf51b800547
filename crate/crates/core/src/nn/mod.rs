//! Dense network engine: a ReLU feature trunk feeding two affine heads.
//!
//! The classification head produces `C` logits and the auxiliary head produces
//! a single logit that is squashed with a sigmoid into a task-membership score.
//! Both heads read the same trunk, which is stored once inside
//! [`PersonalModel`]. Training the auxiliary classifier therefore moves the
//! features used by the target classifier and vice versa.
//!
//! All arithmetic is `f64`. Gradients are exact and analytic.

pub mod checkpoint;
mod loss;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use loss::{binary_cross_entropy, sigmoid, softmax, softmax_cross_entropy, SCORE_EPS};

/// Layer widths of a personalized model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = ArchSpec {
            input_dim,
            hidden_dims,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::input("hidden_dims must contain at least one layer"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::input("hidden layer widths must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::input("num_classes must be positive"));
        }
        Ok(())
    }

    /// Width of the trunk output (the last hidden layer).
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated arch")
    }

    pub fn trunk_param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut n = 0;
        for &h in &self.hidden_dims {
            n += fan_in * h + h;
            fan_in = h;
        }
        n
    }

    pub fn cls_head_param_count(&self) -> usize {
        self.feature_dim() * self.num_classes + self.num_classes
    }

    pub fn aux_head_param_count(&self) -> usize {
        self.feature_dim() + 1
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.cls_head_param_count() + self.aux_head_param_count()
    }
}

/// One affine layer. Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LayerParams {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot<R: rand::Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let mut layer = LayerParams::zeros(in_dim, out_dim);
        for w in &mut layer.weights {
            *w = dist.sample(rng);
        }
        layer
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `out = W x + b`
    pub fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.affine_into(x, &mut out);
        out
    }

    /// Weights then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn same_shape(&self, other: &LayerParams) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

/// A personalized model: shared trunk, classification head `w`, auxiliary
/// head `θ`. The target classifier is `trunk ⊕ cls_head` and the auxiliary
/// classifier is `trunk ⊕ aux_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalModel {
    pub arch: ArchSpec,
    pub trunk: Vec<LayerParams>,
    pub cls_head: LayerParams,
    pub aux_head: LayerParams,
}

/// Activations kept from a forward pass for backprop.
///
/// `activations[0]` is the input; `activations[i]` is the post-ReLU output of
/// trunk layer `i - 1`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub class_logits: Vec<f64>,
    pub aux_logit: f64,
    pub aux_score: f64,
    pub cache: ForwardCache,
}

/// Which heads contribute to a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    Cls,
    Aux,
    Joint,
}

impl LossSpec {
    fn uses_cls(self) -> bool {
        matches!(self, LossSpec::Cls | LossSpec::Joint)
    }

    fn uses_aux(self) -> bool {
        matches!(self, LossSpec::Aux | LossSpec::Joint)
    }
}

/// One training example. A sample may carry a class label, an auxiliary
/// membership label, or both; heads only see samples labelled for them.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub class: Option<usize>,
    pub aux: Option<bool>,
}

impl<'a> Example<'a> {
    pub fn class(x: &'a [f64], y: usize) -> Self {
        Example {
            x,
            class: Some(y),
            aux: None,
        }
    }

    pub fn aux(x: &'a [f64], member: bool) -> Self {
        Example {
            x,
            class: None,
            aux: Some(member),
        }
    }

    pub fn both(x: &'a [f64], y: usize, member: bool) -> Self {
        Example {
            x,
            class: Some(y),
            aux: Some(member),
        }
    }
}

impl PersonalModel {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut fan_in = arch.input_dim;
        let mut trunk = Vec::with_capacity(arch.hidden_dims.len());
        for &h in &arch.hidden_dims {
            trunk.push(LayerParams::zeros(fan_in, h));
            fan_in = h;
        }
        Ok(PersonalModel {
            arch: arch.clone(),
            trunk,
            cls_head: LayerParams::zeros(fan_in, arch.num_classes),
            aux_head: LayerParams::zeros(fan_in, 1),
        })
    }

    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, Stream::ModelInit, &[]);
        let mut fan_in = arch.input_dim;
        let mut trunk = Vec::with_capacity(arch.hidden_dims.len());
        for &h in &arch.hidden_dims {
            trunk.push(LayerParams::glorot(fan_in, h, &mut rng));
            fan_in = h;
        }
        let cls_head = LayerParams::glorot(fan_in, arch.num_classes, &mut rng);
        let aux_head = LayerParams::glorot(fan_in, 1, &mut rng);
        Ok(PersonalModel {
            arch: arch.clone(),
            trunk,
            cls_head,
            aux_head,
        })
    }

    /// Trunk layers, then the classification head, then the auxiliary head.
    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.cls_head))
            .chain(std::iter::once(&self.aux_head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.cls_head))
            .chain(std::iter::once(&mut self.aux_head))
    }

    /// Flat parameter view in checkpoint order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(LayerParams::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().flat_map(LayerParams::values_mut)
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LayerParams::param_count).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::input(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        for (p, v) in self.values_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    /// True when both models have identical layer shapes.
    pub fn is_congruent(&self, other: &PersonalModel) -> bool {
        self.arch == other.arch
            && self.trunk.len() == other.trunk.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.same_shape(b))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &PersonalModel) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::input(format!(
                "feature vector has length {}, model expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Runs the trunk and caches every activation.
    pub fn trunk_forward(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.trunk {
            let mut h = layer.affine(activations.last().expect("input pushed"));
            for v in &mut h {
                *v = v.max(0.0);
            }
            activations.push(h);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let cache = self.trunk_forward(x)?;
        let feats = cache.features();
        let class_logits = self.cls_head.affine(feats);
        let aux_logit = self.aux_head.affine(feats)[0];
        Ok(Forward {
            class_logits,
            aux_logit,
            aux_score: sigmoid(aux_logit),
            cache,
        })
    }

    pub fn class_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.class_logits)
    }

    pub fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(x)?.class_logits))
    }

    /// `f(x; θ)`: the auxiliary classifier's membership score in `(0, 1)`.
    pub fn aux_score(&self, x: &[f64]) -> Result<f64> {
        let cache = self.trunk_forward(x)?;
        Ok(sigmoid(self.aux_head.affine(cache.features())[0]))
    }

    /// Mean loss over the labelled examples and its exact gradient.
    ///
    /// The classification term averages softmax cross-entropy over examples
    /// with a class label; the auxiliary term averages binary cross-entropy
    /// over examples with a membership label. `Joint` adds the two means, so
    /// the trunk receives both gradient streams while each head only sees its
    /// own loss.
    pub fn loss_and_grad(&self, batch: &[Example<'_>], spec: LossSpec) -> Result<(f64, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::input("backward called on an empty batch"));
        }
        let n_cls = if spec.uses_cls() {
            batch.iter().filter(|e| e.class.is_some()).count()
        } else {
            0
        };
        let n_aux = if spec.uses_aux() {
            batch.iter().filter(|e| e.aux.is_some()).count()
        } else {
            0
        };
        if n_cls + n_aux == 0 {
            return Err(Error::input(format!(
                "batch carries no labels for loss {spec:?}"
            )));
        }

        let mut grads = GradientSet::zeros_like(self);
        let mut loss = 0.0;
        let feat_dim = self.arch.feature_dim();
        let mut delta = vec![0.0; feat_dim];

        for ex in batch {
            let use_cls = n_cls > 0 && ex.class.is_some();
            let use_aux = n_aux > 0 && ex.aux.is_some();
            if !use_cls && !use_aux {
                continue;
            }
            let cache = self.trunk_forward(ex.x)?;
            let feats = cache.features();
            delta.iter_mut().for_each(|d| *d = 0.0);

            if use_cls {
                let label = ex.class.expect("checked");
                let logits = self.cls_head.affine(feats);
                loss += softmax_cross_entropy(&logits, label)? / n_cls as f64;
                let mut dlogits = softmax(&logits);
                dlogits[label] -= 1.0;
                let scale = 1.0 / n_cls as f64;
                for d in &mut dlogits {
                    *d *= scale;
                }
                accumulate_layer(&self.cls_head, grads.cls_head_mut(), feats, &dlogits, &mut delta);
            }
            if use_aux {
                let member = ex.aux.expect("checked");
                let s = sigmoid(self.aux_head.affine(feats)[0]);
                loss += binary_cross_entropy(s, member) / n_aux as f64;
                let target = if member { 1.0 } else { 0.0 };
                let dlogit = [(s - target) / n_aux as f64];
                accumulate_layer(&self.aux_head, grads.aux_head_mut(), feats, &dlogit, &mut delta);
            }

            // Back through the trunk, last layer first.
            let mut upstream = delta.clone();
            for (i, layer) in self.trunk.iter().enumerate().rev() {
                let out = &cache.activations[i + 1];
                for (u, a) in upstream.iter_mut().zip(out) {
                    if *a <= 0.0 {
                        *u = 0.0;
                    }
                }
                let input = &cache.activations[i];
                let mut down = vec![0.0; layer.in_dim];
                accumulate_layer(layer, &mut grads.layers[i], input, &upstream, &mut down);
                upstream = down;
            }
        }
        Ok((loss, grads))
    }

    /// Gradient of the mean loss; see [`PersonalModel::loss_and_grad`].
    pub fn backward(&self, batch: &[Example<'_>], spec: LossSpec) -> Result<GradientSet> {
        Ok(self.loss_and_grad(batch, spec)?.1)
    }

    /// Mean loss without gradients.
    pub fn loss(&self, batch: &[Example<'_>], spec: LossSpec) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("loss called on an empty batch"));
        }
        let n_cls = batch.iter().filter(|e| e.class.is_some()).count();
        let n_aux = batch.iter().filter(|e| e.aux.is_some()).count();
        let mut loss = 0.0;
        for ex in batch {
            let fwd = self.forward(ex.x)?;
            if let (true, Some(y)) = (spec.uses_cls(), ex.class) {
                loss += softmax_cross_entropy(&fwd.class_logits, y)? / n_cls as f64;
            }
            if let (true, Some(m)) = (spec.uses_aux(), ex.aux) {
                loss += binary_cross_entropy(fwd.aux_score, m) / n_aux as f64;
            }
        }
        Ok(loss)
    }

    /// `p ← p − lr·(g + weight_decay·p)` for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64, weight_decay: f64) {
        debug_assert_eq!(grads.param_count(), self.param_count());
        for (p, g) in self.values_mut().zip(grads.values()) {
            *p -= lr * (g + weight_decay * *p);
        }
    }
}

/// Adds `dout ⊗ input` to the layer gradient and `Wᵀ dout` to `dinput`.
fn accumulate_layer(
    layer: &LayerParams,
    grad: &mut LayerParams,
    input: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
) {
    let in_dim = layer.in_dim;
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad.bias[o] += d;
        let grow = &mut grad.weights[o * in_dim..(o + 1) * in_dim];
        let wrow = &layer.weights[o * in_dim..(o + 1) * in_dim];
        for j in 0..in_dim {
            grow[j] += d * input[j];
            dinput[j] += d * wrow[j];
        }
    }
}

/// One real per model parameter, laid out exactly like [`PersonalModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<LayerParams>,
}

impl GradientSet {
    pub fn zeros_like(model: &PersonalModel) -> Self {
        GradientSet {
            layers: model
                .layers()
                .map(|l| LayerParams::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn trunk(&self) -> &[LayerParams] {
        &self.layers[..self.layers.len() - 2]
    }

    pub fn cls_head(&self) -> &LayerParams {
        &self.layers[self.layers.len() - 2]
    }

    pub fn aux_head(&self) -> &LayerParams {
        &self.layers[self.layers.len() - 1]
    }

    fn cls_head_mut(&mut self) -> &mut LayerParams {
        let n = self.layers.len();
        &mut self.layers[n - 2]
    }

    fn aux_head_mut(&mut self) -> &mut LayerParams {
        let n = self.layers.len();
        &mut self.layers[n - 1]
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerParams::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(LayerParams::values_mut)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Entrywise `self += other`.
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;
