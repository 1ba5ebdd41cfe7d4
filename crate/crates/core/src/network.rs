//! The learnable model: a small convolutional backbone with mid-layer taps,
//! the bias-free cosine classifier, and the linear residual-prediction
//! heads with their layer-weight gates.
//!
//! Training runs the model through the autodiff [`Graph`]; evaluation code
//! uses the plain-value functions at the bottom of this module
//! ([`cosine_logits`], [`predict_direction`], [`predict_length`]), which
//! compute the same quantities without a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, PrototypeBank, EPS_NORM};

/// Backbone layout. Stage `i` is `conv3x3 → group norm → ReLU → 2× max
/// pool` with `block_widths[i]` output channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub block_widths: Vec<usize>,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    /// Zero-based stage indices whose pooled outputs are exposed as
    /// mid-level features. First and last stage are not allowed.
    pub tap_layers: Vec<usize>,
    /// Upper bound on normalization groups per stage.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

fn default_norm_groups() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            block_widths: vec![16, 32, 64, 128],
            input_shape: (32, 32, 1),
            tap_layers: vec![1, 2],
            norm_groups: default_norm_groups(),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.block_widths.len();
        if n < 3 {
            return Err(Error::InvalidConfig(
                "backbone needs at least three stages so that a mid layer exists".into(),
            ));
        }
        if self.block_widths.contains(&0) {
            return Err(Error::InvalidConfig("zero-width stage".into()));
        }
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig("empty input shape".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::InvalidConfig("at least one tap layer is required".into()));
        }
        if self.tap_layers.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidConfig(
                "tap layers must be strictly increasing".into(),
            ));
        }
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t == 0 || t + 1 >= n) {
            return Err(Error::InvalidConfig(format!(
                "tap layer {t} is the first or last stage or out of range (stages 1..={})",
                n - 2
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::InvalidConfig("norm_groups must be positive".into()));
        }
        Ok(())
    }

    /// Final feature dimension `d`.
    pub fn feature_dim(&self) -> usize {
        *self.block_widths.last().expect("validated backbone")
    }

    /// Mid-feature dimensions `d_l`, one per tap.
    pub fn tap_dims(&self) -> Vec<usize> {
        self.tap_layers.iter().map(|&t| self.block_widths[t]).collect()
    }

    fn groups(&self, stage: usize) -> usize {
        gcd(self.block_widths[stage], self.norm_groups)
    }

    fn input_len(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Cosine classifier: prototypes `W` (`N × d`, no bias) and temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Tensor,
    pub temperature: f64,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    /// Raw (signed) prototype bank.
    pub fn bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::from_flat(self.weights.row_len(), self.weights.data.clone())
    }
}

/// Per-layer residual predictor: direction transform, length transform and
/// the two single-layer gates producing layer-weight logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHead {
    /// `d × d_l`
    pub dir_weight: Tensor,
    /// `d`
    pub dir_bias: Tensor,
    /// `1 × d_l`
    pub len_weight: Tensor,
    pub len_bias: Tensor,
    pub dir_gate_weight: Tensor,
    pub dir_gate_bias: Tensor,
    pub len_gate_weight: Tensor,
    pub len_gate_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualHeads {
    pub layers: Vec<LayerHead>,
}

/// Backbone, classifier and residual heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStage>,
    pub classifier: ClassifierHead,
    pub heads: ResidualHeads,
}

/// Pooled mid-layer features of one input, one vector per tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidFeatureSet {
    pub features: Vec<Vec<f64>>,
}

/// Output of [`Network::forward_with_taps`] for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    /// Final-layer feature `f(x)`, nonnegative.
    pub feature: Vec<f64>,
    pub mids: MidFeatureSet,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn filled(shape: Vec<usize>, v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![v; n])
}

/// Parameter-group names in [`Network::parameters`] order.
const STAGE_PARAMS: [&str; 4] = ["conv_weight", "conv_bias", "norm_gamma", "norm_beta"];
const HEAD_PARAMS: [&str; 8] = [
    "dir_weight",
    "dir_bias",
    "len_weight",
    "len_bias",
    "dir_gate_weight",
    "dir_gate_bias",
    "len_gate_weight",
    "len_gate_bias",
];

impl Network {
    /// Fan-in scaled normal init for convolutions and transforms; zero gates
    /// so every layer starts with equal weight.
    pub fn new(
        config: BackboneConfig,
        num_classes: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::EmptyDataset);
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let mut in_ch = config.input_shape.2;
        let mut stages = Vec::with_capacity(config.block_widths.len());
        for &out in &config.block_widths {
            let fan_in = (in_ch * 9) as f64;
            stages.push(ConvStage {
                weight: normal_tensor(vec![out, in_ch, 3, 3], (2.0 / fan_in).sqrt(), rng),
                bias: filled(vec![out], 0.0),
                gamma: filled(vec![out], 1.0),
                beta: filled(vec![out], 0.0),
            });
            in_ch = out;
        }
        let d = config.feature_dim();
        let classifier = ClassifierHead {
            weights: normal_tensor(vec![num_classes, d], (1.0 / d as f64).sqrt(), rng),
            temperature,
        };
        let layers = config
            .tap_dims()
            .into_iter()
            .map(|dl| {
                let std = (1.0 / dl as f64).sqrt();
                LayerHead {
                    dir_weight: normal_tensor(vec![d, dl], std, rng),
                    dir_bias: filled(vec![d], 0.0),
                    len_weight: normal_tensor(vec![1, dl], std, rng),
                    len_bias: filled(vec![1], 0.0),
                    dir_gate_weight: filled(vec![1, dl], 0.0),
                    dir_gate_bias: filled(vec![1], 0.0),
                    len_gate_weight: filled(vec![1, dl], 0.0),
                    len_gate_bias: filled(vec![1], 0.0),
                }
            })
            .collect();
        Ok(Self {
            config,
            stages,
            classifier,
            heads: ResidualHeads { layers },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// All parameters with their group names, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (name, t) in STAGE_PARAMS.iter().zip([&s.weight, &s.bias, &s.gamma, &s.beta]) {
                out.push((format!("stage{i}.{name}"), t));
            }
        }
        out.push(("classifier.weights".to_string(), &self.classifier.weights));
        for (l, h) in self.heads.layers.iter().enumerate() {
            for (name, t) in HEAD_PARAMS.iter().zip(head_tensors(h)) {
                out.push((format!("head{l}.{name}"), t));
            }
        }
        out
    }

    /// Same order as [`Network::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            out.extend([&mut s.weight, &mut s.bias, &mut s.gamma, &mut s.beta]);
        }
        out.push(&mut self.classifier.weights);
        for h in &mut self.heads.layers {
            out.extend([
                &mut h.dir_weight,
                &mut h.dir_bias,
                &mut h.len_weight,
                &mut h.len_bias,
                &mut h.dir_gate_weight,
                &mut h.dir_gate_bias,
                &mut h.len_gate_weight,
                &mut h.len_gate_bias,
            ]);
        }
        out
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundNetwork {
        BoundNetwork {
            vars: self
                .parameters()
                .into_iter()
                .map(|(_, t)| g.param(t.clone()))
                .collect(),
            num_stages: self.stages.len(),
        }
    }

    /// Checks a `[B, C, H, W]` batch against the configured input shape.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.input_shape;
        if x.shape.len() != 4 || x.shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match [B, {c}, {h}, {w}]",
                x.shape
            )));
        }
        Ok(())
    }

    /// Backbone forward on the tape. Returns the final feature `[B, d]` and
    /// one pooled `[B, d_l]` mid feature per tap.
    pub fn forward_graph(&self, g: &mut Graph, p: &BoundNetwork, x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut mids = Vec::with_capacity(self.config.tap_layers.len());
        for i in 0..self.stages.len() {
            let [w, b, gamma, beta] = p.stage(i);
            h = g.conv2d(h, w, b);
            h = g.group_norm(h, gamma, beta, self.config.groups(i));
            h = g.relu(h);
            h = g.max_pool2(h);
            if self.config.tap_layers.contains(&i) {
                mids.push(g.global_avg_pool(h));
            }
        }
        (g.global_avg_pool(h), mids)
    }

    /// Cosine logits `τ · cos(|W_i|, f)` on the tape, `[B, N]`.
    pub fn logits_graph(&self, g: &mut Graph, p: &BoundNetwork, f: Var) -> Var {
        let w = g.abs(p.classifier());
        let wn = g.normalize_rows(w);
        let fnorm = g.normalize_rows(f);
        let cos = g.linear(fnorm, wn, None);
        g.scale(cos, self.classifier.temperature)
    }

    /// Residual predictions on the tape: unit direction `[B, d]`, length
    /// `[B, 1]`, direction layer weights `[B, L]`, length layer weights `[B, L]`.
    pub fn heads_graph(&self, g: &mut Graph, p: &BoundNetwork, mids: &[Var]) -> HeadOutputs {
        let mut dirs = Vec::with_capacity(mids.len());
        let mut lens = Vec::with_capacity(mids.len());
        let mut gates = Vec::with_capacity(mids.len());
        let mut len_gates = Vec::with_capacity(mids.len());
        for (l, &m) in mids.iter().enumerate() {
            let h = p.head(l);
            let t = g.linear(m, h[0], Some(h[1]));
            dirs.push(g.normalize_rows(t));
            lens.push(g.linear(m, h[2], Some(h[3])));
            gates.push(g.linear(m, h[4], Some(h[5])));
            len_gates.push(g.linear(m, h[6], Some(h[7])));
        }
        let gate_logits = g.concat_cols(&gates);
        let weights = g.softmax_rows(gate_logits);
        let len_gate_logits = g.concat_cols(&len_gates);
        let len_weights = g.softmax_rows(len_gate_logits);

        let mut dir_sum = g.mul_col(dirs[0], weights, 0);
        let mut len_sum = g.mul_col(lens[0], len_weights, 0);
        for l in 1..mids.len() {
            let d = g.mul_col(dirs[l], weights, l);
            dir_sum = g.add(dir_sum, d);
            let s = g.mul_col(lens[l], len_weights, l);
            len_sum = g.add(len_sum, s);
        }
        HeadOutputs {
            direction: g.normalize_rows(dir_sum),
            length: len_sum,
            weights,
            len_weights,
        }
    }

    /// Final and mid features for a `[B, C, H, W]` batch, in batch order.
    pub fn forward_with_taps(&self, x: &Tensor) -> Result<Vec<Extracted>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = BoundNetwork {
            vars: self
                .parameters()
                .into_iter()
                .map(|(_, t)| g.constant(t.clone()))
                .collect(),
            num_stages: self.stages.len(),
        };
        let xv = g.constant(x.clone());
        let (f, mids) = self.forward_graph(&mut g, &p, xv);
        let fv = g.value(f);
        Ok((0..x.rows())
            .map(|b| Extracted {
                feature: fv.row(b).to_vec(),
                mids: MidFeatureSet {
                    features: mids.iter().map(|&m| g.value(m).row(b).to_vec()).collect(),
                },
            })
            .collect())
    }

    /// [`Network::forward_with_taps`] over a list of CHW images, in chunks.
    pub fn extract(&self, images: &[Vec<f64>], chunk: usize) -> Result<Vec<Extracted>> {
        let (h, w, c) = self.config.input_shape;
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut data = Vec::with_capacity(part.len() * self.config.input_len());
            for img in part {
                if img.len() != self.config.input_len() {
                    return Err(Error::ShapeMismatch(format!(
                        "image of {} values, expected {}",
                        img.len(),
                        self.config.input_len()
                    )));
                }
                data.extend_from_slice(img);
            }
            out.extend(self.forward_with_taps(&Tensor::new(vec![part.len(), c, h, w], data))?);
        }
        Ok(out)
    }
}

fn head_tensors(h: &LayerHead) -> [&Tensor; 8] {
    [
        &h.dir_weight,
        &h.dir_bias,
        &h.len_weight,
        &h.len_bias,
        &h.dir_gate_weight,
        &h.dir_gate_bias,
        &h.len_gate_weight,
        &h.len_gate_bias,
    ]
}

/// Tape handles for every parameter of a [`Network`].
pub struct BoundNetwork {
    vars: Vec<Var>,
    num_stages: usize,
}

impl BoundNetwork {
    /// In [`Network::parameters`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn stage(&self, i: usize) -> [Var; 4] {
        let s = &self.vars[i * 4..i * 4 + 4];
        [s[0], s[1], s[2], s[3]]
    }

    pub fn classifier(&self) -> Var {
        self.vars[self.num_stages * 4]
    }

    fn head(&self, l: usize) -> &[Var] {
        let start = self.num_stages * 4 + 1 + l * 8;
        &self.vars[start..start + 8]
    }
}

/// Tape handles produced by [`Network::heads_graph`].
pub struct HeadOutputs {
    pub direction: Var,
    pub length: Var,
    pub weights: Var,
    pub len_weights: Var,
}

/// Elementwise absolute value of a prototype bank.
pub fn abs_prototypes(bank: &PrototypeBank) -> PrototypeBank {
    bank.abs()
}

/// `τ · cos(|W_i|, f)` for every class.
pub fn cosine_logits(f: &[f64], head: &ClassifierHead) -> Result<Vec<f64>> {
    let bank = abs_prototypes(&head.bank()?);
    (0..bank.len())
        .map(|i| Ok(head.temperature * geometry::cosine_sim(bank.row(i), f)?))
        .collect()
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| geometry::dot(w.row(r), x) + b.data[r])
        .collect()
}

/// `v / max(‖v‖, EPS_NORM)`, matching the tape's row normalization.
fn guarded_normalize(v: &[f64]) -> Vec<f64> {
    let n = geometry::l2_norm(v).max(EPS_NORM);
    v.iter().map(|x| x / n).collect()
}

fn softmax_vec(v: &[f64]) -> Vec<f64> {
    crate::autograd::softmax(v).collect()
}

fn check_mids(mids: &MidFeatureSet, heads: &ResidualHeads) -> Result<()> {
    if mids.features.len() != heads.layers.len() || mids.features.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} mid features for {} head layers",
            mids.features.len(),
            heads.layers.len()
        )));
    }
    for (m, h) in mids.features.iter().zip(&heads.layers) {
        if m.len() != h.dir_weight.row_len() {
            return Err(Error::ShapeMismatch(format!(
                "mid feature of width {} for a head expecting {}",
                m.len(),
                h.dir_weight.row_len()
            )));
        }
    }
    Ok(())
}

/// Direction layer weights `a_l(x)`: softmax of the direction gates.
pub fn direction_weights(mids: &MidFeatureSet, heads: &ResidualHeads) -> Result<Vec<f64>> {
    check_mids(mids, heads)?;
    let logits: Vec<f64> = mids
        .features
        .iter()
        .zip(&heads.layers)
        .map(|(m, h)| affine(&h.dir_gate_weight, &h.dir_gate_bias, m)[0])
        .collect();
    Ok(softmax_vec(&logits))
}

/// Length layer weights `a^s_l(x)`: softmax of the length gates.
pub fn length_weights(mids: &MidFeatureSet, heads: &ResidualHeads) -> Result<Vec<f64>> {
    check_mids(mids, heads)?;
    let logits: Vec<f64> = mids
        .features
        .iter()
        .zip(&heads.layers)
        .map(|(m, h)| affine(&h.len_gate_weight, &h.len_gate_bias, m)[0])
        .collect();
    Ok(softmax_vec(&logits))
}

/// Combines unit per-layer directions with weights and renormalizes.
pub fn combine_directions(per_layer: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let d = per_layer.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; d];
    for (dir, &a) in per_layer.iter().zip(weights) {
        sum.iter_mut().zip(dir).for_each(|(s, v)| *s += a * v);
    }
    geometry::l2_normalize(&sum)
}

/// Predicted residual direction `r̂^c` and the layer weights `a`.
pub fn predict_direction(mids: &MidFeatureSet, heads: &ResidualHeads) -> Result<(Vec<f64>, Vec<f64>)> {
    let weights = direction_weights(mids, heads)?;
    let per_layer: Vec<Vec<f64>> = mids
        .features
        .iter()
        .zip(&heads.layers)
        .map(|(m, h)| guarded_normalize(&affine(&h.dir_weight, &h.dir_bias, m)))
        .collect();
    Ok((combine_directions(&per_layer, &weights)?, weights))
}

/// Predicted residual length `r̂^s` and the length layer weights `a^s`.
pub fn predict_length(mids: &MidFeatureSet, heads: &ResidualHeads) -> Result<(f64, Vec<f64>)> {
    let weights = length_weights(mids, heads)?;
    let length = mids
        .features
        .iter()
        .zip(&heads.layers)
        .zip(&weights)
        .map(|((m, h), a)| a * affine(&h.len_weight, &h.len_bias, m)[0])
        .sum();
    Ok((length, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            block_widths: vec![4, 4, 6, 8],
            input_shape: (8, 8, 1),
            tap_layers: vec![1, 2],
            norm_groups: 2,
        }
    }

    fn toy() -> Network {
        Network::new(toy_config(), 5, 10.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn image(seed: u64, batch: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![batch, 1, 8, 8],
            (0..batch * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = toy_config();
        c.tap_layers = vec![0, 1];
        assert!(c.validate().is_err());
        c.tap_layers = vec![3];
        assert!(c.validate().is_err());
        c.tap_layers = vec![];
        assert!(c.validate().is_err());
        c.tap_layers = vec![2, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_feature() {
        let mut net = toy();
        for t in net.parameters_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = net.forward_with_taps(&Tensor::zeros(vec![1, 1, 8, 8])).unwrap();
        assert!(out[0].feature.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_nonnegative_and_shaped() {
        let net = toy();
        let out = net.forward_with_taps(&image(1, 3)).unwrap();
        assert_eq!(out.len(), 3);
        for e in &out {
            assert_eq!(e.feature.len(), 8);
            assert!(e.feature.iter().all(|&v| v >= 0.0));
            assert_eq!(e.mids.features[0].len(), 4);
            assert_eq!(e.mids.features[1].len(), 6);
        }
    }

    #[test]
    fn batching_preserves_order() {
        let net = toy();
        let batch = image(2, 3);
        let all = net.forward_with_taps(&batch).unwrap();
        for b in 0..3 {
            let single = Tensor::new(vec![1, 1, 8, 8], batch.row(b).to_vec());
            assert_eq!(net.forward_with_taps(&single).unwrap()[0], all[b]);
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let x = image(11, 1);
        assert_eq!(
            toy().forward_with_taps(&x).unwrap(),
            toy().forward_with_taps(&x).unwrap()
        );
    }

    #[test]
    fn wrong_input_shape() {
        assert!(matches!(
            toy().forward_with_taps(&Tensor::zeros(vec![1, 1, 7, 8])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logits_examples() {
        let mut w = Tensor::zeros(vec![4, 3]);
        w.data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 2.0, -1.0, 3.0];
        let head = ClassifierHead {
            weights: w,
            temperature: 10.0,
        };
        let logits = cosine_logits(&[4.0, 2.0, 6.0], &head).unwrap();
        assert_abs_diff_eq!(logits[3], 10.0, epsilon = 1e-5);
        let orth = ClassifierHead {
            weights: Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            temperature: 10.0,
        };
        assert_eq!(cosine_logits(&[0.0, 0.0, 2.0], &orth).unwrap(), vec![0.0, 0.0]);
        let doubled = ClassifierHead {
            temperature: 20.0,
            ..head.clone()
        };
        let l2 = cosine_logits(&[4.0, 2.0, 6.0], &doubled).unwrap();
        for (a, b) in logits.iter().zip(&l2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn graph_logits_match_value_logits() {
        let net = toy();
        let x = image(5, 2);
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let xv = g.constant(x.clone());
        let (f, _) = net.forward_graph(&mut g, &p, xv);
        let l = net.logits_graph(&mut g, &p, f);
        let ex = net.forward_with_taps(&x).unwrap();
        for b in 0..2 {
            let v = cosine_logits(&ex[b].feature, &net.classifier).unwrap();
            for (a, e) in g.value(l).row(b).iter().zip(&v) {
                assert_abs_diff_eq!(a, e, epsilon = 1e-12);
            }
        }
    }

    fn head_with(dirs: &[Vec<f64>]) -> (MidFeatureSet, ResidualHeads) {
        // identity-like transforms: mid feature i maps to dirs[i]
        let layers = dirs
            .iter()
            .map(|d| LayerHead {
                dir_weight: Tensor::zeros(vec![d.len(), 1]),
                dir_bias: Tensor::new(vec![d.len()], d.clone()),
                len_weight: Tensor::zeros(vec![1, 1]),
                len_bias: Tensor::zeros(vec![1]),
                dir_gate_weight: Tensor::zeros(vec![1, 1]),
                dir_gate_bias: Tensor::zeros(vec![1]),
                len_gate_weight: Tensor::zeros(vec![1, 1]),
                len_gate_bias: Tensor::zeros(vec![1]),
            })
            .collect();
        (
            MidFeatureSet {
                features: vec![vec![1.0]; dirs.len()],
            },
            ResidualHeads { layers },
        )
    }

    #[test]
    fn direction_examples() {
        let (mids, heads) = head_with(&[vec![0.0, 3.0]]);
        let (d, a) = predict_direction(&mids, &heads).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(d, vec![0.0, 1.0]);

        let (mids, mut heads) = head_with(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        heads.layers[0].dir_gate_bias.data[0] = 3.0;
        let (d, _) = predict_direction(&mids, &heads).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(d[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], h, epsilon = 1e-12);

        let (mids, heads) = head_with(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (d, a) = predict_direction(&mids, &heads).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert_abs_diff_eq!(d[0], h, epsilon = 1e-6);
        assert_abs_diff_eq!(d[1], h, epsilon = 1e-6);
    }

    #[test]
    fn length_examples() {
        let (mids, mut heads) = head_with(&[vec![1.0], vec![1.0]]);
        for h in &mut heads.layers {
            h.len_bias.data[0] = 0.7;
        }
        assert_abs_diff_eq!(predict_length(&mids, &heads).unwrap().0, 0.7, epsilon = 1e-15);

        heads.layers[0].len_bias.data[0] = 1.0;
        heads.layers[1].len_bias.data[0] = 3.0;
        // softmax(0, ln 3) = (0.25, 0.75)
        heads.layers[1].len_gate_bias.data[0] = 3f64.ln();
        let (len, a) = predict_length(&mids, &heads).unwrap();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(len, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn graph_heads_match_value_heads() {
        let mut net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for h in &mut net.heads.layers {
            for t in [
                &mut h.dir_gate_weight,
                &mut h.len_gate_weight,
                &mut h.len_gate_bias,
            ] {
                t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        }
        let x = image(6, 3);
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let xv = g.constant(x.clone());
        let (_, mids) = net.forward_graph(&mut g, &p, xv);
        let out = net.heads_graph(&mut g, &p, &mids);
        let ex = net.forward_with_taps(&x).unwrap();
        for b in 0..3 {
            let (d, a) = predict_direction(&ex[b].mids, &net.heads).unwrap();
            let (s, as_) = predict_length(&ex[b].mids, &net.heads).unwrap();
            for (u, v) in g.value(out.direction).row(b).iter().zip(&d) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            for (u, v) in g.value(out.weights).row(b).iter().zip(&a) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            for (u, v) in g.value(out.len_weights).row(b).iter().zip(&as_) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(g.value(out.length).row(b)[0], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn abs_gradient_flips_with_sign() {
        // d/dw |w| * c for w = ±0.5: ±c
        for (w, expected) in [(0.5, 2.0), (-0.5, -2.0)] {
            let mut g = Graph::new();
            let v = g.param(Tensor::new(vec![1, 1], vec![w]));
            let a = g.abs(v);
            let s = g.scale(a, 2.0);
            let m = g.mean(s);
            let grads = g.backward(m);
            let h = 1e-6;
            let numeric = (2.0 * (w + h).abs() - 2.0 * (w - h).abs()) / (2.0 * h);
            assert_abs_diff_eq!(grads.get(v).unwrap()[0], expected, epsilon = 1e-12);
            assert_abs_diff_eq!(numeric, expected, epsilon = 1e-6);
        }
    }
}
