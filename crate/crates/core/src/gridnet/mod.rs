//! A small fully-convolutional saliency network with hand-written reverse-mode
//! gradients for both weights and inputs.
//!
//! Every layer is a 3x3 same-padded convolution. Hidden layers are followed by
//! a ReLU; the last layer has one output channel and a sigmoid head, so the
//! output map always has the spatial size of the input.

mod checkpoint;
mod conv;
mod loss;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use loss::{masked_bce, masked_bce_targets, PROB_CLAMP};
pub use optim::Sgd;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::labels::SparseLabels;

/// Named stack of hidden channel widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub const STANDARD: &'static str = "grid4";
    pub const WIDE: &'static str = "grid4w";

    /// in → 16 → 16 → 16 → 1.
    pub fn standard() -> Self {
        Self {
            id: Self::STANDARD.into(),
            hidden: vec![16, 16, 16],
        }
    }

    /// in → 12 → 24 → 12 → 1, the alternative used for cross-model runs.
    pub fn wide() -> Self {
        Self {
            id: Self::WIDE.into(),
            hidden: vec![12, 24, 12],
        }
    }

    pub fn custom(id: impl Into<String>, hidden: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            hidden,
        }
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            Self::STANDARD => Ok(Self::standard()),
            Self::WIDE => Ok(Self::wide()),
            other => Err(Error::InvalidInput(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNet {
    architecture_id: String,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    seed: u64,
    update_count: u64,
}

/// Flat gradient matching [`GridNet::params`] plus the number of images it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub images: u64,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            images: 0,
        }
    }

    /// Running mean over images.
    pub fn accumulate(&mut self, other: &Gradients) {
        let total = self.images + other.images;
        if total == 0 {
            return;
        }
        let (a, b) = (self.images as f64 / total as f64, other.images as f64 / total as f64);
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s = a * *s + b * o;
        }
        self.images = total;
    }
}

/// Gradient with respect to the input pixels, interleaved like [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

struct Activations {
    /// Planar input of every layer; `inputs[0]` is the image itself.
    inputs: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

/// Result of one forward/backward pass.
pub struct Backprop {
    pub loss: f64,
    pub weights: Gradients,
    pub input: Option<InputGradient>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Keeps outputs strictly inside (0,1) even when the logit saturates.
const OUTPUT_EPS: f64 = 1e-12;

impl GridNet {
    /// Seeded uniform Glorot init; biases start at zero.
    pub fn new(arch: &Architecture, in_channels: usize, seed: u64) -> Self {
        let layers = Self::shapes(arch, in_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerShape::param_len).sum());
        for l in &layers {
            let bound = (6.0 / ((l.in_ch + l.out_ch) * 9) as f64).sqrt();
            params.extend((0..l.weight_len()).map(|_| rng.gen_range(-bound..=bound)));
            params.extend(std::iter::repeat_n(0.0, l.out_ch));
        }
        Self {
            architecture_id: arch.id.clone(),
            layers,
            params,
            seed,
            update_count: 0,
        }
    }

    pub fn from_params(arch: &Architecture, in_channels: usize, params: Vec<f64>) -> Result<Self> {
        let layers = Self::shapes(arch, in_channels);
        Self::from_parts(arch.id.clone(), layers, params, 0, 0)
    }

    pub(crate) fn from_parts(
        architecture_id: String,
        layers: Vec<LayerShape>,
        params: Vec<f64>,
        seed: u64,
        update_count: u64,
    ) -> Result<Self> {
        if layers.is_empty() || layers.last().map(|l| l.out_ch) != Some(1) {
            return Err(Error::InvalidInput("network must end in a 1-channel head".into()));
        }
        if layers.windows(2).any(|w| w[0].out_ch != w[1].in_ch) {
            return Err(Error::InvalidInput("layer channel counts do not chain".into()));
        }
        let expected: usize = layers.iter().map(LayerShape::param_len).sum();
        if params.len() != expected {
            return Err(Error::shape(expected, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self {
            architecture_id,
            layers,
            params,
            seed,
            update_count,
        })
    }

    fn shapes(arch: &Architecture, in_channels: usize) -> Vec<LayerShape> {
        let mut widths = vec![in_channels];
        widths.extend(&arch.hidden);
        widths.push(1);
        widths
            .windows(2)
            .map(|w| LayerShape {
                in_ch: w[0],
                out_ch: w[1],
            })
            .collect()
    }

    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub(crate) fn bump_updates(&mut self, images: u64) {
        self.update_count += images;
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.in_channels() {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels()),
                format!("{} channels", image.channels()),
            ));
        }
        Ok(())
    }

    fn run(&self, image: &Image) -> Activations {
        let (h, w) = (image.height(), image.width());
        let hw = h * w;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(image.to_planar());
        let mut offset = 0;
        let mut logits = Vec::new();
        for (idx, l) in self.layers.iter().enumerate() {
            let weight = &self.params[offset..offset + l.weight_len()];
            let bias = &self.params[offset + l.weight_len()..offset + l.param_len()];
            offset += l.param_len();
            let mut out = vec![0.0; l.out_ch * hw];
            conv::forward(inputs.last().unwrap(), l.in_ch, h, w, weight, bias, l.out_ch, &mut out);
            if idx + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                inputs.push(out);
            } else {
                logits = out;
            }
        }
        let probs = logits
            .iter()
            .map(|&z| sigmoid(z).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS))
            .collect();
        Activations { inputs, probs }
    }

    pub fn forward(&self, image: &Image) -> Result<ProbMap> {
        self.check_input(image)?;
        let act = self.run(image);
        ProbMap::new(image.height(), image.width(), act.probs)
    }

    /// Masked cross-entropy over `targets` and its gradients. The input
    /// gradient is only computed when `want_input` is set.
    pub fn backprop(&self, image: &Image, targets: &[(usize, f64)], want_input: bool) -> Result<Backprop> {
        self.check_input(image)?;
        let (h, w) = (image.height(), image.width());
        let hw = h * w;
        if let Some(&(idx, _)) = targets.iter().find(|(idx, _)| *idx >= hw) {
            return Err(Error::InvalidInput(format!("target pixel {idx} outside {h}x{w}")));
        }
        let act = self.run(image);
        let loss = masked_bce_targets(&act.probs, targets);

        let mut grad = vec![0.0; hw];
        if !targets.is_empty() {
            let n = targets.len() as f64;
            for &(idx, y) in targets {
                grad[idx] += (act.probs[idx] - y) / n;
            }
        }

        let mut weights = Gradients::zeros(self.params.len());
        weights.images = 1;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_len();
        }
        let mut input_grad = None;
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let base = offsets[idx];
            let weight = &self.params[base..base + l.weight_len()];
            let (gw, gb) = weights.values[base..base + l.param_len()].split_at_mut(l.weight_len());
            let need_in = idx > 0 || want_input;
            let mut gin = if need_in { vec![0.0; l.in_ch * hw] } else { Vec::new() };
            conv::backward(
                &act.inputs[idx],
                l.in_ch,
                h,
                w,
                weight,
                l.out_ch,
                &grad,
                gw,
                gb,
                need_in.then_some(gin.as_mut_slice()),
            );
            if idx > 0 {
                for (g, a) in gin.iter_mut().zip(&act.inputs[idx]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad = gin;
            } else if want_input {
                input_grad = Some(gin);
            }
        }

        let input = input_grad.map(|planar| {
            let c = image.channels();
            let mut data = vec![0.0; hw * c];
            for ch in 0..c {
                for p in 0..hw {
                    data[p * c + ch] = planar[ch * hw + p];
                }
            }
            InputGradient {
                height: h,
                width: w,
                channels: c,
                data,
            }
        });
        Ok(Backprop {
            loss,
            weights,
            input,
        })
    }

    pub fn backward_weights(&self, image: &Image, labels: &SparseLabels) -> Result<Gradients> {
        check_label_shape(image, labels)?;
        Ok(self.backprop(image, &labels.targets(), false)?.weights)
    }

    pub fn backward_input(&self, image: &Image, labels: &SparseLabels) -> Result<InputGradient> {
        check_label_shape(image, labels)?;
        Ok(self.backprop(image, &labels.targets(), true)?.input.expect("input gradient requested"))
    }
}

fn check_label_shape(image: &Image, labels: &SparseLabels) -> Result<()> {
    if labels.height() != image.height() || labels.width() != image.width() {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{} labels", labels.height(), labels.width()),
        ));
    }
    Ok(())
}

/// Mean of per-model probability maps.
pub fn ensemble_forward<'a>(models: impl IntoIterator<Item = &'a GridNet>, image: &Image) -> Result<ProbMap> {
    let mut sum: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for m in models {
        let p = m.forward(image)?;
        match sum.as_mut() {
            None => sum = Some(p.data().to_vec()),
            Some(s) => s.iter_mut().zip(p.data()).for_each(|(a, b)| *a += b),
        }
        count += 1;
    }
    let mut sum = sum.ok_or_else(|| Error::InvalidInput("ensemble has no members".into()))?;
    if count > 1 {
        sum.iter_mut().for_each(|v| *v /= count as f64);
    }
    ProbMap::new(image.height(), image.width(), sum)
}
