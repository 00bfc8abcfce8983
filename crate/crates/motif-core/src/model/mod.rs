//! The convolutional boundary detector and the frame-wise baseline head,
//! with explicit reverse-mode gradients.

pub mod checkpoint;
pub mod layers;
pub mod store;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{AdaptiveAvgPool, ChannelNorm, Conv2d, Layer, LeakyRelu, MaxPool};
use store::{Gradients, Initializer, ParameterStore};
use tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Backbone + head geometry of the detector.
///
/// Each block is `convs_per_block` convolution/norm/activation stages at one
/// channel width, with 2x2 max pooling after the first four blocks. The
/// defaults land the parameter count near the 2M scale target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_anchors: usize,
    pub n_classes: usize,
    pub n_grids: usize,
    pub in_freq: usize,
    pub in_time: usize,
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            n_anchors: 3,
            n_classes: 13,
            n_grids: 11,
            in_freq: 84,
            in_time: 646,
            channels: vec![32, 64, 128, 256, 256],
            convs_per_block: 2,
            kernel: 3,
        }
    }
}

impl DetectorConfig {
    pub fn head_channels(&self) -> usize {
        self.n_anchors * (3 + self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("channels must not be empty".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.convs_per_block == 0 || self.n_anchors == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "anchors, classes and convs_per_block must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frame-wise baseline: same backbone family, pooling only in frequency so
/// the time axis stays at the input frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub n_classes: usize,
    pub in_freq: usize,
    pub in_time: usize,
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            n_classes: 13,
            in_freq: 84,
            in_time: 646,
            channels: vec![32, 64, 128, 256, 256],
            convs_per_block: 2,
            kernel: 3,
        }
    }
}

/// Inputs recorded by a training-mode forward pass: one tensor per layer
/// plus the head input.
pub struct Tape {
    layer_inputs: Vec<Tensor>,
    head_input: Tensor,
}

fn build_backbone(
    ps: &mut ParameterStore,
    init: &mut Initializer,
    channels: &[usize],
    convs_per_block: usize,
    kernel: usize,
    pool: MaxPool,
    pools_after: usize,
) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for (b, &ch) in channels.iter().enumerate() {
        for c in 0..convs_per_block {
            let fan_in = in_ch * kernel * kernel;
            let w = ps.register(
                &format!("block{b}.conv{c}.weight"),
                init.uniform(&[ch, in_ch, kernel, kernel], fan_in),
            );
            layers.push(Layer::Conv(Conv2d {
                weight: w,
                bias: None,
                in_ch,
                out_ch: ch,
                kernel,
            }));
            let gamma = ps.register(
                &format!("block{b}.norm{c}.gamma"),
                init.constant(&[ch], 1.0),
            );
            let beta = ps.register(&format!("block{b}.norm{c}.beta"), Tensor::zeros(&[ch]));
            layers.push(Layer::Norm(ChannelNorm {
                gamma,
                beta,
                eps: NORM_EPS,
            }));
            layers.push(Layer::Act(LeakyRelu { slope: LEAKY_SLOPE }));
            in_ch = ch;
        }
        if b < pools_after {
            layers.push(Layer::Pool(pool));
        }
    }
    layers
}

fn forward_layers(layers: &[Layer], ps: &ParameterStore, input: &Tensor) -> Tensor {
    let mut x = input.clone();
    for l in layers {
        x = l.forward(ps, &x);
    }
    x
}

fn forward_layers_taped(
    layers: &[Layer],
    ps: &ParameterStore,
    input: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for l in layers {
        inputs.push(x.clone());
        x = l.forward(ps, &x);
    }
    (x, inputs)
}

fn check_input_shape(x: &Tensor, freq: usize, time: usize) -> Result<()> {
    if x.shape() != [1, freq, time] {
        return Err(Error::Shape {
            expected: format!("1x{freq}x{time}"),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

/// The boundary-regression detector: backbone -> adaptive pool to
/// (1, n_grids) -> 1x1 head, emitting `n_anchors x n_grids x (3 + C)`.
pub struct DetectorNet {
    pub cfg: DetectorConfig,
    layers: Vec<Layer>,
    head: Conv2d,
}

impl DetectorNet {
    /// Build the network and its freshly initialized parameter store.
    pub fn new(cfg: &DetectorConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        cfg.validate()?;
        let mut ps = ParameterStore::new();
        let mut init = Initializer::new(seed);
        let mut layers = build_backbone(
            &mut ps,
            &mut init,
            &cfg.channels,
            cfg.convs_per_block,
            cfg.kernel,
            MaxPool { kh: 2, kw: 2 },
            4.min(cfg.channels.len().saturating_sub(1)),
        );
        layers.push(Layer::AdaptPool(AdaptiveAvgPool {
            out_h: 1,
            out_w: cfg.n_grids,
        }));
        let last_ch = *cfg.channels.last().unwrap();
        let head_ch = cfg.head_channels();
        let w = ps.register(
            "head.weight",
            init.uniform(&[head_ch, last_ch, 1, 1], last_ch),
        );
        let b = ps.register("head.bias", Tensor::zeros(&[head_ch]));
        let head = Conv2d {
            weight: w,
            bias: Some(b),
            in_ch: last_ch,
            out_ch: head_ch,
            kernel: 1,
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                layers,
                head,
            },
            ps,
        ))
    }

    fn reshape_head_output(&self, raw: &Tensor) -> Tensor {
        // [n(3+C)][1][G] -> [n][G][3+C]
        let n = self.cfg.n_anchors;
        let g = self.cfg.n_grids;
        let f = 3 + self.cfg.n_classes;
        let mut out = Tensor::zeros(&[n, g, f]);
        for a in 0..n {
            for gi in 0..g {
                for fi in 0..f {
                    *out.at3_mut(a, gi, fi) = raw.at3(a * f + fi, 0, gi);
                }
            }
        }
        out
    }

    fn unshape_grad(&self, grad: &Tensor) -> Tensor {
        let n = self.cfg.n_anchors;
        let g = self.cfg.n_grids;
        let f = 3 + self.cfg.n_classes;
        let mut out = Tensor::zeros(&[n * f, 1, g]);
        for a in 0..n {
            for gi in 0..g {
                for fi in 0..f {
                    *out.at3_mut(a * f + fi, 0, gi) = grad.at3(a, gi, fi);
                }
            }
        }
        out
    }

    /// Inference pass. Input must be `1 x in_freq x in_time`.
    pub fn forward(&self, ps: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        check_input_shape(input, self.cfg.in_freq, self.cfg.in_time)?;
        let feat = forward_layers(&self.layers, ps, input);
        let raw = self.head.forward(ps, &feat);
        let out = self.reshape_head_output(&raw);
        if !out.all_finite() {
            return Err(Error::State("non-finite detector output".into()));
        }
        Ok(out)
    }

    /// Training pass: returns the prediction tensor and the activation tape
    /// needed by `backward`.
    pub fn forward_taped(&self, ps: &ParameterStore, input: &Tensor) -> Result<(Tensor, Tape)> {
        check_input_shape(input, self.cfg.in_freq, self.cfg.in_time)?;
        let (feat, layer_inputs) = forward_layers_taped(&self.layers, ps, input);
        let raw = self.head.forward(ps, &feat);
        Ok((
            self.reshape_head_output(&raw),
            Tape {
                layer_inputs,
                head_input: feat,
            },
        ))
    }

    /// Reverse pass from a gradient w.r.t. the prediction tensor. Returns a
    /// per-call gradient buffer; the caller reduces buffers in a fixed order.
    pub fn backward(&self, ps: &ParameterStore, tape: &Tape, grad_pred: &Tensor) -> Gradients {
        let mut grads = ps.new_gradients();
        let raw_grad = self.unshape_grad(grad_pred);
        let mut g = self
            .head
            .backward(ps, &tape.head_input, &raw_grad, &mut grads);
        for (layer, input) in self.layers.iter().rev().zip(tape.layer_inputs.iter().rev()) {
            g = layer.backward(ps, input, &g, &mut grads);
        }
        grads
    }
}

/// Frame-wise baseline: emits `C x in_time` logits.
pub struct BaselineNet {
    pub cfg: BaselineConfig,
    layers: Vec<Layer>,
    head: Conv2d,
}

impl BaselineNet {
    pub fn new(cfg: &BaselineConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        if cfg.channels.is_empty() || cfg.kernel % 2 == 0 {
            return Err(Error::Config("bad baseline config".into()));
        }
        let mut ps = ParameterStore::new();
        let mut init = Initializer::new(seed);
        let mut layers = build_backbone(
            &mut ps,
            &mut init,
            &cfg.channels,
            cfg.convs_per_block,
            cfg.kernel,
            MaxPool { kh: 2, kw: 1 },
            4.min(cfg.channels.len().saturating_sub(1)),
        );
        layers.push(Layer::AdaptPool(AdaptiveAvgPool {
            out_h: 1,
            out_w: cfg.in_time,
        }));
        let last_ch = *cfg.channels.last().unwrap();
        let w = ps.register(
            "head.weight",
            init.uniform(&[cfg.n_classes, last_ch, 1, 1], last_ch),
        );
        let b = ps.register("head.bias", Tensor::zeros(&[cfg.n_classes]));
        let head = Conv2d {
            weight: w,
            bias: Some(b),
            in_ch: last_ch,
            out_ch: cfg.n_classes,
            kernel: 1,
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                layers,
                head,
            },
            ps,
        ))
    }

    pub fn forward(&self, ps: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        check_input_shape(input, self.cfg.in_freq, self.cfg.in_time)?;
        let feat = forward_layers(&self.layers, ps, input);
        let raw = self.head.forward(ps, &feat); // [C][1][T]
        let c = self.cfg.n_classes;
        let t = self.cfg.in_time;
        let out = raw.reshaped(&[c, t]);
        if !out.all_finite() {
            return Err(Error::State("non-finite baseline output".into()));
        }
        Ok(out)
    }

    pub fn forward_taped(&self, ps: &ParameterStore, input: &Tensor) -> Result<(Tensor, Tape)> {
        check_input_shape(input, self.cfg.in_freq, self.cfg.in_time)?;
        let (feat, layer_inputs) = forward_layers_taped(&self.layers, ps, input);
        let raw = self.head.forward(ps, &feat);
        let out = raw.reshaped(&[self.cfg.n_classes, self.cfg.in_time]);
        Ok((
            out,
            Tape {
                layer_inputs,
                head_input: feat,
            },
        ))
    }

    pub fn backward(&self, ps: &ParameterStore, tape: &Tape, grad_logits: &Tensor) -> Gradients {
        let mut grads = ps.new_gradients();
        let raw_grad = grad_logits
            .clone()
            .reshaped(&[self.cfg.n_classes, 1, self.cfg.in_time]);
        let mut g = self
            .head
            .backward(ps, &tape.head_input, &raw_grad, &mut grads);
        for (layer, input) in self.layers.iter().rev().zip(tape.layer_inputs.iter().rev()) {
            g = layer.backward(ps, input, &g, &mut grads);
        }
        grads
    }
}
