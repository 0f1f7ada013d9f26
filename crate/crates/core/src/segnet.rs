//! A small fully convolutional encoder-decoder segmenter.
//!
//! Architecture (all 3x3 convs padded to preserve spatial size, biases on
//! every conv, `w` = base width, `K` = classes):
//!
//! ```text
//! conv3x3(w) relu pool2 . conv3x3(2w) relu pool2 . conv3x3(4w) relu
//!   . up2 conv3x3(2w) relu . up2 conv3x3(w) relu . conv1x1(K)
//! ```
//!
//! Training runs the forward pass on the tape; inference (`predict`,
//! `sample_loss`) walks the same numeric kernels directly, skipping the
//! recording overhead, so both paths compute bit-identical values.

use crate::autodiff::{kernels, AdError, Tape, Val};
use crate::rng::{subseed, Rng};
use crate::tensor::{LabelMap, Sample, Tensor};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

#[derive(Debug)]
pub enum SegNetError {
    Config(String),
    /// Parameter file is malformed (bad magic, version, sizes, or values).
    Format(String),
    Io(std::io::Error),
    Ad(AdError),
}

impl fmt::Display for SegNetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegNetError::Config(msg) => write!(f, "invalid network config: {msg}"),
            SegNetError::Format(msg) => write!(f, "invalid parameter file: {msg}"),
            SegNetError::Io(e) => write!(f, "parameter file io: {e}"),
            SegNetError::Ad(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SegNetError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SegNetError::Io(e) => Some(e),
            SegNetError::Ad(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SegNetError {
    fn from(e: std::io::Error) -> Self {
        SegNetError::Io(e)
    }
}

impl From<AdError> for SegNetError {
    fn from(e: AdError) -> Self {
        SegNetError::Ad(e)
    }
}

/// Static shape of the network. Spatial size must be divisible by 4
/// because of the two pooling stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub image_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { in_channels: 4, num_classes: 4, base_width: 8, image_size: 64 }
    }
}

/// Number of parameter tensors (kernel + bias for each of the six convs).
pub const TENSOR_COUNT: usize = 12;

const MAGIC: &[u8; 4] = b"MTTP";
const FORMAT_VERSION: u32 = 1;

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SegNetError> {
        if self.in_channels == 0 {
            return Err(SegNetError::Config("in_channels must be positive".into()));
        }
        // Predictions are u8 label maps and Dice reports take a u8 class
        // count, so the count itself must fit in a byte.
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(SegNetError::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.base_width == 0 {
            return Err(SegNetError::Config("base_width must be positive".into()));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(SegNetError::Config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Tensor shapes in parameter order: kernel then bias per layer,
    /// encoder to decoder to head.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (cin, k, w) = (self.in_channels, self.num_classes, self.base_width);
        vec![
            vec![w, cin, 3, 3],
            vec![w],
            vec![2 * w, w, 3, 3],
            vec![2 * w],
            vec![4 * w, 2 * w, 3, 3],
            vec![4 * w],
            vec![2 * w, 4 * w, 3, 3],
            vec![2 * w],
            vec![w, 2 * w, 3, 3],
            vec![w],
            vec![k, w, 1, 1],
            vec![k],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// The trainable state of a network: twelve tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    config: NetworkConfig,
    tensors: Vec<Tensor>,
}

impl ParamVector {
    /// Uniform(-s, s) kernel init with s = sqrt(1 / fan_in), zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self, SegNetError> {
        config.validate()?;
        let mut rng = Rng::from_seed(subseed(seed, "segnet-init"));
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let s = (1.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.range_f64(-s, s)).collect();
                    Tensor::new(shape, data).expect("init values are finite")
                }
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn from_tensors(config: &NetworkConfig, tensors: Vec<Tensor>) -> Result<Self, SegNetError> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() {
            return Err(SegNetError::Format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(SegNetError::Format(format!(
                    "tensor {i}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Place all parameters on a tape as differentiable leaves.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Vec<Val<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// In-place SGD step: p <- p - lr * g.
    pub fn apply_step(&mut self, grads: &[Tensor], lr: f64) -> Result<(), SegNetError> {
        if grads.len() != self.tensors.len() {
            return Err(SegNetError::Format(format!(
                "expected {} gradients, got {}",
                self.tensors.len(),
                grads.len()
            )));
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            if p.shape() != g.shape() {
                return Err(SegNetError::Format(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    /// Serialize to the binary parameter format:
    /// magic `MTTP`, format version, five u32 header fields (in_channels,
    /// num_classes, base_width, image_size, tensor count), then every tensor
    /// as little-endian f64 in parameter order. Bit-exact round trip.
    pub fn save(&self, path: &Path) -> Result<(), SegNetError> {
        let mut buf = Vec::with_capacity(16 + 8 * self.config.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for field in [
            self.config.in_channels,
            self.config.num_classes,
            self.config.base_width,
            self.config.image_size,
            TENSOR_COUNT,
        ] {
            let v = u32::try_from(field)
                .map_err(|_| SegNetError::Format(format!("header field {field} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SegNetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], SegNetError> {
            if *off + n > bytes.len() {
                return Err(SegNetError::Format("file truncated".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != MAGIC {
            return Err(SegNetError::Format("bad magic".into()));
        }
        let u32_at = |off: &mut usize| -> Result<u32, SegNetError> {
            Ok(u32::from_le_bytes(take(off, 4)?.try_into().expect("4 bytes")))
        };
        let version = u32_at(&mut off)?;
        if version != FORMAT_VERSION {
            return Err(SegNetError::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config = NetworkConfig {
            in_channels: u32_at(&mut off)? as usize,
            num_classes: u32_at(&mut off)? as usize,
            base_width: u32_at(&mut off)? as usize,
            image_size: u32_at(&mut off)? as usize,
        };
        let count = u32_at(&mut off)? as usize;
        if count != TENSOR_COUNT {
            return Err(SegNetError::Format(format!(
                "expected {TENSOR_COUNT} tensors, file declares {count}"
            )));
        }
        config.validate()?;
        let expected_payload = 8 * config.param_count();
        if bytes.len() - off != expected_payload {
            return Err(SegNetError::Format(format!(
                "payload is {} bytes, expected {expected_payload}",
                bytes.len() - off
            )));
        }
        let mut tensors = Vec::with_capacity(TENSOR_COUNT);
        for shape in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = take(&mut off, 8)?;
                data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| SegNetError::Format(format!("bad tensor data: {e}")))?;
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }
}

/// Record the full forward pass on the tape; returns [K,H,W] logits.
pub fn forward<'t>(
    tape: &'t Tape,
    config: &NetworkConfig,
    params: &[Val<'t>],
    image: Val<'t>,
) -> Result<Val<'t>, AdError> {
    assert_eq!(params.len(), TENSOR_COUNT, "parameter vector arity");
    let s = config.image_size;
    let conv_block = |x: Val<'t>, k: Val<'t>, b: Val<'t>, hw: usize, pad: usize| {
        let c = tape.conv2d(x, k, 1, pad)?;
        let cb = tape.add(c, tape.bias_broadcast(b, (hw, hw))?)?;
        tape.relu(cb)
    };
    let e1 = conv_block(image, params[0], params[1], s, 1)?;
    let p1 = tape.max_pool2(e1)?;
    let e2 = conv_block(p1, params[2], params[3], s / 2, 1)?;
    let p2 = tape.max_pool2(e2)?;
    let bott = conv_block(p2, params[4], params[5], s / 4, 1)?;
    let u1 = tape.upsample2_nearest(bott)?;
    let d1 = conv_block(u1, params[6], params[7], s / 2, 1)?;
    let u2 = tape.upsample2_nearest(d1)?;
    let d2 = conv_block(u2, params[8], params[9], s, 1)?;
    let logits = tape.conv2d(d2, params[10], 1, 0)?;
    tape.add(logits, tape.bias_broadcast(params[11], (s, s))?)
}

/// Mean cross-entropy of the network on one labelled sample.
pub fn loss<'t>(
    tape: &'t Tape,
    config: &NetworkConfig,
    params: &[Val<'t>],
    image: Val<'t>,
    labels: &Rc<LabelMap>,
) -> Result<Val<'t>, AdError> {
    let logits = forward(tape, config, params, image)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Tape-free forward pass: the same kernels in the same order as
/// `forward`, returning raw logits. Used by the inference-only entry
/// points, where recording for backpropagation would be pure overhead.
fn infer_logits(params: &ParamVector, image: &Tensor) -> Vec<f64> {
    let s = params.config.image_size;
    let conv_block = |x: &[f64], dims: (usize, usize, usize), ki: usize| -> Vec<f64> {
        let kt = &params.tensors[ki];
        let (co, kh, kw) = (kt.shape()[0], kt.shape()[2], kt.shape()[3]);
        let mut y = kernels::conv2d(x, kt.data(), dims, (co, kh, kw), 1, 1);
        let bias = params.tensors[ki + 1].data();
        let hw = dims.1 * dims.2;
        for c in 0..co {
            let b = bias[c];
            for v in &mut y[c * hw..(c + 1) * hw] {
                let z = *v + b;
                *v = if z > 0.0 { z } else { 0.0 };
            }
        }
        y
    };
    let cin = params.config.in_channels;
    let w = params.config.base_width;
    let e1 = conv_block(image.data(), (cin, s, s), 0);
    let (p1, _) = kernels::max_pool2(&e1, (w, s, s));
    let e2 = conv_block(&p1, (w, s / 2, s / 2), 2);
    let (p2, _) = kernels::max_pool2(&e2, (2 * w, s / 2, s / 2));
    let bott = conv_block(&p2, (2 * w, s / 4, s / 4), 4);
    let u1 = kernels::upsample2(&bott, (4 * w, s / 4, s / 4));
    let d1 = conv_block(&u1, (4 * w, s / 2, s / 2), 6);
    let u2 = kernels::upsample2(&d1, (2 * w, s / 2, s / 2));
    let d2 = conv_block(&u2, (2 * w, s, s), 8);
    let kt = &params.tensors[10];
    let k = params.config.num_classes;
    let mut logits = kernels::conv2d(&d2, kt.data(), (w, s, s), (k, 1, 1), 1, 0);
    let bias = params.tensors[11].data();
    for c in 0..k {
        let b = bias[c];
        for v in &mut logits[c * s * s..(c + 1) * s * s] {
            *v += b;
        }
    }
    logits
}

/// Argmax segmentation of one image; ties break toward the lowest class.
pub fn predict(params: &ParamVector, image: &Tensor) -> Result<LabelMap, SegNetError> {
    if image.shape() != [params.config.in_channels, params.config.image_size, params.config.image_size]
    {
        return Err(SegNetError::Format(format!(
            "predict expects [{},{},{}] input, got {:?}",
            params.config.in_channels,
            params.config.image_size,
            params.config.image_size,
            image.shape()
        )));
    }
    let data = infer_logits(params, image);
    let (k, hw) = (params.config.num_classes, params.config.image_size.pow(2));
    let (h, w) = (params.config.image_size, params.config.image_size);
    let mut out = LabelMap::zeros(h, w);
    for p in 0..hw {
        let mut best = 0usize;
        for c in 1..k {
            if data[c * hw + p] > data[best * hw + p] {
                best = c;
            }
        }
        out.data_mut()[p] = best as u8;
    }
    Ok(out)
}

/// Cross-entropy of the network on one sample, forward pass only.
pub fn sample_loss(params: &ParamVector, sample: &Sample) -> Result<f64, SegNetError> {
    let s = params.config.image_size;
    let logits = infer_logits(params, &sample.image);
    Ok(kernels::softmax_xent(&logits, sample.labels.data(), (params.config.num_classes, s, s)))
}

/// One SGD step on one sample; returns the loss before the step.
pub fn sgd_step(params: &mut ParamVector, sample: &Sample, lr: f64) -> Result<f64, SegNetError> {
    let tape = Tape::new();
    let vals = params.on_tape(&tape);
    let img = tape.constant(sample.image.clone());
    let labels = Rc::new(sample.labels.clone());
    let l = loss(&tape, &params.config, &vals, img, &labels)?;
    let grads = tape.grad(l, &vals, false)?;
    let grad_tensors: Vec<Tensor> = grads.iter().map(|g| (*g.tensor()).clone()).collect();
    let loss_value = l.scalar().map_err(SegNetError::Ad)?;
    if !loss_value.is_finite() {
        return Err(SegNetError::Format("non-finite training loss".into()));
    }
    params.apply_step(&grad_tensors, lr)?;
    Ok(loss_value)
}
