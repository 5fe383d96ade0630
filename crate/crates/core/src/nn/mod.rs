//! Convolutional autoencoder: architecture, exact backpropagation, Adam
//! training on the summed squared reconstruction error, and checkpoints.

pub mod layers;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::par;
use crate::tensor::{read_u32, Image, Tensor};
use layers::Shape3;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PAEM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder stages are `conv3x3 -> ReLU -> maxpool2`; the decoder mirrors them
/// with `upsample2 -> conv3x3 -> ReLU` and ends in a `conv3x3 -> sigmoid`
/// back to the input channel count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stages: Vec<usize>,
}

impl ArchSpec {
    pub fn new(height: usize, width: usize, channels: usize, stages: Vec<usize>) -> Result<Self> {
        let arch = ArchSpec {
            height,
            width,
            channels,
            stages,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("architecture needs at least one stage".into()));
        }
        if self.stages.contains(&0) {
            return Err(Error::InvalidArgument("stage channel counts must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "input channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let f = 1usize << self.stages.len();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} not divisible by 2^{}",
                self.height,
                self.width,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// `(P1, P2, P3)`.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let f = 1usize << self.stages.len();
        (self.height / f, self.width / f, *self.stages.last().unwrap())
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.height, self.width, self.channels)
    }

    fn layer_plan(&self) -> (Vec<Layer>, Vec<Layer>) {
        let mut enc = Vec::new();
        let mut conv = 0;
        let mut cin = self.channels;
        for &c in &self.stages {
            enc.extend([
                Layer::Conv {
                    index: conv,
                    cin,
                    cout: c,
                },
                Layer::Relu,
                Layer::MaxPool,
            ]);
            conv += 1;
            cin = c;
        }
        let mut dec = Vec::new();
        for i in (0..self.stages.len()).rev() {
            let cout = if i == 0 { self.stages[0] } else { self.stages[i - 1] };
            dec.extend([Layer::Upsample, Layer::Conv { index: conv, cin, cout }, Layer::Relu]);
            conv += 1;
            cin = cout;
        }
        dec.extend([
            Layer::Conv {
                index: conv,
                cin,
                cout: self.channels,
            },
            Layer::Sigmoid,
        ]);
        (enc, dec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { index: usize, cin: usize, cout: usize },
    Relu,
    MaxPool,
    Upsample,
    Sigmoid,
}

impl Layer {
    pub fn output_shape(&self, s: Shape3) -> Shape3 {
        match *self {
            Layer::Conv { cout, .. } => Shape3::new(s.h, s.w, cout),
            Layer::Relu | Layer::Sigmoid => s,
            Layer::MaxPool => Shape3::new(s.h / 2, s.w / 2, s.c),
            Layer::Upsample => Shape3::new(s.h * 2, s.w * 2, s.c),
        }
    }
}

/// Offsets of one conv layer's parameters inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSlot {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    slots: Vec<ConvSlot>,
    params: Vec<f32>,
}

/// Activations recorded during a forward pass, one entry per layer.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Vec<f32>,
    shape: Shape3,
    argmax: Vec<usize>,
    output: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
}

impl Model {
    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (encoder, decoder) = arch.layer_plan();
        let mut slots = Vec::new();
        let mut len = 0;
        for layer in encoder.iter().chain(&decoder) {
            if let Layer::Conv { cin, cout, .. } = *layer {
                let weight = len;
                let bias = weight + layers::conv3x3_weight_len(cin, cout);
                len = bias + cout;
                slots.push(ConvSlot {
                    cin,
                    cout,
                    weight,
                    bias,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; len];
        for s in &slots {
            let limit = (6.0 / (9.0 * (s.cin + s.cout) as f64)).sqrt() as f32;
            for p in &mut params[s.weight..s.bias] {
                *p = rng.gen_range(-limit..=limit);
            }
        }
        Ok(Model {
            arch: arch.clone(),
            encoder,
            decoder,
            slots,
            params,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn conv_params(&self, index: usize) -> (&[f32], &[f32]) {
        let s = self.slots[index];
        (&self.params[s.weight..s.bias], &self.params[s.bias..s.bias + s.cout])
    }

    fn run(
        &self,
        layers: &[Layer],
        mut x: Vec<f32>,
        mut shape: Shape3,
        trace: Option<&mut Vec<LayerCache>>,
    ) -> (Vec<f32>, Shape3) {
        let mut trace = trace;
        for layer in layers {
            let out_shape = layer.output_shape(shape);
            let mut argmax = Vec::new();
            let out = match *layer {
                Layer::Conv { index, cout, .. } => {
                    let (w, b) = self.conv_params(index);
                    layers::conv3x3_forward(&x, shape, w, b, cout)
                }
                Layer::Relu => layers::relu_forward(&x),
                Layer::MaxPool => {
                    let (o, a) = layers::maxpool2_forward(&x, shape);
                    argmax = a;
                    o
                }
                Layer::Upsample => layers::upsample2_forward(&x, shape),
                Layer::Sigmoid => layers::sigmoid_forward(&x),
            };
            if let Some(t) = trace.as_deref_mut() {
                let output = if matches!(layer, Layer::Sigmoid) {
                    out.clone()
                } else {
                    Vec::new()
                };
                t.push(LayerCache {
                    input: x,
                    shape,
                    argmax,
                    output,
                });
            }
            x = out;
            shape = out_shape;
        }
        (x, shape)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let (h, w, c) = img.shape();
        if (h, w, c) != (self.arch.height, self.arch.width, self.arch.channels) {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{c} does not match model input {}x{}x{}",
                self.arch.height, self.arch.width, self.arch.channels
            )));
        }
        Ok(())
    }

    /// Feature map `E(X)` of shape `P1 × P2 × P3`.
    pub fn encode(&self, img: &Image) -> Result<Tensor<f32>> {
        self.check_image(img)?;
        let (out, s) = self.run(&self.encoder, img.data().to_vec(), self.arch.input_shape(), None);
        Tensor::from_vec(&[s.h, s.w, s.c], out)
    }

    /// Reconstruction `D(M)` with values in `(0, 1)`.
    pub fn decode(&self, feature: &Tensor<f32>) -> Result<Image> {
        let (p1, p2, p3) = self.arch.latent_dims();
        if feature.dims() != [p1, p2, p3] {
            return Err(Error::Shape(format!(
                "feature map {:?} does not match latent {p1}x{p2}x{p3}",
                feature.dims()
            )));
        }
        let (out, s) = self.run(&self.decoder, feature.data().to_vec(), Shape3::new(p1, p2, p3), None);
        Image::from_tensor_clamped(Tensor::from_vec(&[s.h, s.w, s.c], out)?)
    }

    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.decode(&self.encode(img)?)
    }

    /// Full encode/decode pass that records the activations needed by
    /// [`Model::backward`].
    pub fn forward_traced(&self, img: &Image) -> Result<(Vec<f32>, ForwardTrace)> {
        self.check_image(img)?;
        let mut caches = Vec::with_capacity(self.encoder.len() + self.decoder.len());
        let (z, s) = self.run(
            &self.encoder,
            img.data().to_vec(),
            self.arch.input_shape(),
            Some(&mut caches),
        );
        let (out, _) = self.run(&self.decoder, z, s, Some(&mut caches));
        Ok((out, ForwardTrace { caches }))
    }

    /// Reverse-mode pass: gradient of a scalar loss with respect to every
    /// parameter, given `d loss / d output`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f32]) -> Result<Vec<f32>> {
        let all: Vec<&Layer> = self.layers().collect();
        if trace.caches.len() != all.len() {
            return Err(Error::InvalidArgument(format!(
                "trace has {} cached activations, model has {} layers",
                trace.caches.len(),
                all.len()
            )));
        }
        let mut grads = vec![0.0f32; self.params.len()];
        let mut g = grad_output.to_vec();
        for (pos, (layer, cache)) in all.iter().zip(&trace.caches).enumerate().rev() {
            let (gi, param) = layer_backward(layer, self, cache, &g, pos > 0)?;
            if let Some((index, cg)) = param {
                let s = self.slots[index];
                grads[s.weight..s.bias].copy_from_slice(&cg.weight);
                grads[s.bias..s.bias + s.cout].copy_from_slice(&cg.bias);
            }
            match gi {
                Some(gi) => g = gi,
                None => break,
            }
        }
        Ok(grads)
    }
}

/// Input gradient and, for conv layers, `(conv index, parameter gradients)`.
pub type LayerGrads = (Option<Vec<f32>>, Option<(usize, layers::ConvGrads<f32>)>);

/// Backward pass through one layer using its cached forward activations.
/// Returns the input gradient (when requested) and, for conv layers, the
/// parameter gradients.
pub fn layer_backward(
    layer: &Layer,
    model: &Model,
    cache: &LayerCache,
    grad_out: &[f32],
    need_input_grad: bool,
) -> Result<LayerGrads> {
    if cache.input.len() != cache.shape.len() || grad_out.len() != layer.output_shape(cache.shape).len() {
        return Err(Error::InvalidArgument("cached activations do not match layer".into()));
    }
    let gi = match *layer {
        Layer::Conv { index, cout, .. } => {
            let (w, _) = model.conv_params(index);
            let mut cg = layers::conv3x3_backward(&cache.input, cache.shape, w, cout, grad_out, need_input_grad);
            let gi = cg.input.take();
            return Ok((gi, Some((index, cg))));
        }
        Layer::Relu => layers::relu_backward(&cache.input, grad_out),
        Layer::MaxPool => {
            if cache.argmax.is_empty() {
                return Err(Error::InvalidArgument("max-pool cache missing argmax".into()));
            }
            layers::maxpool2_backward(&cache.argmax, grad_out, cache.input.len())
        }
        Layer::Upsample => layers::upsample2_backward(grad_out, cache.shape),
        Layer::Sigmoid => {
            if cache.output.is_empty() {
                return Err(Error::InvalidArgument("sigmoid cache missing output".into()));
            }
            layers::sigmoid_backward(&cache.output, grad_out)
        }
    };
    Ok((need_input_grad.then_some(gi), None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean squared reconstruction error per pixel value, one entry per epoch,
    /// accumulated over the epoch's mini-batches before each update.
    pub loss_trace: Vec<f64>,
}

/// Sum of squared errors for one image and its gradient w.r.t. all parameters.
pub fn reconstruction_loss_and_grad(model: &Model, img: &Image) -> Result<(f64, Vec<f32>)> {
    let (out, trace) = model.forward_traced(img)?;
    let mut loss = 0.0f64;
    let grad: Vec<f32> = out
        .iter()
        .zip(img.data())
        .map(|(&o, &x)| {
            let d = o - x;
            loss += (d as f64) * (d as f64);
            2.0 * d
        })
        .collect();
    Ok((loss, model.backward(&trace, &grad)?))
}

/// Mini-batch Adam on `sum_i ||X_i - D(E(X_i))||^2`, seeded shuffle each epoch.
pub fn train_autoencoder(images: &[Image], cfg: &TrainConfig, arch: &ArchSpec) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one image".into()));
    }
    let mut model = Model::init(arch, cfg.seed)?;
    for img in images {
        model.check_image(img)?;
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5407);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let values_per_epoch = (images.len() * images[0].data().len()) as f64;
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map_slice(batch, |&i| reconstruction_loss_and_grad(&model, &images[i]));
            let mut grad = vec![0.0f32; model.num_params()];
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            if !epoch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("training diverged in epoch {epoch}")));
            }
            adam_step(&mut model.params, &grad, &mut state, &adam);
        }
        let mse = epoch_loss / values_per_epoch;
        log::debug!("epoch {epoch}: mse {mse:.6}");
        loss_trace.push(mse);
    }
    Ok(TrainOutcome { model, loss_trace })
}

pub fn write_model<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    let a = &model.arch;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(a.stages.len() as u32).to_le_bytes())?;
    for &c in &a.stages {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    for d in [a.height, a.width, a.channels] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in &model.slots {
        let weight =
            Tensor::from_vec(&[3, 3, s.cin, s.cout], model.params[s.weight..s.bias].to_vec()).expect("slot shape");
        weight.write_to(w)?;
        let bias = Tensor::from_vec(&[s.cout], model.params[s.bias..s.bias + s.cout].to_vec()).expect("slot shape");
        bias.write_to(w)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    crate::tensor::read_exact(r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r, "stage count")? as usize;
    if n == 0 || n > 16 {
        return Err(Error::Corrupt(format!("stage count {n} out of range")));
    }
    let stages = (0..n)
        .map(|_| read_u32(r, "stage channels").map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let height = read_u32(r, "input height")? as usize;
    let width = read_u32(r, "input width")? as usize;
    let channels = read_u32(r, "input channels")? as usize;
    let arch = ArchSpec {
        height,
        width,
        channels,
        stages,
    };
    arch.validate()
        .map_err(|e| Error::Corrupt(format!("checkpoint architecture: {e}")))?;
    let mut model = Model::init(&arch, 0)?;
    for s in model.slots.clone() {
        let weight = Tensor::read_from(r)?;
        if weight.dims() != [3, 3, s.cin, s.cout] {
            return Err(Error::Corrupt(format!(
                "weight block {:?} does not match architecture ({}, {})",
                weight.dims(),
                s.cin,
                s.cout
            )));
        }
        let bias = Tensor::read_from(r)?;
        if bias.dims() != [s.cout] {
            return Err(Error::Corrupt(format!(
                "bias block {:?} does not match architecture",
                bias.dims()
            )));
        }
        model.params[s.weight..s.bias].copy_from_slice(weight.data());
        model.params[s.bias..s.bias + s.cout].copy_from_slice(bias.data());
    }
    if !model.params.iter().all(|p| p.is_finite()) {
        return Err(Error::Corrupt("non-finite parameter in checkpoint".into()));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let model = read_model(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}
