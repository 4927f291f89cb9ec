//! Variational encoder/decoder with a split latent code and two linear heads.
//!
//! The encoder is a stack of 3×3 convolution blocks; the output of the last
//! block is kept as the feature stack for attribution, then globally average
//! pooled and mapped to the Gaussian posterior parameters `(μ, log σ²)` of a
//! `2d`-dimensional latent. Head 1 reads `μ[..d]`, head 2 reads `μ[d..]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use super_autograd::{ConvGeometry, Graph, Tensor, Var};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const CHECKPOINT_MAGIC: &str = "SUPER-CKPT-1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Half-dimension `d` of the latent code.
    pub latent_half: usize,
    pub n_classes: usize,
    pub decoder_hidden: usize,
}

impl ModelConfig {
    /// Four conv blocks (8, 16, 16, 16 channels), one stride-2 downsampling.
    pub fn desk(image_height: usize, image_width: usize, latent_half: usize, n_classes: usize) -> Self {
        ModelConfig {
            image_height,
            image_width,
            channels: vec![8, 16, 16, 16],
            strides: vec![1, 2, 1, 1],
            latent_half,
            n_classes,
            decoder_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::Config(format!("model: {reason}")));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides must be nonempty and of equal length");
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("channels and strides must be positive");
        }
        if self.latent_half == 0 || self.n_classes < 2 || self.decoder_hidden == 0 {
            return bad("latent_half, decoder_hidden must be positive and n_classes at least 2");
        }
        if self.image_height < 3 || self.image_width < 3 {
            return bad("image must be at least 3x3");
        }
        Ok(())
    }

    /// Number of feature maps `K` in the attribution layer.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Spatial size `h×w` of the attribution layer.
    pub fn feature_size(&self) -> (usize, usize) {
        self.strides.iter().fold((self.image_height, self.image_width), |(h, w), &s| {
            let geom = ConvGeometry { stride: s, padding: 1 };
            (geom.output_size(h, 3), geom.output_size(w, 3))
        })
    }

    /// Parameter count of head 1 (`d·|Y| + |Y|`).
    pub fn head_param_count(&self) -> usize {
        self.latent_half * self.n_classes + self.n_classes
    }

    fn pixels(&self) -> usize {
        3 * self.image_height * self.image_width
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c, cin, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![1, c, 1, 1]));
            cin = c;
        }
        let (k, d2, y) = (self.feature_channels(), 2 * self.latent_half, self.n_classes);
        let d = self.latent_half;
        out.push(("mu.weight".into(), vec![k, d2]));
        out.push(("mu.bias".into(), vec![1, d2]));
        out.push(("log_var.weight".into(), vec![k, d2]));
        out.push(("log_var.bias".into(), vec![1, d2]));
        out.push(("decoder0.weight".into(), vec![d2, self.decoder_hidden]));
        out.push(("decoder0.bias".into(), vec![1, self.decoder_hidden]));
        out.push(("decoder1.weight".into(), vec![self.decoder_hidden, self.pixels()]));
        out.push(("decoder1.bias".into(), vec![1, self.pixels()]));
        out.push(("head1.weight".into(), vec![d, y]));
        out.push(("head1.bias".into(), vec![1, y]));
        out.push(("head2.weight".into(), vec![d, y]));
        out.push(("head2.bias".into(), vec![1, y]));
        out
    }

    fn to_key_values(&self) -> KeyValues {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::default();
        kv.set("height", self.image_height);
        kv.set("width", self.image_width);
        kv.set("channels", join(&self.channels));
        kv.set("strides", join(&self.strides));
        kv.set("d", self.latent_half);
        kv.set("k", self.feature_channels());
        kv.set("n_classes", self.n_classes);
        kv.set("decoder_hidden", self.decoder_hidden);
        kv
    }

    fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let list = |key: &str| -> Result<Vec<usize>> {
            kv.require::<String>(key)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Schema(format!("checkpoint key `{key}` is malformed"))))
                .collect()
        };
        let config = ModelConfig {
            image_height: kv.require("height")?,
            image_width: kv.require("width")?,
            channels: list("channels")?,
            strides: list("strides")?,
            latent_half: kv.require("d")?,
            n_classes: kv.require("n_classes")?,
            decoder_hidden: kv.require("decoder_hidden")?,
        };
        config.validate()?;
        if kv.require::<usize>("k")? != config.feature_channels() {
            return Err(Error::Schema("checkpoint `k` disagrees with `channels`".into()));
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Reads `μ1`; the only head used for prediction.
    Relevant,
    /// Reads `μ2`.
    Irrelevant,
}

/// Gaussian posterior parameters of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub d: usize,
}

impl LatentCode {
    pub fn mu1(&self) -> &[f64] {
        &self.mu[..self.d]
    }

    pub fn mu2(&self) -> &[f64] {
        &self.mu[self.d..]
    }
}

/// Feature maps `A_k` of the last convolution for one sample, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub maps: Tensor,
}

impl FeatureStack {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.shape().len() != 3 || maps.shape().contains(&0) {
            return Err(Error::Shape(format!("feature stack must be [K,h,w], got {:?}", maps.shape())));
        }
        Ok(FeatureStack { maps })
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }
}

/// Encoder φ, decoder θ, heads ω1 and ω2.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

/// Outputs of a batched encoder pass.
pub struct Encoded<'g> {
    pub mu: Var<'g>,
    pub log_var: Var<'g>,
    /// `[N, K, h, w]` attribution-layer activations.
    pub maps: Var<'g>,
}

/// Parameters placed on a graph.
pub struct Bound<'g> {
    config: ModelConfig,
    vars: Vec<Var<'g>>,
}

impl ModelParams {
    /// Fan-in scaled uniform initialisation; biases start at zero.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                // He bound for ReLU-followed layers, LeCun bound for the linear read-outs.
                let gain = if name.starts_with("conv") || name.starts_with("decoder0") { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Indices of the head-1 tensors (weight, bias).
    pub fn head1_indices(&self) -> [usize; 2] {
        let base = 2 * self.config.channels.len() + 8;
        [base, base + 1]
    }

    /// Place the parameters on `g`, as trainable leaves or constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { config: self.config.clone(), vars }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if (image.height, image.width) != (c.image_height, c.image_width) {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {}x{}",
                image.height, image.width, c.image_height, c.image_width
            )));
        }
        Ok(())
    }

    /// Posterior parameters and retained feature stack for one image.
    pub fn encode(&self, image: &Image) -> Result<(LatentCode, FeatureStack)> {
        self.check_image(image)?;
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let enc = bound.encode(g.constant(Image::batch([image])));
        let (k, (h, w)) = (self.config.feature_channels(), self.config.feature_size());
        let code = LatentCode {
            mu: enc.mu.value().data().to_vec(),
            log_var: enc.log_var.value().data().to_vec(),
            d: self.config.latent_half,
        };
        Ok((code, FeatureStack::new(enc.maps.value().reshape(&[k, h, w]))?))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Image> {
        let d2 = 2 * self.config.latent_half;
        if z.len() != d2 {
            return Err(Error::Shape(format!("latent has length {}, expected {d2}", z.len())));
        }
        let g = Graph::new();
        let out = self.bind(&g, false).decode(g.constant(Tensor::new(vec![1, d2], z.to_vec())));
        Image::new(self.config.image_height, self.config.image_width, out.value().data().to_vec())
    }

    pub fn classify(&self, head: Head, mu_half: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.latent_half;
        if mu_half.len() != d {
            return Err(Error::Shape(format!("head input has length {}, expected {d}", mu_half.len())));
        }
        let g = Graph::new();
        let logits = self.bind(&g, false).classify(head, g.constant(Tensor::new(vec![1, d], mu_half.to_vec())));
        Ok(logits.value().data().to_vec())
    }

    /// Predicted labels from head 1 on `μ1` only, for a batch of images.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        for img in images {
            self.check_image(img)?;
        }
        if images.is_empty() {
            return Ok(vec![]);
        }
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let logits = g.no_grad(|| {
            let enc = bound.encode(g.constant(Image::batch(images.iter().copied())));
            bound.classify(Head::Relevant, bound.mu_half(enc.mu, Head::Relevant))
        });
        let y = self.config.n_classes;
        let value = logits.value();
        if !value.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(value.data().chunks(y).map(argmax).collect())
    }

    pub fn save_checkpoint(&self, path: &Path, manifest: &CheckpointManifest) -> Result<()> {
        let mut kv = self.config.to_key_values();
        kv.set("seed", manifest.seed);
        kv.set("epoch", manifest.epoch);
        kv.set("tensors", self.tensors.len());
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(kv.to_text().as_bytes());
        buf.extend_from_slice(b"end\n");
        encode_tensors(&mut buf, &self.names(), &self.tensors);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&buf).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointManifest)> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::io(path))?;
        let bad = |what: &str| Error::Schema(format!("checkpoint {}: {what}", path.display()));
        let end = header_end(&bytes).ok_or_else(|| bad("header terminator not found"))?;
        let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("header is not UTF-8"))?;
        let (magic, rest) = header.split_once('\n').ok_or_else(|| bad("empty header"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(&format!("magic is `{magic}`, expected `{CHECKPOINT_MAGIC}`")));
        }
        let kv = KeyValues::parse(rest)?;
        let config = ModelConfig::from_key_values(&kv)?;
        let manifest = CheckpointManifest { seed: kv.require("seed")?, epoch: kv.require("epoch")? };

        let tensors = decode_tensors(&bytes[end + 5..], &config.layout()).map_err(|e| bad(&e))?;
        Ok((ModelParams { config, tensors }, manifest))
    }
}

/// Offset of the `\nend\n` line closing a text header.
pub(crate) fn header_end(bytes: &[u8]) -> Option<usize> {
    bytes.windows(5).position(|w| w == b"\nend\n")
}

/// Appends tensors as `u32 name length, name, u32 ndim, u64 dims, f64 data`, all little-endian.
pub(crate) fn encode_tensors(buf: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    for (name, t) in names.iter().zip(tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Inverse of [`encode_tensors`], checked against the expected names and shapes.
pub(crate) fn decode_tensors(bytes: &[u8], layout: &[(String, Vec<usize>)]) -> std::result::Result<Vec<Tensor>, String> {
    let mut pos = 0;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let slice = bytes.get(pos..pos + n).ok_or("truncated tensor data")?;
        pos += n;
        Ok(slice)
    };
    let mut tensors = Vec::new();
    for (name, shape) in layout {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let got = String::from_utf8_lossy(take(len)?).into_owned();
        if &got != name {
            return Err(format!("expected tensor `{name}`, found `{got}`"));
        }
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dims = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if &dims != shape {
            return Err(format!("tensor `{name}` has shape {dims:?}, expected {shape:?}"));
        }
        let n: usize = shape.iter().product();
        let data = take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape.clone(), data));
    }
    if pos != bytes.len() {
        return Err("trailing bytes after tensor data".into());
    }
    Ok(tensors)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub epoch: usize,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(code: &LatentCode, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != code.mu.len() || code.log_var.len() != code.mu.len() {
        return Err(Error::Shape(format!("noise has length {}, latent has {}", noise.len(), code.mu.len())));
    }
    Ok(code
        .mu
        .iter()
        .zip(&code.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

impl<'g> Bound<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn base(&self) -> usize {
        2 * self.config.channels.len()
    }

    /// `[N,3,H,W]` images to posterior parameters and attribution-layer maps.
    pub fn encode(&self, images: Var<'g>) -> Encoded<'g> {
        let mut x = images;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let geom = ConvGeometry { stride, padding: 1 };
            x = (x.conv2d(self.vars[2 * i], geom) + self.vars[2 * i + 1]).relu();
        }
        let maps = x;
        let (mu, log_var) = self.latent_from_maps(maps);
        Encoded { mu, log_var, maps }
    }

    /// Global average pool of the maps followed by the two linear read-outs.
    pub fn latent_from_maps(&self, maps: Var<'g>) -> (Var<'g>, Var<'g>) {
        let s = maps.shape();
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let pooled = maps.reshape(&[n, k, hw]).sum_axis_keep(2).reshape(&[n, k]) * (1.0 / hw as f64);
        let b = self.base();
        let mu = pooled.matmul(self.vars[b]) + self.vars[b + 1];
        let log_var = pooled.matmul(self.vars[b + 2]) + self.vars[b + 3];
        (mu, log_var)
    }

    /// The half of `μ` read by `head`.
    pub fn mu_half(&self, mu: Var<'g>, head: Head) -> Var<'g> {
        let d = self.config.latent_half;
        match head {
            Head::Relevant => mu.narrow(1, 0, d),
            Head::Irrelevant => mu.narrow(1, d, d),
        }
    }

    /// Head logits recomputed from attribution-layer maps.
    pub fn logits_from_maps(&self, maps: Var<'g>, head: Head) -> Var<'g> {
        let (mu, _) = self.latent_from_maps(maps);
        self.classify(head, self.mu_half(mu, head))
    }

    /// `[N, 2d]` latent samples to `[N, 3, H, W]` reconstructions.
    pub fn decode(&self, z: Var<'g>) -> Var<'g> {
        let b = self.base() + 4;
        let n = z.shape()[0];
        let hidden = (z.matmul(self.vars[b]) + self.vars[b + 1]).relu();
        let out = hidden.matmul(self.vars[b + 2]) + self.vars[b + 3];
        out.reshape(&[n, 3, self.config.image_height, self.config.image_width])
    }

    pub fn head_vars(&self, head: Head) -> (Var<'g>, Var<'g>) {
        let b = self.base() + 8;
        match head {
            Head::Relevant => (self.vars[b], self.vars[b + 1]),
            Head::Irrelevant => (self.vars[b + 2], self.vars[b + 3]),
        }
    }

    /// `[N, d]` → `[N, |Y|]` affine logits.
    pub fn classify(&self, head: Head, mu_half: Var<'g>) -> Var<'g> {
        let (w, b) = self.head_vars(head);
        mu_half.matmul(w) + b
    }
}
