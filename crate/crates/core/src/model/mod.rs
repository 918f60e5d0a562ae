//! Encoders, projection heads and embedding extraction.

pub mod nn;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{slice4, SliceMode};
use crate::dataset::{crop_primary, ImageRecord, Raster};
use crate::error::{Error, Result};
use crate::matrix::{l2_normalize_rows, Matrix};
use nn::{Layer, NetBuilder, Network, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet34,
    TinyCnn,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(Backbone::Resnet34),
            "tiny_cnn" => Ok(Backbone::TinyCnn),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    None,
    ProjectorMlp,
    ProjectorPlusPredictor,
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Head::None),
            "projector_mlp" => Ok(Head::ProjectorMlp),
            "projector_plus_predictor" => Ok(Head::ProjectorPlusPredictor),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    #[serde(default = "default_input_side")]
    pub input_side: u32,
    /// Width of the pooled backbone output.
    pub embed_dim: usize,
    #[serde(default = "default_head")]
    pub head: Head,
    /// `[hidden, out]` for a projector; `[hidden, out, predictor_hidden]`
    /// for projector plus predictor (the predictor maps `out -> out`).
    #[serde(default)]
    pub head_dims: Vec<usize>,
    /// Channel widths of the tiny backbone's strided stages.
    #[serde(default = "default_tiny_widths")]
    pub tiny_widths: Vec<usize>,
    /// Checkpoint to initialize from instead of random weights.
    #[serde(default)]
    pub pretrained: Option<String>,
}

fn default_input_side() -> u32 {
    224
}

fn default_head() -> Head {
    Head::None
}

fn default_tiny_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

impl EncoderConfig {
    /// ResNet34 with the pooled 512-d output and no head.
    pub fn resnet34() -> Self {
        EncoderConfig {
            backbone: Backbone::Resnet34,
            input_side: 224,
            embed_dim: 512,
            head: Head::None,
            head_dims: Vec::new(),
            tiny_widths: default_tiny_widths(),
            pretrained: None,
        }
    }

    pub fn tiny(input_side: u32, embed_dim: usize) -> Self {
        EncoderConfig {
            backbone: Backbone::TinyCnn,
            input_side,
            embed_dim,
            head: Head::None,
            head_dims: Vec::new(),
            tiny_widths: default_tiny_widths(),
            pretrained: None,
        }
    }

    pub fn with_head(mut self, head: Head, dims: Vec<usize>) -> Self {
        self.head = head;
        self.head_dims = dims;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.input_side < 8 {
            return Err(Error::Config("input_side must be at least 8".into()));
        }
        if self.backbone == Backbone::Resnet34 && self.embed_dim != 512 {
            return Err(Error::Config("resnet34 pools to 512 features; set embed_dim = 512".into()));
        }
        if self.backbone == Backbone::TinyCnn && (self.tiny_widths.is_empty() || self.tiny_widths.contains(&0)) {
            return Err(Error::Config("tiny_widths must be non-empty and positive".into()));
        }
        let want = match self.head {
            Head::None => 0,
            Head::ProjectorMlp => 2,
            Head::ProjectorPlusPredictor => 3,
        };
        if self.head_dims.len() != want || self.head_dims.contains(&0) {
            return Err(Error::Config(format!("head {:?} needs {want} positive head_dims, got {:?}", self.head, self.head_dims)));
        }
        Ok(())
    }

    /// Width of what the trainable objective sees: the projector output, or
    /// the pooled features when there is no head.
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::None => self.embed_dim,
            _ => self.head_dims[1],
        }
    }
}

/// Backbone plus optional projector and predictor MLPs.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Network,
    pub projector: Option<Network>,
    pub predictor: Option<Network>,
}

/// Stride-2 conv-BN-ReLU stages, then a 3×3 conv to `embed_dim`, ReLU and
/// global average pooling. Without the batch norm the net barely moves off
/// chance loss under color distortion at desk-scale step counts.
fn tiny_cnn(b: &mut NetBuilder, widths: &[usize], embed_dim: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = 3;
    for &w in widths {
        layers.push(b.conv(c, w, 3, 2, 1, false));
        layers.push(b.batch_norm(w));
        layers.push(Layer::Relu);
        c = w;
    }
    layers.push(b.conv(c, embed_dim, 3, 1, 1, true));
    layers.push(Layer::Relu);
    layers.push(Layer::GlobalAvgPool);
    layers
}

fn resnet34(b: &mut NetBuilder) -> Vec<Layer> {
    let mut layers = vec![b.conv(3, 64, 7, 2, 3, false), b.batch_norm(64), Layer::Relu, Layer::MaxPool { k: 3, stride: 2, pad: 1 }];
    let mut c = 64;
    for (width, blocks, stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
        for i in 0..blocks {
            let s = if i == 0 { stride } else { 1 };
            let body = vec![
                b.conv(c, width, 3, s, 1, false),
                b.batch_norm(width),
                Layer::Relu,
                b.conv(width, width, 3, 1, 1, false),
                b.batch_norm(width),
            ];
            let shortcut = if s != 1 || c != width { vec![b.conv(c, width, 1, s, 0, false), b.batch_norm(width)] } else { Vec::new() };
            layers.push(Layer::Residual { body, shortcut });
            c = width;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers
}

fn mlp(rng: &mut ChaCha8Rng, input: usize, hidden: usize, out: usize) -> Network {
    let mut b = NetBuilder::new(rng);
    let layers = vec![b.linear(input, hidden, true), Layer::Relu, b.linear(hidden, out, false)];
    b.finish(layers, out)
}

/// Builds a randomly initialized encoder, or loads `config.pretrained`.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    if let Some(path) = &config.pretrained {
        let loaded = load_checkpoint(Path::new(path))?;
        let mut fresh = build_random(config, seed)?;
        if loaded.backbone.params.len() != fresh.backbone.params.len() {
            return Err(Error::Config(format!("pretrained checkpoint {path} does not match the backbone")));
        }
        fresh.backbone = loaded.backbone;
        return Ok(fresh);
    }
    build_random(config, seed)
}

fn build_random(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = {
        let mut b = NetBuilder::new(&mut rng);
        let layers = match config.backbone {
            Backbone::TinyCnn => tiny_cnn(&mut b, &config.tiny_widths, config.embed_dim),
            Backbone::Resnet34 => resnet34(&mut b),
        };
        b.finish(layers, config.embed_dim)
    };
    let (projector, predictor) = match config.head {
        Head::None => (None, None),
        Head::ProjectorMlp => (Some(mlp(&mut rng, config.embed_dim, config.head_dims[0], config.head_dims[1])), None),
        Head::ProjectorPlusPredictor => {
            let [hidden, out, pred_hidden] = [config.head_dims[0], config.head_dims[1], config.head_dims[2]];
            (Some(mlp(&mut rng, config.embed_dim, hidden, out)), Some(mlp(&mut rng, out, pred_hidden, out)))
        }
    };
    Ok(Encoder { config: config.clone(), backbone, projector, predictor })
}

/// Converts equally sized rasters into a normalized NCHW batch.
pub fn rasters_to_tensor<'a>(rasters: impl IntoIterator<Item = &'a Raster>) -> Tensor {
    let rasters: Vec<&Raster> = rasters.into_iter().collect();
    let Some(first) = rasters.first() else {
        return Tensor::zeros(0, 3, 0, 0);
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut t = Tensor::zeros(rasters.len(), 3, h, w);
    let plane = h * w;
    for (s, r) in rasters.iter().enumerate() {
        assert_eq!((r.width() as usize, r.height() as usize), (w, h), "batch rasters must share a size");
        let base = s * 3 * plane;
        for (i, p) in r.pixels().enumerate() {
            for c in 0..3 {
                t.data[base + c * plane + i] = (f64::from(p[c]) / 255.0 - 0.5) / 0.25;
            }
        }
    }
    t
}

pub fn resize_square(raster: &Raster, side: u32) -> Raster {
    if raster.dimensions() == (side, side) {
        raster.clone()
    } else {
        imageops::resize(raster, side, side, FilterType::Triangle)
    }
}

/// Anything that maps a batch of rasters to one feature row per raster.
pub trait ViewEncoder {
    fn input_side(&self) -> u32;
    fn encode_views(&self, views: &[Raster]) -> Matrix;
}

impl ViewEncoder for Encoder {
    fn input_side(&self) -> u32 {
        self.config.input_side
    }

    fn encode_views(&self, views: &[Raster]) -> Matrix {
        let out = self.backbone.infer(rasters_to_tensor(views));
        Matrix::from_vec(out.n, out.c, out.data).expect("pooled output is n x c")
    }
}

impl Encoder {
    /// Pooled backbone features followed by the heads, for shape checks.
    pub fn forward_heads(&self, x: Tensor) -> Tensor {
        let mut h = self.backbone.infer(x);
        if let Some(p) = &self.projector {
            h = p.infer(h);
        }
        h
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params.len()
            + self.projector.as_ref().map_or(0, |n| n.params.len())
            + self.predictor.as_ref().map_or(0, |n| n.params.len())
    }
}

/// Sum of the per-view features over the slices of `raster`.
pub fn embed_sliced(encoder: &impl ViewEncoder, raster: &Raster, mode: SliceMode) -> Result<Vec<f64>> {
    let slices = slice4(raster, mode, encoder.input_side())?;
    let views: Vec<Raster> = slices.views.into_iter().map(|(_, r)| r).collect();
    Ok(sum_rows(&encoder.encode_views(&views)))
}

pub fn sum_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// Embedding table with row ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub values: Matrix,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, values: Matrix, normalized: bool) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), values.rows())));
        }
        Ok(EmbeddingMatrix { ids, values, normalized })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Row-normalized copy; errors on a zero-norm row.
    pub fn normalize(&self) -> Result<Self> {
        let (values, _) = l2_normalize_rows(&self.values).map_err(|i| Error::ZeroNorm(self.ids[i].clone()))?;
        Ok(EmbeddingMatrix { ids: self.ids.clone(), values, normalized: true })
    }
}

const EMBED_BATCH: usize = 32;

/// Pooled backbone features of each record. Inference uses a plain resize of
/// the (optionally cropped) image, no augmentation.
pub fn embed_dataset(encoder: &impl ViewEncoder, records: &[&ImageRecord], bbox_crop: bool, normalize: bool) -> Result<EmbeddingMatrix> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to embed"));
    }
    let side = encoder.input_side();
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(EMBED_BATCH) {
        let views = chunk
            .iter()
            .map(|r| {
                let img = if bbox_crop { crop_primary(r)? } else { r.pixels.clone() };
                Ok(resize_square(&img, side))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = encoder.encode_views(&views);
        rows.extend(out.iter_rows().map(<[f64]>::to_vec));
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let emb = EmbeddingMatrix::new(ids, Matrix::from_rows(&rows)?, false)?;
    if normalize {
        emb.normalize()
    } else {
        Ok(emb)
    }
}

const CHECKPOINT_MAGIC: &str = "COLORVAR-CKPT v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    sections: Vec<(String, usize, usize)>,
}

/// Writes the encoder as a text header (magic line, JSON line) followed by
/// little-endian `f64` parameters and buffers of each network.
pub fn save_checkpoint(encoder: &Encoder, path: &Path) -> Result<()> {
    let nets: Vec<(&str, &Network)> = [
        Some(("backbone", &encoder.backbone)),
        encoder.projector.as_ref().map(|n| ("projector", n)),
        encoder.predictor.as_ref().map(|n| ("predictor", n)),
    ]
    .into_iter()
    .flatten()
    .collect();
    let header = CheckpointHeader {
        config: encoder.config.clone(),
        sections: nets.iter().map(|(name, n)| (name.to_string(), n.params.len(), n.buffers.len())).collect(),
    };
    let mut bytes = Vec::new();
    writeln!(bytes, "{CHECKPOINT_MAGIC}").expect("vec write");
    writeln!(bytes, "{}", serde_json::to_string(&header).map_err(|e| Error::parse("checkpoint", e))?).expect("vec write");
    for (_, n) in &nets {
        for v in n.params.iter().chain(&n.buffers) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = String::new();
    reader.read_line(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::parse(path.display().to_string(), "not a colorvar checkpoint"));
    }
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut config = header.config;
    config.pretrained = None;
    let mut enc = build_random(&config, 0)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (name, np, nb) in header.sections {
        let net = match name.as_str() {
            "backbone" => Some(&mut enc.backbone),
            "projector" => enc.projector.as_mut(),
            "predictor" => enc.predictor.as_mut(),
            _ => None,
        }
        .ok_or_else(|| Error::parse(path.display().to_string(), format!("unexpected section {name}")))?;
        if net.params.len() != np || net.buffers.len() != nb {
            return Err(Error::parse(path.display().to_string(), format!("section {name} has the wrong size")));
        }
        for slot in net.params.iter_mut().chain(net.buffers.iter_mut()) {
            *slot = values.next().ok_or_else(|| Error::parse(path.display().to_string(), "truncated payload"))?;
        }
    }
    Ok(enc)
}
