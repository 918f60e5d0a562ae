//! Training loops for the supervised triplet model and the self-supervised
//! methods, with the momentum (EMA) encoder and the negative-key queue.
//!
//! | method | views | target branch | objective |
//! |---|---|---|---|
//! | triplet | plain resize | none | triplet hinge on normalized features |
//! | simsiam_v0 | original + color jitter | stop-gradient | symmetric negative cosine |
//! | simsiam_v1/v2 | two standard SSL draws | stop-gradient | symmetric negative cosine |
//! | byol | two standard SSL draws | EMA | symmetric negative cosine |
//! | mocov2 | two standard SSL draws | EMA | NT-Xent against the queue |
//! | pbcnet* | color distortion + slices | EMA | NT-Xent on sum-pooled slices |

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{slice4, AugmentRecipe, SliceMode};
use crate::dataset::{crop_primary, ImageRecord, Raster};
use crate::error::{Error, Result};
use crate::losses::{self, ContrastiveBatch, TripletBatch, NORM_TOLERANCE};
use crate::matrix::{l2_normalize_backward, l2_normalize_rows, norm, Matrix};
use crate::model::nn::{Mode, Network, Tensor, Trace};
use crate::model::{build_encoder, rasters_to_tensor, resize_square, Encoder, EncoderConfig, Head};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Triplet,
    SimsiamV0,
    SimsiamV1,
    SimsiamV2,
    Byol,
    Mocov2,
    Pbcnet,
    PbcnetHoriz,
    PbcnetVert,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Triplet,
        Method::SimsiamV0,
        Method::SimsiamV1,
        Method::SimsiamV2,
        Method::Byol,
        Method::Mocov2,
        Method::Pbcnet,
        Method::PbcnetHoriz,
        Method::PbcnetVert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Triplet => "triplet",
            Method::SimsiamV0 => "simsiam_v0",
            Method::SimsiamV1 => "simsiam_v1",
            Method::SimsiamV2 => "simsiam_v2",
            Method::Byol => "byol",
            Method::Mocov2 => "mocov2",
            Method::Pbcnet => "pbcnet",
            Method::PbcnetHoriz => "pbcnet_horiz",
            Method::PbcnetVert => "pbcnet_vert",
        }
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, Method::Mocov2 | Method::Pbcnet | Method::PbcnetHoriz | Method::PbcnetVert)
    }

    pub fn uses_ema(self) -> bool {
        self.uses_queue() || self == Method::Byol
    }

    pub fn slice_mode(self) -> Option<SliceMode> {
        match self {
            Method::Pbcnet => Some(SliceMode::Both),
            Method::PbcnetHoriz => Some(SliceMode::Horiz),
            Method::PbcnetVert => Some(SliceMode::Vert),
            _ => None,
        }
    }

    /// Batch sizes of the reference recipes.
    pub fn default_batch_size(self) -> usize {
        match self {
            Method::SimsiamV0 | Method::SimsiamV1 => 12,
            Method::Pbcnet | Method::PbcnetHoriz | Method::PbcnetVert => 32,
            _ => 128,
        }
    }

    pub fn required_head(self) -> Head {
        match self {
            Method::SimsiamV0 | Method::SimsiamV1 | Method::SimsiamV2 | Method::Byol => Head::ProjectorPlusPredictor,
            Method::Mocov2 => Head::ProjectorMlp,
            _ => Head::None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.001, momentum: 0.9, weight_decay: 1e-6 }
    }
}

/// Method-specific fields are optional; `None` means the method default.
/// Setting a field the method does not use is a config error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Replaces the method's random view recipe (for PBCNet, the
    /// distortion applied before slicing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentRecipe>,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    30
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            epochs: default_epochs(),
            batch_size: None,
            optimizer: SgdConfig::default(),
            temperature: None,
            ema_momentum: None,
            queue_size: None,
            margin: None,
            augment: None,
            seed: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.method.default_batch_size())
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(0.05)
    }

    pub fn ema_momentum(&self) -> f64 {
        self.ema_momentum.unwrap_or(0.999)
    }

    pub fn queue_size(&self) -> usize {
        self.queue_size.unwrap_or(5000)
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(0.2)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let misplaced = |field: &str, ok: bool, set: bool| -> Result<()> {
            if set && !ok {
                Err(Error::Config(format!("`{field}` does not apply to method {m}")))
            } else {
                Ok(())
            }
        };
        misplaced("queue_size", m.uses_queue(), self.queue_size.is_some())?;
        misplaced("temperature", m.uses_queue(), self.temperature.is_some())?;
        misplaced("ema_momentum", m.uses_ema(), self.ema_momentum.is_some())?;
        misplaced("margin", m == Method::Triplet, self.margin.is_some())?;
        misplaced("augment", m != Method::Triplet, self.augment.is_some())?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size() == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if m.uses_queue() {
            if !(self.temperature() > 0.0) {
                return Err(Error::Config("temperature must be positive".into()));
            }
            if self.queue_size() < self.batch_size() {
                return Err(Error::Config(format!("queue_size {} is smaller than batch_size {}", self.queue_size(), self.batch_size())));
            }
        }
        if m.uses_ema() && !(0.0..=1.0).contains(&self.ema_momentum()) {
            return Err(Error::Config("ema_momentum must lie in [0, 1]".into()));
        }
        if m == Method::Triplet && !(self.margin() > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        let o = self.optimizer;
        if !(o.lr > 0.0) || o.momentum < 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer needs lr > 0, momentum >= 0, weight_decay >= 0".into()));
        }
        if let Some(r) = &self.augment {
            r.validate()?;
        }
        Ok(())
    }
}

/// `key <- m * key + (1 - m) * query`, elementwise.
pub fn ema_update(key: &mut [f64], query: &[f64], m: f64) -> Result<()> {
    if key.len() != query.len() {
        return Err(Error::Shape(format!("EMA over {} vs {} parameters", key.len(), query.len())));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation("momentum", "must lie in [0, 1]"));
    }
    if m == 1.0 {
        return Ok(());
    }
    for (k, &q) in key.iter_mut().zip(query) {
        *k = m * *k + (1.0 - m) * q;
    }
    Ok(())
}

/// Query encoder and its EMA-tracked key copy. The key never receives
/// gradient updates; the predictor (if any) is not part of the key.
#[derive(Clone, Debug)]
pub struct MomentumPair {
    pub query: Encoder,
    pub key: Encoder,
    pub m: f64,
}

impl MomentumPair {
    pub fn new(query: Encoder, m: f64) -> Self {
        let mut key = query.clone();
        key.predictor = None;
        MomentumPair { query, key, m }
    }

    pub fn update(&mut self) -> Result<()> {
        momentum_step(&mut self.key, &self.query, self.m)
    }
}

fn momentum_step(key: &mut Encoder, query: &Encoder, m: f64) -> Result<()> {
    ema_update(&mut key.backbone.params, &query.backbone.params, m)?;
    match (key.projector.as_mut(), query.projector.as_ref()) {
        (Some(k), Some(q)) => ema_update(&mut k.params, &q.params, m),
        (None, None) => Ok(()),
        _ => Err(Error::Shape("key and query heads differ".into())),
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Clone, Debug)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    /// Next slot to write; also the oldest entry once full.
    head: usize,
    fill: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::validation("queue", "capacity and dim must be positive"));
        }
        Ok(MemoryQueue { capacity, dim, storage: vec![0.0; capacity * dim], head: 0, fill: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Appends rows, evicting the oldest when full.
    pub fn push(&mut self, keys: &Matrix) -> Result<()> {
        if keys.rows() > self.capacity {
            return Err(Error::validation("keys", format!("{} rows exceed queue capacity {}", keys.rows(), self.capacity)));
        }
        if keys.rows() > 0 && keys.cols() != self.dim {
            return Err(Error::Shape(format!("keys of width {} for a queue of width {}", keys.cols(), self.dim)));
        }
        for (row, r) in keys.iter_rows().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized { row, norm: n });
            }
        }
        for r in keys.iter_rows() {
            self.storage[self.head * self.dim..(self.head + 1) * self.dim].copy_from_slice(r);
            self.head = (self.head + 1) % self.capacity;
        }
        self.fill = (self.fill + keys.rows()).min(self.capacity);
        Ok(())
    }

    /// Current entries, oldest first.
    pub fn contents(&self) -> Matrix {
        let start = (self.head + self.capacity - self.fill) % self.capacity;
        let idx: Vec<usize> = (0..self.fill).map(|i| (start + i) % self.capacity).collect();
        let all = Matrix::from_vec(self.capacity, self.dim, self.storage.clone()).expect("storage is capacity x dim");
        all.select_rows(&idx)
    }
}

/// SGD with momentum and L2 weight decay (decay added to the gradient).
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        Sgd { config, velocity: vec![0.0; n_params] }
    }

    pub fn state_len(&self) -> usize {
        self.velocity.len()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub train_config: TrainConfig,
    pub encoder_config: EncoderConfig,
    pub seed: u64,
    /// `scratch` or `pretrained:<path>`.
    pub init: String,
    pub n_train_images: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub notes: Vec<String>,
}

pub struct TrainedModel {
    pub encoder: Encoder,
    pub manifest: RunManifest,
}

fn matrix_of(t: &Tensor) -> Matrix {
    Matrix::from_vec(t.n, t.sample_len(), t.data.clone()).expect("tensor rows")
}

fn tensor_of(m: Matrix) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    Tensor::from_rows(r, c, m.into_vec())
}

/// Adds `rows_per_item` consecutive rows per output row.
fn sum_groups(m: &Matrix, rows_per_item: usize) -> Matrix {
    let items = m.rows() / rows_per_item;
    let mut out = Matrix::zeros(items, m.cols());
    for i in 0..items {
        for v in 0..rows_per_item {
            let src = m.row(i * rows_per_item + v).to_vec();
            out.row_mut(i).iter_mut().zip(&src).for_each(|(o, s)| *o += s);
        }
    }
    out
}

fn repeat_groups(m: &Matrix, rows_per_item: usize) -> Matrix {
    let idx: Vec<usize> = (0..m.rows() * rows_per_item).map(|r| r / rows_per_item).collect();
    m.select_rows(&idx)
}

fn normalize(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    l2_normalize_rows(m).map_err(|row| Error::Shape(format!("zero-norm embedding in training batch (row {row})")))
}

/// Forward through backbone and optional projector, keeping traces.
struct Forward {
    out: Matrix,
    backbone: Trace,
    projector: Option<Trace>,
}

fn forward_train(enc: &mut Encoder, x: Tensor, with_projector: bool) -> Forward {
    let (f, tb) = enc.backbone.forward(x);
    let (out, tp) = match (with_projector, enc.projector.as_mut()) {
        (true, Some(p)) => {
            let (z, tp) = p.forward(f);
            (z, Some(tp))
        }
        _ => (f, None),
    };
    Forward { out: matrix_of(&out), backbone: tb, projector: tp }
}

/// Target-branch forward: no traces, batch statistics as in training.
fn forward_target(enc: &mut Encoder, x: Tensor, with_projector: bool) -> Matrix {
    let mut h = enc.backbone.run(x, Mode::Train);
    if with_projector {
        if let Some(p) = enc.projector.as_mut() {
            h = p.run(h, Mode::Train);
        }
    }
    matrix_of(&h)
}

struct Optimizers {
    backbone: Sgd,
    projector: Option<Sgd>,
    predictor: Option<Sgd>,
}

#[derive(Default)]
struct Grads {
    backbone: Vec<f64>,
    projector: Option<Vec<f64>>,
    predictor: Option<Vec<f64>>,
}

fn backward_through(enc: &Encoder, fwd: Forward, grad_out: Matrix, grads: &mut Grads) {
    let mut g = tensor_of(grad_out);
    if let (Some(tp), Some(p)) = (fwd.projector, enc.projector.as_ref()) {
        let (dx, gp) = p.backward(tp, g);
        grads.projector = Some(gp);
        g = dx;
    }
    let (_, gb) = enc.backbone.backward(fwd.backbone, g);
    grads.backbone = gb;
}

/// Owns the online encoder, the target branch, the queue and the optimizer
/// state for one training run.
pub struct Trainer {
    config: TrainConfig,
    online: Encoder,
    target: Option<Encoder>,
    queue: Option<MemoryQueue>,
    optim: Optimizers,
    images: Vec<Raster>,
    groups: Vec<Option<String>>,
    rng: ChaCha8Rng,
    epoch_losses: Vec<f64>,
    steps: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, encoder_config: &EncoderConfig, records: &[&ImageRecord]) -> Result<Self> {
        config.validate()?;
        encoder_config.validate()?;
        let method = config.method;
        if encoder_config.head != method.required_head() {
            return Err(Error::Config(format!(
                "method {method} needs head {:?}, config has {:?}",
                method.required_head(),
                encoder_config.head
            )));
        }
        if records.is_empty() {
            return Err(Error::validation("dataset", "no training records"));
        }
        let images = records.iter().map(|r| crop_primary(r)).collect::<Result<Vec<_>>>()?;
        let groups: Vec<Option<String>> = records.iter().map(|r| r.group_id.clone()).collect();
        if method == Method::Triplet {
            if groups.iter().any(Option::is_none) {
                return Err(Error::validation("dataset", "triplet training needs a group id on every record"));
            }
            if triplet_anchors(&groups).is_empty() {
                return Err(Error::validation("dataset", "no record has both a same-group and a different-group partner"));
            }
        }
        let online = build_encoder(encoder_config, config.seed)?;
        let target = method.uses_ema().then(|| MomentumPair::new(online.clone(), config.ema_momentum()).key);
        let queue = if method.uses_queue() { Some(MemoryQueue::new(config.queue_size(), encoder_config.output_dim())?) } else { None };
        let optim = Optimizers {
            backbone: Sgd::new(config.optimizer, online.backbone.params.len()),
            projector: online.projector.as_ref().map(|n| Sgd::new(config.optimizer, n.params.len())),
            predictor: online.predictor.as_ref().map(|n| Sgd::new(config.optimizer, n.params.len())),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            online,
            target,
            queue,
            optim,
            images,
            groups,
            rng,
            epoch_losses: Vec::new(),
            steps: 0,
            started: Instant::now(),
        })
    }

    pub fn online(&self) -> &Encoder {
        &self.online
    }

    pub fn target(&self) -> Option<&Encoder> {
        self.target.as_ref()
    }

    pub fn queue(&self) -> Option<&MemoryQueue> {
        self.queue.as_ref()
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    /// Number of parameters the optimizers update.
    pub fn optimizer_state_len(&self) -> usize {
        self.optim.backbone.state_len()
            + self.optim.projector.as_ref().map_or(0, Sgd::state_len)
            + self.optim.predictor.as_ref().map_or(0, Sgd::state_len)
    }

    pub fn set_ema_momentum(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::validation("ema_momentum", "must lie in [0, 1]"));
        }
        if !self.config.method.uses_ema() {
            return Err(Error::Config(format!("method {} has no momentum encoder", self.config.method)));
        }
        self.config.ema_momentum = Some(m);
        Ok(())
    }

    fn view_recipe(&self) -> AugmentRecipe {
        let side = self.online.config.input_side;
        if let Some(r) = &self.config.augment {
            return r.clone();
        }
        match self.config.method {
            Method::SimsiamV0 => AugmentRecipe::color_jitter_only(Some(side)),
            m if m.slice_mode().is_some() => AugmentRecipe::color_distortion(None),
            _ => AugmentRecipe::standard_ssl(side),
        }
    }

    /// One optimization step on the given training indices; returns the loss.
    pub fn step(&mut self, batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("batch", "empty"));
        }
        let loss = match self.config.method {
            Method::Triplet => self.step_triplet(batch)?,
            Method::SimsiamV0 | Method::SimsiamV1 | Method::SimsiamV2 | Method::Byol => self.step_siamese(batch)?,
            Method::Mocov2 => self.step_contrastive(batch, None)?,
            m => self.step_contrastive(batch, m.slice_mode())?,
        };
        self.steps += 1;
        Ok(loss)
    }

    fn apply(&mut self, grads: Grads) -> Result<()> {
        self.optim.backbone.step(&mut self.online.backbone.params, &grads.backbone);
        if let (Some(o), Some(n), Some(g)) = (self.optim.projector.as_mut(), self.online.projector.as_mut(), grads.projector) {
            o.step(&mut n.params, &g);
        }
        if let (Some(o), Some(n), Some(g)) = (self.optim.predictor.as_mut(), self.online.predictor.as_mut(), grads.predictor) {
            o.step(&mut n.params, &g);
        }
        if let Some(t) = self.target.as_mut() {
            momentum_step(t, &self.online, self.config.ema_momentum())?;
        }
        Ok(())
    }

    fn draw_views(&mut self, recipe: &AugmentRecipe, batch: &[usize]) -> Result<Vec<Raster>> {
        batch
            .iter()
            .map(|&i| {
                let seed = self.rng.next_u64();
                recipe.apply(&self.images[i], seed)
            })
            .collect()
    }

    fn step_siamese(&mut self, batch: &[usize]) -> Result<f64> {
        let side = self.online.config.input_side;
        let recipe = self.view_recipe();
        let first = if self.config.method == Method::SimsiamV0 {
            batch.iter().map(|&i| resize_square(&self.images[i], side)).collect()
        } else {
            self.draw_views(&recipe, batch)?
        };
        let second = self.draw_views(&recipe, batch)?;
        let b = batch.len();
        let x = rasters_to_tensor(first.iter().chain(&second));
        let fwd = forward_train(&mut self.online, x.clone(), true);
        let predictor: &mut Network = self.online.predictor.as_mut().expect("predictor head validated");
        let (p, tq) = predictor.forward(tensor_of(fwd.out.clone()));
        let p = matrix_of(&p);
        let targets = match self.target.as_mut() {
            Some(t) => forward_target(t, x, true),
            None => fwd.out.clone(),
        };
        let idx1: Vec<usize> = (0..b).collect();
        let idx2: Vec<usize> = (b..2 * b).collect();
        let (l1, g1) = losses::negcos_loss_grad(&p.select_rows(&idx1), &targets.select_rows(&idx2))?;
        let (l2, g2) = losses::negcos_loss_grad(&p.select_rows(&idx2), &targets.select_rows(&idx1))?;
        let mut gp = Matrix::zeros(2 * b, p.cols());
        for i in 0..b {
            gp.row_mut(i).iter_mut().zip(g1.row(i)).for_each(|(o, g)| *o = 0.5 * g);
            gp.row_mut(b + i).iter_mut().zip(g2.row(i)).for_each(|(o, g)| *o = 0.5 * g);
        }
        let predictor = self.online.predictor.as_ref().expect("predictor head validated");
        let (dz, g_pred) = predictor.backward(tq, tensor_of(gp));
        let mut grads = Grads { predictor: Some(g_pred), ..Default::default() };
        backward_through(&self.online, fwd, matrix_of(&dz), &mut grads);
        self.apply(grads)?;
        Ok(0.5 * (l1 + l2))
    }

    fn step_contrastive(&mut self, batch: &[usize], slicing: Option<SliceMode>) -> Result<f64> {
        let side = self.online.config.input_side;
        let recipe = self.view_recipe();
        let a = self.draw_views(&recipe, batch)?;
        let b_views = self.draw_views(&recipe, batch)?;
        let per_item = slicing.map_or(1, SliceMode::view_count);
        let expand = |views: Vec<Raster>| -> Result<Vec<Raster>> {
            match slicing {
                None => Ok(views),
                Some(mode) => {
                    let mut out = Vec::with_capacity(views.len() * per_item);
                    for v in &views {
                        out.extend(slice4(v, mode, side)?.views.into_iter().map(|(_, r)| r));
                    }
                    Ok(out)
                }
            }
        };
        let xq = rasters_to_tensor(&expand(a)?);
        let xk = rasters_to_tensor(&expand(b_views)?);
        let with_projector = slicing.is_none();

        let target = self.target.as_mut().expect("queue methods have a key encoder");
        let k_raw = sum_groups(&forward_target(target, xk, with_projector), per_item);
        let (k, _) = normalize(&k_raw)?;
        let queue = self.queue.as_ref().expect("queue methods have a queue");
        let negatives = (!queue.is_empty()).then(|| queue.contents());
        let (loss, grads) =
            contrastive_objective(&mut self.online, xq, &k, negatives.as_ref(), per_item, with_projector, self.config.temperature())?;
        self.apply(grads)?;
        self.queue.as_mut().expect("queue").push(&k)?;
        Ok(loss)
    }

    fn step_triplet(&mut self, batch: &[usize]) -> Result<f64> {
        let side = self.online.config.input_side;
        let mut triplets = Vec::with_capacity(batch.len());
        for &a in batch {
            let (p, n) = sample_triplet(&self.groups, a, &mut self.rng)
                .ok_or_else(|| Error::validation("dataset", format!("record {a} cannot anchor a triplet")))?;
            triplets.push((a, p, n));
        }
        let order: Vec<usize> =
            triplets.iter().map(|t| t.0).chain(triplets.iter().map(|t| t.1)).chain(triplets.iter().map(|t| t.2)).collect();
        let views: Vec<Raster> = order.iter().map(|&i| resize_square(&self.images[i], side)).collect();
        let fwd = forward_train(&mut self.online, rasters_to_tensor(&views), false);
        let (e, norms) = normalize(&fwd.out)?;
        let b = batch.len();
        let pick = |lo: usize| e.select_rows(&(lo..lo + b).collect::<Vec<_>>());
        let (anchors, positives, negatives) = (pick(0), pick(b), pick(2 * b));
        let (loss, g) = losses::triplet_loss_grad(
            &TripletBatch { anchors: &anchors, positives: &positives, negatives: &negatives },
            self.config.margin(),
        )?;
        let mut de = Matrix::zeros(3 * b, e.cols());
        for i in 0..b {
            de.row_mut(i).copy_from_slice(g.anchors.row(i));
            de.row_mut(b + i).copy_from_slice(g.positives.row(i));
            de.row_mut(2 * b + i).copy_from_slice(g.negatives.row(i));
        }
        let draw = l2_normalize_backward(&e, &norms, &de);
        let mut grads = Grads::default();
        backward_through(&self.online, fwd, draw, &mut grads);
        self.apply(grads)?;
        Ok(loss)
    }

    /// Runs one epoch over a fresh shuffle and records its mean step loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> =
            if self.config.method == Method::Triplet { triplet_anchors(&self.groups) } else { (0..self.images.len()).collect() };
        order.shuffle(&mut self.rng);
        let batch = self.config.batch_size();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch) {
            total += self.step(chunk)?;
            count += 1;
        }
        let mean = total / count as f64;
        self.epoch_losses.push(mean);
        Ok(mean)
    }

    pub fn finish(self) -> TrainedModel {
        let method = self.config.method;
        let mut notes = Vec::new();
        if matches!(method, Method::SimsiamV0 | Method::SimsiamV1 | Method::SimsiamV2 | Method::Byol) {
            notes.push("optimizer settings reused from the MoCo v2 / PBCNet recipe".to_string());
        }
        if method == Method::Triplet {
            notes.push("triplets sampled from group labels, one per anchor per epoch; no hard-negative mining".to_string());
        }
        let init = match &self.online.config.pretrained {
            Some(p) => format!("pretrained:{p}"),
            None => "scratch".to_string(),
        };
        TrainedModel {
            manifest: RunManifest {
                method,
                train_config: self.config.clone(),
                encoder_config: self.online.config.clone(),
                seed: self.config.seed,
                init,
                n_train_images: self.images.len(),
                steps: self.steps,
                epoch_losses: self.epoch_losses,
                wall_time_secs: self.started.elapsed().as_secs_f64(),
                notes,
            },
            encoder: self.online,
        }
    }
}

/// Query-branch loss and gradients for one contrastive step. `keys` are the
/// normalized positives; without `negatives` the other in-batch keys are used.
fn contrastive_objective(
    online: &mut Encoder,
    xq: Tensor,
    keys: &Matrix,
    negatives: Option<&Matrix>,
    per_item: usize,
    with_projector: bool,
    temperature: f64,
) -> Result<(f64, Grads)> {
    let fwd = forward_train(online, xq, with_projector);
    let q_raw = sum_groups(&fwd.out, per_item);
    let (q, q_norms) = normalize(&q_raw)?;
    let (loss, dq) = match negatives {
        None => in_batch_ntxent(&q, keys, temperature)?,
        Some(negatives) => {
            let (l, g) =
                losses::ntxent_loss_grad(&ContrastiveBatch { queries: &q, positive_keys: keys, negative_keys: negatives, temperature })?;
            (l, g.queries)
        }
    };
    let dq_raw = l2_normalize_backward(&q, &q_norms, &dq);
    let mut grads = Grads::default();
    backward_through(online, fwd, repeat_groups(&dq_raw, per_item), &mut grads);
    Ok((loss, grads))
}

/// NT-Xent where each query's negatives are the other keys of the batch.
fn in_batch_ntxent(q: &Matrix, k: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let b = q.rows();
    let mut grad = Matrix::zeros(b, q.cols());
    let mut total = 0.0;
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let qi = q.select_rows(&[i]);
        let ki = k.select_rows(&[i]);
        let negs = k.select_rows(&others);
        let (l, g) = losses::ntxent_loss_grad(&ContrastiveBatch { queries: &qi, positive_keys: &ki, negative_keys: &negs, temperature })?;
        total += l;
        grad.row_mut(i).iter_mut().zip(g.queries.row(0)).for_each(|(o, v)| *o = v / b as f64);
    }
    Ok((total / b as f64, grad))
}

fn group_members(groups: &[Option<String>]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        if let Some(g) = g {
            m.entry(g.as_str()).or_default().push(i);
        }
    }
    m
}

/// Records with a same-group partner and at least one record elsewhere.
fn triplet_anchors(groups: &[Option<String>]) -> Vec<usize> {
    let members = group_members(groups);
    if members.len() < 2 {
        return Vec::new();
    }
    members.values().filter(|m| m.len() >= 2).flatten().copied().collect()
}

fn sample_triplet(groups: &[Option<String>], anchor: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let g = groups[anchor].as_deref()?;
    let same: Vec<usize> = (0..groups.len()).filter(|&j| j != anchor && groups[j].as_deref() == Some(g)).collect();
    let other: Vec<usize> = (0..groups.len()).filter(|&j| groups[j].as_deref() != Some(g)).collect();
    if same.is_empty() || other.is_empty() {
        return None;
    }
    Some((same[rng.random_range(0..same.len())], other[rng.random_range(0..other.len())]))
}

/// Trains an encoder on `records` (group ids are only read by the triplet method).
pub fn train(config: &TrainConfig, records: &[&ImageRecord], encoder_config: &EncoderConfig) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(config.clone(), encoder_config, records)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}
