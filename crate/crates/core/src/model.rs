//! Backbones, the assembled two-stream network, checkpoints and CAM export.
//!
//! A backbone is a stack of `conv3×3 → BN → ReLU` blocks. PlacesNet puts a
//! scene head on top, either pooled-then-dense or in fully convolutional form,
//! which additionally exposes per-cell scene scores. ObjectNet puts an object
//! head on its pooled feature. [`FosNet`] combines both streams through a
//! [`Fusion`] stage, or runs PlacesNet alone when no fusion is configured.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionDims, FusionKind, FusionLevel, FusionSpec};
use crate::layers::{BatchNormLayer, ConvKind, ConvLayer, Ctx, DenseLayer, HeadForm, ParamKind, ParamStore};
use crate::losses::GridScores;
use crate::tensor::{read_tensor, write_tensor, DType, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub conv_kind: ConvKind,
    pub head: HeadForm,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            input_hw: (32, 32),
            in_channels: 3,
            blocks: [(16, 2), (32, 2), (64, 2)]
                .into_iter()
                .map(|(channels, stride)| BlockSpec { channels, stride })
                .collect(),
            conv_kind: ConvKind::Vanilla,
            head: HeadForm::Conv1x1Gap,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if self.blocks.is_empty() || self.in_channels == 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!("degenerate backbone {self:?}")));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::Invalid("block channels and strides must be positive".into()));
        }
        let total: usize = self.blocks.iter().map(|b| b.stride).product();
        if h % total != 0 || w % total != 0 {
            return Err(Error::Geometry(format!(
                "total stride {total} does not divide input {h}×{w}"
            )));
        }
        Ok(())
    }

    /// Spatial size of the last feature map.
    pub fn grid_hw(&self) -> (usize, usize) {
        let total: usize = self.blocks.iter().map(|b| b.stride).product();
        (self.input_hw.0 / total, self.input_hw.1 / total)
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    /// Trainable scalars of the blocks: conv weight and bias plus BN scale and shift.
    pub fn block_param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut n = 0;
        for b in &self.blocks {
            n += 9 * cin * b.channels + b.channels + 2 * b.channels;
            cin = b.channels;
        }
        n
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: ConvLayer,
    bn: BatchNormLayer,
}

/// A registered stack of blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn register(store: &mut ParamStore, prefix: &str, spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut hw = spec.input_hw;
        let mut cin = spec.in_channels;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, b) in spec.blocks.iter().enumerate() {
            let name = format!("{prefix}.block{i}");
            let conv = ConvLayer::register(
                store,
                &format!("{name}.conv"),
                3,
                cin,
                b.channels,
                b.stride,
                spec.conv_kind,
                hw,
                rng,
            )?;
            let bn = BatchNormLayer::register(store, &format!("{name}.bn"), b.channels);
            blocks.push(Block { conv, bn });
            hw = (hw.0 / b.stride, hw.1 / b.stride);
            cin = b.channels;
        }
        Ok(Backbone { spec: spec.clone(), blocks })
    }

    /// `[B,H,W,C_in]` images to the `[B,N,M,D]` feature map.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let expect = [self.spec.input_hw.0, self.spec.input_hw.1, self.spec.in_channels];
        match ctx.tape.shape(x) {
            [_, h, w, c] if [*h, *w, *c] == expect => {}
            s => {
                return Err(Error::shape("backbone", format!("expected [B,{},{},{}] images, got {s:?}", expect[0], expect[1], expect[2])))
            }
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.conv.forward(ctx, h)?;
            h = b.bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
        }
        Ok(h)
    }

    /// Convolution layers in order, for inspection.
    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.blocks.iter().map(|b| &b.conv)
    }
}

/// PlacesNet outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct PlacesOut {
    /// `[B,N,M,C]` per-cell scores (fully convolutional head only).
    pub grid: Option<Var>,
    /// `[B,C]` pooled scores.
    pub scores: Var,
    /// `[B,D]` pooled feature.
    pub feature: Var,
}

#[derive(Clone, Debug)]
pub struct PlacesNet {
    pub backbone: Backbone,
    pub head: DenseLayer,
    pub classes: usize,
}

impl PlacesNet {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: &BackboneSpec,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let backbone = Backbone::register(store, prefix, spec, rng)?;
        let head = DenseLayer::register(store, &format!("{prefix}.head"), classes, spec.feature_dim(), rng);
        Ok(PlacesNet { backbone, head, classes })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<PlacesOut> {
        let fmap = self.backbone.forward(ctx, x)?;
        let feature = ctx.tape.global_avg_pool(fmap)?;
        match self.backbone.spec.head {
            HeadForm::GapFc => {
                let scores = self.head.forward(ctx, feature)?;
                Ok(PlacesOut { grid: None, scores, feature })
            }
            HeadForm::Conv1x1Gap => {
                let grid = self.head.forward_grid(ctx, fmap)?;
                let scores = ctx.tape.global_avg_pool(grid)?;
                Ok(PlacesOut { grid: Some(grid), scores, feature })
            }
        }
    }
}

/// ObjectNet outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ObjectOut {
    /// `[B,D]` pooled feature.
    pub feature: Var,
    /// `[B,C_o]` raw object scores.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct ObjectNet {
    pub backbone: Backbone,
    pub head: DenseLayer,
    pub classes: usize,
}

impl ObjectNet {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: &BackboneSpec,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let backbone = Backbone::register(store, prefix, spec, rng)?;
        let head = DenseLayer::register(store, &format!("{prefix}.head"), classes, spec.feature_dim(), rng);
        Ok(ObjectNet { backbone, head, classes })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<ObjectOut> {
        let fmap = self.backbone.forward(ctx, x)?;
        let feature = ctx.tape.global_avg_pool(fmap)?;
        let scores = self.head.forward(ctx, feature)?;
        Ok(ObjectOut { feature, scores })
    }
}

pub const PLACES_PREFIX: &str = "places";
pub const OBJECT_PREFIX: &str = "object";
pub const FUSION_PREFIX: &str = "fusion";

fn default_scenes() -> usize {
    8
}

fn default_objects() -> usize {
    6
}

fn default_object_backbone() -> BackboneSpec {
    BackboneSpec { head: HeadForm::GapFc, ..BackboneSpec::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub places: BackboneSpec,
    #[serde(default = "default_object_backbone")]
    pub object: BackboneSpec,
    #[serde(default = "default_scenes")]
    pub num_scenes: usize,
    #[serde(default = "default_objects")]
    pub num_objects: usize,
    /// `None` runs PlacesNet alone.
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            places: BackboneSpec::default(),
            object: default_object_backbone(),
            num_scenes: default_scenes(),
            num_objects: default_objects(),
            fusion: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.places.validate()?;
        if self.num_scenes < 2 || self.num_objects < 1 {
            return Err(Error::Invalid(format!(
                "need at least 2 scenes and 1 object class, got {} and {}",
                self.num_scenes, self.num_objects
            )));
        }
        if self.fusion.is_some() {
            self.object.validate()?;
            if self.object.input_hw != self.places.input_hw || self.object.in_channels != self.places.in_channels {
                return Err(Error::Invalid("both streams must consume the same images".into()));
            }
        }
        Ok(())
    }

    /// Input and output widths the fusion stage sees at `level`.
    pub fn fusion_dims(&self, level: FusionLevel) -> FusionDims {
        match level {
            FusionLevel::Feature => FusionDims {
                object: self.object.feature_dim(),
                scene: self.places.feature_dim(),
                classes: self.num_scenes,
            },
            FusionLevel::Score => FusionDims {
                object: self.num_objects,
                scene: self.num_scenes,
                classes: self.num_scenes,
            },
        }
    }
}

/// Outputs of one forward pass of the assembled network.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[B,C_s]` final scene scores.
    pub scores: Var,
    pub places: PlacesOut,
    pub object: Option<ObjectOut>,
}

impl Outputs {
    /// Grid scores that drive the final prediction, if any.
    ///
    /// Present when PlacesNet runs alone or fuses at score level; a
    /// feature-level fusion classifier bypasses the per-cell head.
    pub fn output_grid(&self, fusion: Option<FusionSpec>) -> Option<Var> {
        match fusion {
            None => self.places.grid,
            Some(f) if f.level == FusionLevel::Score => self.places.grid,
            Some(_) => None,
        }
    }
}

/// Eager evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Tensor,
    pub grid: Option<Tensor>,
    pub places_scores: Tensor,
    pub object_scores: Option<Tensor>,
}

/// The assembled two-stream network together with its parameters.
#[derive(Clone, Debug)]
pub struct FosNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub places: PlacesNet,
    pub object: Option<ObjectNet>,
    pub fusion: Option<Fusion>,
}

impl FosNet {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let places = PlacesNet::register(&mut store, PLACES_PREFIX, &config.places, config.num_scenes, &mut rng)?;
        let (object, fusion) = match config.fusion {
            None => (None, None),
            Some(spec) => {
                let object =
                    ObjectNet::register(&mut store, OBJECT_PREFIX, &config.object, config.num_objects, &mut rng)?;
                let dims = config.fusion_dims(spec.level);
                let fusion = Fusion::register(&mut store, FUSION_PREFIX, spec, dims, &mut rng)?;
                (Some(object), Some(fusion))
            }
        };
        Ok(FosNet { config, store, places, object, fusion })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<Outputs> {
        let places = self.places.forward(ctx, images)?;
        let (Some(object_net), Some(fusion)) = (&self.object, &self.fusion) else {
            return Ok(Outputs { scores: places.scores, places, object: None });
        };
        let object = object_net.forward(ctx, images)?;
        let (o, s) = match fusion.spec.level {
            FusionLevel::Feature => (object.feature, places.feature),
            FusionLevel::Score => (object.scores, places.scores),
        };
        let scores = fusion.forward_scores(ctx, o, s)?;
        Ok(Outputs { scores, places, object: Some(object) })
    }

    /// Inference on `[H,W,C]` or `[B,H,W,C]` images.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let single = images.rank() == 3;
        let batch = if single {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(s)?
        } else {
            images.clone()
        };
        let mut ctx = Ctx::eval(&self.store);
        let x = ctx.input(batch);
        let out = self.forward(&mut ctx, x)?;
        let take = |v: Var| -> Result<Tensor> {
            let t = ctx.tape.value(v).clone();
            if single {
                let s = t.shape()[1..].to_vec();
                t.reshape(s)
            } else {
                Ok(t)
            }
        };
        Ok(Prediction {
            scores: take(out.scores)?,
            grid: out.places.grid.map(take).transpose()?,
            places_scores: take(out.places.scores)?,
            object_scores: out.object.map(|o| take(o.scores)).transpose()?,
        })
    }

    /// Copies pretrained ObjectNet weights and statistics; returns how many tensors were copied.
    pub fn load_object_net(&mut self, object: &ObjectModel) -> Result<usize> {
        if self.object.is_none() {
            return Err(Error::Invalid("this network has no object stream".into()));
        }
        if object.spec != self.config.object || object.classes != self.config.num_objects {
            return Err(Error::Invalid("pretrained object network does not match the configured object stream".into()));
        }
        Ok(self.store.copy_matching(&object.store, &format!("{OBJECT_PREFIX}.")))
    }

    /// Copies PlacesNet weights from another network with the same places backbone.
    pub fn load_places_net(&mut self, other: &FosNet) -> Result<usize> {
        if other.config.places != self.config.places || other.config.num_scenes != self.config.num_scenes {
            return Err(Error::Invalid("source PlacesNet has a different configuration".into()));
        }
        Ok(self.store.copy_matching(&other.store, &format!("{PLACES_PREFIX}.")))
    }

    /// Copies the PlacesNet head into the feature-level fusion classifier.
    ///
    /// Needs a fused vector of scene-feature width, so concatenation is rejected.
    pub fn warm_start_classifier(&mut self) -> Result<()> {
        match self.config.fusion {
            Some(f) if f.level == FusionLevel::Feature && f.kind != FusionKind::Concat => {}
            _ => {
                return Err(Error::Invalid(
                    "only a feature-level, non-concatenating fusion classifier can start from the places head".into(),
                ))
            }
        }
        for part in ["weight", "bias"] {
            let find = |name: String| self.store.find(&name).ok_or_else(|| Error::Invalid(format!("missing {name}")));
            let src = find(format!("{PLACES_PREFIX}.head.{part}"))?;
            let dst = find(format!("{FUSION_PREFIX}.classifier.{part}"))?;
            let value = self.store.get(src).clone();
            self.store.set(dst, value)?;
        }
        Ok(())
    }

    pub fn freeze_object_net(&mut self, frozen: bool) -> usize {
        self.store.set_frozen(&format!("{OBJECT_PREFIX}."), frozen)
    }

    pub fn save(&self, dir: &Path, norm: Option<&ChannelStats>) -> Result<()> {
        let header = CheckpointHeader {
            model: ModelKind::FosNet,
            version: CHECKPOINT_VERSION,
            fosnet: Some(self.config.clone()),
            object: None,
            normalization: norm.cloned(),
            metadata: BTreeMap::new(),
            params: Vec::new(),
        };
        save_params(dir, header, &self.store)
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<ChannelStats>)> {
        let (header, tensors) = load_params(dir)?;
        let config = match (header.model, header.fosnet) {
            (ModelKind::FosNet, Some(c)) => c,
            _ => return Err(format_error(dir, "checkpoint does not hold a scene network")),
        };
        let mut net = FosNet::build(config, 0)?;
        fill_store(dir, &mut net.store, tensors)?;
        Ok((net, header.normalization))
    }
}

/// A standalone ObjectNet for multi-label pretraining.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub spec: BackboneSpec,
    pub classes: usize,
    pub store: ParamStore,
    pub net: ObjectNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectModelConfig {
    pub backbone: BackboneSpec,
    pub classes: usize,
}

impl ObjectModel {
    pub fn build(spec: BackboneSpec, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Invalid("object network needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ObjectNet::register(&mut store, OBJECT_PREFIX, &spec, classes, &mut rng)?;
        Ok(ObjectModel { spec, classes, store, net })
    }

    /// Raw `[B,C_o]` (or `[C_o]`) object scores in inference mode.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let single = images.rank() == 3;
        let batch = if single {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.clone().reshape(s)?
        } else {
            images.clone()
        };
        let mut ctx = Ctx::eval(&self.store);
        let x = ctx.input(batch);
        let out = self.net.forward(&mut ctx, x)?;
        let t = ctx.tape.value(out.scores).clone();
        if single {
            let c = t.len();
            t.reshape([c])
        } else {
            Ok(t)
        }
    }

    pub fn save(&self, dir: &Path, norm: Option<&ChannelStats>) -> Result<()> {
        let header = CheckpointHeader {
            model: ModelKind::ObjectNet,
            version: CHECKPOINT_VERSION,
            fosnet: None,
            object: Some(ObjectModelConfig { backbone: self.spec.clone(), classes: self.classes }),
            normalization: norm.cloned(),
            metadata: BTreeMap::new(),
            params: Vec::new(),
        };
        save_params(dir, header, &self.store)
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<ChannelStats>)> {
        let (header, tensors) = load_params(dir)?;
        let config = match (header.model, header.object) {
            (ModelKind::ObjectNet, Some(c)) => c,
            _ => return Err(format_error(dir, "checkpoint does not hold an object network")),
        };
        let mut model = ObjectModel::build(config.backbone, config.classes, 0)?;
        fill_store(dir, &mut model.store, tensors)?;
        Ok((model, header.normalization))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FosNet,
    ObjectNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Contents of `manifest.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelKind,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fosnet: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectModelConfig>,
    #[serde(default)]
    pub normalization: Option<ChannelStats>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn format_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn save_params(dir: &Path, mut header: CheckpointHeader, store: &ParamStore) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    for id in store.ids() {
        let name = store.name(id);
        let file = format!("params/{:04}_{}.fost", id.index(), name.replace(['/', '\\'], "_"));
        write_tensor(&dir.join(&file), store.get(id), DType::F64)?;
        header.params.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: store.get(id).shape().to_vec(),
            kind: store.kind(id),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &header).map_err(|e| Error::json(&path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(format_error(
            &path,
            format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", header.version),
        ));
    }
    Ok(header)
}

fn load_params(dir: &Path) -> Result<(CheckpointHeader, Vec<(ParamEntry, Tensor)>)> {
    let header = read_manifest(dir)?;
    let mut out = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let path = dir.join(&entry.file);
        let t = read_tensor(&path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(format_error(&path, format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape)));
        }
        out.push((entry.clone(), t));
    }
    Ok((header, out))
}

fn fill_store(dir: &Path, store: &mut ParamStore, tensors: Vec<(ParamEntry, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(format_error(
            dir,
            format!("checkpoint has {} tensors, the network expects {}", tensors.len(), store.len()),
        ));
    }
    for (entry, t) in tensors {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| format_error(dir, format!("unexpected parameter `{}`", entry.name)))?;
        store.set(id, t).map_err(|e| format_error(dir, format!("`{}`: {e}", entry.name)))?;
    }
    Ok(())
}

/// A class activation map read off the grid scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub class: usize,
    /// `[N,M]` raw per-cell scores of `class`.
    pub raw: Tensor,
    /// `[N,M]` min-max normalized scores in `[0,1]`.
    pub heat: Tensor,
    pub min: f64,
    pub max: f64,
    /// The plane was constant; `heat` is then 0.5 everywhere.
    pub degenerate: bool,
}

/// Min-max normalized score plane of one class.
pub fn export_cam_grid(grid: &GridScores, class: usize) -> Result<CamMap> {
    let raw = grid.plane(class)?;
    let min = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let degenerate = !(range > f64::EPSILON * max.abs().max(min.abs()).max(1.0));
    let heat = if degenerate {
        Tensor::full(raw.shape().to_vec(), 0.5)
    } else {
        raw.map(|v| ((v - min) / range).clamp(0.0, 1.0))
    };
    Ok(CamMap { class, raw, heat, min, max, degenerate })
}

/// Nearest-neighbour enlargement of an `[H,W]` plane by an integer factor.
pub fn upsample_nearest(plane: &Tensor, factor: usize) -> Result<Tensor> {
    let [h, w] = <[usize; 2]>::try_from(plane.shape())
        .map_err(|_| Error::shape("upsample_nearest", format!("expected [H,W], got {:?}", plane.shape())))?;
    if factor == 0 {
        return Err(Error::Invalid("upsampling factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let data = (0..ho * wo)
        .map(|i| plane.data()[(i / wo / factor) * w + (i % wo) / factor])
        .collect();
    Tensor::new([ho, wo], data)
}

/// Writes an `[H,W]` plane with values in `[0,1]` as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, plane: &Tensor) -> Result<()> {
    let [h, w] = <[usize; 2]>::try_from(plane.shape())
        .map_err(|_| Error::shape("write_pgm", format!("expected [H,W], got {:?}", plane.shape())))?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(plane.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| format_error(path, msg);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Writes `<stem>.pgm` (heat map enlarged by `scale`) and `<stem>.csv` (raw
/// scores plus normalization constants). Returns both paths.
pub fn write_cam(dir: &Path, stem: &str, cam: &CamMap, scale: usize) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(&pgm, &upsample_nearest(&cam.heat, scale)?)?;
    let csv = dir.join(format!("{stem}.csv"));
    let [_, m] = <[usize; 2]>::try_from(cam.raw.shape()).expect("cam planes are 2-d");
    let mut text = format!(
        "# class={} min={:e} max={:e} degenerate={}\n",
        cam.class, cam.min, cam.max, cam.degenerate
    );
    text.push_str("row,col,raw,heat\n");
    for (i, (r, h)) in cam.raw.data().iter().zip(cam.heat.data()).enumerate() {
        text.push_str(&format!("{},{},{:e},{}\n", i / m, i % m, r, h));
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    Ok((pgm, csv))
}

/// Reads the CSV written by [`write_cam`] back into a [`CamMap`].
pub fn read_cam(path: &Path) -> Result<CamMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| format_error(path, msg);
    let mut lines = text.lines();
    let header = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("missing header".into()))?;
    let mut meta = std::collections::HashMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed header field `{kv}`")))?;
        meta.insert(k, v);
    }
    let field = |k: &str| meta.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
    let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("not a number: `{v}`")));
    let class = field("class")?.parse::<usize>().map_err(|_| bad("bad class".into()))?;
    let (min, max) = (num(field("min")?)?, num(field("max")?)?);
    let degenerate = field("degenerate")? == "true";
    if lines.next() != Some("row,col,raw,heat") {
        return Err(bad("missing column header".into()));
    }
    let mut cells = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns in `{line}`")));
        }
        let idx = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad index `{v}`")));
        cells.push((idx(cols[0])?, idx(cols[1])?, num(cols[2])?, num(cols[3])?));
    }
    let n = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let m = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if n * m != cells.len() || cells.iter().enumerate().any(|(i, c)| (c.0, c.1) != (i / m, i % m)) {
        return Err(bad("cells are not a complete row-major grid".into()));
    }
    let raw = Tensor::new([n, m], cells.iter().map(|c| c.2).collect())?;
    let heat = Tensor::new([n, m], cells.iter().map(|c| c.3).collect())?;
    Ok(CamMap { class, raw, heat, min, max, degenerate })
}
