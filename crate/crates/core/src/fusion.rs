//! Fusion of object and scene representations.
//!
//! Every strategy maps an object vector `x_o` (dimension `D_o`) and a scene
//! vector `x_s` (dimension `D_s`) to a fused vector:
//!
//! | kind              | fused vector                         |
//! |-------------------|--------------------------------------|
//! | `sum`             | `x_o + x_s`                          |
//! | `concat`          | `[x_o, x_s]`                         |
//! | `ccm`             | `x_s + act(W x_o + b)`               |
//! | `ccm_bn`          | `x_s + act(BN(W x_o))`               |
//! | `ccg`             | `σ(W x_o + b) ⊙ x_s`                 |
//! | `ccg_bn`          | `σ(BN(W x_o)) ⊙ x_s`                 |
//! | `mixed_ccm_ccg`   | `σ(W₁ x_o + b₁) ⊙ (W₂ x_s + b₂)`     |
//! | `mixed_ccm_ccg_bn`| `σ(BN₁(W₁ x_o)) ⊙ BN₂(W₂ x_s)`       |
//!
//! `act` is ReLU at feature level and the identity at score level. At score
//! level the inputs are raw class scores and the fused vector is used directly
//! as the scene scores; at feature level a dense classifier follows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    dense, he_normal, BNParams, BatchNormLayer, Ctx, DenseLayer, DenseParams, ParamId, ParamStore,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Sum,
    Concat,
    Ccm,
    CcmBn,
    #[default]
    Ccg,
    CcgBn,
    MixedCcmCcg,
    MixedCcmCcgBn,
}

impl FusionKind {
    pub const ALL: [FusionKind; 8] = [
        FusionKind::Sum,
        FusionKind::Concat,
        FusionKind::Ccm,
        FusionKind::CcmBn,
        FusionKind::Ccg,
        FusionKind::CcgBn,
        FusionKind::MixedCcmCcg,
        FusionKind::MixedCcmCcgBn,
    ];

    pub fn uses_bn(self) -> bool {
        matches!(self, FusionKind::CcmBn | FusionKind::CcgBn | FusionKind::MixedCcmCcgBn)
    }

    pub fn is_mixed(self) -> bool {
        matches!(self, FusionKind::MixedCcmCcg | FusionKind::MixedCcmCcgBn)
    }

    fn has_object_transform(self) -> bool {
        !matches!(self, FusionKind::Sum | FusionKind::Concat)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
            FusionKind::Ccm => "ccm",
            FusionKind::CcmBn => "ccm_bn",
            FusionKind::Ccg => "ccg",
            FusionKind::CcgBn => "ccg_bn",
            FusionKind::MixedCcmCcg => "mixed_ccm_ccg",
            FusionKind::MixedCcmCcgBn => "mixed_ccm_ccg_bn",
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown fusion kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLevel {
    /// Pooled backbone features, followed by a dense classifier.
    #[default]
    Feature,
    /// Raw class scores; the fused vector is the output.
    Score,
}

/// Configuration of the fusion stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    pub level: FusionLevel,
}

/// Input and output widths of a fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub object: usize,
    pub scene: usize,
    pub classes: usize,
}

fn validate_dims(spec: FusionSpec, dims: FusionDims) -> Result<()> {
    let FusionDims { object, scene, classes } = dims;
    if object == 0 || scene == 0 || classes < 2 {
        return Err(Error::Invalid(format!("degenerate fusion dimensions {dims:?}")));
    }
    if spec.kind == FusionKind::Sum && object != scene {
        return Err(Error::shape(
            "fusion",
            format!("sum fusion needs equal widths, got object {object} and scene {scene}"),
        ));
    }
    if spec.level == FusionLevel::Score {
        if spec.kind == FusionKind::Concat {
            return Err(Error::Invalid(
                "concat fusion has no fixed output width and is only available at feature level".into(),
            ));
        }
        if scene != classes {
            return Err(Error::shape(
                "fusion",
                format!("score-level fusion needs scene scores over {classes} classes, got width {scene}"),
            ));
        }
    }
    Ok(())
}

impl FusionSpec {
    /// Whether this fusion can combine inputs of the given widths.
    pub fn supports(self, dims: FusionDims) -> bool {
        validate_dims(self, dims).is_ok()
    }
}

/// Width of the fused vector.
pub fn fused_dim(kind: FusionKind, dims: FusionDims) -> usize {
    if kind == FusionKind::Concat {
        dims.object + dims.scene
    } else {
        dims.scene
    }
}

/// `W·x + b`, the pseudo scene vector converted from an object vector.
pub fn ccm_transform_var(tape: &mut Tape, x_object: Var, w: Var, b: Var) -> Result<Var> {
    dense(tape, x_object, w, b)
}

/// `σ(logits) ⊙ x`.
pub fn gate(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(x) {
        return Err(Error::shape(
            "gate",
            format!("gate {:?} does not match gated vector {:?}", tape.shape(logits), tape.shape(x)),
        ));
    }
    let g = tape.sigmoid(logits)?;
    tape.mul(g, x)
}

/// Parameters of a registered fusion stage.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub spec: FusionSpec,
    pub dims: FusionDims,
    w1: Option<ParamId>,
    b1: Option<ParamId>,
    w2: Option<ParamId>,
    b2: Option<ParamId>,
    bn1: Option<BatchNormLayer>,
    bn2: Option<BatchNormLayer>,
    classifier: Option<DenseLayer>,
}

impl Fusion {
    /// Registers the parameters of `spec` under `prefix`.
    ///
    /// Object transforms are He-initialized with zero bias; the scene
    /// transform of the mixed variants starts at the identity.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: FusionSpec,
        dims: FusionDims,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(spec, dims)?;
        let (k, d_o, d_s) = (spec.kind, dims.object, dims.scene);
        let mut f = Fusion::empty(spec, dims);
        if k.has_object_transform() {
            f.w1 = Some(store.weight(format!("{prefix}.w1"), he_normal([d_s, d_o], d_o, rng)));
            if k.uses_bn() {
                f.bn1 = Some(BatchNormLayer::register(store, &format!("{prefix}.bn1"), d_s));
            } else {
                f.b1 = Some(store.weight(format!("{prefix}.b1"), Tensor::zeros([d_s])));
            }
        }
        if k.is_mixed() {
            f.w2 = Some(store.weight(format!("{prefix}.w2"), Tensor::eye(d_s)));
            if k.uses_bn() {
                f.bn2 = Some(BatchNormLayer::register(store, &format!("{prefix}.bn2"), d_s));
            } else {
                f.b2 = Some(store.weight(format!("{prefix}.b2"), Tensor::zeros([d_s])));
            }
        }
        if spec.level == FusionLevel::Feature {
            let width = fused_dim(k, dims);
            f.classifier = Some(DenseLayer::register(
                store,
                &format!("{prefix}.classifier"),
                dims.classes,
                width,
                rng,
            ));
        }
        Ok(f)
    }

    fn empty(spec: FusionSpec, dims: FusionDims) -> Self {
        Fusion {
            spec,
            dims,
            w1: None,
            b1: None,
            w2: None,
            b2: None,
            bn1: None,
            bn2: None,
            classifier: None,
        }
    }

    pub fn fused_dim(&self) -> usize {
        fused_dim(self.spec.kind, self.dims)
    }

    fn linear(ctx: &mut Ctx<'_>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = ctx.param(w);
        let y = ctx.tape.matmul_bt(x, wv)?;
        match b {
            Some(b) => {
                let bv = ctx.param(b);
                ctx.tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    fn branch(
        ctx: &mut Ctx<'_>,
        x: Var,
        w: Option<ParamId>,
        b: Option<ParamId>,
        bn: Option<&BatchNormLayer>,
    ) -> Result<Var> {
        let w = w.ok_or_else(|| Error::Invalid("fusion branch has no weight".into()))?;
        let y = Self::linear(ctx, x, w, b)?;
        match bn {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }

    fn check_inputs(&self, tape: &Tape, object: Var, scene: Var) -> Result<()> {
        match (tape.shape(object), tape.shape(scene)) {
            ([bo, d_o], [bs, d_s]) if bo == bs && *d_o == self.dims.object && *d_s == self.dims.scene => Ok(()),
            (o, s) => Err(Error::shape(
                "fusion",
                format!(
                    "expected [B,{}] object and [B,{}] scene inputs, got {o:?} and {s:?}",
                    self.dims.object, self.dims.scene
                ),
            )),
        }
    }

    /// The fused `[B, fused_dim]` vector.
    pub fn forward(&self, ctx: &mut Ctx<'_>, object: Var, scene: Var) -> Result<Var> {
        self.check_inputs(&ctx.tape, object, scene)?;
        let kind = self.spec.kind;
        match kind {
            FusionKind::Sum => ctx.tape.add(object, scene),
            FusionKind::Concat => ctx.tape.concat(object, scene),
            FusionKind::Ccm | FusionKind::CcmBn => {
                let mut t = Self::branch(ctx, object, self.w1, self.b1, self.bn1.as_ref())?;
                if self.spec.level == FusionLevel::Feature {
                    t = ctx.tape.relu(t)?;
                }
                ctx.tape.add(scene, t)
            }
            FusionKind::Ccg | FusionKind::CcgBn => {
                let logits = Self::branch(ctx, object, self.w1, self.b1, self.bn1.as_ref())?;
                gate(&mut ctx.tape, logits, scene)
            }
            FusionKind::MixedCcmCcg | FusionKind::MixedCcmCcgBn => {
                let logits = Self::branch(ctx, object, self.w1, self.b1, self.bn1.as_ref())?;
                let target = Self::branch(ctx, scene, self.w2, self.b2, self.bn2.as_ref())?;
                gate(&mut ctx.tape, logits, target)
            }
        }
    }

    /// `[B, classes]` scene scores: the fused vector itself at score level,
    /// the dense classifier applied to it at feature level.
    pub fn forward_scores(&self, ctx: &mut Ctx<'_>, object: Var, scene: Var) -> Result<Var> {
        let fused = self.forward(ctx, object, scene)?;
        match &self.classifier {
            Some(c) => c.forward(ctx, fused),
            None => Ok(fused),
        }
    }

    pub fn params(&self, store: &ParamStore) -> FusionParams {
        let get = |id: Option<ParamId>| id.map(|id| store.get(id).clone());
        FusionParams {
            kind: self.spec.kind,
            level: self.spec.level,
            w1: get(self.w1),
            b1: get(self.b1),
            w2: get(self.w2),
            b2: get(self.b2),
            bn1: self.bn1.as_ref().map(|b| b.params(store)),
            bn2: self.bn2.as_ref().map(|b| b.params(store)),
            classifier: self.classifier.as_ref().map(|c| c.params(store)),
        }
    }
}

/// Object and scene vectors, `[D]` for one image or `[B,D]` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInputs {
    pub object: Tensor,
    pub scene: Tensor,
}

impl FusionInputs {
    pub fn new(object: Tensor, scene: Tensor) -> Result<Self> {
        match (object.shape(), scene.shape()) {
            ([_], [_]) => {}
            ([bo, _], [bs, _]) if bo == bs => {}
            (o, s) => return Err(Error::shape("fusion_inputs", format!("object {o:?} with scene {s:?}"))),
        }
        if !object.is_finite() || !scene.is_finite() {
            return Err(Error::NonFinite("fusion_inputs".into()));
        }
        Ok(FusionInputs { object, scene })
    }

    fn batched(&self) -> bool {
        self.object.rank() == 2
    }

    fn as_batch(&self) -> Result<(Tensor, Tensor)> {
        if self.batched() {
            Ok((self.object.clone(), self.scene.clone()))
        } else {
            Ok((
                self.object.clone().reshape([1, self.object.len()])?,
                self.scene.clone().reshape([1, self.scene.len()])?,
            ))
        }
    }
}

/// Plain-tensor parameters of a fusion stage, for eager evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub kind: FusionKind,
    pub level: FusionLevel,
    /// `[D_s, D_o]` object transform.
    pub w1: Option<Tensor>,
    pub b1: Option<Tensor>,
    /// `[D_s, D_s]` scene transform of the mixed variants.
    pub w2: Option<Tensor>,
    pub b2: Option<Tensor>,
    pub bn1: Option<BNParams>,
    pub bn2: Option<BNParams>,
    pub classifier: Option<DenseParams>,
}

impl FusionParams {
    fn bare(kind: FusionKind) -> Self {
        FusionParams {
            kind,
            level: FusionLevel::Score,
            w1: None,
            b1: None,
            w2: None,
            b2: None,
            bn1: None,
            bn2: None,
            classifier: None,
        }
    }

    pub fn sum() -> Self {
        Self::bare(FusionKind::Sum)
    }

    pub fn concat() -> Self {
        FusionParams { level: FusionLevel::Feature, ..Self::bare(FusionKind::Concat) }
    }

    pub fn ccm(w: Tensor, b: Tensor) -> Self {
        FusionParams { w1: Some(w), b1: Some(b), ..Self::bare(FusionKind::Ccm) }
    }

    pub fn ccg(w: Tensor, b: Tensor) -> Self {
        FusionParams { w1: Some(w), b1: Some(b), ..Self::bare(FusionKind::Ccg) }
    }

    pub fn ccg_bn(w: Tensor, bn: BNParams) -> Self {
        FusionParams { w1: Some(w), bn1: Some(bn), ..Self::bare(FusionKind::CcgBn) }
    }

    pub fn mixed(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Self {
        FusionParams {
            w1: Some(w1),
            b1: Some(b1),
            w2: Some(w2),
            b2: Some(b2),
            ..Self::bare(FusionKind::MixedCcmCcg)
        }
    }

    pub fn mixed_bn(w1: Tensor, bn1: BNParams, w2: Tensor, bn2: BNParams) -> Self {
        FusionParams {
            w1: Some(w1),
            bn1: Some(bn1),
            w2: Some(w2),
            bn2: Some(bn2),
            ..Self::bare(FusionKind::MixedCcmCcgBn)
        }
    }

    pub fn at_level(mut self, level: FusionLevel) -> Self {
        self.level = level;
        self
    }

    pub fn with_classifier(mut self, classifier: DenseParams) -> Self {
        self.level = FusionLevel::Feature;
        self.classifier = Some(classifier);
        self
    }

    fn dims(&self, inputs: &FusionInputs) -> FusionDims {
        let width = |t: &Tensor| *t.shape().last().unwrap_or(&0);
        let scene = width(&inputs.scene);
        let classes = match &self.classifier {
            Some(c) => c.outputs(),
            None => fused_dim(self.kind, FusionDims { object: width(&inputs.object), scene, classes: 0 }),
        };
        FusionDims { object: width(&inputs.object), scene, classes }
    }

    /// Loads these tensors into a fresh store laid out like [`Fusion::register`].
    fn bind(&self, dims: FusionDims) -> Result<(ParamStore, Fusion)> {
        let spec = FusionSpec { kind: self.kind, level: self.level };
        let kind = self.kind;
        let mut store = ParamStore::new();
        let mut f = Fusion::empty(spec, dims);
        let need = |t: &Option<Tensor>, name: &str| {
            t.clone().ok_or_else(|| Error::Invalid(format!("{kind} fusion needs `{name}`")))
        };
        let check = |t: &Tensor, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape("fusion", format!("{name} is {:?}, expected {shape:?}", t.shape())))
            }
        };
        let bn_layer = |store: &mut ParamStore, name: &str, bn: &Option<BNParams>| -> Result<BatchNormLayer> {
            let bn = bn.as_ref().ok_or_else(|| Error::Invalid(format!("{kind} fusion needs `{name}`")))?;
            if bn.channels() != dims.scene {
                return Err(Error::shape("fusion", format!("{name} has {} channels, expected {}", bn.channels(), dims.scene)));
            }
            let mut layer = BatchNormLayer::register(store, name, dims.scene);
            layer.momentum = bn.momentum;
            layer.eps = bn.eps;
            store.set(layer.gamma, bn.gamma.clone())?;
            store.set(layer.beta, bn.beta.clone())?;
            store.set(layer.running_mean, bn.running_mean.clone())?;
            store.set(layer.running_var, bn.running_var.clone())?;
            Ok(layer)
        };
        if kind.has_object_transform() {
            let w1 = need(&self.w1, "w1")?;
            check(&w1, &[dims.scene, dims.object], "w1")?;
            f.w1 = Some(store.weight("w1", w1));
            if kind.uses_bn() {
                f.bn1 = Some(bn_layer(&mut store, "bn1", &self.bn1)?);
            } else {
                let b1 = need(&self.b1, "b1")?;
                check(&b1, &[dims.scene], "b1")?;
                f.b1 = Some(store.weight("b1", b1));
            }
        }
        if kind.is_mixed() {
            let w2 = need(&self.w2, "w2")?;
            check(&w2, &[dims.scene, dims.scene], "w2")?;
            f.w2 = Some(store.weight("w2", w2));
            if kind.uses_bn() {
                f.bn2 = Some(bn_layer(&mut store, "bn2", &self.bn2)?);
            } else {
                let b2 = need(&self.b2, "b2")?;
                check(&b2, &[dims.scene], "b2")?;
                f.b2 = Some(store.weight("b2", b2));
            }
        }
        if let Some(c) = &self.classifier {
            check(&c.weight, &[dims.classes, fused_dim(kind, dims)], "classifier weight")?;
            f.classifier = Some(DenseLayer {
                weight: store.weight("classifier.weight", c.weight.clone()),
                bias: store.weight("classifier.bias", c.bias.clone()),
            });
        }
        // Classifier-free feature-level parameters only expose the fused vector.
        if self.level == FusionLevel::Score || kind == FusionKind::Sum {
            validate_dims(spec, dims)?;
        }
        Ok((store, f))
    }

    /// Runs the fusion eagerly. In training mode batch-norm branches use batch
    /// statistics and their running averages are updated in place.
    fn run(&mut self, inputs: &FusionInputs, training: bool, scores: bool) -> Result<Tensor> {
        let dims = self.dims(inputs);
        let (store, f) = self.bind(dims)?;
        let (object, scene) = inputs.as_batch()?;
        let mut ctx = Ctx::with_mode(&store, training, false);
        let (o, s) = (ctx.input(object), ctx.input(scene));
        let out = if scores {
            if f.spec.level == FusionLevel::Feature && f.classifier.is_none() {
                return Err(Error::Invalid("feature-level fusion needs a classifier to produce scores".into()));
            }
            f.forward_scores(&mut ctx, o, s)?
        } else {
            f.forward(&mut ctx, o, s)?
        };
        let value = ctx.tape.value(out).clone();
        let updates = ctx.take_updates();
        let mut store = store;
        crate::layers::apply_updates(&mut store, updates)?;
        let fresh = f.params(&store);
        self.bn1 = fresh.bn1;
        self.bn2 = fresh.bn2;
        if inputs.batched() {
            Ok(value)
        } else {
            let w = value.len();
            value.reshape([w])
        }
    }
}

fn expect_kind(p: &FusionParams, allowed: &[FusionKind], op: &str) -> Result<()> {
    if allowed.contains(&p.kind) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{op} called with {} parameters", p.kind)))
    }
}

/// `W·x_o + b`.
pub fn ccm_transform(object: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    DenseParams::new(w.clone(), b.clone())?.apply(object)
}

/// `x_s + act(W x_o + b)` or its batch-norm variant.
pub fn ccm_fuse(inputs: &FusionInputs, p: &mut FusionParams, training: bool) -> Result<Tensor> {
    expect_kind(p, &[FusionKind::Ccm, FusionKind::CcmBn], "ccm_fuse")?;
    p.run(inputs, training, false)
}

/// `σ(W x_o + b) ⊙ x_s`.
pub fn ccg_fuse(inputs: &FusionInputs, p: &FusionParams) -> Result<Tensor> {
    expect_kind(p, &[FusionKind::Ccg], "ccg_fuse")?;
    p.clone().run(inputs, false, false)
}

/// `σ(BN(W x_o)) ⊙ x_s`.
pub fn ccg_bn_fuse(inputs: &FusionInputs, p: &mut FusionParams, training: bool) -> Result<Tensor> {
    expect_kind(p, &[FusionKind::CcgBn], "ccg_bn_fuse")?;
    p.run(inputs, training, false)
}

/// `σ(W₁ x_o + b₁) ⊙ (W₂ x_s + b₂)` or its batch-norm variant.
pub fn mixed_ccm_ccg(inputs: &FusionInputs, p: &mut FusionParams, training: bool) -> Result<Tensor> {
    expect_kind(p, &[FusionKind::MixedCcmCcg, FusionKind::MixedCcmCcgBn], "mixed_ccm_ccg")?;
    p.run(inputs, training, false)
}

/// Elementwise sum or concatenation.
pub fn baseline_fuse(inputs: &FusionInputs, p: &FusionParams) -> Result<Tensor> {
    expect_kind(p, &[FusionKind::Sum, FusionKind::Concat], "baseline_fuse")?;
    p.clone().run(inputs, false, false)
}

/// Any fusion kind, returning the fused vector.
pub fn fuse(inputs: &FusionInputs, p: &mut FusionParams, training: bool) -> Result<Tensor> {
    p.run(inputs, training, false)
}

/// Scene class scores: the fused vector at score level, the classifier output
/// at feature level.
pub fn fuse_at_level(inputs: &FusionInputs, p: &mut FusionParams, training: bool) -> Result<Tensor> {
    p.run(inputs, training, true)
}
