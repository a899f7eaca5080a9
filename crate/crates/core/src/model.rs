//! Shared encoder with a segmentation decoder and an instance decoder.
//!
//! The encoder stacks `n_blocks` residual downsampling blocks with widths
//! `base_width · 2^i`. Both decoders mirror it without skip connections. The
//! segmentation decoder ends in a 1×1 convolution and a channel softmax. The
//! instance decoder ends in an `inst_feature_width`-channel feature map feeding
//! the instance head:
//!
//! ```text
//! feat ─ 3×3 conv, ReLU ─ 1×1 conv ─ unit norm ─ θ
//!   └──────────────── concat(feat, θ) ─ 1×1 conv, sigmoid ─ (δ⁺, δ⁻)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::layers::{Conv, DecoderBlock, DecoderCache, EncoderBlock, EncoderCache};
use crate::nn::{ops, ForwardCtx, Gradients, Param, ParamKind, ParamStore, Tensor};
use crate::representations::{DistanceMapPair, OrientationMap, SemanticMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Seg,
    Inst,
    ConsInst,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Seg, Variant::Inst, Variant::ConsInst];

    pub fn has_instance_decoder(self) -> bool {
        self != Variant::Seg
    }

    pub fn uses_unlabeled(self) -> bool {
        self == Variant::ConsInst
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Seg => "Seg",
            Variant::Inst => "Inst",
            Variant::ConsInst => "ConsInst",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seg" => Ok(Variant::Seg),
            "inst" => Ok(Variant::Inst),
            "consinst" | "cons-inst" | "cons_inst" => Ok(Variant::ConsInst),
            _ => Err(Error::InvalidConfig(format!(
                "unknown variant {s:?} (expected Seg, Inst or ConsInst)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub base_width: usize,
    pub n_classes: usize,
    pub n_thing_classes: usize,
    pub variant: Variant,
    pub inst_feature_width: usize,
    pub orientation_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 blocks, widths 8 to 64.
    pub fn new(n_classes: usize, n_thing_classes: usize, variant: Variant) -> Self {
        ModelConfig {
            n_blocks: 4,
            base_width: 8,
            n_classes,
            n_thing_classes,
            variant,
            inst_feature_width: 32,
            orientation_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_blocks == 0 || self.base_width == 0 {
            return bad("n_blocks and base_width must be positive".into());
        }
        if self.n_thing_classes == 0 || self.n_thing_classes + 1 > self.n_classes {
            return bad(format!(
                "need 1 ≤ n_thing_classes ≤ n_classes − 1, got {} of {}",
                self.n_thing_classes, self.n_classes
            ));
        }
        if self.inst_feature_width == 0 || self.orientation_hidden == 0 {
            return bad("instance head widths must be positive".into());
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        1 << self.n_blocks
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsampling();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "input {h}×{w} is not a positive multiple of {f}"
            )));
        }
        Ok(())
    }

    fn encoder_width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder_width(self.n_blocks - 1)
    }
}

/// Network structure; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    encoder: Vec<EncoderBlock>,
    seg_decoder: Vec<DecoderBlock>,
    seg_head: Conv,
    inst: Option<InstanceBranch>,
}

#[derive(Clone, Debug)]
struct InstanceBranch {
    decoder: Vec<DecoderBlock>,
    hidden: Conv,
    orient: Conv,
    dist: Conv,
}

/// Output gradients for [`Network::backward`]; absent entries count as zero.
#[derive(Default)]
pub struct OutputGrads {
    pub probs: Option<Tensor>,
    pub theta: Option<Tensor>,
    pub plus: Option<Tensor>,
    pub minus: Option<Tensor>,
}

/// Network outputs for a batch, all `N × C × H × W`.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub probs: Tensor,
    pub inst: Option<InstanceOutputs>,
}

#[derive(Clone, Debug)]
pub struct InstanceOutputs {
    pub theta: Tensor,
    pub plus: Tensor,
    pub minus: Tensor,
}

pub struct ForwardCache {
    enc: Vec<EncoderCache>,
    seg: Vec<DecoderCache>,
    seg_feat: Tensor,
    probs: Tensor,
    inst: Option<InstanceCache>,
}

struct InstanceCache {
    dec: Vec<DecoderCache>,
    feat: Tensor,
    h1: Tensor,
    o: Tensor,
    cat: Tensor,
    d: Tensor,
}

/// Latent embedding of a batch, `N × C × H/2^B × W/2^B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub z: Tensor,
}

fn decoder_stack(prefix: &str, cin: usize, widths: &[usize]) -> Vec<DecoderBlock> {
    let mut c = cin;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let b = DecoderBlock::new(&format!("{prefix}.dec{i}"), c, w);
            c = w;
            b
        })
        .collect()
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let nb = config.n_blocks;
        let encoder = (0..nb)
            .map(|i| {
                let cin = if i == 0 { 1 } else { config.encoder_width(i - 1) };
                EncoderBlock::new(&format!("enc.block{i}"), cin, config.encoder_width(i))
            })
            .collect();
        // mirror: 64 → 32 → 16 → 8 → 8
        let mut widths: Vec<usize> = (0..nb - 1).rev().map(|i| config.encoder_width(i)).collect();
        widths.push(config.base_width);
        let z = config.latent_channels();
        let seg_decoder = decoder_stack("seg", z, &widths);
        let seg_head = Conv::new("seg.head".into(), config.base_width, config.n_classes, 1, 1, true);
        let inst = config.variant.has_instance_decoder().then(|| {
            let mut iw = widths.clone();
            *iw.last_mut().unwrap() = config.inst_feature_width;
            let f = config.inst_feature_width;
            let hidden = config.orientation_hidden;
            InstanceBranch {
                decoder: decoder_stack("inst", z, &iw),
                hidden: Conv::new("inst.orient.hidden".into(), f, hidden, 3, 1, true),
                orient: Conv::new("inst.orient.out".into(), hidden, 3, 1, 1, true),
                dist: Conv::new("inst.dist".into(), f + 3, 2 * config.n_thing_classes, 1, 1, true),
            }
        });
        Ok(Network {
            config: config.clone(),
            encoder,
            seg_decoder,
            seg_head,
            inst,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter store with every array at its neutral value.
    pub fn empty_params(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for b in &self.encoder {
            b.register(&mut s);
        }
        for b in &self.seg_decoder {
            b.register(&mut s);
        }
        self.seg_head.register(&mut s);
        if let Some(inst) = &self.inst {
            for b in &inst.decoder {
                b.register(&mut s);
            }
            inst.hidden.register(&mut s);
            inst.orient.register(&mut s);
            inst.dist.register(&mut s);
        }
        s
    }

    /// Forward pass with caches for [`Network::backward`]. With
    /// `with_instance` false the instance decoder is skipped.
    pub fn forward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        ctx: &mut ForwardCtx,
        with_instance: bool,
    ) -> Result<(Outputs, ForwardCache)> {
        if x.c != 1 {
            return Err(Error::shape(format!("expected 1 input channel, got {}", x.c)));
        }
        self.config.check_input(x.h, x.w)?;
        let mut h = x.clone();
        let mut enc = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let (y, c) = b.forward(p, &h, ctx);
            enc.push(c);
            h = y;
        }
        let z = h;
        let (seg_feat, seg) = run_decoder(&self.seg_decoder, p, &z, ctx);
        let logits = self.seg_head.forward(p, &seg_feat);
        let probs = ops::softmax_channels(&logits);
        let (inst_out, inst_cache) = match (&self.inst, with_instance) {
            (Some(branch), true) => {
                let (o, c) = branch.forward(p, &z, ctx, self.config.n_thing_classes);
                (Some(o), Some(c))
            }
            _ => (None, None),
        };
        let out = Outputs {
            probs: probs.clone(),
            inst: inst_out,
        };
        let cache = ForwardCache {
            enc,
            seg,
            seg_feat,
            probs,
            inst: inst_cache,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&self, p: &ParamStore, cache: &ForwardCache, grads: &OutputGrads, g: &mut Gradients) {
        let mut dz: Option<Tensor> = None;
        if let Some(dprobs) = &grads.probs {
            let dlogits = ops::softmax_channels_backward(&cache.probs, dprobs);
            let dfeat = self.seg_head.backward(p, &cache.seg_feat, &dlogits, g);
            dz = Some(backprop_decoder(&self.seg_decoder, p, &cache.seg, dfeat, g));
        }
        if let (Some(branch), Some(ic)) = (&self.inst, &cache.inst) {
            if grads.theta.is_some() || grads.plus.is_some() || grads.minus.is_some() {
                let d = branch.backward(p, ic, grads, g);
                dz = Some(match dz {
                    Some(a) => a.add(&d),
                    None => d,
                });
            }
        }
        if let Some(mut d) = dz {
            for (b, c) in self.encoder.iter().zip(&cache.enc).rev() {
                d = b.backward(p, c, &d, g);
            }
        }
    }

    /// Inference-mode encoder.
    pub fn encode(&self, p: &ParamStore, image: &Array2<f32>) -> Result<LatentEmbedding> {
        let (h, w) = image.dim();
        self.config.check_input(h, w)?;
        let mut ctx = ForwardCtx::eval();
        let mut x = Tensor::from_images(&[image]);
        for b in &self.encoder {
            x = b.forward(p, &x, &mut ctx).0;
        }
        Ok(LatentEmbedding { z: x })
    }

    fn check_latent(&self, z: &LatentEmbedding) -> Result<()> {
        if z.z.c != self.config.latent_channels() || z.z.n != 1 {
            return Err(Error::shape(format!(
                "latent has {} channels and batch {}, expected {} and 1",
                z.z.c,
                z.z.n,
                self.config.latent_channels()
            )));
        }
        Ok(())
    }

    pub fn decode_segmentation(&self, p: &ParamStore, z: &LatentEmbedding) -> Result<SemanticMap> {
        self.check_latent(z)?;
        let mut ctx = ForwardCtx::eval();
        let (feat, _) = run_decoder(&self.seg_decoder, p, &z.z, &mut ctx);
        let probs = ops::softmax_channels(&self.seg_head.forward(p, &feat));
        Ok(SemanticMap {
            scores: probs.image_hwc(0),
        })
    }

    pub fn decode_instance(
        &self,
        p: &ParamStore,
        z: &LatentEmbedding,
    ) -> Result<(OrientationMap, DistanceMapPair)> {
        self.check_latent(z)?;
        let branch = self.inst.as_ref().ok_or_else(|| {
            Error::Precondition("the Seg variant has no instance decoder".into())
        })?;
        let mut ctx = ForwardCtx::eval();
        let (o, _) = branch.forward(p, &z.z, &mut ctx, self.config.n_thing_classes);
        Ok((
            OrientationMap {
                theta: o.theta.image_hwc(0),
            },
            DistanceMapPair {
                plus: o.plus.image_hwc(0),
                minus: o.minus.image_hwc(0),
            },
        ))
    }

    /// Inference on one image.
    pub fn predict(&self, p: &ParamStore, image: &Array2<f32>) -> Result<Prediction> {
        let z = self.encode(p, image)?;
        let semantic = self.decode_segmentation(p, &z)?;
        let instance = match self.inst {
            Some(_) => Some(self.decode_instance(p, &z)?),
            None => None,
        };
        Ok(Prediction { semantic, instance })
    }
}

/// Inference result for one image; `instance` is absent for the Seg variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub semantic: SemanticMap,
    pub instance: Option<(OrientationMap, DistanceMapPair)>,
}

fn run_decoder(
    blocks: &[DecoderBlock],
    p: &ParamStore,
    z: &Tensor,
    ctx: &mut ForwardCtx,
) -> (Tensor, Vec<DecoderCache>) {
    let mut h = z.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = b.forward(p, &h, ctx);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

fn backprop_decoder(
    blocks: &[DecoderBlock],
    p: &ParamStore,
    caches: &[DecoderCache],
    mut d: Tensor,
    g: &mut Gradients,
) -> Tensor {
    for (b, c) in blocks.iter().zip(caches).rev() {
        d = b.backward(p, c, &d, g);
    }
    d
}

impl InstanceBranch {
    fn forward(
        &self,
        p: &ParamStore,
        z: &Tensor,
        ctx: &mut ForwardCtx,
        n_thing: usize,
    ) -> (InstanceOutputs, InstanceCache) {
        let (feat, dec) = run_decoder(&self.decoder, p, z, ctx);
        let h1 = ops::relu(&self.hidden.forward(p, &feat));
        let o = self.orient.forward(p, &h1);
        let theta = ops::unit_normalize_channels(&o);
        let cat = Tensor::concat_channels(&feat, &theta);
        let d = ops::sigmoid(&self.dist.forward(p, &cat));
        let (plus, minus) = d.split_channels(n_thing);
        let out = InstanceOutputs { theta, plus, minus };
        let cache = InstanceCache {
            dec,
            feat,
            h1,
            o,
            cat,
            d,
        };
        (out, cache)
    }

    fn backward(&self, p: &ParamStore, c: &InstanceCache, grads: &OutputGrads, g: &mut Gradients) -> Tensor {
        let n_thing = c.d.c / 2;
        let zeros = |ch: usize| Tensor::zeros(c.d.n, ch, c.d.h, c.d.w);
        let dplus = grads.plus.clone().unwrap_or_else(|| zeros(n_thing));
        let dminus = grads.minus.clone().unwrap_or_else(|| zeros(n_thing));
        let dd = Tensor::concat_channels(&dplus, &dminus);
        let dd_pre = ops::sigmoid_backward(&c.d, &dd);
        let dcat = self.dist.backward(p, &c.cat, &dd_pre, g);
        let (mut dfeat, mut dtheta) = dcat.split_channels(c.feat.c);
        if let Some(t) = &grads.theta {
            dtheta.add_assign(t);
        }
        let do_ = ops::unit_normalize_channels_backward(&c.o, &dtheta);
        let dh1 = self.orient.backward(p, &c.h1, &do_, g);
        let dh1_pre = ops::relu_backward(&c.h1, &dh1);
        dfeat.add_assign(&self.hidden.backward(p, &c.feat, &dh1_pre, g));
        backprop_decoder(&self.decoder, p, &c.dec, dfeat, g)
    }
}

/// Adam moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimizerState {
    pub fn zeros_for(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in params.iter().filter(|(_, p)| p.kind.trainable()) {
            m.insert(
                name,
                Param {
                    shape: p.shape.clone(),
                    kind: p.kind,
                    data: vec![0.0; p.data.len()],
                },
            );
        }
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Weights, optimizer moments and bookkeeping of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub seed: u64,
    pub lr: f32,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CICK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    epoch: usize,
    seed: u64,
    lr: f32,
    optimizer_step: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: ArrayGroup,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayGroup {
    Param,
    AdamM,
    AdamV,
}

impl ModelState {
    pub fn network(&self) -> Result<Network> {
        Network::new(&self.config)
    }

    pub fn predict(&self, image: &Array2<f32>) -> Result<Prediction> {
        self.network()?.predict(&self.params, image)
    }

    /// Checkpoint layout: magic `b"CICK"`, version `u16`, header length
    /// `u32`, the JSON header (config, bookkeeping and array inventory), then
    /// every inventoried array as a float-map container of shape
    /// `len × 1 × 1`, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut blobs = Vec::new();
        let groups = [
            (ArrayGroup::Param, &self.params),
            (ArrayGroup::AdamM, &self.optimizer.m),
            (ArrayGroup::AdamV, &self.optimizer.v),
        ];
        for (group, store) in groups {
            for (name, p) in store.iter() {
                arrays.push(ArrayEntry {
                    name: name.to_string(),
                    group,
                    kind: p.kind,
                    shape: p.shape.clone(),
                });
                let map = Array3::from_shape_vec((p.data.len(), 1, 1), p.data.clone())
                    .expect("flat shape");
                blobs.push(io::encode_float_map(&map)?);
            }
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            lr: self.lr,
            optimizer_step: self.optimizer.step,
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 10 || bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut at = 10 + hlen;
        for e in header.arrays {
            let (map, used) = io::decode_float_map(&bytes[at..], path)?;
            at += used;
            let len: usize = e.shape.iter().product();
            if map.len() != len {
                return Err(Error::format(path, format!("array {} has the wrong length", e.name)));
            }
            let param = Param {
                shape: e.shape,
                kind: e.kind,
                data: map.into_raw_vec_and_offset().0,
            };
            match e.group {
                ArrayGroup::Param => params.insert(e.name, param),
                ArrayGroup::AdamM => m.insert(e.name, param),
                ArrayGroup::AdamV => v.insert(e.name, param),
            }
        }
        if at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        let expected = Network::new(&header.config)?.empty_params();
        let names_match = expected.len() == params.len()
            && expected
                .iter()
                .all(|(n, p)| params.contains(n) && params.param(n).shape == p.shape);
        if !names_match {
            return Err(Error::format(path, "parameter inventory does not match the config"));
        }
        Ok(ModelState {
            config: header.config,
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m,
                v,
            },
            epoch: header.epoch,
            seed: header.seed,
            lr: header.lr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                io::create_dir(parent)?;
            }
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
