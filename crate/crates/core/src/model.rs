//! Encoder/decoder assembly.
//!
//! Parameter names are stable and hierarchical (`encoder.*`, `decoder.*`);
//! ablation switches only add or remove whole subtrees, so toggling one never
//! changes the shape or initial value of an unrelated tensor.

use crate::attention::{AttentionConfig, DaBlock, TokenTransformer, TransformerBlock};
use crate::distortion::{DistortionMapping, ScaleRegulator};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{init_relation_matrix, PriorKind, RelationMatrix};
use crate::graph::{sigmoid, Var};
use crate::nn::{LayerNorm, Linear, PROJ_STD};
use crate::params::{Ctx, Init, Mode, ParamRegistry, ParameterStore};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{out_length, SoftSplitSpec, TokenSequence, Tokens};

/// Per-channel normalization applied to `[0, 1]` RGB input.
pub const IMAGE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmPlacement {
    Decoder,
    /// Gate the projected tokens before the encoder transformer layer instead.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderDa {
    Off,
    /// Every encoder block is a DA block.
    Replace,
    /// A DA block runs beside the encoder layer; both residual increments are summed.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmInjection {
    /// Regulator tokens are added to the positional embedding.
    Add,
    /// The raw prior is appended to the image as a fourth input channel.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub t2t: [SoftSplitSpec; 3],
    pub rt2t: [SoftSplitSpec; 3],
    pub token_dim: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub use_dm: bool,
    pub use_da: bool,
    pub use_rm: bool,
    pub use_pe: bool,
    pub prior: PriorKind,
    pub fold_channels: [usize; 3],
    pub regulator_widths: [usize; 2],
    pub normalize_fold: bool,
    pub skip_fusion: bool,
    pub dm_placement: DmPlacement,
    pub encoder_da: EncoderDa,
    pub rm_injection: RmInjection,
}

pub fn t2t_windows() -> [SoftSplitSpec; 3] {
    [
        SoftSplitSpec { kernel: 7, overlap: 3, padding: 2 },
        SoftSplitSpec { kernel: 3, overlap: 1, padding: 1 },
        SoftSplitSpec { kernel: 3, overlap: 1, padding: 1 },
    ]
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t2t = t2t_windows();
        Self {
            height: 224,
            width: 448,
            t2t,
            rt2t: [t2t[2], t2t[1], t2t[0]],
            token_dim: 64,
            embed_dim: 384,
            encoder_depth: 14,
            heads: 6,
            mlp_ratio: 4.0,
            dropout: 0.0,
            use_dm: true,
            use_da: true,
            use_rm: true,
            use_pe: true,
            prior: PriorKind::Cosine,
            fold_channels: [64, 64, 64],
            regulator_widths: [64, 192],
            normalize_fold: false,
            skip_fusion: true,
            dm_placement: DmPlacement::Decoder,
            encoder_da: EncoderDa::Off,
            rm_injection: RmInjection::Add,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64×128 input, d = 96, two encoder blocks.
    pub fn tiny() -> Self {
        Self {
            height: 64,
            width: 128,
            token_dim: 32,
            embed_dim: 96,
            encoder_depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            fold_channels: [32, 32, 16],
            regulator_widths: [16, 48],
            ..Self::default()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { dim: self.embed_dim, heads: self.heads, mlp_ratio: self.mlp_ratio, dropout: self.dropout }
    }

    pub fn input_channels(&self) -> usize {
        if self.use_rm && self.rm_injection == RmInjection::Concat {
            4
        } else {
            3
        }
    }

    /// Token grids after the three splits: `[(h1, w1), (h2, w2), (h3, w3)]`.
    pub fn grids(&self) -> Result<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        let (mut h, mut w) = (self.height, self.width);
        for (i, spec) in self.t2t.iter().enumerate() {
            h = out_length(h, *spec)?;
            w = out_length(w, *spec)?;
            out[i] = (h, w);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return bad(format!("input {}x{} must have positive sides divisible by 16", self.height, self.width));
        }
        for spec in self.t2t.iter().chain(&self.rt2t) {
            spec.validate()?;
        }
        for i in 0..3 {
            if self.rt2t[i] != self.t2t[2 - i] {
                return bad(format!("rt2t window {} must mirror t2t window {}", i + 1, 3 - i));
            }
        }
        let grids = self.grids()?;
        let expect = [4, 8, 16].map(|f| (self.height / f, self.width / f));
        if grids != expect {
            return bad(format!("windows give token grids {grids:?}; expected {expect:?}"));
        }
        if self.token_dim == 0 || self.fold_channels.contains(&0) || self.regulator_widths.contains(&0) {
            return bad("token_dim, fold_channels and regulator_widths must be positive".into());
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be at least 1".into());
        }
        self.attention().validate()
    }

    fn uses_regulator(&self) -> bool {
        self.use_rm && self.rm_injection == RmInjection::Add
    }
}

/// Reverse tokens-to-token stage: LN, expand each token to a `k×k` window of
/// `fold_channels`, fold with overlap summation, then optionally project back.
#[derive(Clone, Debug)]
pub struct ReverseT2t {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub project: Option<Linear>,
    pub spec: SoftSplitSpec,
}

impl ReverseT2t {
    fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize, fold: usize, out_dim: Option<usize>, spec: SoftSplitSpec) -> Self {
        Self {
            norm: LayerNorm::new(reg, &format!("{prefix}.norm"), dim),
            expand: Linear::new(reg, &format!("{prefix}.expand"), dim, fold * spec.window_area(), true),
            project: out_dim.map(|d| Linear::new(reg, &format!("{prefix}.project"), fold, d, true)),
            spec,
        }
    }

    fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, t: Tokens, out: (usize, usize), normalize: bool) -> Result<Tokens> {
        let h = self.norm.apply(cx, t.var)?;
        let h = self.expand.apply(cx, h)?;
        let map = cx.graph.token_fold(t.with_var(h), self.spec, out.0, out.1, normalize)?;
        let tokens = cx.graph.map_to_tokens(map)?;
        match &self.project {
            Some(p) => {
                let v = p.apply(cx, tokens.var)?;
                Ok(tokens.with_var(v))
            }
            None => Ok(tokens),
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain(TransformerBlock),
    Da(DaBlock),
}

impl Block {
    fn new(reg: &mut ParamRegistry, prefix: &str, cfg: AttentionConfig, da: bool) -> Self {
        if da {
            Block::Da(DaBlock::new(reg, prefix, cfg))
        } else {
            Block::Plain(TransformerBlock::new(reg, prefix, cfg))
        }
    }

    fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, t: Tokens) -> Result<Tokens> {
        match self {
            Block::Plain(b) => {
                let v = b.apply(cx, t.var)?;
                Ok(t.with_var(v))
            }
            Block::Da(b) => b.apply(cx, t),
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    tt1: TokenTransformer,
    tt2: TokenTransformer,
    proj: Linear,
    pos_embed: Option<String>,
    regulator: Option<ScaleRegulator>,
    dm: Option<DistortionMapping>,
    blocks: Vec<Block>,
    parallel_da: Option<DaBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Decoder {
    dm: Option<DistortionMapping>,
    rt2t: [ReverseT2t; 3],
    skips: Option<[Linear; 2]>,
    blocks: [Block; 2],
    saliency_head: Linear,
    edge_head: Linear,
}

/// Graph handles of the encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub t1: Tokens,
    pub t2: Tokens,
    pub e: Tokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub saliency_logits: Tensor<T>,
    pub edge_logits: Tensor<T>,
}

impl<T: Real> ModelOutput<T> {
    pub fn saliency(&self) -> Tensor<T> {
        self.saliency_logits.map(sigmoid)
    }

    pub fn edge(&self) -> Tensor<T> {
        self.edge_logits.map(sigmoid)
    }
}

/// The network structure for one configuration; parameter values live in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    registry: ParamRegistry,
    prior: Option<RelationMatrix>,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new();
        let att = cfg.attention();
        let (c, d) = (cfg.token_dim, cfg.embed_dim);
        let [_, _, (h3, w3)] = cfg.grids()?;
        let cin = cfg.input_channels();
        let k2 = |i: usize| cfg.t2t[i].window_area();

        let tt1 = TokenTransformer::new(&mut reg, "encoder.t2t1", cin * k2(0), c);
        let tt2 = TokenTransformer::new(&mut reg, "encoder.t2t2", c * k2(1), c);
        let proj = Linear::new(&mut reg, "encoder.proj", c * k2(2), d, true);
        let pos_embed = cfg
            .use_pe
            .then(|| reg.param("encoder.pos_embed", &[1, h3 * w3, d], Init::TruncNormal { std: PROJ_STD }));
        let rw = cfg.regulator_widths;
        let regulator = cfg
            .uses_regulator()
            .then(|| ScaleRegulator::new(&mut reg, "encoder.regulator", 1, [rw[0], rw[1], d]));
        let enc_dm = (cfg.use_dm && cfg.dm_placement == DmPlacement::Encoder)
            .then(|| DistortionMapping::new(&mut reg, "encoder.dm", d));
        let blocks = (0..cfg.encoder_depth)
            .map(|i| Block::new(&mut reg, &format!("encoder.blocks.{i}"), att, cfg.encoder_da == EncoderDa::Replace))
            .collect();
        let parallel_da =
            (cfg.encoder_da == EncoderDa::Parallel).then(|| DaBlock::new(&mut reg, "encoder.parallel_da", att));
        let norm = LayerNorm::new(&mut reg, "encoder.norm", d);
        let encoder = Encoder { tt1, tt2, proj, pos_embed, regulator, dm: enc_dm, blocks, parallel_da, norm };

        let dec_dm = (cfg.use_dm && cfg.dm_placement == DmPlacement::Decoder)
            .then(|| DistortionMapping::new(&mut reg, "decoder.dm", d));
        let fc = cfg.fold_channels;
        let rt2t = [
            ReverseT2t::new(&mut reg, "decoder.rt2t1", d, fc[0], Some(d), cfg.rt2t[0]),
            ReverseT2t::new(&mut reg, "decoder.rt2t2", d, fc[1], Some(d), cfg.rt2t[1]),
            ReverseT2t::new(&mut reg, "decoder.rt2t3", d, fc[2], None, cfg.rt2t[2]),
        ];
        let skips = cfg.skip_fusion.then(|| {
            [
                Linear::new(&mut reg, "decoder.skip2", c, d, true),
                Linear::new(&mut reg, "decoder.skip1", c, d, true),
            ]
        });
        let blocks = [
            Block::new(&mut reg, "decoder.block1", att, cfg.use_da),
            Block::new(&mut reg, "decoder.block2", att, cfg.use_da),
        ];
        let saliency_head = Linear::new(&mut reg, "decoder.saliency_head", fc[2], 1, true);
        let edge_head = Linear::new(&mut reg, "decoder.edge_head", fc[2], 1, true);
        let decoder = Decoder { dm: dec_dm, rt2t, skips, blocks, saliency_head, edge_head };

        reg.validate()?;
        let prior = cfg.use_rm.then(|| init_relation_matrix(cfg.height, cfg.width, cfg.prior)).transpose()?;
        Ok(Self { cfg, registry: reg, prior, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn relation_matrix(&self) -> Option<&RelationMatrix> {
        self.prior.as_ref()
    }

    pub fn regulator(&self) -> Option<&ScaleRegulator> {
        self.encoder.regulator.as_ref()
    }

    pub fn init<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        self.registry.init(seed)
    }

    /// Image normalization (and prior concatenation when configured); the result is a constant.
    pub fn prepare_input<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = image.dims4("model_input")?;
        if c != 3 || (h, w) != (self.cfg.height, self.cfg.width) {
            return Err(shape_err(
                "model_input",
                format!("image {c}x{h}x{w}, expected 3x{}x{}", self.cfg.height, self.cfg.width),
            ));
        }
        let cin = self.cfg.input_channels();
        let plane = h * w;
        let mut out = vec![T::zero(); b * cin * plane];
        for bi in 0..b {
            for ch in 0..3 {
                let src = &image.data()[(bi * 3 + ch) * plane..][..plane];
                let dst = &mut out[(bi * cin + ch) * plane..][..plane];
                let (m, s) = (IMAGE_MEAN[ch], IMAGE_STD[ch]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = T::c((v.f64() - m) / s);
                }
            }
            if cin == 4 {
                let rm = self.prior.as_ref().ok_or_else(|| Error::Config("concat injection without a prior".into()))?;
                let dst = &mut out[(bi * cin + 3) * plane..][..plane];
                for (o, &v) in dst.iter_mut().zip(&rm.values) {
                    *o = T::c(v);
                }
            }
        }
        Tensor::new(&[b, cin, h, w], out)
    }

    pub fn encode_graph<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Encoded> {
        let enc = &self.encoder;
        let cfg = &self.cfg;
        let s1 = cx.graph.soft_split(x, cfg.t2t[0])?;
        let t1 = s1.with_var(enc.tt1.apply(cx, s1.var)?);
        let m1 = cx.graph.tokens_to_map(t1)?;
        let s2 = cx.graph.soft_split(m1, cfg.t2t[1])?;
        let t2 = s2.with_var(enc.tt2.apply(cx, s2.var)?);
        let m2 = cx.graph.tokens_to_map(t2)?;
        let s3 = cx.graph.soft_split(m2, cfg.t2t[2])?;
        let mut v = enc.proj.apply(cx, s3.var)?;
        if let Some(pe) = &enc.pos_embed {
            let p = cx.param(pe)?;
            v = cx.graph.add_batch_broadcast(v, p)?;
        }
        if let Some(reg) = &enc.regulator {
            let rm = self.prior.as_ref().ok_or_else(|| Error::Config("regulator without a prior".into()))?;
            let r = cx.graph.constant(rm.to_tensor());
            let tokens = reg.apply(cx, r)?;
            v = cx.graph.add_batch_broadcast(v, tokens)?;
        }
        let mut e = s3.with_var(v);
        if let Some(dm) = &enc.dm {
            e = gate_tokens(cx, dm, e)?;
        }
        let input = e;
        for blk in &enc.blocks {
            e = blk.apply(cx, e)?;
        }
        if let Some(da) = &enc.parallel_da {
            let side = da.apply(cx, input)?;
            let sum = cx.graph.add(e.var, side.var)?;
            let neg = cx.graph.scale(input.var, -1.0);
            let v = cx.graph.add(sum, neg)?;
            e = e.with_var(v);
        }
        let v = enc.norm.apply(cx, e.var)?;
        Ok(Encoded { t1, t2, e: e.with_var(v) })
    }

    /// Returns `(saliency_logits, edge_logits)`, each `[B, 1, H, W]`.
    pub fn decode_graph<T: Real>(&self, cx: &mut Ctx<'_, T>, enc: Encoded) -> Result<(Var, Var)> {
        let dec = &self.decoder;
        let [(h1, w1), (h2, w2), _] = self.cfg.grids()?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let nf = self.cfg.normalize_fold;
        let mut e = enc.e;
        if let Some(dm) = &dec.dm {
            e = gate_tokens(cx, dm, e)?;
        }
        let mut x = dec.rt2t[0].apply(cx, e, (h2, w2), nf)?;
        if let Some([s2, _]) = &dec.skips {
            let p = s2.apply(cx, enc.t2.var)?;
            x = x.with_var(cx.graph.add(x.var, p)?);
        }
        x = dec.blocks[0].apply(cx, x)?;
        x = dec.rt2t[1].apply(cx, x, (h1, w1), nf)?;
        if let Some([_, s1]) = &dec.skips {
            let p = s1.apply(cx, enc.t1.var)?;
            x = x.with_var(cx.graph.add(x.var, p)?);
        }
        x = dec.blocks[1].apply(cx, x)?;
        let px = dec.rt2t[2].apply(cx, x, (h, w), nf)?;
        let b = cx.graph.shape(px.var)[0];
        let sal = dec.saliency_head.apply(cx, px.var)?;
        let sal = cx.graph.reshape(sal, &[b, 1, h, w])?;
        let edge = dec.edge_head.apply(cx, px.var)?;
        let edge = cx.graph.reshape(edge, &[b, 1, h, w])?;
        Ok((sal, edge))
    }

    /// Full pass on a `[B, 3, H, W]` image with values in `[0, 1]`.
    pub fn forward_graph<T: Real>(&self, cx: &mut Ctx<'_, T>, image: &Tensor<T>) -> Result<(Var, Var)> {
        let x = self.prepare_input(image)?;
        let x = cx.graph.constant(x);
        let enc = self.encode_graph(cx, x)?;
        self.decode_graph(cx, enc)
    }

    /// Evaluation-mode pass over the whole batch at once.
    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut cx = Ctx::new(store, Mode::Eval, false);
        let (s, e) = self.forward_graph(&mut cx, image)?;
        Ok(ModelOutput { saliency_logits: cx.graph.take_value(s), edge_logits: cx.graph.take_value(e) })
    }

    /// Evaluation-mode pass one batch item at a time; bounds peak memory at full resolution.
    pub fn predict<T: Real>(&self, store: &ParameterStore<T>, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        let (b, ..) = image.dims4("model_input")?;
        let mut sal = Vec::with_capacity(b);
        let mut edge = Vec::with_capacity(b);
        for i in 0..b {
            let out = self.forward(store, &image.batch_item(i))?;
            sal.push(out.saliency_logits);
            edge.push(out.edge_logits);
        }
        Ok(ModelOutput { saliency_logits: Tensor::stack_batch(&sal)?, edge_logits: Tensor::stack_batch(&edge)? })
    }

    /// Evaluation-mode encoder outputs `(T1, T2, E)`.
    pub fn encode<T: Real>(
        &self,
        store: &ParameterStore<T>,
        image: &Tensor<T>,
    ) -> Result<(TokenSequence<T>, TokenSequence<T>, TokenSequence<T>)> {
        let mut cx = Ctx::new(store, Mode::Eval, false);
        let x = self.prepare_input(image)?;
        let x = cx.graph.constant(x);
        let enc = self.encode_graph(&mut cx, x)?;
        let take = |cx: &mut Ctx<'_, T>, t: Tokens| TokenSequence::new(cx.graph.take_value(t.var), t.grid_h, t.grid_w);
        Ok((take(&mut cx, enc.t1)?, take(&mut cx, enc.t2)?, take(&mut cx, enc.e)?))
    }
}

fn gate_tokens<T: Real>(cx: &mut Ctx<'_, T>, dm: &DistortionMapping, t: Tokens) -> Result<Tokens> {
    let m = cx.graph.tokens_to_map(t)?;
    let m = dm.apply(cx, m)?;
    cx.graph.map_to_tokens(m)
}

/// Structure plus a freshly initialized `f32` parameter store.
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<(Model, ParameterStore<f32>)> {
    let model = Model::new(cfg)?;
    let store = model.init(seed)?;
    Ok((model, store))
}
