//! Distortion mapping gate and the scale regulator for the latitude prior.

use crate::attention::DeformableConv;
use crate::error::{shape_err, Result};
use crate::geometry::RelationMatrix;
use crate::graph::Var;
use crate::nn::{BatchNorm2d, Conv2d, PROJ_STD};
use crate::params::{evaluate, Ctx, Init, ParamRegistry, ParameterStore};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{FeatureMap, SoftSplitSpec, TokenSequence};

pub const DM_KERNEL: usize = 3;

/// `F_o = 2·σ(GELU(BN(DConv(F_i)))) ⊙ F_i`; channel count is preserved.
#[derive(Clone, Debug)]
pub struct DistortionMapping {
    pub dconv: DeformableConv,
    pub bn: BatchNorm2d,
    pub channels: usize,
}

impl DistortionMapping {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize) -> Self {
        Self {
            dconv: DeformableConv::new(
                reg,
                &format!("{prefix}.dconv"),
                channels,
                channels,
                DM_KERNEL,
                Init::TruncNormal { std: PROJ_STD },
            ),
            bn: BatchNorm2d::new(reg, &format!("{prefix}.bn"), channels),
            channels,
        }
    }

    /// The gate map, with every value in `(0, 2)`.
    pub fn gate<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.value(x).dims4("distortion_mapping")?.1;
        if c != self.channels {
            return Err(shape_err("distortion_mapping", format!("{c} channels, expected {}", self.channels)));
        }
        let a = self.dconv.apply(cx, x)?;
        let a = self.bn.apply(cx, a)?;
        let a = cx.graph.gelu(a);
        let s = cx.graph.sigmoid(a);
        Ok(cx.graph.scale(s, 2.0))
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(cx, x)?;
        cx.graph.mul(g, x)
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        FeatureMap::new(evaluate(store, |cx| {
            let v = cx.graph.constant(x.data.clone());
            self.apply(cx, v)
        })?)
    }

    pub fn gate_map<T: Real>(&self, store: &ParameterStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        FeatureMap::new(evaluate(store, |cx| {
            let v = cx.graph.constant(x.data.clone());
            self.gate(cx, v)
        })?)
    }
}

/// Three strided convolution stages (conv, batch norm, GELU) that shrink an
/// `H × W` prior by 16 and widen it to the embedding dimension.
#[derive(Clone, Debug)]
pub struct ScaleRegulator {
    pub stages: Vec<(Conv2d, BatchNorm2d)>,
    pub in_channels: usize,
    pub out_dim: usize,
}

/// Window geometry of the three regulator stages; it matches the encoder splits.
pub fn regulator_windows() -> [SoftSplitSpec; 3] {
    [
        SoftSplitSpec { kernel: 7, overlap: 3, padding: 2 },
        SoftSplitSpec { kernel: 3, overlap: 1, padding: 1 },
        SoftSplitSpec { kernel: 3, overlap: 1, padding: 1 },
    ]
}

impl ScaleRegulator {
    /// `widths` lists the output channels of the three stages; the last one is the embedding dim.
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_channels: usize, widths: [usize; 3]) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut cin = in_channels;
        for (i, (&cout, window)) in widths.iter().zip(regulator_windows()).enumerate() {
            let conv = Conv2d::new(
                reg,
                &format!("{prefix}.stage{i}.conv"),
                cin,
                cout,
                window,
                Init::TruncNormal { std: PROJ_STD },
            );
            let bn = BatchNorm2d::new(reg, &format!("{prefix}.stage{i}.bn"), cout);
            stages.push((conv, bn));
            cin = cout;
        }
        Self { stages, in_channels, out_dim: widths[2] }
    }

    /// Maps a `[B, C, H, W]` prior to `[B, (H/16)·(W/16), d]` tokens.
    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, rm: Var) -> Result<Var> {
        let (_, c, h, w) = cx.graph.value(rm).dims4("scale_regulator")?;
        if c != self.in_channels || h % 16 != 0 || w % 16 != 0 {
            return Err(shape_err(
                "scale_regulator",
                format!("prior {c}x{h}x{w}: need {} channel(s) and sides divisible by 16", self.in_channels),
            ));
        }
        let mut x = rm;
        for (conv, bn) in &self.stages {
            x = conv.apply(cx, x)?;
            x = bn.apply(cx, x)?;
            x = cx.graph.gelu(x);
        }
        Ok(cx.graph.map_to_tokens(x)?.var)
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, rm: &RelationMatrix) -> Result<TokenSequence<T>> {
        let out = evaluate(store, |cx| {
            let v = cx.graph.constant(rm.to_tensor());
            self.apply(cx, v)
        })?;
        TokenSequence::new(out, rm.height / 16, rm.width / 16)
    }

    /// Output channel maps `[d, H/16, W/16]` of a single prior, for visualization.
    pub fn channel_maps<T: Real>(&self, store: &ParameterStore<T>, rm: &RelationMatrix) -> Result<Tensor<T>> {
        let out = evaluate(store, |cx| {
            let v = cx.graph.constant(rm.to_tensor());
            let t = self.apply(cx, v)?;
            let tokens = crate::tokenizer::Tokens { var: t, grid_h: rm.height / 16, grid_w: rm.width / 16 };
            cx.graph.tokens_to_map(tokens)
        })?;
        out.reshape(&[self.out_dim, rm.height / 16, rm.width / 16])
    }
}
