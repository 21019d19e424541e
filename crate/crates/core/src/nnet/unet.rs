use std::collections::BTreeMap;

use super::layers::{Conv2d, DehazeBlock, Fusion, Init, ParamSet};
use super::tape::{Bound, Gradients, Tape, Var};
use super::{shape_err, Float, NnError};
use crate::imgdata::{Image, CHANNELS};
use crate::rng::Rng;

/// Architecture hyperparameters. Serialized as `key=value` lines in
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Channel widths of the five stages: three encoder, two decoder.
    pub widths: [usize; 5],
    /// Dehaze blocks per stage.
    pub blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 16, 8],
            blocks: 1,
            window: 4,
            heads: 1,
            mlp_ratio: 2,
        }
    }
}

impl NetConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = self.widths.map(|v| v.to_string()).join(",");
        vec![
            ("widths".into(), w),
            ("blocks".into(), self.blocks.to_string()),
            ("window".into(), self.window.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, String> {
        let get = |k: &str| pairs.get(k).ok_or_else(|| format!("missing key '{k}'"));
        let num = |k: &str| -> Result<usize, String> {
            get(k)?.parse().map_err(|_| format!("bad value for '{k}'"))
        };
        let widths: Vec<usize> = get("widths")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| "bad widths".to_string())?;
        let widths: [usize; 5] = widths.try_into().map_err(|_| "widths needs 5 values".to_string())?;
        let cfg = Self {
            widths,
            blocks: num("blocks")?,
            window: num("window")?,
            heads: num("heads")?,
            mlp_ratio: num("mlp_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.widths.iter().any(|&w| w == 0 || w % self.heads.max(1) != 0) {
            return Err(format!("widths {:?} must be positive multiples of heads {}", self.widths, self.heads));
        }
        if self.window == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err("window, heads and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Five-stage encoder-decoder with a global input skip: the network predicts
/// a residual that is added to the (padded) input.
#[derive(Clone, Debug)]
pub struct DehazeUNet<F> {
    config: NetConfig,
    params: ParamSet<F>,
    in_conv: Conv2d,
    stages: [Vec<DehazeBlock>; 5],
    down1: Conv2d,
    down2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    fuse1: Fusion,
    fuse2: Fusion,
    out_conv: Conv2d,
}

/// Spatial multiple the input is padded to (two 2x downsamples).
const SPATIAL_MULTIPLE: usize = 4;

impl<F: Float> DehazeUNet<F> {
    /// Kaiming-uniform weights, zero biases, and a zero output convolution so
    /// the freshly built network is the identity on images.
    pub fn new(config: NetConfig, rng: &mut Rng) -> Self {
        config.validate().expect("invalid network config");
        let mut rng = rng.split("unet-init");
        let rng = &mut rng;
        let mut ps = ParamSet::new();
        let [w1, w2, w3, w4, w5] = config.widths;
        let (win, heads, ratio) = (config.window, config.heads, config.mlp_ratio);
        let stage = |ps: &mut ParamSet<F>, rng: &mut Rng, i: usize, c: usize| -> Vec<DehazeBlock> {
            (0..config.blocks)
                .map(|b| DehazeBlock::new(ps, rng, &format!("stage{}.{b}", i + 1), c, win, heads, ratio))
                .collect()
        };
        let in_conv = Conv2d::new(&mut ps, rng, "in_conv", CHANNELS, w1, 3, 1, Init::Kaiming);
        let s1 = stage(&mut ps, rng, 0, w1);
        let down1 = Conv2d::new(&mut ps, rng, "down1", w1, w2, 3, 2, Init::Kaiming);
        let s2 = stage(&mut ps, rng, 1, w2);
        let down2 = Conv2d::new(&mut ps, rng, "down2", w2, w3, 3, 2, Init::Kaiming);
        let s3 = stage(&mut ps, rng, 2, w3);
        let up1 = Conv2d::new(&mut ps, rng, "up1", w3, w4, 3, 1, Init::Kaiming);
        let fuse1 = Fusion::new(&mut ps, rng, "fuse1", w2, w4);
        let s4 = stage(&mut ps, rng, 3, w4);
        let up2 = Conv2d::new(&mut ps, rng, "up2", w4, w5, 3, 1, Init::Kaiming);
        let fuse2 = Fusion::new(&mut ps, rng, "fuse2", w1, w5);
        let s5 = stage(&mut ps, rng, 4, w5);
        let out_conv = Conv2d::new(&mut ps, rng, "out_conv", w5, CHANNELS, 3, 1, Init::Zero);
        Self {
            config,
            params: ps,
            in_conv,
            stages: [s1, s2, s3, s4, s5],
            down1,
            down2,
            up1,
            up2,
            fuse1,
            fuse2,
            out_conv,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// Give the output convolution random weights and every bias and norm
    /// parameter a random offset, so no part of the network is trivially
    /// linear. Used by the gradient checker.
    pub fn randomize_all(&mut self, rng: &mut Rng) {
        self.params.reinit(self.out_conv.weight, Init::Kaiming, rng);
        for p in self.params.iter_mut() {
            if p.shape.len() == 1 {
                for v in &mut p.value {
                    *v += F::of(rng.uniform(-0.2, 0.2));
                }
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        self.params.bind(tape)
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients<F>, bound: &Bound) {
        self.params.accumulate(grads, bound);
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    pub fn image_leaf(tape: &mut Tape<F>, img: &Image) -> Var {
        tape.leaf(
            vec![CHANNELS, img.height(), img.width()],
            img.data().iter().map(|&v| F::of(f64::from(v))).collect(),
        )
    }

    /// Run the network on a `(3, h, w)` input. Inputs whose sides are not
    /// multiples of 4 are reflect-padded and the output cropped back.
    pub fn forward(&self, t: &mut Tape<F>, p: &Bound, input: Var) -> Result<Var, NnError> {
        let (c, h, w) = match *t.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err("forward", format!("input shape {s:?}"))),
        };
        if c != CHANNELS || h < SPATIAL_MULTIPLE || w < SPATIAL_MULTIPLE {
            return Err(shape_err("forward", format!("need 3 channels and >= 4x4, got {c}x{h}x{w}")));
        }
        let pad = |n: usize| (SPATIAL_MULTIPLE - n % SPATIAL_MULTIPLE) % SPATIAL_MULTIPLE;
        let x = t.pad_reflect(input, 0, pad(h), 0, pad(w))?;

        let run_stage = |t: &mut Tape<F>, i: usize, mut f: Var| -> Result<Var, NnError> {
            for b in &self.stages[i] {
                f = b.forward(t, p, f)?;
            }
            Ok(f)
        };

        let f = self.in_conv.forward(t, p, x)?;
        let skip1 = run_stage(t, 0, f)?;
        let f = self.down1.forward(t, p, skip1)?;
        let skip2 = run_stage(t, 1, f)?;
        let f = self.down2.forward(t, p, skip2)?;
        let f = run_stage(t, 2, f)?;

        let f = t.upsample2(f)?;
        let f = self.up1.forward(t, p, f)?;
        let f = self.fuse1.forward(t, p, skip2, f)?;
        let f = run_stage(t, 3, f)?;

        let f = t.upsample2(f)?;
        let f = self.up2.forward(t, p, f)?;
        let f = self.fuse2.forward(t, p, skip1, f)?;
        let f = run_stage(t, 4, f)?;

        let residual = self.out_conv.forward(t, p, f)?;
        let y = t.add(x, residual)?;
        if pad(h) + pad(w) > 0 {
            t.crop(y, 0, 0, w, h)
        } else {
            Ok(y)
        }
    }

    /// Forward pass on an image without recording gradients for later use;
    /// the result is clamped to `[0, 1]`.
    pub fn infer(&self, img: &Image) -> Result<Image, NnError> {
        let mut t = Tape::new();
        let p = self.bind(&mut t);
        let x = Self::image_leaf(&mut t, img);
        let y = self.forward(&mut t, &p, x)?;
        let data = t
            .value(y)
            .iter()
            .map(|v| (v.as_f64() as f32).clamp(0.0, 1.0))
            .collect();
        Ok(Image::new(img.width(), img.height(), data).expect("finite network output"))
    }

    pub fn cast<G: Float>(&self) -> DehazeUNet<G> {
        DehazeUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            in_conv: self.in_conv.clone(),
            stages: self.stages.clone(),
            down1: self.down1.clone(),
            down2: self.down2.clone(),
            up1: self.up1.clone(),
            up2: self.up2.clone(),
            fuse1: self.fuse1.clone(),
            fuse2: self.fuse2.clone(),
            out_conv: self.out_conv.clone(),
        }
    }

    #[cfg(test)]
    pub(crate) fn out_conv_bias(&self) -> usize {
        self.out_conv.bias
    }

    #[cfg(test)]
    pub(crate) fn in_conv_bias(&self) -> usize {
        self.in_conv.bias
    }
}
