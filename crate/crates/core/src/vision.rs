//! Dual visual tokenizers: a ViT-style global stream over the downsampled
//! image and a convolutional detail stream over the full-resolution image.
//!
//! Images are stored channel-first (`[C, H, W]`) with values in `[0, 1]`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{EncoderBlock, LayerNorm};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub hr: Tensor,
    pub lr: Tensor,
}

impl ImageSample {
    pub fn new(hr: Tensor) -> Result<Self> {
        if hr.rank() != 3 {
            return Err(contract(format!("image must be [C,H,W], got {:?}", hr.shape())));
        }
        if hr.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(contract("pixel values must lie in [0, 1]"));
        }
        let lr = downsample(&hr)?;
        Ok(Self { hr, lr })
    }
}

/// 2×2 mean pooling per channel.
pub fn downsample(hr: &Tensor) -> Result<Tensor> {
    let s = hr.shape();
    let [c, h, w] = s[..] else {
        return Err(contract(format!("image must be [C,H,W], got {s:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("downsample needs even spatial dims, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = hr.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let at = |di: usize, dj: usize| d[ch * h * w + (2 * i + di) * w + 2 * j + dj];
                out[ch * ho * wo + i * wo + j] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub patch_size: usize,
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("ViT extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Token grid tracked alongside its tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualTokenGrid {
    pub height: usize,
    pub width: usize,
    pub d: usize,
    /// `(height·width) × d`, row-major over grid positions.
    pub tokens: Var,
}

impl VisualTokenGrid {
    pub fn count(&self) -> usize {
        self.height * self.width
    }
}

/// Converts a `[C, H, W]` map into `H·W` tokens of width `C`.
pub fn map_to_tokens(tape: &mut Tape, x: Var) -> Result<(Var, usize, usize)> {
    let s = tape.shape(x).to_vec();
    let [c, h, w] = s[..] else {
        return Err(contract(format!("expected [C,H,W], got {s:?}")));
    };
    let flat = tape.reshape(x, vec![c, h * w])?;
    Ok((tape.transpose(flat)?, h, w))
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (_, c) = tape.value(tokens).dims2()?;
    let t = tape.transpose(tokens)?;
    tape.reshape(t, vec![c, h, w])
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        channels: usize,
        image: (usize, usize),
        cfg: &VitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let p = cfg.patch_size;
        if !image.0.is_multiple_of(p) || !image.1.is_multiple_of(p) {
            return Err(contract(format!(
                "image {}×{} not divisible by patch {p}",
                image.0, image.1
            )));
        }
        let grid = (image.0 / p, image.1 / p);
        let fan_in = channels * p * p;
        let kernel = store.add(
            format!("{name}.kernel"),
            group,
            Tensor::randn(&[cfg.d_model, channels, p, p], 1.0 / (fan_in as f64).sqrt(), rng),
        )?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[cfg.d_model]))?;
        let pos = store.add(
            format!("{name}.pos"),
            group,
            Tensor::randn(&[grid.0 * grid.1, cfg.d_model], 0.02, rng),
        )?;
        Ok(Self {
            kernel,
            bias,
            pos,
            patch: p,
            grid,
        })
    }

    /// Flattened-patch linear map (a stride-`p` convolution) plus learned
    /// per-position embeddings.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<VisualTokenGrid> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(self.patch) || !s[2].is_multiple_of(self.patch) {
            return Err(contract(format!("image {s:?} not divisible by patch {}", self.patch)));
        }
        if (s[1] / self.patch, s[2] / self.patch) != self.grid {
            return Err(contract(format!("image {s:?} does not match configured grid {:?}", self.grid)));
        }
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let map = tape.conv2d(image, k, b, self.patch, 0)?;
        let (tokens, h, w) = map_to_tokens(tape, map)?;
        let pos = tape.param(store, self.pos);
        let tokens = tape.add(tokens, pos)?;
        let d = tape.shape(tokens)[1];
        Ok(VisualTokenGrid {
            height: h,
            width: w,
            d,
            tokens,
        })
    }
}

/// Global-stream tokenizer over the low-resolution image.
#[derive(Debug, Clone)]
pub struct LrTokenizer {
    pub cfg: VitConfig,
    pub patch: PatchEmbed,
    pub blocks: Vec<EncoderBlock>,
}

impl LrTokenizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        image: (usize, usize),
        cfg: VitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::new(store, &format!("{name}.patch"), Group::Vision, channels, image, &cfg, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    Group::Vision,
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.mlp_hidden,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, patch, blocks })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, lr: Var) -> Result<VisualTokenGrid> {
        let mut grid = self.patch.forward(tape, store, lr)?;
        for b in &self.blocks {
            grid.tokens = b.forward(tape, store, grid.tokens)?;
        }
        Ok(grid)
    }
}

/// `y = x + GeLU(conv3×3(x))`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / ((ch * 9) as f64).sqrt();
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), Group::Vision, Tensor::randn(&[ch, ch, 3, 3], std, rng))?,
            bias: store.add(format!("{name}.bias"), Group::Vision, Tensor::zeros(&[ch]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, b, 1, 1)?;
        let y = tape.gelu(y);
        tape.add(x, y)
    }
}

/// Detail-stream tokenizer: strided stem convolution, channel layer norm,
/// conv block, 2× downsample, conv block.
#[derive(Debug, Clone)]
pub struct HrTokenizer {
    pub stem_kernel: ParamId,
    pub stem_bias: ParamId,
    pub stem_stride: usize,
    pub ln: LayerNorm,
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub channels: usize,
}

pub const HR_STEM_STRIDE: usize = 2;
pub const HR_DOWN: usize = 2;
pub const HR_TOTAL_STRIDE: usize = HR_STEM_STRIDE * HR_DOWN;

impl HrTokenizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = HR_STEM_STRIDE;
        let std = 1.0 / ((in_ch * s * s) as f64).sqrt();
        Ok(Self {
            stem_kernel: store.add(
                format!("{name}.stem.kernel"),
                Group::Vision,
                Tensor::randn(&[channels, in_ch, s, s], std, rng),
            )?,
            stem_bias: store.add(format!("{name}.stem.bias"), Group::Vision, Tensor::zeros(&[channels]))?,
            stem_stride: s,
            ln: LayerNorm::new(store, &format!("{name}.ln"), Group::Vision, channels)?,
            block1: ConvBlock::new(store, &format!("{name}.block1"), channels, rng)?,
            block2: ConvBlock::new(store, &format!("{name}.block2"), channels, rng)?,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hr: Var) -> Result<VisualTokenGrid> {
        let s = tape.shape(hr).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(HR_TOTAL_STRIDE) || !s[2].is_multiple_of(HR_TOTAL_STRIDE) {
            return Err(contract(format!(
                "HR image {s:?} not divisible by total stride {HR_TOTAL_STRIDE}"
            )));
        }
        let k = tape.param(store, self.stem_kernel);
        let b = tape.param(store, self.stem_bias);
        let x = tape.conv2d(hr, k, b, self.stem_stride, 0)?;
        let (tok, h, w) = map_to_tokens(tape, x)?;
        let tok = self.ln.forward(tape, store, tok)?;
        let x = tokens_to_map(tape, tok, h, w)?;
        let x = self.block1.forward(tape, store, x)?;
        let x = tape.avg_pool2d(x, HR_DOWN)?;
        let x = self.block2.forward(tape, store, x)?;
        let (tokens, h, w) = map_to_tokens(tape, x)?;
        Ok(VisualTokenGrid {
            height: h,
            width: w,
            d: self.channels,
            tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::multi_head_attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn cfg(layers: usize) -> VitConfig {
        VitConfig {
            patch_size: 4,
            layers,
            d_model: 8,
            n_heads: 2,
            mlp_hidden: 16,
        }
    }

    #[test]
    fn downsample_cases() {
        let c = Tensor::full(&[3, 4, 4], 0.25);
        assert_eq!(downsample(&c).unwrap(), Tensor::full(&[3, 2, 2], 0.25));
        let block = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(downsample(&block).unwrap().data(), &[0.5]);
        assert!(downsample(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn random_downsample_matches_mean_pool() {
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(2));
        let got = downsample(&img).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += img.data()[c * 64 + (2 * i + di) * 8 + 2 * j + dj];
                    }
                    assert_eq!(got.data()[c * 16 + i * 4 + j], s / 4.0);
                }
            }
        }
    }

    #[test]
    fn patch_grid_shape_and_zero_image() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", Group::Vision, 3, (16, 16), &cfg(0), &mut rng(1)).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[3, 16, 16]));
        let g = pe.forward(&mut t, &store, img).unwrap();
        assert_eq!((g.height, g.width, g.d), (4, 4, 8));
        assert_eq!(t.value(g.tokens), store.value(pe.pos));
    }

    #[test]
    fn one_hot_pixel_touches_one_patch() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", Group::Vision, 3, (16, 16), &cfg(0), &mut rng(1)).unwrap();
        let mut t = Tape::new();
        let mut img = Tensor::zeros(&[3, 16, 16]);
        img.data_mut()[16 * 5 + 9] = 1.0; // channel 0, row 5, col 9 -> patch (1, 2)
        let x = t.constant(img);
        let g = pe.forward(&mut t, &store, x).unwrap();
        let diff = t.value(g.tokens).clone();
        let pos = store.value(pe.pos);
        for tok in 0..16 {
            let changed = (0..8).any(|j| (diff.at2(tok, j) - pos.at2(tok, j)).abs() > 0.0);
            assert_eq!(changed, tok == 6, "token {tok}");
        }
    }

    #[test]
    fn indivisible_patch_is_contract_error() {
        let mut store = ParamStore::new();
        assert!(PatchEmbed::new(&mut store, "pe", Group::Vision, 3, (18, 16), &cfg(0), &mut rng(1)).is_err());
    }

    #[test]
    fn single_token_identity_attention() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.5]]).unwrap());
        let q = t.constant(Tensor::randn(&[1, 4], 1.0, &mut rng(3)));
        let y = multi_head_attention(&mut t, q, q, x, 2, false).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let z = t.constant(Tensor::zeros(&[1, 4]));
        let y = multi_head_attention(&mut t, q, q, z, 2, false).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hr_zero_image_gives_zero_grid() {
        let mut store = ParamStore::new();
        let hr = HrTokenizer::new(&mut store, "hr", 3, 8, &mut rng(4)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 32, 32]));
        let g = hr.forward(&mut t, &store, x).unwrap();
        assert_eq!((g.height, g.width, g.d), (8, 8, 8));
        assert!(t.value(g.tokens).data().iter().all(|&v| v == 0.0));
        let bad = t.constant(Tensor::zeros(&[3, 30, 32]));
        assert!(hr.forward(&mut t, &store, bad).is_err());
    }

    #[test]
    fn lr_tokenizer_with_no_blocks_is_patch_embed() {
        let mut store = ParamStore::new();
        let lr = LrTokenizer::new(&mut store, "lr", 3, (16, 16), cfg(0), &mut rng(5)).unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(6));
        let mut t = Tape::new();
        let x = t.constant(img);
        let a = lr.forward(&mut t, &store, x).unwrap();
        let b = lr.patch.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(a.tokens), t.value(b.tokens));
    }
}
