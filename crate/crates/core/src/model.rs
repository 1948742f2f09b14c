//! End-to-end link model: tokenizers, fusion and projection feed the token
//! encoder; its output crosses the channel and is decoded into text.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::ban::{ban_ablation_fuse, ban_fuse, BanWeights, CellMap};
use crate::channel::{channel_on_tape, draw_realization, normalize_frame, ChannelCodec, ChannelConfig};
use crate::data::{default_vocabulary, InstructionSample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::kan::{Projector, ProjectorConfig, ProjectorVariant, SplineBasis};
use crate::llm::{apply_adapters, detokenize, TokenModel, TokenModelConfig, TokenSequence, Vocabulary, BOS, EOS, IMG, PAD, SEP};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vision::{HrTokenizer, ImageSample, LrTokenizer, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoBan,
    NoKan,
    NoJoint,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoBan, Variant::NoKan, Variant::NoJoint];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBan => "no_ban",
            Variant::NoKan => "no_kan",
            Variant::NoJoint => "no_joint",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub vit: VitConfig,
    pub hr_channels: usize,
    /// Hidden widths of the projector between the visual and model widths.
    pub projector_hidden: Vec<usize>,
    pub basis: SplineBasis,
    pub token: TokenModelConfig,
    pub symbols_per_token: usize,
    /// 0 disables adapters.
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub max_answer_len: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            image_size: IMAGE_SIZE,
            vit: VitConfig {
                patch_size: 4,
                layers: 1,
                d_model: 32,
                n_heads: 4,
                mlp_hidden: 64,
            },
            hr_channels: 32,
            projector_hidden: vec![32],
            basis: SplineBasis::default(),
            token: TokenModelConfig {
                vocab_size,
                d_model: 64,
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
                ff_hidden: 128,
                max_len: 80,
            },
            symbols_per_token: 8,
            adapter_rank: 4,
            adapter_scale: 1.0,
            max_answer_len: 16,
        }
    }

    /// Narrow configuration for fast tests and gradient checks. With
    /// `2m = d_model` the codec can be initialized as an exact inverse pair.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vit: VitConfig {
                patch_size: 4,
                layers: 1,
                d_model: 8,
                n_heads: 2,
                mlp_hidden: 16,
            },
            hr_channels: 8,
            projector_hidden: vec![6],
            token: TokenModelConfig {
                vocab_size,
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ff_hidden: 16,
                max_len: 80,
            },
            symbols_per_token: 4,
            adapter_rank: 2,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.token.validate()?;
        if self.hr_channels != self.vit.d_model {
            return Err(Error::Config(format!(
                "detail width {} must equal the global width {}",
                self.hr_channels, self.vit.d_model
            )));
        }
        if self.max_answer_len == 0 || self.symbols_per_token == 0 {
            return Err(Error::Config("answer length and symbols per token must be positive".into()));
        }
        Ok(())
    }

    fn projector(&self, variant: ProjectorVariant) -> ProjectorConfig {
        let mut dims = vec![self.vit.d_model];
        dims.extend(&self.projector_hidden);
        dims.push(self.token.d_model);
        ProjectorConfig {
            dims,
            variant,
            input_norm: true,
            basis: self.basis.clone(),
        }
    }
}

/// How `Z` reaches the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    /// Identity link, no channel codec.
    Bypass,
    /// Channel codec with the physical channel skipped.
    Codec,
    Channel { cfg: ChannelConfig, frame_id: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub degenerate: bool,
    pub erased: bool,
}

#[derive(Debug, Clone)]
pub struct LinkModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub lr_tok: LrTokenizer,
    pub hr_tok: HrTokenizer,
    pub ban: Option<BanWeights>,
    pub cells: CellMap,
    pub projector: Projector,
    pub token: TokenModel,
    pub codec: ChannelCodec,
}

impl LinkModel {
    /// Deterministic construction from `seed`. Each component draws from its
    /// own stream, so variants share the initialization of common parts.
    pub fn new(cfg: ModelConfig, variant: Variant, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != cfg.token.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                cfg.token.vocab_size
            )));
        }
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut store = ParamStore::new();
        let lr_size = cfg.image_size / 2;
        let mut rng = stream(0);
        let lr_tok = LrTokenizer::new(&mut store, "lr", 3, (lr_size, lr_size), cfg.vit.clone(), &mut rng)?;
        let hr_tok = HrTokenizer::new(&mut store, "hr", 3, cfg.hr_channels, &mut rng)?;
        let g = lr_size / cfg.vit.patch_size;
        let cells = CellMap::build((g, g), (2 * g, 2 * g))?;
        let ban = match variant {
            Variant::NoBan => None,
            _ => Some(BanWeights::new(&mut store, "ban", cfg.vit.d_model, &mut stream(2))?),
        };
        let pv = match variant {
            Variant::NoKan => ProjectorVariant::Mlp,
            _ => ProjectorVariant::Kan,
        };
        let projector = Projector::new(&mut store, "proj", cfg.projector(pv), &mut stream(3))?;
        let mut token = TokenModel::new(&mut store, cfg.token.clone(), &mut stream(4))?;
        let codec = ChannelCodec::new(&mut store, cfg.token.d_model, cfg.symbols_per_token, &mut stream(5))?;
        if cfg.adapter_rank > 0 {
            let targets = token.attention_matrix_names(&store);
            apply_adapters(&mut token, &mut store, &targets, cfg.adapter_rank, cfg.adapter_scale, &mut stream(1))?;
        }
        Ok(Self {
            cfg,
            variant,
            vocab,
            store,
            lr_tok,
            hr_tok,
            ban,
            cells,
            projector,
            token,
            codec,
        })
    }

    pub fn desk(variant: Variant, seed: u64) -> Result<Self> {
        let vocab = default_vocabulary();
        Self::new(ModelConfig::desk(vocab.len()), variant, vocab, seed)
    }

    /// Fused, projected visual tokens, `cells × d_model`.
    pub fn visual_tokens(&self, tape: &mut Tape, image: &ImageSample) -> Result<Var> {
        let s = &self.store;
        let lr = tape.constant(image.lr.clone());
        let hr = tape.constant(image.hr.clone());
        let sem = self.lr_tok.forward(tape, s, lr)?;
        let det = self.hr_tok.forward(tape, s, hr)?;
        let fused = match &self.ban {
            Some(w) => ban_fuse(tape, s, &sem, &det, w, &self.cells)?,
            None => ban_ablation_fuse(tape, &sem, &det, &self.cells)?,
        };
        self.projector.forward(tape, s, fused.tokens)
    }

    pub fn prompt_sequence(&self, sample: &InstructionSample) -> TokenSequence {
        TokenSequence::prompt(sample.prompt_ids(&self.vocab))
    }

    /// Transmit-side representation `Z`.
    pub fn encode(&self, tape: &mut Tape, sample: &InstructionSample) -> Result<Var> {
        let visual = match sample.image() {
            Some(img) => Some(self.visual_tokens(tape, &img)?),
            None => None,
        };
        self.token
            .encode_multimodal(tape, &self.store, &self.prompt_sequence(sample), visual)
    }

    /// Channel encoder, channel, zero-forcing and channel decoder.
    pub fn transmit(&self, tape: &mut Tape, z: Var, link: Link) -> Result<(Var, LinkStats)> {
        match link {
            Link::Bypass => Ok((z, LinkStats::default())),
            Link::Codec => {
                let raw = self.codec.encode_raw(tape, &self.store, z)?;
                let frame = normalize_frame(tape, raw)?;
                let rx = tape.mul_scalar(frame.symbols, frame.normalizer)?;
                let z_hat = self.codec.decode_raw(tape, &self.store, rx)?;
                Ok((
                    z_hat,
                    LinkStats {
                        degenerate: frame.degenerate,
                        erased: false,
                    },
                ))
            }
            Link::Channel { cfg, frame_id } => {
                let raw = self.codec.encode_raw(tape, &self.store, z)?;
                let frame = normalize_frame(tape, raw)?;
                let n_sym = tape.value(raw).len() / 2;
                let real = draw_realization(&cfg, frame_id, n_sym);
                let (eq, erased) = channel_on_tape(tape, frame.symbols, &real, cfg.kind)?;
                let rx = tape.mul_scalar(eq, frame.normalizer)?;
                let z_hat = self.codec.decode_raw(tape, &self.store, rx)?;
                Ok((
                    z_hat,
                    LinkStats {
                        degenerate: frame.degenerate,
                        erased,
                    },
                ))
            }
        }
    }

    /// Teacher-forced decoder input and targets: `[<bos>, r…]` → `[r…, <eos>]`.
    pub fn decoder_io(&self, sample: &InstructionSample) -> (Vec<usize>, Vec<usize>) {
        let targets = sample.response_ids(&self.vocab);
        let mut input = vec![BOS];
        input.extend(&targets[..targets.len() - 1]);
        (input, targets)
    }

    /// Masked cross-entropy of the response given the received sequence.
    pub fn loss(&self, tape: &mut Tape, sample: &InstructionSample, link: Link) -> Result<Var> {
        let z = self.encode(tape, sample)?;
        let (z_hat, _) = self.transmit(tape, z, link)?;
        self.response_loss(tape, z_hat, sample)
    }

    pub fn response_loss(&self, tape: &mut Tape, z_hat: Var, sample: &InstructionSample) -> Result<Var> {
        let (input, targets) = self.decoder_io(sample);
        let logits = self.token.decoder_logits(tape, &self.store, z_hat, &input)?;
        let mask = vec![true; targets.len()];
        crate::llm::ce_loss(tape, logits, &targets, &mask)
    }

    /// Received sequence as a plain tensor.
    pub fn received(&self, sample: &InstructionSample, link: Link) -> Result<(Tensor, LinkStats)> {
        let mut tape = Tape::new();
        let z = self.encode(&mut tape, sample)?;
        let (z_hat, stats) = self.transmit(&mut tape, z, link)?;
        Ok((tape.value(z_hat).clone(), stats))
    }

    /// Greedy answer text.
    pub fn answer(&self, sample: &InstructionSample, link: Link) -> Result<String> {
        let (z_hat, _) = self.received(sample, link)?;
        let prompt = TokenSequence::prompt(vec![BOS]);
        let ids = self
            .token
            .decode_tokens(&self.store, &z_hat, &prompt, self.cfg.max_answer_len)?;
        let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
        Ok(detokenize(&ids[..end], &self.vocab))
    }

    /// Whole-sample layout `[<img>, visual…, <sep>, prompt…, <bos>, response…]`
    /// with loss only on the response.
    pub fn full_sequence(&self, sample: &InstructionSample) -> TokenSequence {
        let mut ids = Vec::new();
        if sample.task.uses_image() {
            ids.push(IMG);
            ids.extend(std::iter::repeat_n(PAD, self.cells.coarse_count()));
        }
        ids.push(SEP);
        ids.extend(sample.prompt_ids(&self.vocab));
        ids.push(BOS);
        let prefix = ids.len();
        ids.extend(sample.response_ids(&self.vocab));
        let mask = (0..ids.len()).map(|i| i >= prefix).collect();
        TokenSequence::new(ids, mask).expect("lengths match by construction")
    }

    /// Parameter names in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }
}
