//! Word-level tokenizer, the transmit-side multimodal token encoder, the
//! receive-side autoregressive decoder and low-rank adapter attachment.
//!
//! Reserved ids are fixed: `<pad>`=0, `<bos>`=1, `<eos>`=2, `<img>`=3,
//! `<sep>`=4, `<unk>`=5. Regular words follow in the order given.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{Attention, EncoderBlock, LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const SEP: usize = 4;
pub const UNK: usize = 5;
pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<img>", "<sep>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.into_iter().chain(words) {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<&str> = text.lines().collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!("{} lacks the reserved token header", path.display())));
        }
        let v = Self::new(words[RESERVED.len()..].iter().copied());
        if v.len() != words.len() {
            return Err(Error::Format(format!("{} has duplicate tokens", path.display())));
        }
        Ok(v)
    }
}

/// Lowercases and splits on whitespace, with every ASCII punctuation
/// character as its own word.
pub fn normalize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn normalized_text(s: &str) -> String {
    normalize(s).join(" ")
}

pub fn tokenize_text(s: &str, vocab: &Vocabulary) -> Vec<usize> {
    normalize(s).iter().map(|w| vocab.id(w)).collect()
}

/// Space-joined words; `<pad>`, `<bos>` and `<eos>` are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| !matches!(i, PAD | BOS | EOS))
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ids with the positions that carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub response_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, response_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != response_mask.len() {
            return Err(contract(format!(
                "{} ids but {} mask entries",
                ids.len(),
                response_mask.len()
            )));
        }
        Ok(Self { ids, response_mask })
    }

    /// Prompt-only sequence: no position carries loss.
    pub fn prompt(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self {
            ids,
            response_mask: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
}

impl TokenModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= UNK || self.d_model == 0 || self.max_len == 0 || self.ff_hidden == 0 {
            return Err(Error::Config(format!("invalid token model config {self:?}")));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention to the
/// received memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DecoderBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TokenModelConfig, rng: &mut R) -> Result<Self> {
        let (g, d) = (Group::Delta, cfg.d_model);
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), g, d)?,
            self_attn: Attention::new(store, &format!("{name}.self"), g, d, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), g, d)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), g, d, cfg.heads, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), g, d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), g, d, cfg.ff_hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), g, cfg.ff_hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, true)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, memory, false)?;
        let x = tape.add(x, c)?;
        let h = self.ln3.forward(tape, store, x)?;
        let f = self.fc1.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, store, f)?;
        tape.add(x, f)
    }
}

/// Text embedding (θ), token encoder (α) and token decoder (δ).
#[derive(Debug, Clone)]
pub struct TokenModel {
    pub cfg: TokenModelConfig,
    pub embed: ParamId,
    pub enc_pos: ParamId,
    pub enc_blocks: Vec<EncoderBlock>,
    pub dec_pos: ParamId,
    pub mem_ln: LayerNorm,
    pub dec_blocks: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
    pub head: Linear,
}

impl TokenModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: TokenModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.add("text.embed", Group::Theta, Tensor::randn(&[cfg.vocab_size, d], 0.5, rng))?;
        let enc_pos = store.add("enc.pos", Group::Alpha, Tensor::randn(&[cfg.max_len, d], 0.1, rng))?;
        let enc_blocks = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::new(store, &format!("enc{i}"), Group::Alpha, d, cfg.heads, cfg.ff_hidden, rng))
            .collect::<Result<_>>()?;
        let dec_pos = store.add("dec.pos", Group::Delta, Tensor::randn(&[cfg.max_len, d], 0.1, rng))?;
        let mem_ln = LayerNorm::new(store, "dec.mem_ln", Group::Delta, d)?;
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::new(store, &format!("dec{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let dec_ln = LayerNorm::new(store, "dec.ln", Group::Delta, d)?;
        let head = Linear::new(store, "dec.head", Group::Delta, d, cfg.vocab_size, true, rng)?;
        Ok(Self {
            cfg,
            embed,
            enc_pos,
            enc_blocks,
            dec_pos,
            mem_ln,
            dec_blocks,
            dec_ln,
            head,
        })
    }

    fn positions(&self, tape: &mut Tape, store: &ParamStore, table: ParamId, n: usize) -> Result<Var> {
        if n > self.cfg.max_len {
            return Err(contract(format!("sequence of {n} exceeds max length {}", self.cfg.max_len)));
        }
        let t = tape.param(store, table);
        tape.gather_rows(t, &(0..n).collect::<Vec<_>>())
    }

    /// Embedding rows for `ids` (E_θ).
    pub fn embed_ids(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.embed);
        tape.embedding_lookup(t, ids)
    }

    /// Encoder input `[<img>, visual…, <sep>, text…] + positions`. Without
    /// visual tokens the layout is `[<sep>, text…]`.
    pub fn encoder_input(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TokenSequence,
        visual: Option<Var>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut parts = Vec::with_capacity(3);
        if let Some(v) = visual {
            let (_, dv) = tape.value(v).dims2()?;
            if dv != d {
                return Err(contract(format!("visual width {dv} does not match d_model {d}")));
            }
            parts.push(self.embed_ids(tape, store, &[IMG])?);
            parts.push(v);
        }
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(SEP);
        ids.extend(&text.ids);
        parts.push(self.embed_ids(tape, store, &ids)?);
        let x = tape.concat_rows(&parts)?;
        let n = tape.shape(x)[0];
        let p = self.positions(tape, store, self.enc_pos, n)?;
        tape.add(x, p)
    }

    /// Transmit-side token encoder; output is the sequence `Z` handed to the
    /// channel encoder.
    pub fn encode_multimodal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &TokenSequence,
        visual: Option<Var>,
    ) -> Result<Var> {
        let mut x = self.encoder_input(tape, store, text, visual)?;
        for b in &self.enc_blocks {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Next-token logits for every position of `ids`, conditioned on the
    /// received sequence `memory`.
    pub fn decoder_logits(&self, tape: &mut Tape, store: &ParamStore, memory: Var, ids: &[usize]) -> Result<Var> {
        let (_, dm) = tape.value(memory).dims2()?;
        if dm != self.cfg.d_model {
            return Err(contract(format!("memory width {dm} does not match d_model {}", self.cfg.d_model)));
        }
        let mem = self.mem_ln.forward(tape, store, memory)?;
        let x = self.embed_ids(tape, store, ids)?;
        let p = self.positions(tape, store, self.dec_pos, ids.len())?;
        let mut x = tape.add(x, p)?;
        for b in &self.dec_blocks {
            x = b.forward(tape, store, x, mem)?;
        }
        let x = self.dec_ln.forward(tape, store, x)?;
        self.head.forward(tape, store, x)
    }

    /// Greedy decoding from `prompt` (S_δ⁻¹). Returns generated ids, ending
    /// with `<eos>` when one was produced.
    pub fn decode_tokens(
        &self,
        store: &ParamStore,
        z_hat: &Tensor,
        prompt: &TokenSequence,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        greedy_decode(&prompt.ids, max_len, |ids| {
            let mut tape = Tape::new();
            let mem = tape.constant(z_hat.clone());
            let logits = self.decoder_logits(&mut tape, store, mem, ids)?;
            let (n, _) = tape.value(logits).dims2()?;
            Ok(tape.value(logits).row(n - 1).to_vec())
        })
    }

    /// Every adaptable matrix, keyed by name (e.g. `enc0.attn.q`).
    fn attention_linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for b in &mut self.enc_blocks {
            out.extend(b.attn.linears_mut());
        }
        for b in &mut self.dec_blocks {
            out.extend(b.self_attn.linears_mut());
            out.extend(b.cross_attn.linears_mut());
        }
        out
    }

    /// Names of all attention projections of the encoder and decoder.
    pub fn attention_matrix_names(&mut self, store: &ParamStore) -> Vec<String> {
        self.attention_linears_mut()
            .into_iter()
            .map(|l| l.weight_name(store).to_string())
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy loop over a next-token logit function of the running prefix.
pub fn greedy_decode<F>(prompt: &[usize], max_len: usize, mut step: F) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if max_len < 1 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = step(&ids)?;
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logits during decoding".into()));
        }
        let next = argmax_lowest(&logits);
        out.push(next);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Masked mean cross-entropy.
pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}

/// Attaches a low-rank adapter to each named matrix.
pub fn apply_adapters<R: Rng + ?Sized>(
    model: &mut TokenModel,
    store: &mut ParamStore,
    targets: &[String],
    rank: usize,
    scale: f64,
    rng: &mut R,
) -> Result<()> {
    let names = model.attention_matrix_names(store);
    if let Some(bad) = targets.iter().find(|t| !names.contains(t)) {
        return Err(Error::Config(format!("no adaptable matrix named {bad:?}")));
    }
    for lin in model.attention_linears_mut() {
        let name = lin.weight_name(store).to_string();
        if targets.contains(&name) {
            lin.attach_adapter(store, rank, scale, rng)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["red", "circle", "a", "."])
    }

    #[test]
    fn tokenize_basic() {
        let v = vocab();
        assert!(tokenize_text("", &v).is_empty());
        assert_eq!(tokenize_text("Red circle.", &v), vec![v.id("red"), v.id("circle"), v.id(".")]);
        assert_eq!(tokenize_text("blue", &v), vec![UNK]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab().save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), vocab());
    }

    #[test]
    fn constant_logits_emit_lowest_id() {
        let out = greedy_decode(&[BOS], 5, |_| Ok(vec![0.25; 9])).unwrap();
        assert_eq!(out, vec![0; 5]);
    }

    #[test]
    fn zero_max_len_rejected() {
        assert!(greedy_decode(&[BOS], 0, |_| Ok(vec![0.0; 3])).is_err());
    }

    #[test]
    fn sequence_lengths_checked() {
        assert!(TokenSequence::new(vec![1, 2], vec![true]).is_err());
    }

    #[test]
    fn unknown_adapter_target_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = TokenModelConfig {
            vocab_size: 10,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_hidden: 16,
            max_len: 12,
        };
        let mut m = TokenModel::new(&mut store, cfg, &mut rng).unwrap();
        let err = apply_adapters(&mut m, &mut store, &["enc0.attn.zz".into()], 2, 1.0, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
        apply_adapters(&mut m, &mut store, &["enc0.attn.q".into()], 2, 1.0, &mut rng).unwrap();
        assert!(store.id("enc0.attn.q.lora_a").is_ok());
    }
    #[test]
    fn adapters_at_init_leave_logits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = TokenModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_hidden: 16,
            max_len: 12,
        };
        let mut m = TokenModel::new(&mut store, cfg, &mut rng).unwrap();
        let run = |m: &TokenModel, store: &ParamStore| {
            let mut t = Tape::new();
            let z = m.encode_multimodal(&mut t, store, &TokenSequence::prompt(vec![6, 7, 8]), None).unwrap();
            let l = m.decoder_logits(&mut t, store, z, &[BOS, 9]).unwrap();
            t.value(l).clone()
        };
        let base = run(&m, &store);
        let names = m.attention_matrix_names(&store);
        apply_adapters(&mut m, &mut store, &names, 2, 1.0, &mut rng).unwrap();
        assert_eq!(run(&m, &store), base);
    }

    #[test]
    fn tokenize_round_trips_lexicon_sentences() {
        use rand::seq::IndexedRandom;
        let lex = crate::data::lexicon();
        let v = Vocabulary::new(lex.iter().map(String::as_str));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rand::Rng::random_range(&mut rng, 1..12);
            let words: Vec<&str> = (0..n).map(|_| lex.choose(&mut rng).unwrap().as_str()).collect();
            let sentence = words.join(" ").to_uppercase();
            let ids = tokenize_text(&sentence, &v);
            assert!(!ids.contains(&UNK));
            assert_eq!(detokenize(&ids, &v), normalized_text(&sentence));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>, Vec<bool>)> {
            (1usize..5, 2usize..7).prop_flat_map(|(n, v)| {
                (
                    Just(n),
                    Just(v),
                    proptest::collection::vec(-5.0f64..5.0, n * v),
                    proptest::collection::vec(0..v, n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_map(|(n, v, l, t, mut m)| {
                m[0] = true;
                (n, v, l, t, m)
            })
        }

        fn ce(n: usize, v: usize, logits: &[f64], targets: &[usize], mask: &[bool]) -> f64 {
            let mut t = Tape::new();
            let l = t.constant(Tensor::new(vec![n, v], logits.to_vec()).unwrap());
            let loss = ce_loss(&mut t, l, targets, mask).unwrap();
            t.value(loss).data()[0]
        }

        proptest! {
            #[test]
            fn ce_is_permutation_equivariant((n, v, logits, targets, mask) in logits_strategy(), rot in 1usize..6) {
                let perm: Vec<usize> = (0..v).map(|i| (i + rot) % v).collect();
                let mut pl = vec![0.0; n * v];
                for r in 0..n {
                    for c in 0..v {
                        pl[r * v + perm[c]] = logits[r * v + c];
                    }
                }
                let pt: Vec<usize> = targets.iter().map(|&t| perm[t]).collect();
                let (a, b) = (ce(n, v, &logits, &targets, &mask), ce(n, v, &pl, &pt, &mask));
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }

            #[test]
            fn ce_is_invariant_to_position_order((n, v, logits, targets, mask) in logits_strategy(), rot in 0usize..5) {
                let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
                let pl: Vec<f64> = order.iter().flat_map(|&r| logits[r * v..(r + 1) * v].to_vec()).collect();
                let pt: Vec<usize> = order.iter().map(|&r| targets[r]).collect();
                let pm: Vec<bool> = order.iter().map(|&r| mask[r]).collect();
                let (a, b) = (ce(n, v, &logits, &targets, &mask), ce(n, v, &pl, &pt, &pm));
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }

            #[test]
            fn ce_matches_log_softmax_oracle((n, v, logits, targets, mask) in logits_strategy()) {
                let mut total = 0.0;
                let mut count = 0.0;
                for r in (0..n).filter(|&r| mask[r]) {
                    let row = &logits[r * v..(r + 1) * v];
                    let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                    total += lse - row[targets[r]];
                    count += 1.0;
                }
                let got = ce(n, v, &logits, &targets, &mask);
                prop_assert!((got - total / count).abs() < 1e-10);
            }

            #[test]
            fn ce_ignores_masked_positions((n, v, logits, targets, mask) in logits_strategy(), noise in -9.0f64..9.0) {
                let mut other = logits.clone();
                for r in (0..n).filter(|&r| !mask[r]) {
                    for c in 0..v {
                        other[r * v + c] += noise * (c as f64 + 1.0);
                    }
                }
                prop_assert_eq!(ce(n, v, &logits, &targets, &mask), ce(n, v, &other, &targets, &mask));
            }

            #[test]
            fn greedy_decode_is_shift_invariant(table in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 1..8)) {
                let step = |shift: f64| {
                    let table = table.clone();
                    move |ids: &[usize]| Ok(table[(ids.len() - 1) % table.len()].iter().map(|x| x + shift).collect())
                };
                let a = greedy_decode(&[BOS], 10, step(0.0)).unwrap();
                let b = greedy_decode(&[BOS], 10, step(7.0)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
