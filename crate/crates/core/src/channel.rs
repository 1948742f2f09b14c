//! Learned channel codec and the simulated physical channel.
//!
//! Tokens are mapped to `m` complex symbols each, stored interleaved as
//! `(re, im)` pairs. A frame is the whole token sequence; it is normalized to
//! unit mean symbol power before transmission and the normalizer travels as
//! side information so the receiver can undo it.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::nn::Linear;
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Frames whose RMS is below this are treated as empty.
pub const DEGENERATE_RMS: f64 = 1e-12;
/// Fading magnitudes at or below this erase the frame.
pub const ERASURE_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 2] = [ChannelKind::Awgn, ChannelKind::Rayleigh];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            _ => Err(Error::Config(format!("unknown channel kind {s:?}"))),
        }
    }
}

/// Perfect CSI is assumed for Rayleigh; there is no other CSI mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

/// Noise variance for unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    /// Interleaved `(re, im)`.
    pub symbols: Vec<f64>,
    /// RMS of the frame before normalization; the receiver multiplies by it.
    pub normalizer: f64,
    pub degenerate: bool,
    pub erased: bool,
}

impl SymbolFrame {
    pub fn num_symbols(&self) -> usize {
        self.symbols.len() / 2
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.symbols)
    }
}

fn mean_power(iq: &[f64]) -> f64 {
    if iq.is_empty() {
        return 0.0;
    }
    iq.iter().map(|v| v * v).sum::<f64>() / (iq.len() / 2) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: (f64, f64),
    /// Interleaved complex noise, one entry per symbol.
    pub noise: Vec<f64>,
    pub sigma2: f64,
}

impl ChannelRealization {
    pub fn erased(&self) -> bool {
        self.h.0.hypot(self.h.1) <= ERASURE_GAIN
    }

    pub fn measured_noise_power(&self) -> f64 {
        mean_power(&self.noise)
    }
}

/// Draws the fading coefficient and noise of one frame. Each frame has its
/// own generator stream, so frames can be simulated in any order.
pub fn draw_realization(cfg: &ChannelConfig, frame_id: u64, n_sym: usize) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(frame_id);
    let h = match cfg.kind {
        ChannelKind::Awgn => (1.0, 0.0),
        ChannelKind::Rayleigh => {
            let s = 0.5f64.sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            (s * re, s * im)
        }
    };
    let sigma2 = noise_variance(cfg.snr_db);
    let noise = if sigma2 == 0.0 {
        vec![0.0; 2 * n_sym]
    } else {
        let s = (sigma2 / 2.0).sqrt();
        (0..2 * n_sym).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    ChannelRealization { h, noise, sigma2 }
}

/// `ŷ = H·y + n`.
pub fn transmit(y: &SymbolFrame, cfg: &ChannelConfig, frame_id: u64) -> (SymbolFrame, ChannelRealization) {
    let real = draw_realization(cfg, frame_id, y.num_symbols());
    let (hr, hi) = real.h;
    let mut out = y.symbols.clone();
    for (z, n) in out.chunks_mut(2).zip(real.noise.chunks(2)) {
        let (a, b) = (z[0], z[1]);
        z[0] = hr * a - hi * b + n[0];
        z[1] = hi * a + hr * b + n[1];
    }
    (
        SymbolFrame {
            symbols: out,
            ..y.clone()
        },
        real,
    )
}

/// `1/H` as a complex pair.
fn inverse(h: (f64, f64)) -> (f64, f64) {
    let m = h.0 * h.0 + h.1 * h.1;
    (h.0 / m, -h.1 / m)
}

/// Zero-forcing with perfect CSI. AWGN frames pass through unchanged;
/// frames with a vanishing gain come back all-zero and flagged as erased.
pub fn equalize(y_hat: &SymbolFrame, real: &ChannelRealization, kind: ChannelKind) -> SymbolFrame {
    match kind {
        ChannelKind::Awgn => y_hat.clone(),
        ChannelKind::Rayleigh if real.erased() => SymbolFrame {
            symbols: vec![0.0; y_hat.symbols.len()],
            erased: true,
            ..y_hat.clone()
        },
        ChannelKind::Rayleigh => {
            let (gr, gi) = inverse(real.h);
            let mut out = y_hat.symbols.clone();
            for z in out.chunks_mut(2) {
                let (a, b) = (z[0], z[1]);
                z[0] = gr * a - gi * b;
                z[1] = gi * a + gr * b;
            }
            SymbolFrame {
                symbols: out,
                ..y_hat.clone()
            }
        }
    }
}

/// Channel encoder (β: `d → 2m`) and decoder (γ: `2m → d`).
#[derive(Debug, Clone)]
pub struct ChannelCodec {
    pub enc: Linear,
    pub dec: Linear,
    pub d_model: usize,
    pub symbols_per_token: usize,
}

impl ChannelCodec {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("symbols per token must be positive".into()));
        }
        Ok(Self {
            enc: Linear::new(store, "chan.enc", Group::Beta, d_model, 2 * m, true, rng)?,
            dec: Linear::new(store, "chan.dec", Group::Gamma, 2 * m, d_model, true, rng)?,
            d_model,
            symbols_per_token: m,
        })
    }

    /// Sets the decoder to the Moore–Penrose pseudo-inverse of the encoder
    /// (biases cancel), so `dec∘enc` is the orthogonal projection onto the
    /// encoder's row space; the identity when `2m ≥ d` and `W` has full rank.
    pub fn init_pseudo_inverse(&self, store: &mut ParamStore) -> Result<()> {
        let w = store.value(self.enc.w).clone();
        let pinv = pseudo_inverse(&w)?;
        let b = match self.enc.b {
            Some(id) => store.value(id).clone(),
            None => Tensor::zeros(&[2 * self.symbols_per_token]),
        };
        let b_row = b.clone().reshape(vec![1, b.len()])?;
        let back = b_row.matmul(&pinv)?.into_data().into_iter().map(|v| -v).collect();
        *store.value_mut(self.dec.w) = pinv;
        if let Some(id) = self.dec.b {
            *store.value_mut(id) = Tensor::new(vec![self.d_model], back)?;
        }
        Ok(())
    }

    /// Pre-normalization symbols for each token, `n × 2m`.
    pub fn encode_raw(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (_, d) = tape.value(z).dims2()?;
        if d != self.d_model {
            return Err(contract(format!("channel encoder expects width {}, got {d}", self.d_model)));
        }
        self.enc.forward(tape, store, z)
    }

    pub fn decode_raw(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        self.dec.forward(tape, store, y)
    }
}

/// Tape-level link pieces: normalization, channel action and equalization,
/// with the noise entering as a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedFrame {
    pub symbols: Var,
    pub normalizer: Var,
    pub degenerate: bool,
}

pub fn normalize_frame(tape: &mut Tape, raw: Var) -> Result<NormalizedFrame> {
    let s = tape.rms_complex(raw)?;
    if tape.value(s).data()[0] < DEGENERATE_RMS {
        let zeros = Tensor::zeros(tape.shape(raw));
        return Ok(NormalizedFrame {
            symbols: tape.constant(zeros),
            normalizer: tape.constant(Tensor::scalar(0.0)),
            degenerate: true,
        });
    }
    Ok(NormalizedFrame {
        symbols: tape.div_scalar(raw, s)?,
        normalizer: s,
        degenerate: false,
    })
}

/// Channel plus zero-forcing on the tape. Returns the equalized symbols
/// (still normalized) and whether the frame was erased.
pub fn channel_on_tape(tape: &mut Tape, y: Var, real: &ChannelRealization, kind: ChannelKind) -> Result<(Var, bool)> {
    let shape = tape.shape(y).to_vec();
    if real.noise.len() != tape.value(y).len() {
        return Err(contract(format!(
            "realization has {} noise values for {} symbol reals",
            real.noise.len(),
            tape.value(y).len()
        )));
    }
    let noise = tape.constant(Tensor::new(shape.clone(), real.noise.clone())?);
    match kind {
        ChannelKind::Awgn => Ok((tape.add(y, noise)?, false)),
        ChannelKind::Rayleigh if real.erased() => Ok((tape.constant(Tensor::zeros(&shape)), true)),
        ChannelKind::Rayleigh => {
            let faded = tape.complex_scale(y, real.h.0, real.h.1)?;
            let rx = tape.add(faded, noise)?;
            let (gr, gi) = inverse(real.h);
            Ok((tape.complex_scale(rx, gr, gi)?, false))
        }
    }
}

/// Encoder output as a frame (C_β).
pub fn channel_encode(store: &ParamStore, codec: &ChannelCodec, z: &Tensor) -> Result<SymbolFrame> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(contract("channel input must be finite"));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let raw = codec.encode_raw(&mut tape, store, zv)?;
    let f = normalize_frame(&mut tape, raw)?;
    Ok(SymbolFrame {
        symbols: tape.value(f.symbols).data().to_vec(),
        normalizer: tape.value(f.normalizer).data()[0],
        degenerate: f.degenerate,
        erased: false,
    })
}

/// Receiver-side map back to `n_tokens × d` (C_γ⁻¹).
pub fn channel_decode(store: &ParamStore, codec: &ChannelCodec, y_hat: &SymbolFrame, n_tokens: usize) -> Result<Tensor> {
    let m = codec.symbols_per_token;
    if y_hat.num_symbols() != n_tokens * m || !y_hat.symbols.len().is_multiple_of(2) {
        return Err(contract(format!(
            "frame has {} symbols, expected {n_tokens}·{m}",
            y_hat.num_symbols()
        )));
    }
    let mut tape = Tape::new();
    let scaled: Vec<f64> = y_hat.symbols.iter().map(|v| v * y_hat.normalizer).collect();
    let y = tape.constant(Tensor::new(vec![n_tokens, 2 * m], scaled)?);
    let out = codec.decode_raw(&mut tape, store, y)?;
    Ok(tape.value(out).clone())
}

/// Moore–Penrose pseudo-inverse of a full-rank `r × c` matrix through the
/// normal equations.
pub fn pseudo_inverse(w: &Tensor) -> Result<Tensor> {
    let (r, c) = w.dims2()?;
    let wt = w.transpose()?;
    if r <= c {
        // W⁺ = Wᵀ (W Wᵀ)⁻¹
        let g = w.matmul(&wt)?;
        wt.matmul(&invert_spd(&g)?)
    } else {
        // W⁺ = (Wᵀ W)⁻¹ Wᵀ
        let g = wt.matmul(w)?;
        invert_spd(&g)?.matmul(&wt)
    }
}

/// Gauss–Jordan inverse with partial pivoting.
fn invert_spd(a: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(contract("matrix inverse needs a square matrix"));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::eye(n).into_data();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        if m[piv * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular matrix in pseudo-inverse".into()));
        }
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        m[i * n + k] -= f * m[col * n + k];
                        inv[i * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Writes `frame_id,snr_db,kind,h_re,h_im,measured_noise_power` rows.
pub fn write_trace_csv<W: Write>(w: &mut W, rows: &[(u64, ChannelConfig, ChannelRealization)]) -> Result<()> {
    writeln!(w, "frame_id,snr_db,kind,h_re,h_im,measured_noise_power")?;
    for (id, cfg, real) in rows {
        writeln!(
            w,
            "{id},{},{},{},{},{}",
            cfg.snr_db,
            cfg.kind,
            real.h.0,
            real.h.1,
            real.measured_noise_power()
        )?;
    }
    Ok(())
}
