//! Shared building blocks: affine layers with optional low-rank adapters,
//! layer-norm parameters and multi-head attention.

use rand::Rng;

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{contract, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Low-rank update `scale·A·B` added to a frozen base weight.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), group, Tensor::randn(&[d_in, d_out], std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            d_in,
            d_out,
            adapter: None,
        })
    }

    pub fn weight_name<'a>(&self, store: &'a ParamStore) -> &'a str {
        store.get(self.w).name.strip_suffix(".w").unwrap_or(&store.get(self.w).name)
    }

    /// Attaches a rank-`rank` adapter: `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn attach_adapter<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        if rank == 0 {
            return Err(contract("adapter rank must be at least 1"));
        }
        if self.adapter.is_some() {
            return Err(contract("adapter already attached"));
        }
        let base = self.weight_name(store).to_string();
        let std = 1.0 / (self.d_in as f64).sqrt();
        let a = store.add(
            format!("{base}.lora_a"),
            Group::Adapter,
            Tensor::randn(&[self.d_in, rank], std, rng),
        )?;
        let b = store.add(format!("{base}.lora_b"), Group::Adapter, Tensor::zeros(&[rank, self.d_out]))?;
        self.adapter = Some(Adapter { a, b, rank, scale });
        Ok(())
    }

    /// Effective weight: base, or base + scale·A·B with an adapter.
    pub fn weight(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let w = tape.param(store, self.w);
        match &self.adapter {
            None => Ok(w),
            Some(ad) => {
                let a = tape.param(store, ad.a);
                let b = tape.param(store, ad.b);
                let ab = tape.matmul(a, b)?;
                let ab = tape.scale(ab, ad.scale);
                tape.add(w, ab)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = self.weight(tape, store)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Result<Self> {
        Self::with_gain(store, name, group, d, 1.0)
    }

    pub fn with_gain(store: &mut ParamStore, name: &str, group: Group, d: usize, gain: f64) -> Result<Self> {
        let g = store.add(format!("{name}.gain"), group, Tensor::full(&[d], gain))?;
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d]))?;
        Ok(Self { gain: g, bias: b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(contract(format!("model width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), group, d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), group, d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), group, d, d, true, rng)?,
            heads,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    /// Self-attention when `kv == x`, cross-attention otherwise. `causal`
    /// masks keys after each query position.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, kv: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let heads = multi_head_attention(tape, q, k, v, self.heads, causal)?;
        self.o.forward(tape, store, heads)
    }
}

/// Scaled dot-product attention over already-projected `q, k, v`, split into
/// `heads` column blocks and concatenated back.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let (nq, d) = tape.value(q).dims2()?;
    let (nk, _) = tape.value(k).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(contract(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mask = if causal {
        let mut m = Tensor::zeros(&[nq, nk]);
        for i in 0..nq {
            for j in (i + 1)..nk {
                m.data_mut()[i * nk + j] = -1e9;
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let s = match mask {
            Some(m) => tape.add(s, m)?,
            None => s,
        };
        let p = tape.softmax_rows(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Pre-norm transformer encoder block:
/// `m = x + MHA(LN(x))`, `y = m + W_out·GeLU(W_f·LN(m) + b_f)`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, d)?,
            attn: Attention::new(store, &format!("{name}.attn"), group, d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, false)?;
        let m = tape.add(a, x)?;
        let h = self.ln2.forward(tape, store, m)?;
        let f = self.fc1.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, store, f)?;
        tape.add(f, m)
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias];
        for l in [&self.attn.q, &self.attn.k, &self.attn.v, &self.attn.o, &self.fc1, &self.fc2] {
            v.push(l.w);
            v.extend(l.b);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adapter_at_init_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, "l", Group::Alpha, 5, 3, true, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let run = |lin: &Linear, store: &ParamStore| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = lin.forward(&mut t, store, xv).unwrap();
            t.value(y).clone()
        };
        let base = run(&lin, &store);
        lin.attach_adapter(&mut store, 2, 1.0, &mut rng).unwrap();
        assert_eq!(run(&lin, &store), base);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(Attention::new(&mut store, "a", Group::Alpha, 10, 4, &mut rng).is_err());
    }

    #[test]
    fn mha_matches_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d, heads) = (3, 6, 2);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        for causal in [false, true] {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let y = multi_head_attention(&mut t, qv, kv, vv, heads, causal).unwrap();
            let dk = d / heads;
            for h in 0..heads {
                for i in 0..n {
                    let keys = if causal { i + 1 } else { n };
                    let s: Vec<f64> = (0..keys)
                        .map(|j| {
                            (0..dk).map(|c| q.data()[i * d + h * dk + c] * k.data()[j * d + h * dk + c]).sum::<f64>()
                                / (dk as f64).sqrt()
                        })
                        .collect();
                    let z: f64 = s.iter().map(|x| x.exp()).sum();
                    for c in 0..dk {
                        let want: f64 = (0..keys).map(|j| s[j].exp() / z * v.data()[j * d + h * dk + c]).sum();
                        assert!((t.value(y).data()[i * d + h * dk + c] - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let blk = EncoderBlock::new(&mut store, "e", Group::Alpha, 8, 2, 16, &mut rng).unwrap();
        for l in [&blk.attn.o, &blk.fc2] {
            store.value_mut(l.w).data_mut().fill(0.0);
            store.value_mut(l.b.unwrap()).data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = blk.forward(&mut t, &store, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// `x(W + sAB)` against `xW + s(xA)B`.
            #[test]
            fn adapter_matches_two_path_oracle(seed in 0u64..1000, scale in -2.0f64..2.0, rank in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let mut lin = Linear::new(&mut store, "l", Group::Alpha, 6, 4, false, &mut rng).unwrap();
                lin.attach_adapter(&mut store, rank, scale, &mut rng).unwrap();
                let ad = lin.adapter.clone().unwrap();
                *store.value_mut(ad.b) = Tensor::randn(&[rank, 4], 0.7, &mut rng);
                let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = lin.forward(&mut t, &store, xv).unwrap();
                let (w, a, b) = (store.value(lin.w), store.value(ad.a), store.value(ad.b));
                for r in 0..3 {
                    for j in 0..4 {
                        let base: f64 = (0..6).map(|i| x.data()[r * 6 + i] * w.data()[i * 4 + j]).sum();
                        let low: f64 = (0..rank)
                            .map(|k| {
                                let xa: f64 = (0..6).map(|i| x.data()[r * 6 + i] * a.data()[i * rank + k]).sum();
                                xa * b.data()[k * 4 + j]
                            })
                            .sum();
                        prop_assert!((t.value(y).data()[r * 4 + j] - (base + scale * low)).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
