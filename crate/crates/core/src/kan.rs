//! Kolmogorov–Arnold projection of visual tokens into the token-model
//! embedding space, and the matched-size MLP used for the ablation.
//!
//! Every edge `i → j` of a KAN layer carries
//! `φ(x) = w_b·SiLU(x) + w_s·Σ_m c_m·B_m(x)`
//! where `B_m` are uniform B-spline basis functions of degree `k` on `G`
//! intervals over `[t_min, t_max]`. Inputs outside the range are clamped.

use rand::Rng;

use crate::autodiff::{silu_scalar, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

const MAX_KNOTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub degree: usize,
    pub grid: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for SplineBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            grid: 5,
            t_min: -1.0,
            t_max: 1.0,
        }
    }
}

impl SplineBasis {
    pub fn new(degree: usize, grid: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if grid == 0 || t_max <= t_min || grid + 2 * degree + 1 > MAX_KNOTS {
            return Err(Error::Config(format!(
                "invalid spline basis: degree {degree}, grid {grid}, range [{t_min}, {t_max}]"
            )));
        }
        Ok(Self {
            degree,
            grid,
            t_min,
            t_max,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.grid + self.degree
    }

    fn step(&self) -> f64 {
        (self.t_max - self.t_min) / self.grid as f64
    }

    /// Uniform knot vector extended by `degree` knots on each side.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.grid + 2 * self.degree)
            .map(|m| self.t_min + (m as f64 - self.degree as f64) * h)
            .collect()
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.num_basis()];
        let mut d = vec![0.0; self.num_basis()];
        self.eval_with_derivative(x, &mut v, &mut d);
        v
    }

    /// Cox–de Boor evaluation of all basis values and their derivatives with
    /// respect to `x`. Outside the range the value is clamped and the
    /// derivative is zero.
    pub fn eval_with_derivative(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) {
        let k = self.degree;
        let g = self.grid;
        let h = self.step();
        let inside = x >= self.t_min && x <= self.t_max;
        let xc = x.clamp(self.t_min, self.t_max);
        let knot = |m: usize| self.t_min + (m as f64 - k as f64) * h;

        let n0 = g + 2 * k;
        let mut n = [0.0f64; MAX_KNOTS];
        let cell = (((xc - self.t_min) / h).floor() as usize).min(g - 1);
        n[k + cell] = 1.0;
        let mut prev = [0.0f64; MAX_KNOTS];
        for p in 1..=k {
            if p == k {
                prev[..n0].copy_from_slice(&n[..n0]);
            }
            let len = n0 - p;
            let denom = p as f64 * h;
            for m in 0..len {
                let left = (xc - knot(m)) / denom * n[m];
                let right = (knot(m + p + 1) - xc) / denom * n[m + 1];
                n[m] = left + right;
            }
        }
        let nb = self.num_basis();
        vals[..nb].copy_from_slice(&n[..nb]);
        if k == 0 || !inside {
            ders[..nb].iter_mut().for_each(|d| *d = 0.0);
        } else {
            let c = 1.0 / h;
            for m in 0..nb {
                ders[m] = c * (prev[m] - prev[m + 1]);
            }
        }
    }
}

/// Single edge function `w_b·SiLU(x) + w_s·Σ c_m B_m(x)`.
pub fn phi_eval(x: f64, w_b: f64, w_s: f64, coeffs: &[f64], basis: &SplineBasis) -> f64 {
    let b = basis.eval(x);
    let spline: f64 = coeffs.iter().zip(&b).map(|(c, v)| c * v).sum();
    w_b * silu_scalar(x) + w_s * spline
}

#[derive(Debug, Clone)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out × d_in`
    pub w_b: ParamId,
    /// `d_out × d_in`
    pub w_s: ParamId,
    /// `d_out × d_in × (G + k)`
    pub coef: ParamId,
    pub basis: SplineBasis,
}

impl KanLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        basis: SplineBasis,
        rng: &mut R,
    ) -> Result<Self> {
        let a = 1.0 / (d_in as f64).sqrt();
        let nb = basis.num_basis();
        Ok(Self {
            d_in,
            d_out,
            w_b: store.add(format!("{name}.w_b"), group, Tensor::uniform(&[d_out, d_in], -a, a, rng))?,
            w_s: store.add(format!("{name}.w_s"), group, Tensor::full(&[d_out, d_in], 1.0))?,
            coef: store.add(format!("{name}.coef"), group, Tensor::randn(&[d_out, d_in, nb], 0.1, rng))?,
            basis,
        })
    }

    pub fn num_params(&self) -> usize {
        self.d_out * self.d_in * (2 + self.basis.num_basis())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.d_in {
            return Err(contract(format!("KAN layer expects width {}, got {d}", self.d_in)));
        }
        let wb = tape.param(store, self.w_b);
        let ws = tape.param(store, self.w_s);
        let c = tape.param(store, self.coef);
        tape.kan_layer(x, wb, ws, c, &self.basis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorVariant {
    Kan,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    /// `d_vis → hidden… → d_model`; at least two entries.
    pub dims: Vec<usize>,
    pub variant: ProjectorVariant,
    /// Layer norm before each KAN layer (or before the MLP).
    pub input_norm: bool,
    pub basis: SplineBasis,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Config(format!("projector needs ≥1 layer, got dims {:?}", self.dims)));
        }
        Ok(())
    }

    fn kan_param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] * (2 + self.basis.num_basis()))
            .sum()
    }

    /// Hidden width of a two-layer MLP whose parameter count matches the KAN
    /// configuration.
    pub fn matched_mlp_hidden(&self) -> usize {
        let din = self.dims[0];
        let dout = *self.dims.last().expect("validated");
        let target = self.kan_param_count() as f64;
        (((target - dout as f64) / (din + 1 + dout) as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
enum ProjectorBody {
    Kan { norms: Vec<LayerNorm>, layers: Vec<KanLayer> },
    Mlp { norm: Option<LayerNorm>, fc1: Linear, fc2: Linear },
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    body: ProjectorBody,
}

/// Initial layer-norm gain; keeps most projector inputs inside the spline range.
const NORM_GAIN: f64 = 0.5;

impl Projector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: ProjectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.variant {
            ProjectorVariant::Kan => {
                let mut norms = Vec::new();
                let mut layers = Vec::new();
                for (i, w) in cfg.dims.windows(2).enumerate() {
                    if cfg.input_norm {
                        norms.push(LayerNorm::with_gain(store, &format!("{name}.kan{i}.ln"), Group::Zeta, w[0], NORM_GAIN)?);
                    }
                    layers.push(KanLayer::new(
                        store,
                        &format!("{name}.kan{i}"),
                        Group::Zeta,
                        w[0],
                        w[1],
                        cfg.basis.clone(),
                        rng,
                    )?);
                }
                ProjectorBody::Kan { norms, layers }
            }
            ProjectorVariant::Mlp => {
                let din = cfg.dims[0];
                let dout = *cfg.dims.last().expect("validated");
                let hidden = cfg.matched_mlp_hidden();
                let norm = if cfg.input_norm {
                    Some(LayerNorm::with_gain(store, &format!("{name}.mlp.ln"), Group::Zeta, din, NORM_GAIN)?)
                } else {
                    None
                };
                ProjectorBody::Mlp {
                    norm,
                    fc1: Linear::new(store, &format!("{name}.mlp.fc1"), Group::Zeta, din, hidden, true, rng)?,
                    fc2: Linear::new(store, &format!("{name}.mlp.fc2"), Group::Zeta, hidden, dout, true, rng)?,
                }
            }
        };
        Ok(Self { cfg, body })
    }

    pub fn kan_layers(&self) -> &[KanLayer] {
        match &self.body {
            ProjectorBody::Kan { layers, .. } => layers,
            ProjectorBody::Mlp { .. } => &[],
        }
    }

    pub fn mlp_layers(&self) -> Option<(&Linear, &Linear)> {
        match &self.body {
            ProjectorBody::Mlp { fc1, fc2, .. } => Some((fc1, fc2)),
            ProjectorBody::Kan { .. } => None,
        }
    }

    /// Tokenwise projection; token count is preserved.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let (_, d) = tape.value(tokens).dims2()?;
        if d != self.cfg.dims[0] {
            return Err(contract(format!("projector expects width {}, got {d}", self.cfg.dims[0])));
        }
        match &self.body {
            ProjectorBody::Kan { norms, layers } => {
                let mut x = tokens;
                for (i, l) in layers.iter().enumerate() {
                    if let Some(n) = norms.get(i) {
                        x = n.forward(tape, store, x)?;
                    }
                    x = l.forward(tape, store, x)?;
                }
                Ok(x)
            }
            ProjectorBody::Mlp { norm, fc1, fc2 } => {
                let mut x = tokens;
                if let Some(n) = norm {
                    x = n.forward(tape, store, x)?;
                }
                let h = fc1.forward(tape, store, x)?;
                let h = tape.gelu(h);
                fc2.forward(tape, store, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree_zero_is_indicator() {
        let b = SplineBasis::new(0, 4, 0.0, 1.0).unwrap();
        assert_eq!(b.eval(0.3), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.eval(1.0), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamped_outside_range() {
        let b = SplineBasis::default();
        assert_eq!(b.eval(3.0), b.eval(1.0));
        assert_eq!(b.eval(-7.0), b.eval(-1.0));
    }

    #[test]
    fn phi_special_cases() {
        let b = SplineBasis::default();
        let c = vec![0.3; b.num_basis()];
        assert_eq!(phi_eval(0.0, 1.7, 0.0, &c, &b), 0.0);
        let fives = vec![5.0; b.num_basis()];
        assert!((phi_eval(0.42, 0.0, 1.0, &fives, &b) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matched_mlp_within_ten_percent() {
        let cfg = ProjectorConfig {
            dims: vec![32, 32, 64],
            variant: ProjectorVariant::Mlp,
            input_norm: true,
            basis: SplineBasis::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s1 = ParamStore::new();
        Projector::new(&mut s1, "p", cfg.clone(), &mut rng).unwrap();
        let mut s2 = ParamStore::new();
        Projector::new(&mut s2, "p", ProjectorConfig { variant: ProjectorVariant::Kan, ..cfg }, &mut rng).unwrap();
        let (a, b) = (s1.num_scalars() as f64, s2.num_scalars() as f64);
        assert!((a - b).abs() / b <= 0.1, "mlp {a} vs kan {b}");
    }

    #[test]
    fn projector_preserves_token_count() {
        let cfg = ProjectorConfig {
            dims: vec![6, 5, 8],
            variant: ProjectorVariant::Kan,
            input_norm: true,
            basis: SplineBasis::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = Projector::new(&mut store, "p", cfg, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[16, 6], 1.0, &mut rng));
        let y = p.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(y), &[16, 8]);
    }
    /// Textbook recursive Cox–de Boor on the extended knot vector.
    fn bspline_ref(knots: &[f64], m: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[m] <= x && x < knots[m + 1] { 1.0 } else { 0.0 };
        }
        let l = (x - knots[m]) / (knots[m + p] - knots[m]) * bspline_ref(knots, m, p - 1, x);
        let r = (knots[m + p + 1] - x) / (knots[m + p + 1] - knots[m + 1]) * bspline_ref(knots, m + 1, p - 1, x);
        l + r
    }

    #[test]
    fn matches_recursive_oracle() {
        let b = SplineBasis::new(3, 7, -2.0, 1.5).unwrap();
        let knots = b.knots();
        for i in 0..200 {
            let x = -2.0 + 3.5 * (i as f64 + 0.37) / 200.0;
            let got = b.eval(x);
            for (m, g) in got.iter().enumerate() {
                let want = bspline_ref(&knots, m, 3, x);
                assert!((g - want).abs() < 1e-12, "x={x} m={m}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn partition_of_unity_on_dense_grid() {
        let b = SplineBasis::default();
        for i in 0..1000 {
            let x = -1.0 + 2.0 * (i as f64 + 0.5) / 1000.0;
            let s: f64 = b.eval(x).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "x={x}: sum {s}");
            assert!(b.eval(x).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn derivative_matches_difference() {
        let b = SplineBasis::default();
        let nb = b.num_basis();
        let (mut v, mut d) = (vec![0.0; nb], vec![0.0; nb]);
        for &x in &[-0.93, -0.31, 0.05, 0.55, 0.88] {
            b.eval_with_derivative(x, &mut v, &mut d);
            let h = 1e-6;
            let (p, q) = (b.eval(x + h), b.eval(x - h));
            for m in 0..nb {
                assert!((d[m] - (p[m] - q[m]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn continuous_across_knots() {
        let b = SplineBasis::default();
        for knot in b.knots().into_iter().filter(|&t| t > -1.0 && t < 1.0) {
            let (l, r) = (b.eval(knot - 1e-10), b.eval(knot + 1e-10));
            for (a, c) in l.iter().zip(&r) {
                assert!((a - c).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_spline_layer_is_silu_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = KanLayer::new(&mut store, "k", Group::Zeta, 5, 3, SplineBasis::default(), &mut rng).unwrap();
        store.value_mut(layer.coef).data_mut().iter_mut().for_each(|c| *c = 0.0);
        let x = Tensor::randn(&[4, 5], 1.5, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = layer.forward(&mut t, &store, xv).unwrap();
        let wb = store.value(layer.w_b).data().to_vec();
        for r in 0..4 {
            for j in 0..3 {
                let want: f64 = (0..5)
                    .map(|i| {
                        let v = x.data()[r * 5 + i];
                        wb[j * 5 + i] * v / (1.0 + (-v).exp())
                    })
                    .sum();
                assert!((t.value(y).data()[r * 3 + j] - want).abs() <= 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity(degree in 0usize..5, grid in 1usize..12, x in 0.0f64..1.0) {
                let b = SplineBasis::new(degree, grid, -0.5, 2.0).unwrap();
                let v = b.eval(-0.5 + 2.5 * x);
                let s: f64 = v.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
                prop_assert!(v.iter().all(|&b| b >= -1e-15));
            }

            #[test]
            fn zero_spline_phi_is_scaled_silu(x in -4.0f64..4.0, wb in -2.0f64..2.0, ws in -2.0f64..2.0) {
                let b = SplineBasis::default();
                let zeros = vec![0.0; b.num_basis()];
                let want = wb * x / (1.0 + (-x).exp());
                prop_assert!((phi_eval(x, wb, ws, &zeros, &b) - want).abs() <= 1e-12);
            }
        }
    }
}
