//! Differentiable forward maps from an intermediate layer to the final hidden
//! state `λ`, with analytic and central-difference Jacobians.
//!
//! Two model families implement [`LayeredMap`]:
//!
//! - [`ToyAffineModel`]: one affine layer `h ↦ Wh + b` feeding the softmax head.
//! - [`ToyNetwork`]: a stack of residual MLP blocks (optionally pre-LN) and an
//!   optional final LayerNorm.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_finite_vec, singular_range, spectral_norm};
use crate::softmax::UnembeddingTable;
use crate::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    #[default]
    Analytic,
    CentralDiff,
}

/// A composition `f^{(ℓ)} = out ∘ layer_{L−1} ∘ … ∘ layer_ℓ` of per-layer maps.
///
/// Layer `L = num_layers()` is the final hidden state before the output map
/// (final LayerNorm or identity).
pub trait LayeredMap<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn table(&self) -> &UnembeddingTable<T>;
    fn apply_layer(&self, k: usize, h: &DVector<T>) -> Result<DVector<T>>;
    /// `A_k = ∂h^{(k+1)}/∂h^{(k)}`.
    fn layer_jacobian(&self, k: usize, h: &DVector<T>) -> Result<DMatrix<T>>;
    fn apply_output(&self, h: &DVector<T>) -> Result<DVector<T>>;
    fn output_jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>>;

    fn check_input(&self, layer: usize, h: &DVector<T>) -> Result<()> {
        if layer > self.num_layers() {
            return Err(Error::invalid(format!("layer {layer} exceeds depth {}", self.num_layers())));
        }
        if h.len() != self.dim() {
            return Err(Error::invalid(format!("hidden state of length {}, model width {}", h.len(), self.dim())));
        }
        if !is_finite_vec(h) {
            return Err(Error::invalid("hidden state has non-finite entries"));
        }
        Ok(())
    }

    /// `[h^{(layer)}, …, h^{(L)}]`.
    fn hidden_states(&self, layer: usize, h: &DVector<T>) -> Result<Vec<DVector<T>>> {
        self.check_input(layer, h)?;
        let mut states = Vec::with_capacity(self.num_layers() - layer + 1);
        states.push(h.clone());
        for k in layer..self.num_layers() {
            let next = self.apply_layer(k, states.last().expect("non-empty"))?;
            states.push(next);
        }
        Ok(states)
    }

    /// `λ = f^{(layer)}(h)`.
    fn forward_from(&self, layer: usize, h: &DVector<T>) -> Result<DVector<T>> {
        let states = self.hidden_states(layer, h)?;
        self.apply_output(states.last().expect("non-empty"))
    }

    /// `J = Df^{(layer)}(h)`.
    fn jacobian_from(&self, layer: usize, h: &DVector<T>, method: JacobianMethod) -> Result<DMatrix<T>> {
        match method {
            JacobianMethod::Analytic => {
                let states = self.hidden_states(layer, h)?;
                let mut j = self.output_jacobian(states.last().expect("non-empty"))?;
                for k in (layer..self.num_layers()).rev() {
                    j *= self.layer_jacobian(k, &states[k - layer])?;
                }
                Ok(j)
            }
            JacobianMethod::CentralDiff => {
                self.check_input(layer, h)?;
                central_diff_jacobian(h, |x| self.forward_from(layer, x))
            }
        }
    }
}

/// Central-difference Jacobian with step `1e-5 · max(1, ‖h‖_∞)`.
pub fn central_diff_jacobian<T, F>(h: &DVector<T>, f: F) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: Fn(&DVector<T>) -> Result<DVector<T>>,
{
    let inf = h.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    let eps = lit::<T>(1e-5) * inf.max(T::one());
    let mut cols = Vec::with_capacity(h.len());
    for j in 0..h.len() {
        let mut hp = h.clone();
        hp[j] += eps;
        let mut hm = h.clone();
        hm[j] -= eps;
        cols.push((f(&hp)? - f(&hm)?) / (eps + eps));
    }
    Ok(DMatrix::from_columns(&cols))
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar> {
    pub gain: DVector<T>,
    pub bias: DVector<T>,
}

fn centered<T: Scalar>(h: &DVector<T>) -> Result<(DVector<T>, T)> {
    let d = lit::<T>(h.len() as f64);
    let mean = h.sum() / d;
    let hbar = h.map(|x| x - mean);
    let sigma = hbar.norm() / d.sqrt();
    if !(sigma > lit(1e-12)) {
        return Err(Error::DegenerateInput(format!(
            "LayerNorm input has spread {:e}",
            to_f64(sigma)
        )));
    }
    Ok((hbar, sigma))
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(d: usize) -> Self {
        Self { gain: DVector::from_element(d, T::one()), bias: DVector::zeros(d) }
    }

    /// `γ ⊙ (h − μ𝟙)/σ + β` with `σ = ‖h − μ𝟙‖/√d` (no epsilon).
    pub fn apply(&self, h: &DVector<T>) -> Result<DVector<T>> {
        let (hbar, sigma) = centered(h)?;
        Ok((hbar / sigma).component_mul(&self.gain) + &self.bias)
    }

    pub fn jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>> {
        layernorm_jacobian(&self.gain, h)
    }
}

/// `J_LN = diag(γ/σ) (I − 𝟙𝟙ᵀ/d − h̄h̄ᵀ/‖h̄‖²)`; both `h` and `𝟙` lie in its kernel.
pub fn layernorm_jacobian<T: Scalar>(gain: &DVector<T>, h: &DVector<T>) -> Result<DMatrix<T>> {
    let d = h.len();
    let (hbar, sigma) = centered(h)?;
    let inv_d = T::one() / lit::<T>(d as f64);
    let nn = hbar.norm_squared();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let delta = if i == j { T::one() } else { T::zero() };
        gain[i] / sigma * (delta - inv_d - hbar[i] * hbar[j] / nn)
    }))
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    /// `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
    GeluTanh,
}

const GELU_C: f64 = 0.044_715;

impl Nonlinearity {
    pub fn value<T: Scalar>(self, x: T) -> T {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::GeluTanh => {
                let k = (lit::<T>(2.0) / T::pi()).sqrt();
                let t = (k * (x + lit::<T>(GELU_C) * x * x * x)).tanh();
                lit::<T>(0.5) * x * (T::one() + t)
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Nonlinearity::GeluTanh => {
                let k = (lit::<T>(2.0) / T::pi()).sqrt();
                let c = lit::<T>(GELU_C);
                let t = (k * (x + c * x * x * x)).tanh();
                let half = lit::<T>(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `h + F(h)`
    PlainMlp,
    /// `h + F(LN(h))`
    PreLnMlp,
}

/// `h ↦ h + W_out φ(W_in u + b_in) + b_out` with `u = h` or `u = LN(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Scalar> {
    pub kind: BlockKind,
    pub ln: LayerNorm<T>,
    /// `m × d`
    pub w_in: DMatrix<T>,
    pub b_in: DVector<T>,
    /// `d × m`
    pub w_out: DMatrix<T>,
    pub b_out: DVector<T>,
    pub nonlinearity: Nonlinearity,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.nrows()
    }

    fn validate(&self) -> Result<()> {
        let (d, m) = (self.dim(), self.hidden());
        let ok = self.w_in.ncols() == d
            && self.b_in.len() == m
            && self.w_out.ncols() == m
            && self.b_out.len() == d
            && self.ln.gain.len() == d
            && self.ln.bias.len() == d;
        if !ok {
            return Err(Error::invalid("residual block has inconsistent shapes"));
        }
        Ok(())
    }

    fn block_input(&self, h: &DVector<T>) -> Result<DVector<T>> {
        match self.kind {
            BlockKind::PlainMlp => Ok(h.clone()),
            BlockKind::PreLnMlp => self.ln.apply(h),
        }
    }

    pub fn apply(&self, h: &DVector<T>) -> Result<DVector<T>> {
        let u = self.block_input(h)?;
        let z = &self.w_in * u + &self.b_in;
        let act = z.map(|x| self.nonlinearity.value(x));
        Ok(h + &self.w_out * act + &self.b_out)
    }

    /// `B = A − I = DF · (J_LN or I)`.
    pub fn perturbation_jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>> {
        let u = self.block_input(h)?;
        let z = &self.w_in * u + &self.b_in;
        let mut scaled_in = self.w_in.clone();
        for (i, &zi) in z.iter().enumerate() {
            let s = self.nonlinearity.derivative(zi);
            scaled_in.row_mut(i).scale_mut(s);
        }
        let df = &self.w_out * scaled_in;
        Ok(match self.kind {
            BlockKind::PlainMlp => df,
            BlockKind::PreLnMlp => df * self.ln.jacobian(h)?,
        })
    }

    /// `A = I + DF · J_LN` (pre-LN) or `I + DF` (plain).
    pub fn jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>> {
        let b = self.perturbation_jacobian(h)?;
        Ok(b + DMatrix::identity(self.dim(), self.dim()))
    }

    /// `ρ = ‖A − I‖₂` at `h`.
    pub fn perturbation_norm(&self, h: &DVector<T>) -> Result<T> {
        Ok(spectral_norm(&self.perturbation_jacobian(h)?))
    }
}

/// Block Jacobian as a free function.
pub fn block_jacobian<T: Scalar>(block: &ResidualBlock<T>, h: &DVector<T>) -> Result<DMatrix<T>> {
    block.jacobian(h)
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork<T: Scalar> {
    blocks: Vec<ResidualBlock<T>>,
    final_ln: Option<LayerNorm<T>>,
    table: UnembeddingTable<T>,
}

impl<T: Scalar> ToyNetwork<T> {
    pub fn new(
        blocks: Vec<ResidualBlock<T>>,
        final_ln: Option<LayerNorm<T>>,
        table: UnembeddingTable<T>,
    ) -> Result<Self> {
        let d = table.dim();
        for (k, b) in blocks.iter().enumerate() {
            b.validate()?;
            if b.dim() != d {
                return Err(Error::invalid(format!("block {k} has width {}, table has {d}", b.dim())));
            }
        }
        if let Some(ln) = &final_ln {
            if ln.gain.len() != d || ln.bias.len() != d {
                return Err(Error::invalid("final LayerNorm width mismatch"));
            }
        }
        Ok(Self { blocks, final_ln, table })
    }

    pub fn blocks(&self) -> &[ResidualBlock<T>] {
        &self.blocks
    }

    pub fn final_ln(&self) -> Option<&LayerNorm<T>> {
        self.final_ln.as_ref()
    }

    /// Same blocks, different output head.
    pub fn with_table(mut self, table: UnembeddingTable<T>) -> Result<Self> {
        if table.dim() != self.table.dim() {
            return Err(Error::invalid("replacement table has a different width"));
        }
        self.table = table;
        Ok(self)
    }

    /// `ρ_k` at every layer along the trajectory from `h^{(0)} = h`.
    pub fn perturbation_norms(&self, h: &DVector<T>) -> Result<Vec<T>> {
        let states = self.hidden_states(0, h)?;
        self.blocks.iter().zip(&states).map(|(b, s)| b.perturbation_norm(s)).collect()
    }
}

impl<T: Scalar> LayeredMap<T> for ToyNetwork<T> {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    fn table(&self) -> &UnembeddingTable<T> {
        &self.table
    }

    fn apply_layer(&self, k: usize, h: &DVector<T>) -> Result<DVector<T>> {
        self.blocks[k].apply(h)
    }

    fn layer_jacobian(&self, k: usize, h: &DVector<T>) -> Result<DMatrix<T>> {
        self.blocks[k].jacobian(h)
    }

    fn apply_output(&self, h: &DVector<T>) -> Result<DVector<T>> {
        match &self.final_ln {
            Some(ln) => ln.apply(h),
            None => Ok(h.clone()),
        }
    }

    fn output_jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>> {
        match &self.final_ln {
            Some(ln) => ln.jacobian(h),
            None => Ok(DMatrix::identity(h.len(), h.len())),
        }
    }
}

/// `λ = W h + b` followed by the softmax head over `2d` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAffineModel<T: Scalar> {
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    table: UnembeddingTable<T>,
}

impl<T: Scalar> ToyAffineModel<T> {
    pub fn new(weight: DMatrix<T>, bias: DVector<T>, table: UnembeddingTable<T>) -> Result<Self> {
        let d = table.dim();
        if weight.nrows() != d || weight.ncols() != d || bias.len() != d {
            return Err(Error::invalid("affine model shapes do not match the table width"));
        }
        Ok(Self { weight, bias, table })
    }
}

impl<T: Scalar> LayeredMap<T> for ToyAffineModel<T> {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn num_layers(&self) -> usize {
        1
    }

    fn table(&self) -> &UnembeddingTable<T> {
        &self.table
    }

    fn apply_layer(&self, _k: usize, h: &DVector<T>) -> Result<DVector<T>> {
        Ok(&self.weight * h + &self.bias)
    }

    fn layer_jacobian(&self, _k: usize, _h: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.weight.clone())
    }

    fn apply_output(&self, h: &DVector<T>) -> Result<DVector<T>> {
        Ok(h.clone())
    }

    fn output_jacobian(&self, h: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(DMatrix::identity(h.len(), h.len()))
    }
}

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<T> {
    DMatrix::from_fn(r, c, |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal) * scale))
}

fn normal_vector<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<T> {
    DVector::from_fn(n, |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal) * scale))
}

/// Random affine toy model of width `d` over `2d` tokens.
///
/// Weight and bias entries are `N(0, 1/d)`; unembedding rows are standard
/// normal. Deterministic in `seed`.
pub fn make_toy_affine<T: Scalar>(d: usize, seed: u64) -> Result<ToyAffineModel<T>> {
    if d < 2 {
        return Err(Error::invalid("toy models need d ≥ 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let weight = normal_matrix(&mut rng, d, d, scale);
    let bias = normal_vector(&mut rng, d, scale);
    let table = UnembeddingTable::new(normal_matrix(&mut rng, 2 * d, d, 1.0))?;
    let (hi, lo) = singular_range(&weight);
    log::debug!(
        "toy affine d={d} seed={seed}: ‖W‖₂={:.3} κ(W)={:.3e}",
        to_f64(hi),
        to_f64(hi / lo)
    );
    ToyAffineModel::new(weight, bias, table)
}

/// Shape and initialisation of a random [`ToyNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub vocab: usize,
    pub kind: BlockKind,
    pub nonlinearity: Nonlinearity,
    /// MLP weights are `N(0, (scale²)/fan_in)`.
    pub weight_scale: f64,
    pub final_ln: bool,
    /// Standard deviation of LayerNorm gain/bias around `(1, 0)` and of MLP biases.
    pub jitter: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            hidden: 16,
            layers: 3,
            vocab: 24,
            kind: BlockKind::PreLnMlp,
            nonlinearity: Nonlinearity::GeluTanh,
            weight_scale: 0.3,
            final_ln: true,
            jitter: 0.1,
        }
    }
}

impl NetworkSpec {
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<ToyNetwork<T>> {
        if self.dim < 2 || self.hidden == 0 || self.vocab < 2 {
            return Err(Error::invalid("network spec needs dim ≥ 2, hidden ≥ 1, vocab ≥ 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (self.dim, self.hidden);
        let ln = |rng: &mut ChaCha8Rng| LayerNorm {
            gain: normal_vector::<T>(rng, d, self.jitter).add_scalar(T::one()),
            bias: normal_vector::<T>(rng, d, self.jitter),
        };
        let mut blocks = Vec::with_capacity(self.layers);
        for _ in 0..self.layers {
            let layer_norm = ln(&mut rng);
            blocks.push(ResidualBlock {
                kind: self.kind,
                ln: layer_norm,
                w_in: normal_matrix(&mut rng, m, d, self.weight_scale / (d as f64).sqrt()),
                b_in: normal_vector(&mut rng, m, self.jitter),
                w_out: normal_matrix(&mut rng, d, m, self.weight_scale / (m as f64).sqrt()),
                b_out: normal_vector(&mut rng, d, self.jitter),
                nonlinearity: self.nonlinearity,
            });
        }
        let final_ln = if self.final_ln { Some(ln(&mut rng)) } else { None };
        let table = UnembeddingTable::new(normal_matrix(&mut rng, self.vocab, d, 1.0))?;
        let net = ToyNetwork::new(blocks, final_ln, table)?;
        if log::log_enabled!(log::Level::Debug) {
            let probe = normal_vector::<T>(&mut rng, d, 1.0);
            if let Ok(rhos) = net.perturbation_norms(&probe) {
                let rhos: Vec<f64> = rhos.into_iter().map(to_f64).collect();
                log::debug!("network seed={seed}: ρ_k at a random input = {rhos:?}");
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frobenius;

    fn random_h(seed: u64, d: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_vector(&mut rng, d, 1.0)
    }

    fn zero_block(d: usize, m: usize, kind: BlockKind) -> ResidualBlock<f64> {
        ResidualBlock {
            kind,
            ln: LayerNorm::identity(d),
            w_in: DMatrix::zeros(m, d),
            b_in: DVector::zeros(m),
            w_out: DMatrix::zeros(d, m),
            b_out: DVector::zeros(d),
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    fn zero_net(d: usize, layers: usize) -> ToyNetwork<f64> {
        let table = UnembeddingTable::new(DMatrix::identity(2 * d, d)).unwrap();
        ToyNetwork::new((0..layers).map(|_| zero_block(d, 3, BlockKind::PreLnMlp)).collect(), None, table).unwrap()
    }

    #[test]
    fn zero_weight_net_is_identity() {
        let net = zero_net(5, 3);
        let h = random_h(1, 5);
        assert_eq!(net.forward_from(0, &h).unwrap(), h);
        assert_eq!(net.forward_from(3, &h).unwrap(), h);
        let j = net.jacobian_from(0, &h, JacobianMethod::Analytic).unwrap();
        assert_eq!(j, DMatrix::identity(5, 5));
        assert!(net.forward_from(4, &h).is_err());
        let mut bad = h.clone();
        bad[0] = f64::INFINITY;
        assert!(net.forward_from(0, &bad).is_err());
    }

    #[test]
    fn forward_matches_unrolled_blocks() {
        let spec = NetworkSpec { layers: 2, ..NetworkSpec::default() };
        let net: ToyNetwork<f64> = spec.build(7).unwrap();
        let h = random_h(2, spec.dim);
        let mut x = h.clone();
        for b in net.blocks() {
            let u = b.ln.apply(&x).unwrap();
            let z = &b.w_in * u + &b.b_in;
            let a = z.map(|v| Nonlinearity::GeluTanh.value(v));
            x = &x + &b.w_out * a + &b.b_out;
        }
        let lam = net.final_ln().unwrap().apply(&x).unwrap();
        assert!((net.forward_from(0, &h).unwrap() - lam).norm() < 1e-14);
    }

    #[test]
    fn affine_jacobian_is_weight() {
        let m: ToyAffineModel<f64> = make_toy_affine(4, 3).unwrap();
        assert_eq!(m.table().vocab_size(), 8);
        let h = random_h(3, 4);
        assert_eq!(m.jacobian_from(0, &h, JacobianMethod::Analytic).unwrap(), m.weight);
        let fd = m.jacobian_from(0, &h, JacobianMethod::CentralDiff).unwrap();
        assert!(rel_frobenius(&fd, &m.weight) < 1e-9);
    }

    #[test]
    fn toy_affine_is_deterministic() {
        let a: ToyAffineModel<f64> = make_toy_affine(6, 11).unwrap();
        let b: ToyAffineModel<f64> = make_toy_affine(6, 11).unwrap();
        assert_eq!(a, b);
        assert!(make_toy_affine::<f64>(1, 0).is_err());
        assert!(spectral_norm(&a.weight).is_finite());
    }

    #[test]
    fn layernorm_kernel_contains_h_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let h: DVector<f64> = normal_vector(&mut rng, 7, 2.0);
            let gain = normal_vector(&mut rng, 7, 0.5).add_scalar(1.0);
            let j = layernorm_jacobian(&gain, &h).unwrap();
            assert!((&j * &h).norm() <= 1e-10 * j.norm() * h.norm());
            assert!((&j * DVector::from_element(7, 1.0)).norm() <= 1e-10 * j.norm());
        }
    }

    #[test]
    fn layernorm_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: DVector<f64> = normal_vector(&mut rng, 6, 1.0);
        let ln = LayerNorm { gain: normal_vector(&mut rng, 6, 0.3).add_scalar(1.0), bias: normal_vector(&mut rng, 6, 0.3) };
        let fd = central_diff_jacobian(&h, |x| ln.apply(x)).unwrap();
        let an = ln.jacobian(&h).unwrap();
        assert!((fd - an).amax() < 1e-5);
    }

    #[test]
    fn layernorm_rejects_constant_input() {
        let h = DVector::from_element(4, 3.0);
        assert!(matches!(layernorm_jacobian(&DVector::from_element(4, 1.0), &h), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn preln_block_fixes_current_state() {
        let spec = NetworkSpec { layers: 1, weight_scale: 1.5, ..NetworkSpec::default() };
        let net: ToyNetwork<f64> = spec.build(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let h: DVector<f64> = normal_vector(&mut rng, spec.dim, 1.0);
            let a = net.blocks()[0].jacobian(&h).unwrap();
            assert!((&a * &h - &h).norm() <= 1e-9 * h.norm());
        }
        let zero = zero_block(4, 3, BlockKind::PreLnMlp);
        assert_eq!(zero.jacobian(&random_h(1, 4)).unwrap(), DMatrix::identity(4, 4));
    }

    #[test]
    fn block_jacobian_matches_finite_differences() {
        for kind in [BlockKind::PlainMlp, BlockKind::PreLnMlp] {
            for nl in [Nonlinearity::Tanh, Nonlinearity::GeluTanh] {
                let spec = NetworkSpec { layers: 1, kind, nonlinearity: nl, weight_scale: 1.0, ..NetworkSpec::default() };
                let net: ToyNetwork<f64> = spec.build(10).unwrap();
                let h = random_h(7, spec.dim);
                let b = &net.blocks()[0];
                let fd = central_diff_jacobian(&h, |x| b.apply(x)).unwrap();
                assert!(rel_frobenius(&fd, &b.jacobian(&h).unwrap()) < 1e-4);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (Nonlinearity::GeluTanh.value(x + e) - Nonlinearity::GeluTanh.value(x - e)) / (2.0 * e);
            assert!((fd - Nonlinearity::GeluTanh.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_and_central_diff_agree() {
        for d in [4, 8] {
            for seed in 0..5 {
                let spec = NetworkSpec { dim: d, hidden: 2 * d, vocab: 3 * d, ..NetworkSpec::default() };
                let net: ToyNetwork<f64> = spec.build(seed).unwrap();
                let h = random_h(100 + seed, d);
                let a = net.jacobian_from(0, &h, JacobianMethod::Analytic).unwrap();
                let c = net.jacobian_from(0, &h, JacobianMethod::CentralDiff).unwrap();
                assert!(rel_frobenius(&c, &a) < 1e-4);
            }
        }
    }

    #[test]
    fn jacobian_chain_rule_across_one_layer() {
        let spec = NetworkSpec { layers: 4, ..NetworkSpec::default() };
        let net: ToyNetwork<f64> = spec.build(12).unwrap();
        let h = random_h(8, spec.dim);
        for layer in 0..4 {
            let states = net.hidden_states(0, &h).unwrap();
            let hl = &states[layer];
            let j = net.jacobian_from(layer, hl, JacobianMethod::Analytic).unwrap();
            let next = net.jacobian_from(layer + 1, &states[layer + 1], JacobianMethod::Analytic).unwrap();
            let a = net.blocks()[layer].jacobian(hl).unwrap();
            assert!(rel_frobenius(&(next * a), &j) < 1e-8);
        }
    }

    #[test]
    fn generic_over_f32() {
        let m: ToyAffineModel<f32> = make_toy_affine(4, 1).unwrap();
        let h = DVector::from_element(4, 0.5f32);
        let j = m.jacobian_from(0, &h, JacobianMethod::Analytic).unwrap();
        assert_eq!(j.nrows(), 4);
        let net: ToyNetwork<f32> = NetworkSpec::default().build(3).unwrap();
        let lam = net.forward_from(0, &DVector::from_fn(8, |i, _| i as f32 * 0.1 - 0.3)).unwrap();
        assert!(lam.iter().all(|x| x.is_finite()));
    }
}
