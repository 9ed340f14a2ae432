//! Catalog of small differentiable models `f: Rᵈ → Rᶜ`, losses `ℓ: Rᶜ → R`,
//! finite datasets and the expected-loss objective built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, DiffConfig, DiffMode, GenericMap, Scalar};
use crate::error::{Error, Result};
use crate::tensor::{compose, compose_k, Tensor};

/// Pre-activations closer than this to a ReLU kink make a position unusable.
pub const KINK_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// `f = W_L relu(… relu(W₁ x))`, no biases; `widths = [n, h₁, …, c]`.
    HomogeneousReluMlp { widths: Vec<usize> },
    /// `f = W_L ⋯ W₁ x`; `widths = [n, h₁, …, c]`.
    DeepLinear { widths: Vec<usize> },
    /// `f = W h(θ')` with a bias-free tanh feature extractor
    /// `hidden[0] → hidden[1] → … → s`.
    FactoredLastLayer {
        c: usize,
        s: usize,
        hidden: Vec<usize>,
    },
    /// `f = θᵀx`.
    LinearProbe { n: usize },
    /// `f = exp(θᵀx)`.
    ExpProbe { n: usize },
    /// `f = x₁θ₁² + x₂θ₂ + x₃θ₁²θ₂`, even in `θ₁`.
    EvenQuadratic,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::HomogeneousReluMlp { .. } => "homogeneous_relu_mlp",
            Architecture::DeepLinear { .. } => "deep_linear",
            Architecture::FactoredLastLayer { .. } => "factored_last_layer",
            Architecture::LinearProbe { .. } => "linear_probe",
            Architecture::ExpProbe { .. } => "exp_probe",
            Architecture::EvenQuadratic => "even_quadratic",
        }
    }

    pub fn catalog_names() -> &'static [&'static str] {
        &[
            "homogeneous_relu_mlp",
            "deep_linear",
            "factored_last_layer",
            "linear_probe",
            "exp_probe",
            "even_quadratic",
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Input absorbed into the model; drawn from `seed` when absent.
    #[serde(default)]
    pub input: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input: Option<Vec<f64>>, seed: u64) -> Self {
        ModelSpec {
            architecture,
            input,
            seed,
        }
    }
}

/// A named contiguous parameter block. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub architecture: Architecture,
    pub input: Vec<f64>,
    pub layout: Vec<Block>,
    pub homogeneity_degree: Option<u32>,
    pub last_layer_block: Option<String>,
    /// Parameters drawn at construction from the `ModelSpec` seed.
    pub init: Vec<f64>,
    d: usize,
    c: usize,
}

fn matrix_blocks(prefix: &str, widths: &[usize], start: usize) -> Vec<Block> {
    let mut offset = start;
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let b = Block {
                name: format!("{prefix}{}", i + 1),
                shape: vec![w[1], w[0]],
                offset,
            };
            offset += w[0] * w[1];
            b
        })
        .collect()
}

fn check_widths(widths: &[usize], what: &str) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::SizeMismatch(format!(
            "{what} needs at least two positive widths, got {widths:?}"
        )));
    }
    Ok(())
}

/// Constructs a catalog model with deterministic initialization
/// (`uniform[-1,1]/√fan_in` per block) from the `ModelSpec` seed.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    let arch = spec.architecture.clone();
    let (layout, input_dim, c, m, last) = match &arch {
        Architecture::HomogeneousReluMlp { widths } | Architecture::DeepLinear { widths } => {
            check_widths(widths, arch.name())?;
            let blocks = matrix_blocks("W", widths, 0);
            let last = blocks.last().map(|b| b.name.clone());
            (
                blocks,
                widths[0],
                *widths.last().expect("checked"),
                Some((widths.len() - 1) as u32),
                last,
            )
        }
        Architecture::FactoredLastLayer { c, s, hidden } => {
            if *c == 0 || *s == 0 || hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::SizeMismatch(format!(
                    "factored_last_layer needs positive c, s and hidden widths, got c={c}, s={s}, hidden={hidden:?}"
                )));
            }
            let mut blocks = vec![Block {
                name: "W".into(),
                shape: vec![*c, *s],
                offset: 0,
            }];
            let mut widths = hidden.clone();
            widths.push(*s);
            blocks.extend(matrix_blocks("V", &widths, c * s));
            (blocks, hidden[0], *c, None, Some("W".to_string()))
        }
        Architecture::LinearProbe { n } | Architecture::ExpProbe { n } => {
            if *n == 0 {
                return Err(Error::SizeMismatch(format!("{} needs n ≥ 1", arch.name())));
            }
            let m = matches!(arch, Architecture::LinearProbe { .. }).then_some(1);
            (
                vec![Block {
                    name: "theta".into(),
                    shape: vec![*n],
                    offset: 0,
                }],
                *n,
                1,
                m,
                None,
            )
        }
        Architecture::EvenQuadratic => (
            vec![Block {
                name: "theta".into(),
                shape: vec![2],
                offset: 0,
            }],
            3,
            1,
            None,
            None,
        ),
    };
    let d = layout.iter().map(Block::len).sum();
    let input = match &spec.input {
        Some(x) => {
            if x.len() != input_dim {
                return Err(Error::SizeMismatch(format!(
                    "{} expects an input of length {input_dim}, got {}",
                    arch.name(),
                    x.len()
                )));
            }
            if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteEntry { index, value });
            }
            x.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1);
            (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };
    let mut model = Model {
        name: arch.name().to_string(),
        architecture: arch,
        input,
        layout,
        homogeneity_degree: m,
        last_layer_block: last,
        init: Vec::new(),
        d,
        c,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    model.init = model.sample_position(&mut rng)?;
    Ok(model)
}

/// `out[r] = Σ_c W[r, c] v[c]` for a row-major `rows×cols` block.
fn matvec<S: Scalar>(w: &[S], v: &[S], rows: usize, cols: usize) -> Vec<S> {
    (0..rows)
        .map(|r| {
            let mut acc = S::zero();
            for (k, &vk) in v.iter().enumerate().take(cols) {
                acc += w[r * cols + k] * vk;
            }
            acc
        })
        .collect()
}

impl Model {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::InvalidParams(format!("model {} has no block {name}", self.name)))
    }

    /// Same architecture and parameters layout with a different absorbed input.
    pub fn with_input(&self, input: &[f64]) -> Result<Model> {
        if input.len() != self.input.len() {
            return Err(Error::SizeMismatch(format!(
                "{} expects an input of length {}, got {}",
                self.name,
                self.input.len(),
                input.len()
            )));
        }
        let mut m = self.clone();
        m.input = input.to_vec();
        Ok(m)
    }

    pub fn forward_generic<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        let x: Vec<S> = self.input.iter().map(|&v| S::constant(v)).collect();
        match &self.architecture {
            Architecture::HomogeneousReluMlp { .. } | Architecture::DeepLinear { .. } => {
                let relu = matches!(self.architecture, Architecture::HomogeneousReluMlp { .. });
                let mut h = x;
                let last = self.layout.len() - 1;
                for (i, b) in self.layout.iter().enumerate() {
                    h = matvec(&theta[b.range()], &h, b.rows(), b.cols());
                    if relu && i < last {
                        h.iter_mut().for_each(|v| *v = v.relu());
                    }
                }
                h
            }
            Architecture::FactoredLastLayer { .. } => {
                let mut h = x;
                for b in &self.layout[1..] {
                    h = matvec(&theta[b.range()], &h, b.rows(), b.cols());
                    h.iter_mut().for_each(|v| *v = v.tanh());
                }
                let w = &self.layout[0];
                matvec(&theta[w.range()], &h, w.rows(), w.cols())
            }
            Architecture::LinearProbe { .. } | Architecture::ExpProbe { .. } => {
                let mut acc = S::zero();
                for (t, xi) in theta.iter().zip(&x) {
                    acc += *t * *xi;
                }
                if matches!(self.architecture, Architecture::ExpProbe { .. }) {
                    acc = acc.exp();
                }
                vec![acc]
            }
            Architecture::EvenQuadratic => {
                let sq = theta[0] * theta[0];
                vec![x[0] * sq + x[1] * theta[1] + x[2] * sq * theta[1]]
            }
        }
    }

    pub fn forward(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let y = self.forward_generic(theta);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResult(format!("{} forward pass", self.name)));
        }
        Ok(y)
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.d {
            return Err(Error::SizeMismatch(format!(
                "{} has {} parameters, got {}",
                self.name,
                self.d,
                theta.len()
            )));
        }
        if let Some((index, &value)) = theta.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteEntry { index, value });
        }
        Ok(())
    }

    /// Penultimate representation `h` with `f = W h` for models that declare
    /// a last-layer block.
    pub fn last_layer_features(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut h = self.input.clone();
        match &self.architecture {
            Architecture::HomogeneousReluMlp { .. } | Architecture::DeepLinear { .. } => {
                let relu = matches!(self.architecture, Architecture::HomogeneousReluMlp { .. });
                for b in &self.layout[..self.layout.len() - 1] {
                    h = matvec(&theta[b.range()], &h, b.rows(), b.cols());
                    if relu {
                        h.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
            }
            Architecture::FactoredLastLayer { .. } => {
                for b in &self.layout[1..] {
                    h = matvec(&theta[b.range()], &h, b.rows(), b.cols());
                    h.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            _ => {
                return Err(Error::NotFactoredModel(format!(
                    "{} has no last-layer block",
                    self.name
                )))
            }
        }
        Ok(h)
    }

    /// Smallest `|pre-activation|` over ReLU units; `None` for smooth models.
    pub fn kink_distance(&self, theta: &[f64]) -> Option<f64> {
        if !matches!(self.architecture, Architecture::HomogeneousReluMlp { .. }) {
            return None;
        }
        let mut h = self.input.clone();
        let mut closest = f64::INFINITY;
        let last = self.layout.len() - 1;
        for b in &self.layout[..last] {
            h = matvec(&theta[b.range()], &h, b.rows(), b.cols());
            for v in h.iter_mut() {
                closest = closest.min(v.abs());
                *v = v.max(0.0);
            }
        }
        Some(closest)
    }

    pub fn is_off_kink(&self, theta: &[f64]) -> bool {
        self.kink_distance(theta).is_none_or(|k| k >= KINK_MARGIN)
    }

    /// Draws `uniform[-1,1]/√fan_in` per block, resampling positions that
    /// land within [`KINK_MARGIN`] of a ReLU kink.
    pub fn sample_position(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        for _ in 0..1000 {
            let mut theta = vec![0.0; self.d];
            for b in &self.layout {
                let scale = 1.0 / (b.cols() as f64).sqrt();
                for v in &mut theta[b.range()] {
                    *v = scale * rng.random_range(-1.0..1.0);
                }
            }
            if self.is_off_kink(&theta) {
                return Ok(theta);
            }
        }
        Err(Error::NotGoodPosition(format!(
            "could not draw an off-kink position for {}",
            self.name
        )))
    }
}

impl GenericMap for Model {
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.c
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.forward_generic(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// `½‖y − t‖²`.
    Square,
    /// `exp(−ŷ y)` with label `ŷ ∈ {−1, +1}`.
    Exponential,
    /// `ln(1 + exp(−ŷ y))` with label `ŷ ∈ {−1, +1}`.
    Logistic,
    /// `logsumexp(y) − ⟨t, y⟩` for a probability vector `t`.
    SoftmaxCrossEntropy,
}

impl LossFamily {
    pub fn name(&self) -> &'static str {
        match self {
            LossFamily::Square => "square",
            LossFamily::Exponential => "exponential",
            LossFamily::Logistic => "logistic",
            LossFamily::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LossFamily::Exponential | LossFamily::Logistic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Loss {
    pub family: LossFamily,
    pub target: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(y: &[f64]) -> Vec<f64> {
    let top = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Loss {
    pub fn new(family: LossFamily, target: Vec<f64>) -> Result<Loss> {
        let loss = Loss { family, target };
        loss.validate()?;
        Ok(loss)
    }

    pub fn square(target: &[f64]) -> Loss {
        Loss {
            family: LossFamily::Square,
            target: target.to_vec(),
        }
    }

    pub fn exponential(label: f64) -> Loss {
        Loss {
            family: LossFamily::Exponential,
            target: vec![label],
        }
    }

    pub fn logistic(label: f64) -> Loss {
        Loss {
            family: LossFamily::Logistic,
            target: vec![label],
        }
    }

    pub fn softmax_class(c: usize, class: usize) -> Loss {
        let mut t = vec![0.0; c];
        t[class] = 1.0;
        Loss {
            family: LossFamily::SoftmaxCrossEntropy,
            target: t,
        }
    }

    pub fn c(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() || self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "{} loss needs a finite non-empty target",
                self.family.name()
            )));
        }
        match self.family {
            LossFamily::Square => Ok(()),
            LossFamily::Exponential | LossFamily::Logistic => {
                if self.target.len() != 1 || self.target[0].abs() != 1.0 {
                    return Err(Error::InvalidParams(format!(
                        "{} loss takes a single label in {{-1, +1}}, got {:?}",
                        self.family.name(),
                        self.target
                    )));
                }
                Ok(())
            }
            LossFamily::SoftmaxCrossEntropy => {
                let sum: f64 = self.target.iter().sum();
                if self.target.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParams(format!(
                        "softmax cross-entropy target must be a probability vector, got {:?}",
                        self.target
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn eval_generic<S: Scalar>(&self, y: &[S]) -> S {
        match self.family {
            LossFamily::Square => {
                let mut acc = S::zero();
                for (v, t) in y.iter().zip(&self.target) {
                    acc += (*v - *t).square();
                }
                acc * 0.5
            }
            LossFamily::Exponential => (-(y[0] * self.target[0])).exp(),
            LossFamily::Logistic => (-(y[0] * self.target[0])).softplus(),
            LossFamily::SoftmaxCrossEntropy => {
                let top = y.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
                let mut z = S::zero();
                for v in y {
                    z += (*v - top).exp();
                }
                let mut lin = S::zero();
                for (v, t) in y.iter().zip(&self.target) {
                    lin += *v * *t;
                }
                z.ln() + top - lin
            }
        }
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.eval_generic(y)
    }

    /// Analytic `∇ℓ(y)`, shape `(c)`.
    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match self.family {
            LossFamily::Square => y.iter().zip(&self.target).map(|(v, t)| v - t).collect(),
            LossFamily::Exponential => {
                let l = self.value(y);
                vec![-self.target[0] * l]
            }
            LossFamily::Logistic => {
                let s = sigmoid(-self.target[0] * y[0]);
                vec![-self.target[0] * s]
            }
            LossFamily::SoftmaxCrossEntropy => softmax(y)
                .iter()
                .zip(&self.target)
                .map(|(p, t)| p - t)
                .collect(),
        }
    }

    /// Analytic `∇²ℓ(y)`, shape `(c, c)` row-major.
    pub fn hess(&self, y: &[f64]) -> Vec<f64> {
        let c = self.c();
        match self.family {
            LossFamily::Square => {
                let mut h = vec![0.0; c * c];
                (0..c).for_each(|i| h[i * c + i] = 1.0);
                h
            }
            LossFamily::Exponential => vec![self.target[0].powi(2) * self.value(y)],
            LossFamily::Logistic => {
                let s = sigmoid(-self.target[0] * y[0]);
                vec![self.target[0].powi(2) * s * (1.0 - s)]
            }
            LossFamily::SoftmaxCrossEntropy => {
                let p = softmax(y);
                let mut h = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        h[i * c + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                    }
                }
                h
            }
        }
    }

    pub fn grad_tensor(&self, y: &[f64]) -> Tensor {
        Tensor::vector(&self.grad(y))
    }

    pub fn hess_tensor(&self, y: &[f64]) -> Tensor {
        let c = self.c();
        Tensor::from_vec([c, c], self.hess(y)).expect("c×c data")
    }
}

/// A loss viewed as a map `Rᶜ → R`, for differentiating it directly.
impl GenericMap for Loss {
    fn input_dim(&self) -> usize {
        self.c()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        vec![self.eval_generic(x)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Finite distribution `μ` over `(input, target)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub weights: Vec<f64>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, weights: Vec<f64>) -> Result<Dataset> {
        let ds = Dataset { samples, weights };
        ds.validate()?;
        Ok(ds)
    }

    pub fn uniform(samples: Vec<Sample>) -> Result<Dataset> {
        let n = samples.len();
        Dataset::new(samples, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidParams("dataset is empty".into()));
        }
        if self.samples.len() != self.weights.len() {
            return Err(Error::SizeMismatch(format!(
                "{} samples but {} weights",
                self.samples.len(),
                self.weights.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "weights must be nonnegative and sum to 1, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Expected loss `L(θ) = Σ_x μ(x) ℓ_x(f_x(θ))` over a finite dataset.
#[derive(Debug, Clone)]
pub struct Objective {
    pub model: Model,
    pub family: LossFamily,
    pub dataset: Dataset,
    terms: Vec<(Model, Loss)>,
}

impl Objective {
    pub fn new(model: &Model, family: LossFamily, dataset: &Dataset) -> Result<Objective> {
        dataset.validate()?;
        let terms = dataset
            .samples
            .iter()
            .map(|s| {
                let m = model.with_input(&s.input)?;
                let l = Loss::new(family, s.target.clone())?;
                if l.c() != m.c() {
                    return Err(Error::SizeMismatch(format!(
                        "model output dimension {} but target length {}",
                        m.c(),
                        l.c()
                    )));
                }
                Ok((m, l))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Objective {
            model: model.clone(),
            family,
            dataset: dataset.clone(),
            terms,
        })
    }

    /// The single-sample objective `ℓ ∘ f` at the model's own input.
    pub fn single(model: &Model, loss: &Loss) -> Result<Objective> {
        let ds = Dataset::new(
            vec![Sample {
                input: model.input.clone(),
                target: loss.target.clone(),
            }],
            vec![1.0],
        )?;
        Objective::new(model, loss.family, &ds)
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    pub fn terms(&self) -> &[(Model, Loss)] {
        &self.terms
    }

    /// Per-sample objective for sample `i`.
    pub fn sample_objective(&self, i: usize) -> Result<Objective> {
        let (m, l) = self
            .terms
            .get(i)
            .ok_or_else(|| Error::IndexOutOfRange(format!("sample {i}")))?;
        Objective::single(m, l)
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(diff::value(self, theta)?[0])
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(diff::jacobian(self, theta)?.into_data())
    }

    pub fn hessian(&self, theta: &[f64]) -> Result<Tensor> {
        let d = self.d();
        diff::second_derivative(self, theta)?.reshape([d, d])
    }

    /// Value, gradient and Hessian from one set of sweeps.
    pub fn value_grad_hess(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, Tensor)> {
        let d = self.d();
        let all = diff::derivatives(self, theta)?;
        Ok((
            all.value[0],
            all.jacobian.into_data(),
            all.hessian.reshape([d, d])?,
        ))
    }

    pub fn is_off_kink(&self, theta: &[f64]) -> bool {
        self.terms.iter().all(|(m, _)| m.is_off_kink(theta))
    }
}

impl GenericMap for Objective {
    fn input_dim(&self) -> usize {
        self.model.d()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut acc = S::zero();
        for ((m, l), &w) in self.terms.iter().zip(&self.dataset.weights) {
            acc += l.eval_generic(&m.forward_generic(x)) * w;
        }
        vec![acc]
    }
}

/// `L(θ) = Σ μ(x) L_x(θ)` for the given model architecture and dataset.
pub fn expected_loss(model: &Model, family: LossFamily, dataset: &Dataset, theta: &[f64]) -> Result<f64> {
    model.check_theta(theta)?;
    let obj = Objective::new(model, family, dataset)?;
    let v = obj.value(theta)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteResult("expected loss".into()));
    }
    Ok(v)
}

/// First and second derivatives of `L = ℓ ∘ f` together with the model and
/// loss pieces they are assembled from.
#[derive(Debug, Clone)]
pub struct LossDerivatives {
    pub value: f64,
    /// `∇L`, shape `(d)`.
    pub gradient: Tensor,
    /// `∇²L`, shape `(d, d)`, differentiated directly.
    pub hessian: Tensor,
    /// `y = f(θ)`.
    pub output: Vec<f64>,
    /// `∇f`, shape `(d, c)`.
    pub model_jacobian: Tensor,
    /// `∇²f`, shape `(d, d, c)`.
    pub model_hessian: Tensor,
    /// `∇ℓ(y)`, shape `(c)`.
    pub loss_grad: Tensor,
    /// `∇²ℓ(y)`, shape `(c, c)`.
    pub loss_hess: Tensor,
    /// Relative gap between the assembled and direct Hessians.
    pub assembly_error: f64,
}

/// Tolerance on the agreement between `∇²ℓ∘∇f∘₂∇f + ∇ℓ∘∇²f` and the
/// directly differentiated Hessian.
pub fn assembly_tolerance(mode: DiffMode) -> f64 {
    match mode {
        DiffMode::Exact => 1e-10,
        DiffMode::FiniteDifference => 1e-4,
    }
}

/// `L`, `∇L` and `∇²L` for `ℓ ∘ f`. The Hessian is computed both directly and
/// through the chain and product rules; disagreement beyond
/// [`assembly_tolerance`] is an [`Error::InconsistentDerivatives`].
pub fn grad_and_hessian_of_loss(
    model: &Model,
    loss: &Loss,
    theta: &[f64],
    config: &DiffConfig,
) -> Result<LossDerivatives> {
    config.validate()?;
    model.check_theta(theta)?;
    if loss.c() != model.c() {
        return Err(Error::SizeMismatch(format!(
            "model output dimension {} but loss input dimension {}",
            model.c(),
            loss.c()
        )));
    }
    let obj = Objective::single(model, loss)?;
    let d = model.d();
    let y = model.forward(theta)?;
    let (jf, hf) = match config.mode {
        DiffMode::Exact => {
            let all = diff::derivatives(model, theta)?;
            (all.jacobian, all.hessian)
        }
        DiffMode::FiniteDifference => (
            config.jacobian(model, theta)?,
            config.second_derivative(model, theta)?,
        ),
    };
    let (value, gradient, hessian) = match config.mode {
        DiffMode::Exact => {
            let (v, g, h) = obj.value_grad_hess(theta)?;
            (v, Tensor::vector(&g), h)
        }
        DiffMode::FiniteDifference => (
            obj.value(theta)?,
            config.jacobian(&obj, theta)?.reshape([d])?,
            config.second_derivative(&obj, theta)?.reshape([d, d])?,
        ),
    };
    let lg = loss.grad_tensor(&y);
    let lh = loss.hess_tensor(&y);
    let gauss = compose_k(&compose(&lh, &jf)?, &jf, 2)?;
    let curvature = compose(&lg, &hf)?;
    let assembled = gauss.add(&curvature)?;
    let floor = hessian
        .norm()
        .max(assembled.norm())
        .max(gauss.norm() + curvature.norm())
        .max(1e-300);
    let assembly_error = assembled.distance(&hessian)? / floor;
    if !(assembly_error <= assembly_tolerance(config.mode)) {
        return Err(Error::InconsistentDerivatives(format!(
            "assembled and direct Hessians differ by {assembly_error:e} relative"
        )));
    }
    Ok(LossDerivatives {
        value,
        gradient,
        hessian,
        output: y,
        model_jacobian: jf,
        model_hessian: hf,
        loss_grad: lg,
        loss_hess: lh,
        assembly_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(x: &[f64]) -> Model {
        build_model(&ModelSpec::new(
            Architecture::LinearProbe { n: x.len() },
            Some(x.to_vec()),
            0,
        ))
        .unwrap()
    }

    #[test]
    fn relu_mlp_hand_forward_pass() {
        let m = build_model(&ModelSpec::new(
            Architecture::HomogeneousReluMlp {
                widths: vec![2, 2, 1],
            },
            Some(vec![1.0, 1.0]),
            0,
        ))
        .unwrap();
        assert_eq!(m.d(), 6);
        assert_eq!(m.homogeneity_degree, Some(2));
        let theta = [1.0, -1.0, 2.0, 0.0, 1.0, 1.0];
        assert_eq!(m.forward(&theta).unwrap(), vec![2.0]);
        let doubled: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        assert_eq!(m.forward(&doubled).unwrap(), vec![8.0]);
    }

    #[test]
    fn linear_probe_forward_and_loss() {
        let m = probe(&[1.0, 2.0]);
        assert_eq!(m.forward(&[3.0, -1.0]).unwrap(), vec![1.0]);
        let ds = Dataset::uniform(vec![Sample {
            input: vec![1.0, 2.0],
            target: vec![2.0],
        }])
        .unwrap();
        let l = expected_loss(&m, LossFamily::Square, &ds, &[3.0, -1.0]).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        for arch in [
            Architecture::HomogeneousReluMlp {
                widths: vec![3, 4, 2],
            },
            Architecture::DeepLinear {
                widths: vec![2, 3, 3, 2],
            },
        ] {
            let m = build_model(&ModelSpec::new(arch, None, 4)).unwrap();
            assert!(m.forward(&vec![0.0; m.d()]).unwrap().iter().all(|v| *v == 0.0));
        }
        let f = build_model(&ModelSpec::new(
            Architecture::FactoredLastLayer {
                c: 3,
                s: 2,
                hidden: vec![2, 3],
            },
            None,
            1,
        ))
        .unwrap();
        let mut theta = f.init.clone();
        theta[f.block("W").unwrap().range()].fill(0.0);
        assert!(f.forward(&theta).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_sizes_are_rejected() {
        let bad = ModelSpec::new(Architecture::DeepLinear { widths: vec![3] }, None, 0);
        assert!(matches!(build_model(&bad), Err(Error::SizeMismatch(_))));
        let wrong_input = ModelSpec::new(Architecture::LinearProbe { n: 2 }, Some(vec![1.0]), 0);
        assert!(matches!(build_model(&wrong_input), Err(Error::SizeMismatch(_))));
        let json = r#"{"architecture": {"kind": "transformer"}, "seed": 1}"#;
        assert!(serde_json::from_str::<ModelSpec>(json).is_err());
    }

    #[test]
    fn initialization_is_deterministic() {
        let spec = ModelSpec::new(
            Architecture::HomogeneousReluMlp {
                widths: vec![3, 5, 1],
            },
            None,
            11,
        );
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a.init, b.init);
        assert_eq!(a.input, b.input);
        assert!(a.is_off_kink(&a.init));
        for (blk, bound) in a.layout.iter().map(|b| (b, 1.0 / (b.cols() as f64).sqrt())) {
            assert!(a.init[blk.range()].iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn hand_loss_derivatives() {
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[2.0]);
        let r = grad_and_hessian_of_loss(&m, &loss, &[3.0, -1.0], &DiffConfig::exact()).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.gradient.data(), &[-1.0, -2.0]);
        assert_eq!(r.hessian.data(), &[1.0, 2.0, 2.0, 4.0]);
        let fd = grad_and_hessian_of_loss(&m, &loss, &[3.0, -1.0], &DiffConfig::finite_difference())
            .unwrap();
        assert!(fd.gradient.distance(&r.gradient).unwrap() < 1e-8);
        assert!(fd.hessian.distance(&r.hessian).unwrap() < 1e-5);
    }

    #[test]
    fn stationary_point_of_convex_quadratic() {
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[1.0]);
        let r = grad_and_hessian_of_loss(&m, &loss, &[3.0, -1.0], &DiffConfig::exact()).unwrap();
        assert_eq!(r.gradient.norm(), 0.0);
    }

    #[test]
    fn loss_families_validate_targets() {
        assert!(Loss::new(LossFamily::Exponential, vec![0.5]).is_err());
        assert!(Loss::new(LossFamily::SoftmaxCrossEntropy, vec![0.5, 0.6]).is_err());
        assert!(Loss::new(LossFamily::Logistic, vec![-1.0]).is_ok());
    }

    #[test]
    fn softmax_hessian_rows_sum_to_zero() {
        let loss = Loss::softmax_class(3, 1);
        let h = loss.hess(&[0.3, -1.2, 2.0]);
        for i in 0..3 {
            assert!(h[i * 3..i * 3 + 3].iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn dataset_weights_must_sum_to_one() {
        let s = Sample {
            input: vec![1.0],
            target: vec![0.0],
        };
        assert!(Dataset::new(vec![s.clone(), s.clone()], vec![0.5, 0.6]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
        let two = Dataset::uniform(vec![s.clone(), s.clone()]).unwrap();
        let one = Dataset::uniform(vec![s]).unwrap();
        let m = probe(&[1.0]);
        assert_eq!(
            expected_loss(&m, LossFamily::Square, &two, &[0.7]).unwrap(),
            expected_loss(&m, LossFamily::Square, &one, &[0.7]).unwrap()
        );
    }
}
