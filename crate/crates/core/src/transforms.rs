//! Parameter/output transformation pairs `(H, G)` with all first and second
//! partial derivatives, characteristic directions and outputs, good-position
//! checks, fixed-point projection and Noether charges.
//!
//! Derivative tensors put input axes first and the output axis last:
//! `∇θH: (d, d)`, `∇λH: (p, d)`, `∇θ²H: (d, d, d)`, `∇λ∇θH: (p, d, d)`,
//! `∇λ²H: (p, p, d)`, and likewise for `G` with `y ∈ Rᶜ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::fd_oracle_fn;
use crate::error::{Error, Result};
use crate::linalg::{expm, matmul};
use crate::models::{Architecture, Block, Model};
use crate::tensor::{compose, dot, invert_square, reciprocal_condition, Tensor, SINGULAR_RCOND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivSlot {
    HTheta,
    HLambda,
    HTheta2,
    HLambdaTheta,
    HLambda2,
    GY,
    GLambda,
    GY2,
    GLambdaY,
    GLambda2,
}

impl DerivSlot {
    pub const ALL: [DerivSlot; 10] = [
        DerivSlot::HTheta,
        DerivSlot::HLambda,
        DerivSlot::HTheta2,
        DerivSlot::HLambdaTheta,
        DerivSlot::HLambda2,
        DerivSlot::GY,
        DerivSlot::GLambda,
        DerivSlot::GY2,
        DerivSlot::GLambdaY,
        DerivSlot::GLambda2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DerivSlot::HTheta => "dH_dtheta",
            DerivSlot::HLambda => "dH_dlambda",
            DerivSlot::HTheta2 => "d2H_dtheta2",
            DerivSlot::HLambdaTheta => "d2H_dlambda_dtheta",
            DerivSlot::HLambda2 => "d2H_dlambda2",
            DerivSlot::GY => "dG_dy",
            DerivSlot::GLambda => "dG_dlambda",
            DerivSlot::GY2 => "d2G_dy2",
            DerivSlot::GLambdaY => "d2G_dlambda_dy",
            DerivSlot::GLambda2 => "d2G_dlambda2",
        }
    }

    pub fn is_h(&self) -> bool {
        matches!(
            self,
            DerivSlot::HTheta
                | DerivSlot::HLambda
                | DerivSlot::HTheta2
                | DerivSlot::HLambdaTheta
                | DerivSlot::HLambda2
        )
    }

    pub fn order(&self) -> usize {
        match self {
            DerivSlot::HTheta | DerivSlot::HLambda | DerivSlot::GY | DerivSlot::GLambda => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// `H = e^λ θ`, `G = e^{mλ} y`.
    HomogeneityScaling { m: u32 },
    /// `H = (e^λ W₁, e^{−λ} W₂)`, `G = Id`.
    LayerRescaling { block1: String, block2: String },
    /// `H = (e^{λρ} W₁, e^{−λρ} W₂)` with `ρ = 1ᵀW₂W₁1`, `G = Id`.
    ModulatedRescaling { block1: String, block2: String },
    /// `H = (e^{λA} W_in, W_out e^{−λA})`, `G = Id`.
    LinearReparam {
        block_in: String,
        block_out: String,
        generator: Vec<Vec<f64>>,
    },
    /// `H = ((I + Λ) W, θ')`, `G = (I + Λ) y`, `Λ = reshape(λ, c×c)`.
    LastLayerLeftAction,
    /// `H = e^λ (θ + λ (aᵀθ)² v)`, `G = e^λ y`, for a linear probe with `v ⊥ x`.
    ShearedScaling { a: Vec<f64>, v: Vec<f64> },
    /// `H = e^λ θ`, `G = y^{e^{mλ}}`, for `f = exp(m-homogeneous)`.
    LogHomogeneityScaling { m: u32 },
    /// `θ ↦ (I − 2OOᵀ) θ` for `O` with orthonormal columns.
    Mirror { columns: Vec<Vec<f64>> },
    /// Negates whole parameter blocks.
    SignFlip { blocks: Vec<String> },
    /// Negates hidden unit `unit`: row of `block_in`, column of `block_out`.
    UnitSignFlip {
        block_in: String,
        block_out: String,
        unit: usize,
    },
    /// Swaps hidden units `i` and `j` between `block_in` and `block_out`.
    Permutation {
        block_in: String,
        block_out: String,
        i: usize,
        j: usize,
    },
}

impl TransformSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TransformSpec::HomogeneityScaling { .. } => "homogeneity_scaling",
            TransformSpec::LayerRescaling { .. } => "layer_rescaling",
            TransformSpec::ModulatedRescaling { .. } => "modulated_rescaling",
            TransformSpec::LinearReparam { .. } => "linear_reparam",
            TransformSpec::LastLayerLeftAction => "last_layer_left_action",
            TransformSpec::ShearedScaling { .. } => "sheared_scaling",
            TransformSpec::LogHomogeneityScaling { .. } => "log_homogeneity_scaling",
            TransformSpec::Mirror { .. } => "mirror",
            TransformSpec::SignFlip { .. } => "sign_flip",
            TransformSpec::UnitSignFlip { .. } => "unit_sign_flip",
            TransformSpec::Permutation { .. } => "permutation",
        }
    }

    pub fn catalog_names() -> &'static [&'static str] {
        &[
            "homogeneity_scaling",
            "layer_rescaling",
            "modulated_rescaling",
            "linear_reparam",
            "last_layer_left_action",
            "sheared_scaling",
            "log_homogeneity_scaling",
            "mirror",
            "sign_flip",
            "unit_sign_flip",
            "permutation",
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Continuous,
    Discrete,
}

/// Linear representation `x ↦ M(λ) x` on `Rⁿ`.
#[derive(Debug, Clone, PartialEq)]
enum Rep {
    /// `M = diag(e^{rᵢλ})`, `p = 1`.
    DiagExp(Vec<f64>),
    /// `e^{λA}` on the rows of `w_in`, `e^{−λA}` on the columns of `w_out`.
    Reparam {
        n: usize,
        w_in: Block,
        w_out: Block,
        a: Vec<f64>,
    },
    /// `I + Λ` on the rows of one `c×s` block, `p = c²`.
    LeftAction { n: usize, block: Block },
}

/// `M`, `∂ₐM` and `∂ₐ∂_bM`, each row-major `n×n` with `out = M·in`.
struct Mats {
    m: Vec<f64>,
    dm: Vec<Vec<f64>>,
    /// `None` when every second λ-derivative vanishes.
    ddm: Option<Vec<Vec<Vec<f64>>>>,
}

impl Rep {
    fn n(&self) -> usize {
        match self {
            Rep::DiagExp(r) => r.len(),
            Rep::Reparam { n, .. } | Rep::LeftAction { n, .. } => *n,
        }
    }

    fn p(&self) -> usize {
        match self {
            Rep::DiagExp(_) | Rep::Reparam { .. } => 1,
            Rep::LeftAction { block, .. } => block.rows() * block.rows(),
        }
    }

    fn reparam_matrix(n: usize, w_in: &Block, w_out: &Block, e: &[f64], f: &[f64], ident: f64) -> Vec<f64> {
        let h = w_in.rows();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            if !w_in.range().contains(&i) && !w_out.range().contains(&i) {
                m[i * n + i] = ident;
            }
        }
        let s_in = w_in.cols();
        for r in 0..h {
            for s in 0..s_in {
                let out = w_in.offset + r * s_in + s;
                for t in 0..h {
                    m[out * n + w_in.offset + t * s_in + s] = e[r * h + t];
                }
            }
        }
        let rows_out = w_out.rows();
        for r in 0..rows_out {
            for s in 0..h {
                let out = w_out.offset + r * h + s;
                for t in 0..h {
                    m[out * n + w_out.offset + r * h + t] = f[t * h + s];
                }
            }
        }
        m
    }

    fn mats(&self, lambda: &[f64]) -> Mats {
        let n = self.n();
        match self {
            Rep::DiagExp(rates) => {
                let l = lambda[0];
                let mut m = vec![0.0; n * n];
                let mut dm = vec![0.0; n * n];
                let mut ddm = vec![0.0; n * n];
                for (i, r) in rates.iter().enumerate() {
                    let e = (r * l).exp();
                    m[i * n + i] = e;
                    dm[i * n + i] = r * e;
                    ddm[i * n + i] = r * r * e;
                }
                Mats {
                    m,
                    dm: vec![dm],
                    ddm: Some(vec![vec![ddm]]),
                }
            }
            Rep::Reparam { w_in, w_out, a, .. } => {
                let h = w_in.rows();
                let l = lambda[0];
                let la: Vec<f64> = a.iter().map(|v| v * l).collect();
                let nla: Vec<f64> = la.iter().map(|v| -v).collect();
                let e = expm(&la, h);
                let f = expm(&nla, h);
                let a2 = matmul(a, a, h);
                let ae = matmul(a, &e, h);
                let naf: Vec<f64> = matmul(a, &f, h).iter().map(|v| -v).collect();
                let a2e = matmul(&a2, &e, h);
                let a2f = matmul(&a2, &f, h);
                Mats {
                    m: Rep::reparam_matrix(n, w_in, w_out, &e, &f, 1.0),
                    dm: vec![Rep::reparam_matrix(n, w_in, w_out, &ae, &naf, 0.0)],
                    ddm: Some(vec![vec![Rep::reparam_matrix(n, w_in, w_out, &a2e, &a2f, 0.0)]]),
                }
            }
            Rep::LeftAction { block, .. } => {
                let c = block.rows();
                let s = block.cols();
                let mut m = vec![0.0; n * n];
                (0..n).for_each(|i| m[i * n + i] = 1.0);
                for r in 0..c {
                    for t in 0..c {
                        for col in 0..s {
                            let out = block.offset + r * s + col;
                            let inp = block.offset + t * s + col;
                            m[out * n + inp] += lambda[r * c + t];
                        }
                    }
                }
                let dm = (0..c * c)
                    .map(|q| {
                        let (r, t) = (q / c, q % c);
                        let mut g = vec![0.0; n * n];
                        for col in 0..s {
                            g[(block.offset + r * s + col) * n + block.offset + t * s + col] = 1.0;
                        }
                        g
                    })
                    .collect();
                Mats { m, dm, ddm: None }
            }
        }
    }

    fn apply(&self, x: &[f64], lambda: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mats = self.mats(lambda);
        (0..n).map(|j| dot(&mats.m[j * n..(j + 1) * n], x)).collect()
    }

    fn derivative(&self, slot_order: SlotKind, x: &[f64], lambda: &[f64]) -> Tensor {
        let n = self.n();
        let p = self.p();
        let mats = self.mats(lambda);
        let mv = |m: &[f64]| -> Vec<f64> { (0..n).map(|j| dot(&m[j * n..(j + 1) * n], x)).collect() };
        let transpose = |m: &[f64]| -> Vec<f64> {
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    t[i * n + j] = m[j * n + i];
                }
            }
            t
        };
        let build = |shape: Vec<usize>, data: Vec<f64>| Tensor::from_vec(shape, data).expect("sized by construction");
        match slot_order {
            SlotKind::X => build(vec![n, n], transpose(&mats.m)),
            SlotKind::Lambda => build(vec![p, n], mats.dm.iter().flat_map(|m| mv(m)).collect()),
            SlotKind::X2 => Tensor::zeros([n, n, n]),
            SlotKind::LambdaX => build(vec![p, n, n], mats.dm.iter().flat_map(|m| transpose(m)).collect()),
            SlotKind::Lambda2 => match &mats.ddm {
                None => Tensor::zeros([p, p, n]),
                Some(dd) => build(
                    vec![p, p, n],
                    dd.iter().flat_map(|row| row.iter().flat_map(|m| mv(m))).collect(),
                ),
            },
        }
    }

    /// Infinitesimal generator `∂M/∂λ` at `λ = 0`, `p = 1` only.
    fn generator(&self) -> Vec<f64> {
        self.mats(&vec![0.0; self.p()]).dm.swap_remove(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    X,
    Lambda,
    X2,
    LambdaX,
    Lambda2,
}

fn slot_kind(slot: DerivSlot) -> SlotKind {
    match slot {
        DerivSlot::HTheta | DerivSlot::GY => SlotKind::X,
        DerivSlot::HLambda | DerivSlot::GLambda => SlotKind::Lambda,
        DerivSlot::HTheta2 | DerivSlot::GY2 => SlotKind::X2,
        DerivSlot::HLambdaTheta | DerivSlot::GLambdaY => SlotKind::LambdaX,
        DerivSlot::HLambda2 | DerivSlot::GLambda2 => SlotKind::Lambda2,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum HPart {
    Linear(Rep),
    Sheared { a: Vec<f64>, v: Vec<f64> },
    /// `θᵢ ↦ e^{λ rᵢ ρ(θ)} θᵢ` with `ρ = 1ᵀW₂W₁1` invariant under the flow.
    Modulated { rates: Vec<f64>, w1: Block, w2: Block },
    Involution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
enum GPart {
    Identity,
    Linear(Rep),
    Power { m: f64 },
}

/// An `(H, G)` pair with analytic derivative callbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformation {
    pub name: String,
    pub spec: TransformSpec,
    pub kind: TransformKind,
    pub is_symmetry: bool,
    pub d: usize,
    pub c: usize,
    pub p: usize,
    h: HPart,
    g: GPart,
    mutation: Option<(DerivSlot, f64)>,
}

/// All ten derivative tensors at one `(θ, y, λ)`.
#[derive(Debug, Clone)]
pub struct TransformDerivatives {
    pub h_theta: Tensor,
    pub h_lambda: Tensor,
    pub h_theta2: Tensor,
    pub h_lambda_theta: Tensor,
    pub h_lambda2: Tensor,
    pub g_y: Tensor,
    pub g_lambda: Tensor,
    pub g_y2: Tensor,
    pub g_lambda_y: Tensor,
    pub g_lambda2: Tensor,
}

impl TransformDerivatives {
    pub fn get(&self, slot: DerivSlot) -> &Tensor {
        match slot {
            DerivSlot::HTheta => &self.h_theta,
            DerivSlot::HLambda => &self.h_lambda,
            DerivSlot::HTheta2 => &self.h_theta2,
            DerivSlot::HLambdaTheta => &self.h_lambda_theta,
            DerivSlot::HLambda2 => &self.h_lambda2,
            DerivSlot::GY => &self.g_y,
            DerivSlot::GLambda => &self.g_lambda,
            DerivSlot::GY2 => &self.g_y2,
            DerivSlot::GLambdaY => &self.g_lambda_y,
            DerivSlot::GLambda2 => &self.g_lambda2,
        }
    }
}

fn adjacent_layers(model: &Model, first: &str, second: &str) -> Result<(Block, Block)> {
    let b1 = model.block(first)?.clone();
    let b2 = model.block(second)?.clone();
    let pos = |name: &str| model.layout.iter().position(|b| b.name == name);
    let chained = pos(second) == pos(first).map(|i| i + 1) && b2.cols() == b1.rows();
    if !chained || b1.shape.len() != 2 || b2.shape.len() != 2 {
        return Err(Error::InvalidParams(format!(
            "blocks {first} and {second} are not consecutive layers of {}",
            model.name
        )));
    }
    Ok((b1, b2))
}

fn unit_blocks(model: &Model, block_in: &str, block_out: &str) -> Result<(Block, Block)> {
    let b1 = model.block(block_in)?.clone();
    let b2 = model.block(block_out)?.clone();
    if b1.shape.len() != 2 || b2.shape.len() != 2 || b1.rows() != b2.cols() || b1.name == b2.name {
        return Err(Error::InvalidParams(format!(
            "blocks {block_in} {:?} and {block_out} {:?} do not share a hidden layer",
            b1.shape, b2.shape
        )));
    }
    Ok((b1, b2))
}

fn identity_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

/// Maximum deviation of `P²` from the identity.
fn involution_residual(p: &[f64], n: usize) -> f64 {
    let sq = matmul(p, p, n);
    sq.iter()
        .zip(identity_matrix(n))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Tolerance for orthonormality of mirror columns.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Builds a catalog transformation acting on `model`. Structural
/// incompatibilities are reported as [`Error::InvalidParams`].
pub fn build_transform(spec: &TransformSpec, model: &Model) -> Result<Transformation> {
    let d = model.d();
    let c = model.c();
    let mk = |kind, is_symmetry, p, h, g| Transformation {
        name: spec.name().to_string(),
        spec: spec.clone(),
        kind,
        is_symmetry,
        d,
        c,
        p,
        h,
        g,
        mutation: None,
    };
    let continuous = TransformKind::Continuous;
    let discrete = TransformKind::Discrete;
    match spec {
        TransformSpec::HomogeneityScaling { m } => {
            if model.homogeneity_degree != Some(*m) {
                return Err(Error::InvalidParams(format!(
                    "{} is not declared {m}-homogeneous",
                    model.name
                )));
            }
            Ok(mk(
                continuous,
                false,
                1,
                HPart::Linear(Rep::DiagExp(vec![1.0; d])),
                GPart::Linear(Rep::DiagExp(vec![*m as f64; c])),
            ))
        }
        TransformSpec::LayerRescaling { block1, block2 } => {
            if !matches!(
                model.architecture,
                Architecture::HomogeneousReluMlp { .. } | Architecture::DeepLinear { .. }
            ) {
                return Err(Error::InvalidParams(format!(
                    "layer_rescaling needs a positively homogeneous activation, {} has none",
                    model.name
                )));
            }
            let (b1, b2) = adjacent_layers(model, block1, block2)?;
            let mut rates = vec![0.0; d];
            b1.range().for_each(|i| rates[i] = 1.0);
            b2.range().for_each(|i| rates[i] = -1.0);
            Ok(mk(continuous, true, 1, HPart::Linear(Rep::DiagExp(rates)), GPart::Identity))
        }
        TransformSpec::ModulatedRescaling { block1, block2 } => {
            if !matches!(
                model.architecture,
                Architecture::HomogeneousReluMlp { .. } | Architecture::DeepLinear { .. }
            ) {
                return Err(Error::InvalidParams(format!(
                    "modulated_rescaling needs a positively homogeneous activation, {} has none",
                    model.name
                )));
            }
            let (w1, w2) = adjacent_layers(model, block1, block2)?;
            let mut rates = vec![0.0; d];
            w1.range().for_each(|i| rates[i] = 1.0);
            w2.range().for_each(|i| rates[i] = -1.0);
            Ok(mk(
                continuous,
                true,
                1,
                HPart::Modulated { rates, w1, w2 },
                GPart::Identity,
            ))
        }
        TransformSpec::LinearReparam {
            block_in,
            block_out,
            generator,
        } => {
            if !matches!(model.architecture, Architecture::DeepLinear { .. }) {
                return Err(Error::InvalidParams(format!(
                    "linear_reparam acts on deep_linear models, not {}",
                    model.name
                )));
            }
            let (w_in, w_out) = adjacent_layers(model, block_in, block_out)?;
            let h = w_in.rows();
            if generator.len() != h || generator.iter().any(|r| r.len() != h) {
                return Err(Error::InvalidParams(format!("generator must be {h}x{h}")));
            }
            let a: Vec<f64> = generator.concat();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("generator has non-finite entries".into()));
            }
            Ok(mk(
                continuous,
                true,
                1,
                HPart::Linear(Rep::Reparam { n: d, w_in, w_out, a }),
                GPart::Identity,
            ))
        }
        TransformSpec::LastLayerLeftAction => {
            let name = model.last_layer_block.clone().ok_or_else(|| {
                Error::InvalidParams(format!("{} has no last-layer block", model.name))
            })?;
            let block = model.block(&name)?.clone();
            if block.rows() != c {
                return Err(Error::InvalidParams(format!(
                    "last-layer block {name} has {} rows, model outputs {c}",
                    block.rows()
                )));
            }
            let y_block = Block {
                name: "y".into(),
                shape: vec![c, 1],
                offset: 0,
            };
            Ok(mk(
                continuous,
                false,
                c * c,
                HPart::Linear(Rep::LeftAction { n: d, block }),
                GPart::Linear(Rep::LeftAction { n: c, block: y_block }),
            ))
        }
        TransformSpec::ShearedScaling { a, v } => {
            if !matches!(model.architecture, Architecture::LinearProbe { .. }) {
                return Err(Error::InvalidParams(format!(
                    "sheared_scaling acts on linear_probe models, not {}",
                    model.name
                )));
            }
            if a.len() != d || v.len() != d {
                return Err(Error::InvalidParams(format!("a and v must have length {d}")));
            }
            let vx = dot(v, &model.input);
            let scale = dot(v, v).sqrt() * dot(&model.input, &model.input).sqrt();
            if vx.abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidParams(format!(
                    "shear direction must be orthogonal to the probe input (vᵀx = {vx:e})"
                )));
            }
            Ok(mk(
                continuous,
                false,
                1,
                HPart::Sheared {
                    a: a.clone(),
                    v: v.clone(),
                },
                GPart::Linear(Rep::DiagExp(vec![1.0; c])),
            ))
        }
        TransformSpec::LogHomogeneityScaling { m } => {
            if !matches!(model.architecture, Architecture::ExpProbe { .. }) || *m != 1 {
                return Err(Error::InvalidParams(format!(
                    "log_homogeneity_scaling(m={m}) needs exp_probe with m = 1, got {}",
                    model.name
                )));
            }
            Ok(mk(
                continuous,
                false,
                1,
                HPart::Linear(Rep::DiagExp(vec![1.0; d])),
                GPart::Power { m: *m as f64 },
            ))
        }
        TransformSpec::Mirror { columns } => {
            if columns.is_empty() || columns.iter().any(|col| col.len() != d) {
                return Err(Error::InvalidParams(format!(
                    "mirror needs at least one column of length {d}"
                )));
            }
            for (i, a) in columns.iter().enumerate() {
                for (j, b) in columns.iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let err = (dot(a, b) - target).abs();
                    if !(err <= ORTHONORMAL_TOL) {
                        return Err(Error::InvalidParams(format!(
                            "mirror columns are not orthonormal (|⟨o{i}, o{j}⟩ − {target}| = {err:e})"
                        )));
                    }
                }
            }
            let mut p = identity_matrix(d);
            for col in columns {
                for i in 0..d {
                    for j in 0..d {
                        p[i * d + j] -= 2.0 * col[i] * col[j];
                    }
                }
            }
            Ok(mk(discrete, true, 0, HPart::Involution(p), GPart::Identity))
        }
        TransformSpec::SignFlip { blocks } => {
            if blocks.is_empty() {
                return Err(Error::InvalidParams("sign_flip needs at least one block".into()));
            }
            let mut p = identity_matrix(d);
            for name in blocks {
                for i in model.block(name)?.range() {
                    p[i * d + i] = -1.0;
                }
            }
            Ok(mk(discrete, true, 0, HPart::Involution(p), GPart::Identity))
        }
        TransformSpec::UnitSignFlip {
            block_in,
            block_out,
            unit,
        } => {
            let (b1, b2) = unit_blocks(model, block_in, block_out)?;
            if *unit >= b1.rows() {
                return Err(Error::InvalidParams(format!("unit {unit} out of range")));
            }
            let mut p = identity_matrix(d);
            for s in 0..b1.cols() {
                let i = b1.offset + unit * b1.cols() + s;
                p[i * d + i] = -1.0;
            }
            for r in 0..b2.rows() {
                let i = b2.offset + r * b2.cols() + unit;
                p[i * d + i] = -1.0;
            }
            Ok(mk(discrete, true, 0, HPart::Involution(p), GPart::Identity))
        }
        TransformSpec::Permutation {
            block_in,
            block_out,
            i,
            j,
        } => {
            let (b1, b2) = unit_blocks(model, block_in, block_out)?;
            if *i >= b1.rows() || *j >= b1.rows() || i == j {
                return Err(Error::InvalidParams(format!(
                    "permutation needs distinct units below {}, got {i} and {j}",
                    b1.rows()
                )));
            }
            let mut p = identity_matrix(d);
            let mut swap = |a: usize, b: usize| {
                p[a * d + a] = 0.0;
                p[b * d + b] = 0.0;
                p[a * d + b] = 1.0;
                p[b * d + a] = 1.0;
            };
            for s in 0..b1.cols() {
                swap(b1.offset + i * b1.cols() + s, b1.offset + j * b1.cols() + s);
            }
            for r in 0..b2.rows() {
                swap(b2.offset + r * b2.cols() + i, b2.offset + r * b2.cols() + j);
            }
            Ok(mk(discrete, true, 0, HPart::Involution(p), GPart::Identity))
        }
    }
}

impl Transformation {
    /// A copy whose `slot` derivative is multiplied by `factor`, leaving `H`
    /// and `G` themselves untouched. Used for fault injection.
    pub fn with_mutation(&self, slot: DerivSlot, factor: f64) -> Transformation {
        let mut t = self.clone();
        t.mutation = Some((slot, factor));
        t.name = format!("{}[{} x{factor}]", self.name, slot.name());
        t
    }

    pub fn mutation(&self) -> Option<(DerivSlot, f64)> {
        self.mutation
    }

    /// `H(·, λ)` is linear, so `∇θ²H ≡ 0`.
    pub fn is_linear_in_theta(&self) -> bool {
        !matches!(self.h, HPart::Sheared { .. } | HPart::Modulated { .. })
    }

    /// `G(·, λ)` is linear, so `∇y²G ≡ 0`.
    pub fn is_linear_in_y(&self) -> bool {
        !matches!(self.g, GPart::Power { .. })
    }

    /// The involution matrix `P` (row-major, `H(θ) = Pθ`) of a discrete
    /// transformation.
    pub fn involution(&self) -> Option<&[f64]> {
        match &self.h {
            HPart::Involution(p) => Some(p),
            _ => None,
        }
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.p {
            return Err(Error::SizeMismatch(format!(
                "{} takes {} transformation parameters, got {}",
                self.name,
                self.p,
                lambda.len()
            )));
        }
        if let Some((index, &value)) = lambda.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteEntry { index, value });
        }
        Ok(())
    }

    fn check_len(&self, x: &[f64], n: usize, what: &str) -> Result<()> {
        if x.len() != n {
            return Err(Error::SizeMismatch(format!(
                "{} expects {what} of length {n}, got {}",
                self.name,
                x.len()
            )));
        }
        Ok(())
    }

    fn continuous_only(&self) -> Result<()> {
        if self.kind == TransformKind::Discrete {
            return Err(Error::InvalidParams(format!(
                "{} is discrete and has no λ-derivatives",
                self.name
            )));
        }
        Ok(())
    }

    pub fn h(&self, theta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta, self.d, "θ")?;
        self.check_lambda(lambda)?;
        Ok(match &self.h {
            HPart::Linear(rep) => rep.apply(theta, lambda),
            HPart::Sheared { a, v } => {
                let l = lambda[0];
                let q = dot(a, theta).powi(2);
                let e = l.exp();
                theta.iter().zip(v).map(|(t, vj)| e * (t + l * q * vj)).collect()
            }
            HPart::Modulated { rates, w1, w2 } => {
                let rho = modulation(w1, w2, theta).0;
                theta
                    .iter()
                    .zip(rates)
                    .map(|(t, r)| (lambda[0] * r * rho).exp() * t)
                    .collect()
            }
            HPart::Involution(p) => {
                let d = self.d;
                (0..d).map(|j| dot(&p[j * d..(j + 1) * d], theta)).collect()
            }
        })
    }

    pub fn g(&self, y: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y, self.c, "y")?;
        self.check_lambda(lambda)?;
        Ok(match &self.g {
            GPart::Identity => y.to_vec(),
            GPart::Linear(rep) => rep.apply(y, lambda),
            GPart::Power { m } => {
                let k = (m * lambda[0]).exp();
                if !(y[0] > 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "{} needs a positive output, got {}",
                        self.name, y[0]
                    )));
                }
                vec![y[0].powf(k)]
            }
        })
    }

    /// Analytic derivative `slot` at `point` (`θ` for `H` slots, `y` for `G`
    /// slots) and `λ`.
    pub fn derivative(&self, slot: DerivSlot, point: &[f64], lambda: &[f64]) -> Result<Tensor> {
        let raw = self.raw_derivative(slot, point, lambda)?;
        Ok(match self.mutation {
            Some((s, factor)) if s == slot => raw.scale(factor),
            _ => raw,
        })
    }

    fn raw_derivative(&self, slot: DerivSlot, point: &[f64], lambda: &[f64]) -> Result<Tensor> {
        self.check_lambda(lambda)?;
        let (d, c, p) = (self.d, self.c, self.p);
        let kind = slot_kind(slot);
        if slot.is_h() {
            self.check_len(point, d, "θ")?;
            match &self.h {
                HPart::Linear(rep) => Ok(rep.derivative(kind, point, lambda)),
                HPart::Involution(pm) => {
                    if kind == SlotKind::X2 {
                        return Ok(Tensor::zeros([d, d, d]));
                    }
                    if kind != SlotKind::X {
                        self.continuous_only()?;
                    }
                    let mut t = vec![0.0; d * d];
                    for i in 0..d {
                        for j in 0..d {
                            t[i * d + j] = pm[j * d + i];
                        }
                    }
                    Tensor::from_vec([d, d], t)
                }
                HPart::Sheared { a, v } => Ok(sheared_derivative(kind, a, v, point, lambda[0])),
                HPart::Modulated { rates, w1, w2 } => {
                    Ok(modulated_derivative(kind, rates, w1, w2, point, lambda[0]))
                }
            }
        } else {
            self.check_len(point, c, "y")?;
            match &self.g {
                GPart::Identity => {
                    if matches!(kind, SlotKind::Lambda | SlotKind::LambdaX | SlotKind::Lambda2) {
                        self.continuous_only()?;
                    }
                    Ok(match kind {
                        SlotKind::X => Tensor::identity(c),
                        SlotKind::Lambda => Tensor::zeros([p, c]),
                        SlotKind::X2 => Tensor::zeros([c, c, c]),
                        SlotKind::LambdaX => Tensor::zeros([p, c, c]),
                        SlotKind::Lambda2 => Tensor::zeros([p, p, c]),
                    })
                }
                GPart::Linear(rep) => Ok(rep.derivative(kind, point, lambda)),
                GPart::Power { m } => {
                    let y = point[0];
                    if !(y > 0.0) {
                        return Err(Error::InvalidParams(format!(
                            "{} needs a positive output, got {y}",
                            self.name
                        )));
                    }
                    let k = (m * lambda[0]).exp();
                    let yk = y.powf(k);
                    let ly = y.ln();
                    let v = match kind {
                        SlotKind::X => k * y.powf(k - 1.0),
                        SlotKind::Lambda => m * k * ly * yk,
                        SlotKind::X2 => k * (k - 1.0) * y.powf(k - 2.0),
                        SlotKind::LambdaX => m * k * y.powf(k - 1.0) * (1.0 + k * ly),
                        SlotKind::Lambda2 => m * m * k * ly * yk * (1.0 + k * ly),
                    };
                    let shape: Vec<usize> = match kind {
                        SlotKind::X | SlotKind::Lambda => vec![1, 1],
                        _ => vec![1, 1, 1],
                    };
                    Tensor::from_vec(shape, vec![v])
                }
            }
        }
    }

    /// All derivative slots at `(θ, y, λ)`.
    pub fn derivatives(&self, theta: &[f64], y: &[f64], lambda: &[f64]) -> Result<TransformDerivatives> {
        self.continuous_only()?;
        Ok(TransformDerivatives {
            h_theta: self.derivative(DerivSlot::HTheta, theta, lambda)?,
            h_lambda: self.derivative(DerivSlot::HLambda, theta, lambda)?,
            h_theta2: self.derivative(DerivSlot::HTheta2, theta, lambda)?,
            h_lambda_theta: self.derivative(DerivSlot::HLambdaTheta, theta, lambda)?,
            h_lambda2: self.derivative(DerivSlot::HLambda2, theta, lambda)?,
            g_y: self.derivative(DerivSlot::GY, y, lambda)?,
            g_lambda: self.derivative(DerivSlot::GLambda, y, lambda)?,
            g_y2: self.derivative(DerivSlot::GY2, y, lambda)?,
            g_lambda_y: self.derivative(DerivSlot::GLambdaY, y, lambda)?,
            g_lambda2: self.derivative(DerivSlot::GLambda2, y, lambda)?,
        })
    }

    /// A transformation parameter suitable for random good positions.
    pub fn sample_lambda(&self, rng: &mut impl Rng) -> Vec<f64> {
        let width = match self.spec {
            TransformSpec::LastLayerLeftAction => 0.3 / self.c as f64,
            _ => 0.5,
        };
        (0..self.p).map(|_| rng.random_range(-width..width)).collect()
    }

    /// `‖f(H(θ,λ)) − G(f(θ),λ)‖ / (1 + ‖f(θ)‖)`.
    pub fn equivariance_residual(&self, model: &Model, theta: &[f64], lambda: &[f64]) -> Result<f64> {
        let y = model.forward(theta)?;
        let lhs = model.forward(&self.h(theta, lambda)?)?;
        let rhs = self.g(&y, lambda)?;
        let diff: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        Ok(diff / (1.0 + dot(&y, &y).sqrt()))
    }
}

/// `ρ = Σₖ (Σ_b W₁[k,b]) (Σ_a W₂[a,k])` and its gradient. `ρ` is bilinear,
/// with Hessian `1` between `W₁[k,·]` and `W₂[·,k]`.
fn modulation(w1: &Block, w2: &Block, theta: &[f64]) -> (f64, Vec<f64>) {
    let h = w1.rows();
    let (n1, c2) = (w1.cols(), w2.rows());
    let row1: Vec<f64> = (0..h)
        .map(|k| theta[w1.offset + k * n1..w1.offset + (k + 1) * n1].iter().sum())
        .collect();
    let col2: Vec<f64> = (0..h)
        .map(|k| (0..c2).map(|a| theta[w2.offset + a * h + k]).sum())
        .collect();
    let mut g = vec![0.0; theta.len()];
    for k in 0..h {
        (0..n1).for_each(|b| g[w1.offset + k * n1 + b] = col2[k]);
        (0..c2).for_each(|a| g[w2.offset + a * h + k] = row1[k]);
    }
    (dot(&row1, &col2), g)
}

fn modulated_derivative(kind: SlotKind, rates: &[f64], w1: &Block, w2: &Block, theta: &[f64], l: f64) -> Tensor {
    let d = theta.len();
    let (rho, g) = modulation(w1, w2, theta);
    let e: Vec<f64> = rates.iter().map(|r| (l * r * rho).exp()).collect();
    let hess = |i: usize, k: usize| -> f64 {
        let (h, n1) = (w1.rows(), w1.cols());
        let pair = |a: usize, b: usize| {
            w1.range().contains(&a)
                && w2.range().contains(&b)
                && (a - w1.offset) / n1 == (b - w2.offset) % h
        };
        f64::from(u8::from(pair(i, k) || pair(k, i)))
    };
    let delta = |i: usize, j: usize| f64::from(u8::from(i == j));
    let data: Vec<f64> = match kind {
        // Eⱼ(δᵢⱼ + λ rⱼ θⱼ gᵢ)
        SlotKind::X => (0..d * d)
            .map(|q| {
                let (i, j) = (q / d, q % d);
                e[j] * (delta(i, j) + l * rates[j] * theta[j] * g[i])
            })
            .collect(),
        // Eⱼ rⱼ ρ θⱼ
        SlotKind::Lambda => (0..d).map(|j| e[j] * rates[j] * rho * theta[j]).collect(),
        // Eⱼ λ rⱼ (gₖδᵢⱼ + gᵢδⱼₖ + λ rⱼ θⱼ gᵢ gₖ + θⱼ Kᵢₖ)
        SlotKind::X2 => (0..d * d * d)
            .map(|q| {
                let (i, k, j) = (q / (d * d), (q / d) % d, q % d);
                if rates[j] == 0.0 {
                    return 0.0;
                }
                e[j] * l
                    * rates[j]
                    * (g[k] * delta(i, j)
                        + g[i] * delta(j, k)
                        + l * rates[j] * theta[j] * g[i] * g[k]
                        + theta[j] * hess(i, k))
            })
            .collect(),
        // Eⱼ rⱼ (ρ δᵢⱼ + (1 + λ rⱼ ρ) θⱼ gᵢ)
        SlotKind::LambdaX => (0..d * d)
            .map(|q| {
                let (i, j) = (q / d, q % d);
                e[j] * rates[j] * (rho * delta(i, j) + (1.0 + l * rates[j] * rho) * theta[j] * g[i])
            })
            .collect(),
        // Eⱼ rⱼ² ρ² θⱼ
        SlotKind::Lambda2 => (0..d).map(|j| e[j] * rates[j] * rates[j] * rho * rho * theta[j]).collect(),
    };
    let shape = match kind {
        SlotKind::X => vec![d, d],
        SlotKind::Lambda => vec![1, d],
        SlotKind::X2 => vec![d, d, d],
        SlotKind::LambdaX => vec![1, d, d],
        SlotKind::Lambda2 => vec![1, 1, d],
    };
    Tensor::from_vec(shape, data).expect("sized by construction")
}

fn sheared_derivative(kind: SlotKind, a: &[f64], v: &[f64], theta: &[f64], l: f64) -> Tensor {
    let d = theta.len();
    let e = l.exp();
    let s = dot(a, theta);
    let q = s * s;
    let data: Vec<f64> = match kind {
        // e^λ(δᵢⱼ + 2λ s aᵢ vⱼ)
        SlotKind::X => (0..d * d)
            .map(|k| {
                let (i, j) = (k / d, k % d);
                e * (f64::from(u8::from(i == j)) + 2.0 * l * s * a[i] * v[j])
            })
            .collect(),
        // e^λ(θⱼ + (1 + λ) q vⱼ)
        SlotKind::Lambda => (0..d).map(|j| e * (theta[j] + (1.0 + l) * q * v[j])).collect(),
        // 2λ e^λ aᵢ aₖ vⱼ
        SlotKind::X2 => (0..d * d * d)
            .map(|idx| {
                let (i, k, j) = (idx / (d * d), (idx / d) % d, idx % d);
                2.0 * l * e * a[i] * a[k] * v[j]
            })
            .collect(),
        // e^λ(δᵢⱼ + 2(1 + λ) s aᵢ vⱼ)
        SlotKind::LambdaX => (0..d * d)
            .map(|k| {
                let (i, j) = (k / d, k % d);
                e * (f64::from(u8::from(i == j)) + 2.0 * (1.0 + l) * s * a[i] * v[j])
            })
            .collect(),
        // e^λ(θⱼ + (2 + λ) q vⱼ)
        SlotKind::Lambda2 => (0..d).map(|j| e * (theta[j] + (2.0 + l) * q * v[j])).collect(),
    };
    let shape = match kind {
        SlotKind::X => vec![d, d],
        SlotKind::Lambda => vec![1, d],
        SlotKind::X2 => vec![d, d, d],
        SlotKind::LambdaX => vec![1, d, d],
        SlotKind::Lambda2 => vec![1, 1, d],
    };
    Tensor::from_vec(shape, data).expect("sized by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodPositionReport {
    pub ok: bool,
    pub rcond_h: f64,
    pub rcond_g: f64,
    pub discrete: bool,
}

/// Both `∇θH(θ,λ)` and `∇yG(f(θ),λ)` must have reciprocal condition at least
/// [`SINGULAR_RCOND`]. Never fails; problems are reported as `ok = false`.
pub fn good_position(t: &Transformation, model: &Model, theta: &[f64], lambda: &[f64]) -> GoodPositionReport {
    let bad = GoodPositionReport {
        ok: false,
        rcond_h: 0.0,
        rcond_g: 0.0,
        discrete: t.kind == TransformKind::Discrete,
    };
    if t.kind == TransformKind::Discrete {
        return bad;
    }
    let rc = |slot: DerivSlot, point: &[f64]| -> Option<f64> {
        reciprocal_condition(&t.derivative(slot, point, lambda).ok()?).ok()
    };
    let Ok(y) = model.forward(theta) else {
        return bad;
    };
    let (Some(rcond_h), Some(rcond_g)) = (rc(DerivSlot::HTheta, theta), rc(DerivSlot::GY, &y)) else {
        return bad;
    };
    GoodPositionReport {
        ok: rcond_h >= SINGULAR_RCOND && rcond_g >= SINGULAR_RCOND,
        rcond_h,
        rcond_g,
        discrete: false,
    }
}

fn solve_characteristic(jac: &Tensor, rhs: &Tensor, what: &str) -> Result<Tensor> {
    match invert_square(jac) {
        Ok(inv) => compose(&inv, rhs),
        Err(Error::Singular { rcond }) => Err(Error::NotGoodPosition(format!(
            "{what} is singular (reciprocal condition {rcond:e})"
        ))),
        Err(e) => Err(e),
    }
}

/// `X = ∇θH⁻¹ ∘ ∇λH`, shape `(p, d)`.
pub fn characteristic_direction(t: &Transformation, theta: &[f64], lambda: &[f64]) -> Result<Tensor> {
    if t.kind == TransformKind::Discrete {
        return Err(Error::NotGoodPosition(format!("{} is discrete", t.name)));
    }
    let jac = t.derivative(DerivSlot::HTheta, theta, lambda)?;
    let rhs = t.derivative(DerivSlot::HLambda, theta, lambda)?;
    solve_characteristic(&jac, &rhs, "∇θH")
}

/// `Y = ∇yG⁻¹ ∘ ∇λG` at `y = f(θ)`, shape `(p, c)`.
pub fn characteristic_output(t: &Transformation, model: &Model, theta: &[f64], lambda: &[f64]) -> Result<Tensor> {
    if t.kind == TransformKind::Discrete {
        return Err(Error::NotGoodPosition(format!("{} is discrete", t.name)));
    }
    let y = model.forward(theta)?;
    let jac = t.derivative(DerivSlot::GY, &y, lambda)?;
    let rhs = t.derivative(DerivSlot::GLambda, &y, lambda)?;
    solve_characteristic(&jac, &rhs, "∇yG")
}

/// Projection `½(θ + Pθ)` onto the `+1` eigenspace of a discrete
/// involution `P`, which lies in `Fix(H)`.
pub fn fixed_point_project(t: &Transformation, theta: &[f64]) -> Result<Vec<f64>> {
    let p = t
        .involution()
        .ok_or_else(|| Error::InvalidParams(format!("{} is not a discrete linear transformation", t.name)))?;
    let residual = involution_residual(p, t.d);
    if residual > 1e-12 {
        return Err(Error::NotInvolution { residual });
    }
    let ptheta = t.h(theta, &[])?;
    Ok(theta.iter().zip(&ptheta).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Quadratic Noether charge `C(θ) = ½ θᵀKθ` with `∇C = Kθ = ∇λH(θ, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Charge {
    pub name: String,
    pub d: usize,
    /// Symmetric `d×d` generator `K`, row-major.
    pub generator: Vec<f64>,
}

impl Charge {
    pub fn value(&self, theta: &[f64]) -> f64 {
        0.5 * dot(theta, &self.grad(theta))
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..d).map(|i| dot(&self.generator[i * d..(i + 1) * d], theta)).collect()
    }

    pub fn hess(&self) -> Tensor {
        Tensor::from_vec([self.d, self.d], self.generator.clone()).expect("d×d generator")
    }
}

/// Charge of a one-parameter continuous symmetry that is linear in `θ`, the
/// identity at `λ = 0`, and whose generator passes the curl test
/// (`∇λ∇θH(θ, 0)` symmetric). Covers layer rescaling and symmetric-generator
/// reparameterizations; antisymmetric generators fail the curl test.
pub fn noether_charge(t: &Transformation) -> Result<Charge> {
    if t.kind != TransformKind::Continuous || t.p != 1 || !t.is_symmetry {
        return Err(Error::NotConservative(format!(
            "{} is not a one-parameter continuous symmetry",
            t.name
        )));
    }
    let HPart::Linear(rep) = &t.h else {
        return Err(Error::NotConservative(format!(
            "{} has no registered closed-form charge",
            t.name
        )));
    };
    let d = t.d;
    let at_zero = rep.mats(&[0.0]).m;
    let id_err = at_zero
        .iter()
        .zip(identity_matrix(d))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if id_err > 1e-14 {
        return Err(Error::NotConservative(format!(
            "{} is not the identity at λ = 0",
            t.name
        )));
    }
    let k = rep.generator();
    let scale = k.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let curl = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (k[i * d + j] - k[j * d + i]).abs())
        .fold(0.0, f64::max);
    if curl > 1e-12 * scale {
        return Err(Error::NotConservative(format!(
            "∇λH(θ, 0) is not a gradient field (curl {:e})",
            curl / scale
        )));
    }
    Ok(Charge {
        name: format!("{}_charge", t.name),
        d,
        generator: k,
    })
}

/// One finite-difference certificate for an analytic derivative slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub slot: DerivSlot,
    pub residual: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
}

/// Compares every analytic derivative slot with central differences of
/// `H` and `G` themselves, taken jointly in `(θ, λ)` and `(y, λ)`. The
/// residual is `‖A − F‖ / max(‖A‖, ‖F‖, ‖joint FD derivative‖, 1, ‖value‖)`.
pub fn derivative_certificates(
    t: &Transformation,
    theta: &[f64],
    y: &[f64],
    lambda: &[f64],
    fd_scale: f64,
) -> Result<Vec<Certificate>> {
    t.continuous_only()?;
    let (d, c, p) = (t.d, t.c, t.p);
    let mut out = Vec::with_capacity(10);
    let h_map = |z: &[f64]| t.h(&z[..d], &z[d..]);
    let g_map = |z: &[f64]| t.g(&z[..c], &z[c..]);
    for (is_h, n, point, map) in [
        (true, d, theta, &h_map as &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync)),
        (false, c, y, &g_map as &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync)),
    ] {
        let z: Vec<f64> = point.iter().chain(lambda).copied().collect();
        let value = map(&z)?;
        let value_norm = dot(&value, &value).sqrt();
        let j = fd_oracle_fn(map, &z, n, 1, fd_scale)?;
        let h = fd_oracle_fn(map, &z, n, 2, fd_scale)?;
        let (jd, hd) = (j.data(), h.data());
        let m = n + p;
        // joint layouts: j[(row), out] with row over (x, λ); h[(r1, r2), out]
        let pick1 = |rows: std::ops::Range<usize>| -> Vec<f64> {
            rows.flat_map(|r| jd[r * n..(r + 1) * n].to_vec()).collect()
        };
        let pick2 = |r1: std::ops::Range<usize>, r2: std::ops::Range<usize>| -> Vec<f64> {
            r1.flat_map(|a| r2.clone().flat_map(move |b| hd[(a * m + b) * n..(a * m + b + 1) * n].to_vec()))
                .collect()
        };
        let slots: [(DerivSlot, Vec<f64>, f64); 5] = if is_h {
            [
                (DerivSlot::HTheta, pick1(0..n), j.norm()),
                (DerivSlot::HLambda, pick1(n..m), j.norm()),
                (DerivSlot::HTheta2, pick2(0..n, 0..n), h.norm()),
                (DerivSlot::HLambdaTheta, pick2(n..m, 0..n), h.norm()),
                (DerivSlot::HLambda2, pick2(n..m, n..m), h.norm()),
            ]
        } else {
            [
                (DerivSlot::GY, pick1(0..n), j.norm()),
                (DerivSlot::GLambda, pick1(n..m), j.norm()),
                (DerivSlot::GY2, pick2(0..n, 0..n), h.norm()),
                (DerivSlot::GLambdaY, pick2(n..m, 0..n), h.norm()),
                (DerivSlot::GLambda2, pick2(n..m, n..m), h.norm()),
            ]
        };
        for (slot, fd, joint) in slots {
            let analytic = t.derivative(slot, point, lambda)?;
            let a = analytic.data();
            if a.len() != fd.len() {
                return Err(Error::InconsistentDerivatives(format!(
                    "{} has {} entries, expected {}",
                    slot.name(),
                    a.len(),
                    fd.len()
                )));
            }
            let diff = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let fd_norm = dot(&fd, &fd).sqrt();
            let denom = analytic.norm().max(fd_norm).max(joint).max(value_norm.max(1.0));
            out.push(Certificate {
                slot,
                residual: diff / denom,
                analytic_norm: analytic.norm(),
                fd_norm,
            });
        }
    }
    Ok(out)
}
