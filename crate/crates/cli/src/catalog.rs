//! Static catalog of models, transformations, losses and checks.

use equichk::models::Architecture;
use equichk::transforms::TransformSpec;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Entry {
    pub name: &'static str,
    pub description: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformEntry {
    pub name: &'static str,
    pub kind: &'static str,
    pub symmetry: bool,
    pub description: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub name: &'static str,
    pub anchor: &'static str,
    /// Transformations the check exercises.
    pub transforms: Vec<&'static str>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Catalog {
    pub models: Vec<Entry>,
    pub transforms: Vec<TransformEntry>,
    pub losses: Vec<Entry>,
    pub checks: Vec<CheckEntry>,
}

fn model_description(name: &str) -> &'static str {
    match name {
        "homogeneous_relu_mlp" => "bias-free ReLU network, positively homogeneous of degree = depth",
        "deep_linear" => "product of weight matrices applied to a fixed input",
        "factored_last_layer" => "tanh feature extractor followed by a linear last layer",
        "linear_probe" => "f = θᵀx",
        "exp_probe" => "f = exp(θᵀx)",
        "even_quadratic" => "f = x₁θ₁² + x₂θ₂ + x₃θ₁²θ₂, even in θ₁",
        _ => "",
    }
}

fn transform_meta(name: &str) -> (&'static str, bool, &'static str) {
    match name {
        "homogeneity_scaling" => ("continuous", false, "θ ↦ e^λθ with y ↦ e^{mλ}y"),
        "layer_rescaling" => ("continuous", true, "scale one layer up and the next one down"),
        "modulated_rescaling" => ("continuous", true, "layer rescaling with a parameter-dependent rate"),
        "linear_reparam" => ("continuous", true, "W_in ↦ e^{λA}W_in, W_out ↦ W_out e^{−λA}"),
        "last_layer_left_action" => ("continuous", false, "W ↦ (I + Λ)W with y ↦ (I + Λ)y"),
        "sheared_scaling" => ("continuous", false, "scaling with a quadratic shear orthogonal to the input"),
        "log_homogeneity_scaling" => ("continuous", false, "θ ↦ e^λθ with y ↦ y^{e^{mλ}}"),
        "mirror" => ("discrete", true, "reflection θ ↦ (I − 2OOᵀ)θ"),
        "sign_flip" => ("discrete", true, "negate whole parameter blocks"),
        "unit_sign_flip" => ("discrete", true, "negate one hidden unit's in- and out-weights"),
        "permutation" => ("discrete", true, "swap two hidden units"),
        _ => ("", false, ""),
    }
}

const LOSSES: [Entry; 4] = [
    Entry {
        name: "square",
        description: "½‖y − t‖²",
    },
    Entry {
        name: "exponential",
        description: "exp(−ŷy) with label ŷ ∈ {−1, +1}",
    },
    Entry {
        name: "logistic",
        description: "ln(1 + exp(−ŷy)) with label ŷ ∈ {−1, +1}",
    },
    Entry {
        name: "softmax_cross_entropy",
        description: "logsumexp(y) − ⟨t, y⟩",
    },
];

const CONTINUOUS: [&str; 7] = [
    "homogeneity_scaling",
    "layer_rescaling",
    "modulated_rescaling",
    "linear_reparam",
    "last_layer_left_action",
    "sheared_scaling",
    "log_homogeneity_scaling",
];
const DISCRETE: [&str; 4] = ["mirror", "sign_flip", "unit_sign_flip", "permutation"];
const CONTINUOUS_SYMMETRIES: [&str; 3] = ["layer_rescaling", "modulated_rescaling", "linear_reparam"];
const CHARGED: [&str; 2] = ["layer_rescaling", "linear_reparam"];

fn checks() -> Vec<CheckEntry> {
    let c = |name, anchor, transforms: &[&'static str]| CheckEntry {
        name,
        anchor,
        transforms: transforms.to_vec(),
    };
    vec![
        c("check_first_order", "first-order identity: ∇L∘X = ∇ℓ∘Y", &CONTINUOUS),
        c("check_second_action", "Hessian action ∇²L∘X against its five-term expansion", &CONTINUOUS),
        c(
            "check_second_quadratic",
            "Hessian quadratic form ∇²L∘X∘₂X against its five-term expansion",
            &CONTINUOUS,
        ),
        c(
            "derivative_certificates",
            "analytic transformation derivatives against central differences",
            &CONTINUOUS,
        ),
        c(
            "check_homogeneity_specialization",
            "homogeneous models: ∇²Lθ = (m y ℓ''/ℓ' + m − 1)∇L and ⟨θ, ∇²Lθ⟩ = ℓ''m²y² + ℓ'm(m − 1)y",
            &["homogeneity_scaling"],
        ),
        c(
            "check_degenerate_branch",
            "homogeneous models with ℓ' = 0: ∇²Lθ = (m y ℓ'' + (m − 1)ℓ')∇f",
            &["homogeneity_scaling"],
        ),
        c(
            "check_eigen_alignment",
            "gradient components along Hessian eigenvectors: ⟨∇L, u⟩ = λα⟨θ, u⟩",
            &["homogeneity_scaling"],
        ),
        c(
            "sharpness_bound",
            "Rayleigh-quotient lower bound on the top Hessian eigenvalue",
            &["homogeneity_scaling"],
        ),
        c("check_discrete_first", "gradient invariance at fixed points: ∇L∘X̂ = ∇L", &DISCRETE),
        c(
            "check_discrete_second",
            "Hessian conjugation at fixed points: ∇²L∘X̂∘₂X̂ = ∇²L − ∇L∘∇θ²H",
            &DISCRETE,
        ),
        c("check_mirror", "mirror symmetry: Oᵀ∇L = 0 and block-diagonal Hessian", &["mirror"]),
        c(
            "check_last_layer_alignment",
            "last-layer curvature along V = UW equals output curvature along Vh",
            &["last_layer_left_action"],
        ),
        c(
            "stationary_null_count",
            "symmetry directions lie in the Hessian null space at stationary points",
            &CONTINUOUS_SYMMETRIES,
        ),
        c("charge_conservation", "Noether charges are constant along gradient flow", &CHARGED),
        c(
            "step_orthogonality",
            "gradient-descent steps are orthogonal to symmetry directions",
            &CONTINUOUS_SYMMETRIES,
        ),
        c(
            "norm_growth",
            "classification with homogeneous models: d/dt ½‖θ‖² = −m Σ μ ℓ'(y) y",
            &["homogeneity_scaling"],
        ),
        c(
            "noether_drift",
            "charge drift under gradient noise: −(σ²/2)⟨∇C, ∂TrΣ⟩ = σ²Tr(Σ∇²C)",
            &CHARGED,
        ),
    ]
}

pub fn catalog() -> Catalog {
    Catalog {
        models: Architecture::catalog_names()
            .iter()
            .map(|&name| Entry {
                name,
                description: model_description(name),
            })
            .collect(),
        transforms: TransformSpec::catalog_names()
            .iter()
            .map(|&name| {
                let (kind, symmetry, description) = transform_meta(name);
                TransformEntry {
                    name,
                    kind,
                    symmetry,
                    description,
                }
            })
            .collect(),
        losses: LOSSES.to_vec(),
        checks: checks(),
    }
}

/// Restricts the catalog to one transformation and the checks exercising
/// it. `None` when the name is unknown.
pub fn filtered(transform: &str) -> Option<Catalog> {
    let full = catalog();
    if !full.transforms.iter().any(|t| t.name == transform) {
        return None;
    }
    Some(Catalog {
        models: Vec::new(),
        transforms: full.transforms.into_iter().filter(|t| t.name == transform).collect(),
        losses: Vec::new(),
        checks: full
            .checks
            .into_iter()
            .filter(|c| c.transforms.contains(&transform))
            .collect(),
    })
}

pub fn render_text(c: &Catalog) -> String {
    let mut out = String::new();
    let width = |names: &mut dyn Iterator<Item = usize>| names.max().unwrap_or(0);
    if !c.models.is_empty() {
        out.push_str("models\n");
        let w = width(&mut c.models.iter().map(|m| m.name.len()));
        for m in &c.models {
            out.push_str(&format!("  {:<w$}  {}\n", m.name, m.description));
        }
    }
    if !c.transforms.is_empty() {
        out.push_str("transforms\n");
        let w = width(&mut c.transforms.iter().map(|t| t.name.len()));
        for t in &c.transforms {
            let kind = if t.symmetry {
                format!("{} symmetry", t.kind)
            } else {
                format!("{} equivariance", t.kind)
            };
            out.push_str(&format!("  {:<w$}  {:<22}  {}\n", t.name, kind, t.description));
        }
    }
    if !c.losses.is_empty() {
        out.push_str("losses\n");
        let w = width(&mut c.losses.iter().map(|l| l.name.len()));
        for l in &c.losses {
            out.push_str(&format!("  {:<w$}  {}\n", l.name, l.description));
        }
    }
    if !c.checks.is_empty() {
        out.push_str("checks\n");
        for k in &c.checks {
            out.push_str(&format!("  {} ⇠ {}\n", k.name, k.anchor));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_catalog_transform_has_metadata() {
        for t in catalog().transforms {
            assert!(!t.kind.is_empty() && !t.description.is_empty(), "{}", t.name);
        }
        for m in catalog().models {
            assert!(!m.description.is_empty(), "{}", m.name);
        }
    }

    #[test]
    fn text_lists_first_order_anchor() {
        assert!(render_text(&catalog()).contains("check_first_order ⇠ first-order identity"));
    }

    #[test]
    fn mirror_filter_keeps_mirror_entries_only() {
        let c = filtered("mirror").unwrap();
        assert_eq!(c.transforms.len(), 1);
        assert!(c.checks.iter().all(|k| k.transforms.contains(&"mirror")));
        assert!(c.checks.iter().any(|k| k.name == "check_mirror"));
        assert!(filtered("nope").is_none());
    }
}
