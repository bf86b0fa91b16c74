//! Per-sample explanation reports: concept-value probabilities (panel A),
//! relevance-weighted concept contributions (panel B) and the graph
//! neighbourhood of the most influential concepts (panel C).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::DcgNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample_id: u64,
    pub diagnosis: usize,
    pub diagnosis_name: String,
    pub true_label: usize,
    pub class_probs: Vec<f64>,
    pub concepts: Vec<ConceptPanel>,
    pub contributions: Vec<Contribution>,
    pub neighbourhoods: Vec<Neighbourhood>,
}

/// Panel A entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptPanel {
    pub concept: usize,
    pub name: String,
    pub values: Vec<String>,
    pub value_probs: Vec<f64>,
    pub predicted: usize,
    pub truth: usize,
}

/// Panel B entry: `contribution = relevance × predicted_prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept: usize,
    pub name: String,
    pub predicted_value: String,
    pub relevance: f64,
    pub predicted_prob: f64,
    pub contribution: f64,
}

/// Panel C entry for one of the top concepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbourhood {
    pub concept: usize,
    pub nodes: Vec<NodeTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub node: usize,
    pub label: String,
    pub relevance: f64,
    /// Norm of the node's raw prototype (a mean of unit vectors, so ≤ 1).
    pub prototype_norm: f64,
    /// Strongest outgoing edges of the normalized adjacency, descending.
    pub edges: Vec<Edge>,
    /// Patches with the highest head-averaged attention, descending.
    pub top_patches: Vec<PatchWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub label: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchWeight {
    pub patch: usize,
    pub weight: f64,
}

/// Indices of `scores` in descending order; ties keep the lower index first.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Builds one report per sample. `top_n` bounds the panel B list, the
/// number of concepts expanded in panel C, and the edges and patches listed
/// per node.
pub fn explain(model: &DcgNet, samples: &[&Sample], class_names: &[String], top_n: usize) -> Result<Vec<ExplanationReport>> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    if class_names.len() != model.num_classes() {
        return Err(Error::Contract(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.num_classes()
        )));
    }
    let dict = model.dictionary();
    let (_, _, stochastic) = model.adjacency()?;
    let norms = model.bank().norms();
    let preds = model.predict(samples.iter().map(|s| &s.patches))?;
    let mut reports = Vec::with_capacity(samples.len());
    for (sample, pred) in samples.iter().zip(preds) {
        let concepts: Vec<ConceptPanel> = dict
            .concepts()
            .iter()
            .enumerate()
            .map(|(k, spec)| ConceptPanel {
                concept: k,
                name: spec.name.clone(),
                values: spec.values.clone(),
                value_probs: pred.value_probs[k].clone(),
                predicted: pred.concepts[k],
                truth: sample.concepts[k],
            })
            .collect();
        let all: Vec<Contribution> = concepts
            .iter()
            .map(|c| {
                let relevance = pred.concept_relevance[c.concept];
                let predicted_prob = c.value_probs[c.predicted];
                Contribution {
                    concept: c.concept,
                    name: c.name.clone(),
                    predicted_value: c.values[c.predicted].clone(),
                    relevance,
                    predicted_prob,
                    contribution: relevance * predicted_prob,
                }
            })
            .collect();
        let order = ranked(&all.iter().map(|c| c.contribution).collect::<Vec<_>>());
        let contributions: Vec<Contribution> = order.iter().take(top_n).map(|&k| all[k].clone()).collect();
        let neighbourhoods = contributions
            .iter()
            .map(|c| Neighbourhood {
                concept: c.concept,
                nodes: dict
                    .concept_nodes(c.concept)
                    .map(|node| trace(model, node, &stochastic, &pred.attention, &pred.relevance, &norms, top_n))
                    .collect(),
            })
            .collect();
        reports.push(ExplanationReport {
            sample_id: sample.id,
            diagnosis: pred.diagnosis,
            diagnosis_name: class_names[pred.diagnosis].clone(),
            true_label: sample.label,
            class_probs: pred.class_probs,
            concepts,
            contributions,
            neighbourhoods,
        });
    }
    Ok(reports)
}

fn trace(
    model: &DcgNet,
    node: usize,
    adjacency: &Tensor,
    attention: &Tensor,
    relevance: &[f64],
    norms: &[f64],
    top_n: usize,
) -> NodeTrace {
    let dict = model.dictionary();
    let row = adjacency.row(node);
    let edges = ranked(row)
        .into_iter()
        .take_while(|&j| row[j] > 0.0)
        .take(top_n)
        .map(|j| Edge {
            target: j,
            label: dict.node_label(j),
            weight: row[j],
        })
        .collect();
    let attn = attention.row(node);
    let top_patches = ranked(attn)
        .into_iter()
        .take(top_n)
        .map(|p| PatchWeight { patch: p, weight: attn[p] })
        .collect();
    NodeTrace {
        node,
        label: dict.node_label(node),
        relevance: relevance[node],
        prototype_norm: norms[node],
        edges,
        top_patches,
    }
}

impl ExplanationReport {
    /// Human-readable multi-line rendering.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let p = self.class_probs[self.diagnosis];
        let _ = writeln!(
            s,
            "sample {}: predicted {} (p={p:.4}), true class {}",
            self.sample_id, self.diagnosis_name, self.true_label
        );
        let _ = writeln!(s, "  concept values:");
        for c in &self.concepts {
            let probs: Vec<String> = c
                .values
                .iter()
                .zip(&c.value_probs)
                .map(|(v, p)| format!("{v}={p:.3}"))
                .collect();
            let mark = if c.predicted == c.truth { "" } else { "  (mismatch)" };
            let _ = writeln!(
                s,
                "    {}: {} | predicted {}, truth {}{mark}",
                c.name,
                probs.join(" "),
                c.values[c.predicted],
                c.values[c.truth]
            );
        }
        let _ = writeln!(s, "  contributions (relevance × probability):");
        for c in &self.contributions {
            let _ = writeln!(
                s,
                "    {:<16} {:.4} = {:.4} × {:.4}  [{}]",
                c.name, c.contribution, c.relevance, c.predicted_prob, c.predicted_value
            );
        }
        let _ = writeln!(s, "  graph neighbourhoods:");
        for n in &self.neighbourhoods {
            for t in &n.nodes {
                let edges: Vec<String> = t.edges.iter().map(|e| format!("{} ({:.3})", e.label, e.weight)).collect();
                let patches: Vec<String> = t.top_patches.iter().map(|p| format!("{}:{:.3}", p.patch, p.weight)).collect();
                let _ = writeln!(
                    s,
                    "    {} [relevance {:.3}, prototype norm {:.3}] -> {}",
                    t.label,
                    t.relevance,
                    t.prototype_norm,
                    if edges.is_empty() { "(no edges)".to_string() } else { edges.join(", ") }
                );
                let _ = writeln!(s, "      patches {}", patches.join(" "));
            }
        }
        s
    }
}
