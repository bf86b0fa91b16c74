//! Canonical concept-value prototypes.

use crate::error::{Error, Result};
use crate::encoder::TextEncoder;
use crate::schema::ConceptDictionary;
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_into, Tensor};

/// Prompt embeddings averaged per node (`raw`, `M×d_t`) and their
/// projection into the visual width (`projected`, `M×d_v`).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    raw: Tensor,
    projected: Option<Tensor>,
}

impl PrototypeBank {
    /// Builds one prototype per node: each prompt embedding is normalized to
    /// unit length and the prototype is their plain mean (not renormalized).
    /// With `ensemble = false` only the bare value name is encoded.
    pub fn build(dict: &ConceptDictionary, encoder: &dyn TextEncoder, ensemble: bool) -> Result<Self> {
        let d_t = encoder.dim();
        let mut data = Vec::with_capacity(dict.num_nodes() * d_t);
        for id in 0..dict.num_nodes() {
            let (k, m) = dict.node(id)?;
            let prompts = if ensemble {
                dict.build_prompts(k, m)?
            } else {
                vec![dict.concepts()[k].values[m].clone()]
            };
            data.extend(mean_of_unit_embeddings(encoder, &prompts)?);
        }
        Ok(PrototypeBank {
            raw: Tensor::matrix(dict.num_nodes(), d_t, data)?,
            projected: None,
        })
    }

    pub fn from_raw(raw: Tensor) -> Result<Self> {
        raw.dims2("prototype bank")?;
        Ok(PrototypeBank { raw, projected: None })
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn text_dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.rows()
    }

    /// Euclidean norm of each prototype row.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.raw.rows())
            .map(|i| self.raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Recomputes the cached projection for the current `W_p`.
    pub fn refresh(&mut self, w_p: &Tensor) -> Result<&Tensor> {
        let (d_t, d_v) = w_p.dims2("project")?;
        if d_t != self.text_dim() {
            return Err(Error::shape("project", self.raw.shape(), w_p.shape()));
        }
        let mut out = vec![0.0; self.num_nodes() * d_v];
        matmul_into(self.raw.data(), w_p.data(), &mut out, self.num_nodes(), d_t, d_v);
        self.projected = Some(Tensor::matrix(self.num_nodes(), d_v, out)?);
        Ok(self.projected.as_ref().expect("just set"))
    }

    pub fn projected(&self) -> Option<&Tensor> {
        self.projected.as_ref()
    }

    /// True when the cached projection equals `raw · w_p` bit-for-bit.
    pub fn is_consistent(&self, w_p: &Tensor) -> bool {
        let Some(cached) = &self.projected else { return false };
        let mut fresh = self.clone();
        match fresh.refresh(w_p) {
            Ok(t) => t == cached,
            Err(_) => false,
        }
    }
}

/// Differentiable projection `T_M · W_p`; the prototypes are a constant so
/// only `w_p` receives gradient.
pub fn project(tape: &mut Tape, bank: &PrototypeBank, w_p: Var) -> Result<Var> {
    let raw = tape.constant(bank.raw.clone());
    tape.matmul(raw, w_p)
}

fn mean_of_unit_embeddings(encoder: &dyn TextEncoder, prompts: &[String]) -> Result<Vec<f64>> {
    let d_t = encoder.dim();
    let mut acc = vec![0.0; d_t];
    for prompt in prompts {
        let e = encoder.encode(prompt)?;
        if e.len() != d_t {
            return Err(Error::shape("encode", &[d_t], &[e.len()]));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::numeric("prototype", format!("embedding of {prompt:?} has zero norm")));
        }
        for (a, v) in acc.iter_mut().zip(&e) {
            *a += v / norm;
        }
    }
    let n = prompts.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}
