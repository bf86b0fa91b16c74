//! Concept-value graph: co-occurrence prior, structural mask, learnable
//! sparse adjacency and message passing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{BoundParams, ParamId, ParamStore};
use crate::schema::ConceptDictionary;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Positive pointwise mutual information between nodes, estimated from the
/// value assignments of a labeled split.
#[derive(Clone, Debug, PartialEq)]
pub struct PpmiPrior {
    /// Symmetric `M×M`, non-negative, zero diagonal.
    pub matrix: Tensor,
    pub samples: usize,
    /// Number of samples in which each node is active.
    pub marginals: Vec<usize>,
    pub smoothing: f64,
}

/// Builds the prior from one value index per concept per sample. Two nodes
/// co-occur when both are the annotated values of their concepts in the
/// same sample. With `N` samples and smoothing `eps`:
/// `p_i = (n_i + eps) / (N + 2 eps)`, `p_ij = (n_ij + eps) / (N + 2 eps)`,
/// entry `max(0, ln(p_ij / (p_i p_j)))`.
pub fn build_ppmi(labels: &[Vec<usize>], dict: &ConceptDictionary, eps: f64) -> Result<PpmiPrior> {
    if labels.is_empty() {
        return Err(Error::Contract("co-occurrence prior needs at least one sample".into()));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("smoothing must be >= 0, got {eps}")));
    }
    let m = dict.num_nodes();
    let mut single = vec![0usize; m];
    let mut pair = vec![0usize; m * m];
    let mut active = Vec::with_capacity(dict.num_concepts());
    for (s, row) in labels.iter().enumerate() {
        if row.len() != dict.num_concepts() {
            return Err(Error::Schema(format!(
                "sample {s} has {} concept labels, expected {}",
                row.len(),
                dict.num_concepts()
            )));
        }
        active.clear();
        for (k, &a) in row.iter().enumerate() {
            active.push(dict.node_id(k, a)?);
        }
        for &i in &active {
            single[i] += 1;
            for &j in &active {
                pair[i * m + j] += 1;
            }
        }
    }
    let denom = labels.len() as f64 + 2.0 * eps;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let p_i = (single[i] as f64 + eps) / denom;
            let p_j = (single[j] as f64 + eps) / denom;
            let p_ij = (pair[i * m + j] as f64 + eps) / denom;
            // ln(0) = -inf when eps = 0 and the pair never co-occurs; the
            // positive clamp turns that into 0. 0/0 cannot happen for
            // co-occurring pairs because then both marginals are positive.
            let pmi = (p_ij / (p_i * p_j)).ln();
            out[i * m + j] = if pmi > 0.0 { pmi } else { 0.0 };
        }
    }
    Ok(PpmiPrior {
        matrix: Tensor::matrix(m, m, out)?,
        samples: labels.len(),
        marginals: single,
        smoothing: eps,
    })
}

/// 1 for every ordered pair of nodes from different concepts, else 0.
pub fn build_mask(dict: &ConceptDictionary) -> Tensor {
    let m = dict.num_nodes();
    let mut r = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            if dict.concept_of(i) != dict.concept_of(j) {
                r.set(i, j, 1.0);
            }
        }
    }
    r
}

/// `softplus(B) ⊙ R ⊙ A⁰`; gradient reaches only `b`.
pub fn edge_weights(tape: &mut Tape, b: Var, mask: &Tensor, prior: &Tensor) -> Result<Var> {
    if mask.shape() != prior.shape() {
        return Err(Error::shape("edge_weights", mask.shape(), prior.shape()));
    }
    let gated: Vec<f64> = mask.data().iter().zip(prior.data()).map(|(r, a)| r * a).collect();
    let gated = tape.constant(Tensor::new(mask.shape().to_vec(), gated)?);
    let sp = tape.softplus(b);
    tape.mul(sp, gated)
}

/// Keeps the `k_top` largest entries of each row (lower column wins ties).
pub fn top_k_sparsify(tape: &mut Tape, unnorm: Var, k_top: usize) -> Result<Var> {
    if k_top == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    tape.top_k_rows(unnorm, k_top)
}

/// Divides each row with positive sum by that sum; zero rows stay zero.
pub fn row_normalize(tape: &mut Tape, sparse: Var) -> Result<Var> {
    tape.row_normalize(sparse)
}

/// Intermediate matrices of the adjacency pipeline.
#[derive(Clone, Copy, Debug)]
pub struct Adjacency {
    pub unnorm: Var,
    pub sparse: Var,
    pub stochastic: Var,
}

/// Learnable part of the graph plus its fixed prior and mask.
#[derive(Clone, Debug)]
pub struct ConceptGraph {
    pub scores: ParamId,
    pub self_w: Vec<ParamId>,
    pub neigh_w: Vec<ParamId>,
    prior: Tensor,
    mask: Tensor,
    k_top: usize,
}

impl ConceptGraph {
    /// Scores start at zero so the initial graph is `ln 2 · R ⊙ A⁰`.
    /// `k_top` larger than `M - 1` keeps every edge.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prior: Tensor,
        mask: Tensor,
        d_v: usize,
        layers: usize,
        k_top: usize,
    ) -> Result<Self> {
        let (m, m2) = prior.dims2("concept_graph")?;
        if m != m2 || mask.shape() != prior.shape() {
            return Err(Error::shape("concept_graph", prior.shape(), mask.shape()));
        }
        if layers == 0 {
            return Err(Error::Config("graph needs at least one layer".into()));
        }
        if k_top == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        let scores = store.insert("graph/scores", Tensor::zeros(&[m, m]))?;
        let mut self_w = Vec::with_capacity(layers);
        let mut neigh_w = Vec::with_capacity(layers);
        for l in 0..layers {
            self_w.push(store.insert_glorot(&format!("graph/self_w/{l}"), d_v, d_v, rng)?);
            neigh_w.push(store.insert_glorot(&format!("graph/neigh_w/{l}"), d_v, d_v, rng)?);
        }
        Ok(ConceptGraph {
            scores,
            self_w,
            neigh_w,
            prior,
            mask,
            k_top,
        })
    }

    pub fn prior(&self) -> &Tensor {
        &self.prior
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn k_top(&self) -> usize {
        self.k_top
    }

    pub fn layers(&self) -> usize {
        self.self_w.len()
    }

    /// Recomputes `Ã`, `Ā` and `Â` from the current scores.
    pub fn adjacency(&self, tape: &mut Tape, bound: &BoundParams) -> Result<Adjacency> {
        let unnorm = edge_weights(tape, bound.var(self.scores), &self.mask, &self.prior)?;
        let sparse = top_k_sparsify(tape, unnorm, self.k_top)?;
        let stochastic = row_normalize(tape, sparse)?;
        Ok(Adjacency {
            unnorm,
            sparse,
            stochastic,
        })
    }

    /// `H ← ReLU(H·W_self + Â·H·W_neigh)`, once per layer.
    pub fn propagate(&self, tape: &mut Tape, bound: &BoundParams, h0: Var, adjacency: Var) -> Result<Var> {
        let mut h = h0;
        for (&ws, &wn) in self.self_w.iter().zip(&self.neigh_w) {
            let own = tape.matmul(h, bound.var(ws))?;
            let gathered = tape.matmul(adjacency, h)?;
            let neigh = tape.matmul(gathered, bound.var(wn))?;
            let pre = tape.add(own, neigh)?;
            h = tape.relu(pre);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ConceptSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dict(sizes: &[usize]) -> ConceptDictionary {
        let concepts = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let names: Vec<String> = (0..n).map(|m| format!("v{m}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                ConceptSpec::new(format!("c{k}"), &refs)
            })
            .collect();
        ConceptDictionary::new(concepts, vec![]).unwrap()
    }

    #[test]
    fn perfect_co_occurrence_is_ln_two() {
        let d = dict(&[2, 2]);
        // Node 0 (c0=v0) and node 2 (c1=v0) appear together in 2 of 4 samples.
        let labels = vec![vec![0, 0], vec![0, 0], vec![1, 1], vec![1, 1]];
        let p = build_ppmi(&labels, &d, 0.0).unwrap();
        assert!((p.matrix.at(0, 2) - 2f64.ln()).abs() < 1e-12);
        assert!((p.matrix.at(0, 2) - 0.6931).abs() < 1e-4);
        // Never co-occurring: -inf clamped to 0.
        assert_eq!(p.matrix.at(0, 3), 0.0);
        assert_eq!(p.matrix.at(0, 0), 0.0);
        assert_eq!(p.marginals, vec![2, 2, 2, 2]);
    }

    #[test]
    fn independent_labels_have_small_pmi() {
        let d = dict(&[2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<Vec<usize>> = (0..10_000)
            .map(|_| vec![rng.random_range(0..2), rng.random_range(0..3)])
            .collect();
        let p = build_ppmi(&labels, &d, 0.0).unwrap();
        assert!(p.matrix.data().iter().all(|&v| v < 0.05));
    }

    #[test]
    fn ppmi_errors_and_symmetry() {
        let d = dict(&[2, 2, 3]);
        assert!(build_ppmi(&[], &d, 1.0).is_err());
        assert!(build_ppmi(&[vec![0, 0, 0]], &d, -1.0).is_err());
        assert!(build_ppmi(&[vec![0, 0]], &d, 1.0).is_err());
        assert!(build_ppmi(&[vec![0, 2, 0]], &d, 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<Vec<usize>> = (0..30)
            .map(|_| vec![rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..3)])
            .collect();
        let p = build_ppmi(&labels, &d, 1.0).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(p.matrix.at(i, j), p.matrix.at(j, i));
                assert!(p.matrix.at(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn mask_cases() {
        let r = build_mask(&dict(&[4]));
        assert!(r.data().iter().all(|&v| v == 0.0));
        let r = build_mask(&dict(&[2, 2]));
        assert_eq!(r.data().iter().filter(|&&v| v == 1.0).count(), 8);
        assert!((0..4).all(|i| r.at(i, i) == 0.0));
    }

    #[test]
    fn edge_weight_cases() {
        let mut tape = Tape::new();
        let b = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 5.0, -2.0]).unwrap().with_requires_grad(true));
        let mask = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let prior = Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        let w = edge_weights(&mut tape, b, &mask, &prior).unwrap();
        assert!((tape.value(w).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(&tape.value(w).data()[1..], &[0.0, 0.0]);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        let g = tape.grad(b).unwrap();
        assert_eq!(g[0], 0.5);
        assert_eq!((g[1], g[2]), (0.0, 0.0));
    }

    #[test]
    fn sparsify_and_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, 0.1, 0.5], vec![0.4, 0.4, 0.1]]).unwrap());
        let s = top_k_sparsify(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0, 0.5, 0.4, 0.0, 0.0]);
        let all = top_k_sparsify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(all).data(), &[0.3, 0.0, 0.5, 0.4, 0.4, 0.0]);
        assert!(top_k_sparsify(&mut tape, x, 0).is_err());

        let y = tape.constant(Tensor::from_rows(&[vec![2.0, 2.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let n = row_normalize(&mut tape, y).unwrap();
        assert_eq!(tape.value(n).data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let neg = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        assert!(matches!(row_normalize(&mut tape, neg), Err(Error::Contract(_))));
    }

    fn graph_with(m: usize, d_v: usize, layers: usize, k_top: usize) -> (ParamStore, ConceptGraph) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = ConceptGraph::new(
            &mut store,
            &mut rng,
            Tensor::zeros(&[m, m]),
            Tensor::zeros(&[m, m]),
            d_v,
            layers,
            k_top,
        )
        .unwrap();
        (store, g)
    }

    #[test]
    fn propagate_hand_cases() {
        let (mut store, g) = graph_with(2, 1, 1, 1);
        store.get_mut(g.self_w[0]).tensor = Tensor::zeros(&[1, 1]);
        store.get_mut(g.neigh_w[0]).tensor = Tensor::filled(&[1, 1], 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.constant(Tensor::matrix(2, 1, vec![3.0, 5.0]).unwrap());
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let h = g.propagate(&mut tape, &bound, h0, a).unwrap();
        assert_eq!(tape.value(h).data(), &[5.0, 0.0]);

        let (mut store, g) = graph_with(3, 2, 1, 1);
        store.get_mut(g.self_w[0]).tensor = Tensor::identity(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.constant(Tensor::matrix(3, 2, vec![0.5, 1.0, 0.0, 2.0, 3.0, 0.25]).unwrap());
        let a = tape.constant(Tensor::zeros(&[3, 3]));
        let h = g.propagate(&mut tape, &bound, h0, a).unwrap();
        assert_eq!(tape.value(h), tape.value(h0));

        let (store, g) = graph_with(3, 2, 2, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h0 = tape.constant(Tensor::zeros(&[3, 2]));
        let a = tape.constant(Tensor::filled(&[3, 3], 0.3));
        let h = g.propagate(&mut tape, &bound, h0, a).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    /// Straightforward per-node loops, kept deliberately free of matrix ops.
    fn naive_propagate(h0: &[Vec<f64>], adj: &[Vec<f64>], layers: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> Vec<Vec<f64>> {
        let mut h = h0.to_vec();
        for (ws, wn) in layers {
            let d = ws.len();
            let mut next = vec![vec![0.0; d]; h.len()];
            for node in 0..h.len() {
                let mut agg = vec![0.0; d];
                for (other, row) in h.iter().enumerate() {
                    for c in 0..d {
                        agg[c] += adj[node][other] * row[c];
                    }
                }
                for out in 0..d {
                    let mut v = 0.0;
                    for c in 0..d {
                        v += h[node][c] * ws[c][out] + agg[c] * wn[c][out];
                    }
                    next[node][out] = v.max(0.0);
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn propagate_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let m = 2 + trial % 5;
            let d_v = 1 + trial % 4;
            let layers = 1 + trial % 2;
            let (store, g) = graph_with(m, d_v, layers, 1);
            let h0: Vec<Vec<f64>> = (0..m).map(|_| (0..d_v).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let adj: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let weights: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..layers)
                .map(|l| {
                    let as_rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
                    (as_rows(store.tensor(g.self_w[l])), as_rows(store.tensor(g.neigh_w[l])))
                })
                .collect();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let hv = tape.constant(Tensor::from_rows(&h0).unwrap());
            let av = tape.constant(Tensor::from_rows(&adj).unwrap());
            let out = g.propagate(&mut tape, &bound, hv, av).unwrap();
            let expect = naive_propagate(&h0, &adj, &weights);
            for (i, row) in expect.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((tape.value(out).at(i, j) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn initial_adjacency_follows_prior() {
        let d = dict(&[2, 3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<Vec<usize>> = (0..40)
            .map(|_| {
                let a = rng.random_range(0..2);
                vec![a, a + rng.random_range(0..2), rng.random_range(0..2)]
            })
            .collect();
        let prior = build_ppmi(&labels, &d, 1.0).unwrap().matrix;
        let mask = build_mask(&d);
        let mut store = ParamStore::new();
        let g = ConceptGraph::new(&mut store, &mut rng, prior.clone(), mask.clone(), 4, 2, 3).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let adj = g.adjacency(&mut tape, &bound).unwrap();
        let un = tape.value(adj.unnorm);
        for i in 0..7 {
            for j in 0..7 {
                assert!((un.at(i, j) - 2f64.ln() * mask.at(i, j) * prior.at(i, j)).abs() < 1e-15);
            }
        }
        let st = tape.value(adj.stochastic);
        for i in 0..7 {
            let row = st.row(i);
            let nz = row.iter().filter(|&&v| v > 0.0).count();
            assert!(nz <= 3);
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            for j in 0..7 {
                if row[j] > 0.0 {
                    assert!(mask.at(i, j) == 1.0 && prior.at(i, j) > 0.0);
                }
            }
        }
    }
}
