//! The full network: prototypes → dual attention → concept graph →
//! concept-bottleneck diagnosis head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_maps, DcaOutput, DcaShared, DcaState, PatchEncoder, VisualTokens};
use crate::config::{LossWeights, ModelConfig};
use crate::dataset::Sample;
use crate::encoder::{EmbeddingTable, HashEncoder};
use crate::error::{Error, Result};
use crate::graph::{build_mask, Adjacency, ConceptGraph};
use crate::losses::{align_loss, concept_loss, consistency_loss, diagnosis_loss, LossBreakdown};
use crate::param::{BoundParams, ParamId, ParamStore};
use crate::prototypes::{project, PrototypeBank};
use crate::schema::ConceptDictionary;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sizes fixed by the data rather than by hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub num_classes: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
}

#[derive(Clone, Debug)]
pub struct DcgNet {
    config: ModelConfig,
    dict: ConceptDictionary,
    shape: DataShape,
    bank: PrototypeBank,
    store: ParamStore,
    pub projection: ParamId,
    pub encoder: PatchEncoder,
    pub dca: DcaState,
    pub graph: ConceptGraph,
    pub diag_w: ParamId,
    pub diag_b: ParamId,
}

/// Per-tape state shared by every sample of a batch.
#[derive(Clone, Debug)]
pub struct Pass {
    pub bound: BoundParams,
    pub shared: DcaShared,
    pub prototypes: Var,
    pub adjacency: Option<Adjacency>,
}

/// Tape handles for one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub tokens: VisualTokens,
    pub dca: DcaOutput,
    /// `M×d_v` node states after message passing.
    pub refined: Var,
    /// `1×(K·d_v)` concatenated per-concept pooled states.
    pub features: Var,
    /// `1×C` diagnosis logits.
    pub logits: Var,
}

/// Fixed per-run loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LossContext {
    pub concept_weights: Vec<Vec<f64>>,
    pub class_weights: Vec<f64>,
    pub smoothing: f64,
    pub weights: LossWeights,
}

impl LossContext {
    /// Unit class weights.
    pub fn unweighted(dict: &ConceptDictionary, num_classes: usize, smoothing: f64) -> Self {
        LossContext {
            concept_weights: dict.values_per_concept().into_iter().map(|m| vec![1.0; m]).collect(),
            class_weights: vec![1.0; num_classes],
            smoothing,
            weights: LossWeights::default(),
        }
    }
}

/// Plain-number summary of one sample's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub diagnosis: usize,
    pub class_probs: Vec<f64>,
    pub logits: Vec<f64>,
    /// Per concept: softmax of its value logits.
    pub value_probs: Vec<Vec<f64>>,
    pub concepts: Vec<usize>,
    /// Per node relevance gate.
    pub relevance: Vec<f64>,
    /// Per concept mean relevance.
    pub concept_relevance: Vec<f64>,
    /// `M×P` head-averaged patch attention.
    pub attention: Tensor,
    /// `M×d_v` node states after message passing.
    pub refined: Tensor,
}

impl DcgNet {
    /// Builds the prototype bank from the configured text encoder and
    /// initializes all parameters from `seed`.
    pub fn new(config: ModelConfig, dict: ConceptDictionary, shape: DataShape, prior: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        let bank = match &config.embeddings {
            Some(path) => {
                let table = EmbeddingTable::load(path)?;
                PrototypeBank::build(&dict, &table, config.prompt_ensemble)?
            }
            None => {
                let enc = HashEncoder::new(config.encoder_seed, config.text_dim)?;
                PrototypeBank::build(&dict, &enc, config.prompt_ensemble)?
            }
        };
        Self::with_bank(config, dict, shape, bank, prior, seed)
    }

    pub fn with_bank(
        config: ModelConfig,
        dict: ConceptDictionary,
        shape: DataShape,
        bank: PrototypeBank,
        prior: Tensor,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let m = dict.num_nodes();
        if bank.num_nodes() != m {
            return Err(Error::Schema(format!("prototype bank has {} rows, dictionary has {m} nodes", bank.num_nodes())));
        }
        if prior.shape() != [m, m] {
            return Err(Error::shape("prior", prior.shape(), &[m, m]));
        }
        if shape.num_classes < 2 || shape.num_patches == 0 || shape.patch_dim == 0 {
            return Err(Error::Config(format!("invalid data shape {shape:?}")));
        }
        let d_v = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let projection = store.insert_glorot("prototypes/projection", bank.text_dim(), d_v, &mut rng)?;
        let encoder = PatchEncoder::new(&mut store, &mut rng, shape.patch_dim, d_v)?;
        let dca = DcaState::new(&mut store, &mut rng, &dict, d_v, config.heads, config.temperature)?;
        let graph = ConceptGraph::new(
            &mut store,
            &mut rng,
            prior,
            build_mask(&dict),
            d_v,
            config.graph_layers,
            config.top_k,
        )?;
        let diag_w = store.insert_glorot("diagnosis/w", dict.num_concepts() * d_v, shape.num_classes, &mut rng)?;
        let diag_b = store.insert("diagnosis/b", Tensor::zeros(&[shape.num_classes]))?;
        Ok(DcgNet {
            config,
            dict,
            shape,
            bank,
            store,
            projection,
            encoder,
            dca,
            graph,
            diag_w,
            diag_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dictionary(&self) -> &ConceptDictionary {
        &self.dict
    }

    pub fn data_shape(&self) -> DataShape {
        self.shape
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    /// Binds parameters (trainable or frozen) and computes the per-batch
    /// shared tensors, including the adjacency from the current scores.
    pub fn begin(&self, tape: &mut Tape, trainable: bool) -> Result<Pass> {
        let bound = if trainable {
            self.store.bind(tape)
        } else {
            self.store.bind_frozen(tape)
        };
        let prototypes = project(tape, &self.bank, bound.var(self.projection))?;
        let shared = self.dca.prepare(tape, &bound, prototypes)?;
        let adjacency = if self.config.use_graph {
            Some(self.graph.adjacency(tape, &bound)?)
        } else {
            None
        };
        Ok(Pass {
            bound,
            shared,
            prototypes,
            adjacency,
        })
    }

    pub fn forward(&self, tape: &mut Tape, pass: &Pass, patches: &Tensor) -> Result<SampleOutput> {
        let expect = [self.shape.num_patches, self.shape.patch_dim];
        if patches.shape() != expect {
            return Err(Error::shape("forward", patches.shape(), &expect));
        }
        let raw = tape.constant(patches.clone());
        let tokens = self.encoder.encode(tape, &pass.bound, raw)?;
        let dca = self.dca.forward(tape, &pass.bound, &pass.shared, &tokens)?;
        let refined = match &pass.adjacency {
            Some(adj) => self.graph.propagate(tape, &pass.bound, dca.fused, adj.stochastic)?,
            None => dca.fused,
        };
        let (features, logits) = self.diagnosis_head(tape, pass, refined)?;
        Ok(SampleOutput {
            tokens,
            dca,
            refined,
            features,
            logits,
        })
    }

    /// Pools refined node states per concept, concatenates them in concept
    /// order and applies the affine diagnosis layer. Nothing else feeds the
    /// diagnosis logits.
    pub fn diagnosis_head(&self, tape: &mut Tape, pass: &Pass, refined: Var) -> Result<(Var, Var)> {
        let pooled = tape.matmul(pass.shared.pool(), refined)?;
        let width = self.dict.num_concepts() * self.config.embed_dim;
        let features = tape.reshape(pooled, &[1, width])?;
        let o = tape.matmul(features, pass.bound.var(self.diag_w))?;
        let logits = tape.add_row(o, pass.bound.var(self.diag_b))?;
        Ok((features, logits))
    }

    /// Diagnosis logits computed from given refined node states alone.
    pub fn replay_head(&self, refined: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = self.begin(&mut tape, false)?;
        let r = tape.constant(refined.clone());
        let (_, logits) = self.diagnosis_head(&mut tape, &pass, r)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Unweighted loss terms for one sample, plus the alignment targets used.
    pub fn sample_losses(
        &self,
        tape: &mut Tape,
        out: &SampleOutput,
        sample: &Sample,
        ctx: &LossContext,
        align_targets: Option<&[f64]>,
    ) -> Result<([Var; 4], Vec<f64>)> {
        let u = &out.dca.concept_logits;
        let (align, targets) = align_loss(tape, out.dca.concept_relevance, u, align_targets)?;
        let concept = concept_loss(tape, u, &sample.concepts, &ctx.concept_weights)?;
        let cons = consistency_loss(tape, u, out.dca.concept_relevance)?;
        let diag = diagnosis_loss(tape, out.logits, sample.label, ctx.smoothing, &ctx.class_weights)?;
        Ok(([align, concept, cons, diag], targets))
    }

    /// Batch-mean weighted objective on `tape`. Returns the scalar to
    /// differentiate, the batch-mean breakdown and the alignment targets of
    /// every sample.
    pub fn objective(
        &self,
        tape: &mut Tape,
        pass: &Pass,
        batch: &[&Sample],
        ctx: &LossContext,
        align_targets: Option<&[Vec<f64>]>,
    ) -> Result<(Var, LossBreakdown, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let w = &ctx.weights;
        let scale = [w.align, w.concept, w.cons, w.diag];
        let mut sums = [0.0; 4];
        let mut acc: Option<Var> = None;
        let mut all_targets = Vec::with_capacity(batch.len());
        for (i, sample) in batch.iter().enumerate() {
            let out = self.forward(tape, pass, &sample.patches)?;
            let fixed = align_targets.map(|t| t[i].as_slice());
            let (parts, targets) = self.sample_losses(tape, &out, sample, ctx, fixed)?;
            all_targets.push(targets);
            for (j, &p) in parts.iter().enumerate() {
                sums[j] += tape.item(p);
                let weighted = tape.scale(p, scale[j]);
                acc = Some(match acc {
                    Some(a) => tape.add(a, weighted)?,
                    None => weighted,
                });
            }
        }
        let n = batch.len() as f64;
        let total = tape.scale(acc.expect("non-empty batch"), 1.0 / n);
        let mean = sums.map(|s| s / n);
        let breakdown = LossBreakdown::from_parts(
            mean[0] * w.align,
            mean[1] * w.concept,
            mean[2] * w.cons,
            mean[3] * w.diag,
        );
        Ok((total, breakdown, all_targets))
    }

    /// Inference on a sequence of patch grids, reusing one tape.
    pub fn predict<'a>(&self, patches: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let pass = self.begin(&mut tape, false)?;
        let mark = tape.len();
        let mut out = Vec::new();
        for p in patches {
            let fwd = self.forward(&mut tape, &pass, p)?;
            out.push(self.summarize(&mut tape, &fwd)?);
            tape.truncate(mark);
        }
        Ok(out)
    }

    fn summarize(&self, tape: &mut Tape, fwd: &SampleOutput) -> Result<Prediction> {
        let logits = tape.value(fwd.logits).data().to_vec();
        let probs = tape.softmax(fwd.logits, 1)?;
        let class_probs = tape.value(probs).data().to_vec();
        let mut value_probs = Vec::with_capacity(fwd.dca.concept_logits.len());
        let mut concepts = Vec::with_capacity(value_probs.capacity());
        for &u in &fwd.dca.concept_logits {
            concepts.push(argmax(tape.value(u).data()));
            let p = tape.softmax(u, 1)?;
            value_probs.push(tape.value(p).data().to_vec());
        }
        Ok(Prediction {
            diagnosis: argmax(&logits),
            class_probs,
            logits,
            value_probs,
            concepts,
            relevance: tape.value(fwd.dca.relevance).data().to_vec(),
            concept_relevance: tape.value(fwd.dca.concept_relevance).data().to_vec(),
            attention: attention_maps(tape, &fwd.dca.head_attention),
            refined: tape.value(fwd.refined).clone(),
        })
    }

    /// `(Ã, Ā, Â)` for the current parameters.
    pub fn adjacency(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let adj = self.graph.adjacency(&mut tape, &bound)?;
        Ok((
            tape.value(adj.unnorm).clone(),
            tape.value(adj.sparse).clone(),
            tape.value(adj.stochastic).clone(),
        ))
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
