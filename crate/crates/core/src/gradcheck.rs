//! Central finite-difference checks against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::dataset::Sample;
use crate::error::Result;
use crate::model::{DataShape, DcgNet, LossContext};
use crate::schema::{ConceptDictionary, ConceptSpec, DEFAULT_TEMPLATES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiff {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Negative control: perturbs the first analytic gradient entry.
    pub corrupt: bool,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        FiniteDiff {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            corrupt: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ErrorLocation {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<ErrorLocation>,
    pub entries: usize,
    pub passed: bool,
}

/// Compares reverse-mode and central-difference gradients of a scalar
/// function with respect to each of `inputs`.
pub fn check_function<F>(name: &str, inputs: &[Tensor], f: F, cfg: FiniteDiff) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut outcome = CheckOutcome::new(name);
    let mut work = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for idx in 0..grads.len() {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + cfg.step;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - cfg.step;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let mut a = grads[idx];
            if cfg.corrupt && which == 0 && idx == 0 {
                a += 1e-2 * a.abs().max(1.0);
            }
            outcome.record(format!("input{which}"), idx, a, numeric, cfg);
        }
    }
    outcome.finish(cfg);
    Ok(outcome)
}

impl CheckOutcome {
    pub(crate) fn new(name: &str) -> Self {
        CheckOutcome {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst: None,
            entries: 0,
            passed: true,
        }
    }

    pub(crate) fn record(&mut self, input: String, index: usize, analytic: f64, numeric: f64, cfg: FiniteDiff) {
        let err = relative_error(analytic, numeric, cfg.floor);
        self.entries += 1;
        if err > self.max_rel_error || self.worst.is_none() || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some(ErrorLocation {
                input,
                index,
                analytic,
                numeric,
            });
        }
    }

    pub(crate) fn finish(&mut self, cfg: FiniteDiff) {
        self.passed = self.max_rel_error < cfg.tolerance;
    }
}

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform in [-2, 2] but at least `margin` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if f64::abs(v) > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Rows whose entries are separated by at least 0.1 so that selection
/// operators are locally constant under the finite-difference step.
fn well_separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut levels: Vec<f64> = (0..cols).map(|j| 0.2 + 0.3 * j as f64).collect();
        for i in (1..cols).rev() {
            let j = rng.random_range(0..=i);
            levels.swap(i, j);
        }
        data.extend(levels.iter().map(|v| v + rng.random_range(-0.05..0.05)));
    }
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Projects a non-scalar output to a scalar with fixed pseudo-random weights.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            cases.push(OpCase { name: $name, inputs: vec![$($input),*], f: Box::new($f) });
        };
    }
    case!("matmul", [uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[4, 2], -2.0, 2.0)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    });
    case!("transpose", [uniform(&mut rng, &[3, 2], -2.0, 2.0)], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y, 2)
    });
    case!("add", [uniform(&mut rng, &[2, 3], -2.0, 2.0), uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 3)
    });
    case!("sub", [uniform(&mut rng, &[2, 3], -2.0, 2.0), uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 4)
    });
    case!("mul", [uniform(&mut rng, &[2, 3], -2.0, 2.0), uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 5)
    });
    case!("add_row", [uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[4], -2.0, 2.0)], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 6)
    });
    case!("scale_rows", [uniform(&mut rng, &[3, 4], -2.0, 2.0), uniform(&mut rng, &[3], -2.0, 2.0)], |t, v| {
        let y = t.scale_rows(v[0], v[1])?;
        project(t, y, 7)
    });
    case!("scale", [uniform(&mut rng, &[2, 2], -2.0, 2.0)], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 8)
    });
    case!("add_scalar", [uniform(&mut rng, &[2, 2], -2.0, 2.0)], |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        project(t, y, 9)
    });
    case!("exp", [uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.exp(v[0]);
        project(t, y, 10)
    });
    case!("log", [uniform(&mut rng, &[2, 3], 0.1, 2.0)], |t, v| {
        let y = t.log(v[0])?;
        project(t, y, 11)
    });
    case!("sigmoid", [uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 12)
    });
    case!("softplus", [uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.softplus(v[0]);
        project(t, y, 13)
    });
    case!("relu", [away_from_zero(&mut rng, &[3, 3], 0.01)], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 14)
    });
    case!("clamp_min", [away_from_zero(&mut rng, &[3, 3], 0.01)], |t, v| {
        let y = t.clamp_min(v[0], 0.0);
        project(t, y, 15)
    });
    case!("softmax", [uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| {
        let a = t.softmax(v[0], 1)?;
        let b = t.softmax(v[0], 0)?;
        let y = t.add(a, b)?;
        project(t, y, 16)
    });
    case!("log_softmax", [uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| {
        let y = t.log_softmax(v[0], 1)?;
        project(t, y, 17)
    });
    case!("sum", [uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    });
    case!("mean_axis", [uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| {
        let a = t.mean_axis(v[0], 0)?;
        let b = t.mean_axis(v[0], 1)?;
        let pa = project(t, a, 18)?;
        let pb = project(t, b, 19)?;
        t.add(pa, pb)
    });
    case!("max_axis", [well_separated(&mut rng, 3, 4)], |t, v| {
        let y = t.max_axis(v[0], 1)?;
        project(t, y, 20)
    });
    case!("concat", [uniform(&mut rng, &[2, 3], -2.0, 2.0), uniform(&mut rng, &[2, 2], -2.0, 2.0)], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        project(t, y, 21)
    });
    case!("index_select", [uniform(&mut rng, &[4, 3], -2.0, 2.0)], |t, v| {
        let rows = t.index_select(v[0], 0, &[2, 0, 2])?;
        let cols = t.index_select(v[0], 1, &[1])?;
        let pr = project(t, rows, 22)?;
        let pc = project(t, cols, 23)?;
        t.add(pr, pc)
    });
    case!("reshape", [uniform(&mut rng, &[2, 3], -2.0, 2.0)], |t, v| {
        let y = t.reshape(v[0], &[3, 2])?;
        project(t, y, 24)
    });
    case!("l2_normalize", [uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| {
        let y = t.l2_normalize(v[0])?;
        project(t, y, 25)
    });
    case!("top_k_rows", [well_separated(&mut rng, 4, 5)], |t, v| {
        let y = t.top_k_rows(v[0], 2)?;
        project(t, y, 26)
    });
    case!("row_normalize", [uniform(&mut rng, &[3, 4], 0.1, 2.0)], |t, v| {
        let y = t.row_normalize(v[0])?;
        project(t, y, 27)
    });
    case!("duplicate_use", [uniform(&mut rng, &[2, 2], -2.0, 2.0)], |t, v| {
        // x used on both sides of a product and again in a sum
        let prod = t.matmul(v[0], v[0])?;
        let y = t.add(prod, v[0])?;
        project(t, y, 28)
    });
    cases
}

pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Runs the per-operation suite, optionally restricted to one op name.
pub fn run_op_checks(only: Option<&str>, cfg: FiniteDiff) -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .filter(|c| only.is_none_or(|name| name == c.name))
        .map(|c| check_function(c.name, &c.inputs, c.f, cfg))
        .collect()
}

/// A deliberately small model and two-sample batch for end-to-end
/// checks: two concepts of two values, `d_v = 8`, four patches, and
/// `top_k = M − 1` so that edge selection cannot flip under a perturbation.
pub fn tiny_fixture(seed: u64) -> Result<(DcgNet, Vec<Sample>, LossContext)> {
    let dict = ConceptDictionary::new(
        vec![
            ConceptSpec::new("shape", &["round", "oval"]),
            ConceptSpec::new("colour", &["pale", "dark"]).with_synonyms("dark", &["deep"]),
        ],
        DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
    )?;
    let m = dict.num_nodes();
    let config = ModelConfig {
        text_dim: 8,
        embed_dim: 8,
        heads: 2,
        graph_layers: 2,
        top_k: m - 1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prior = uniform(&mut rng, &[m, m], 0.2, 1.5);
    for i in 0..m {
        for j in 0..i {
            let v = prior.data()[i * m + j];
            prior.data_mut()[j * m + i] = v;
        }
    }
    let shape = DataShape {
        num_classes: 3,
        num_patches: 4,
        patch_dim: 3,
    };
    let mut model = DcgNet::new(config, dict.clone(), shape, prior, seed)?;
    // Move the edge scores off their all-zero initialization so the check
    // also covers a generic point of the adjacency pipeline.
    let scores = model.graph.scores;
    let b = uniform(&mut rng, &[m, m], -1.0, 1.0);
    model.params_mut().get_mut(scores).tensor.data_mut().copy_from_slice(b.data());

    let batch = vec![
        Sample {
            id: 0,
            label: 2,
            concepts: vec![1, 0],
            patches: uniform(&mut rng, &[4, 3], -2.0, 2.0),
        },
        Sample {
            id: 1,
            label: 0,
            concepts: vec![0, 1],
            patches: uniform(&mut rng, &[4, 3], -2.0, 2.0),
        },
    ];
    let mut ctx = LossContext::unweighted(&dict, 3, 0.1);
    ctx.class_weights = vec![0.5, 1.5, 2.0];
    ctx.concept_weights = vec![vec![0.8, 1.25], vec![2.0, 0.4]];
    Ok((model, batch, ctx))
}

/// Total-objective gradient of every model parameter versus central finite
/// differences. Alignment targets are detached in the model, so they are
/// frozen at the base point for the numeric evaluations too.
pub fn check_model(model: &DcgNet, batch: &[Sample], ctx: &LossContext, cfg: FiniteDiff) -> Result<CheckOutcome> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut tape = Tape::new();
    let pass = model.begin(&mut tape, true)?;
    let (total, _, targets) = model.objective(&mut tape, &pass, &refs, ctx, None)?;
    tape.backward(total)?;
    let mut work = model.clone();
    work.params_mut().zero_grads();
    work.params_mut().accumulate_grads(&tape, &pass.bound)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.grad().expect("accumulated").to_vec()))
        .collect();

    let eval = |m: &DcgNet| -> Result<f64> {
        let mut tape = Tape::new();
        let pass = m.begin(&mut tape, false)?;
        let (total, _, _) = m.objective(&mut tape, &pass, &refs, ctx, Some(&targets))?;
        Ok(tape.item(total))
    };

    let mut outcome = CheckOutcome::new("model");
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for (which, (id, (name, grads))) in ids.into_iter().zip(&analytic).enumerate() {
        for (idx, &g) in grads.iter().enumerate() {
            let orig = work.params().tensor(id).data()[idx];
            work.params_mut().get_mut(id).tensor.data_mut()[idx] = orig + cfg.step;
            let plus = eval(&work)?;
            work.params_mut().get_mut(id).tensor.data_mut()[idx] = orig - cfg.step;
            let minus = eval(&work)?;
            work.params_mut().get_mut(id).tensor.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let mut a = g;
            if cfg.corrupt && which == 0 && idx == 0 {
                a += 1e-2 * a.abs().max(1.0);
            }
            outcome.record(name.clone(), idx, a, numeric, cfg);
        }
    }
    outcome.finish(cfg);
    Ok(outcome)
}
