//! Installation checks: randomized gradient checks of every primitive,
//! layer and model, plus structural invariants of the facial graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheck, GradReport};
use crate::graph::{build_facial_adjacency, FacialGraph};
use crate::layers::{
    convlstm_sequence, graph_convolution, lstm_cell_step, Bound, ConvLstm, Linear, LstmParams, LstmState,
    LstmVariant, ParamBuilder, ParamStore, SequenceLstm, TemporalConv,
};
use crate::models::{
    Backbone, ConvNextBlock, ConvNextConfig, Model, ModelConfig, ModelKind, StgcnBlock, StgcnBlockConfig,
};
use crate::tensor::Tensor;
use crate::training::cross_entropy_loss;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Worst relative error of one check over all its trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub trials: usize,
    pub coords: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: max relative error {:.3e} (tolerance {:.0e}, {} trials, {} coordinates)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.trials,
            self.coords
        )
    }
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradReport>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .expect("shape matches")
        .with_grad()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random linear functional of `y`, fixed by `w`.
fn project(tape: &mut Tape<f64>, y: Var, w: &[f64]) -> Result<Var> {
    let wv = tape.constant(tape.shape(y).to_vec().as_slice(), w.to_vec())?;
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn checker(rng: &mut ChaCha8Rng, coords: usize) -> GradCheck {
    GradCheck {
        max_coords: Some(coords),
        seed: rng.gen(),
        ..GradCheck::default()
    }
}

fn store_with<L>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> L) -> (ParamStore<f64>, L) {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
    let layer = f(&mut ParamBuilder::new(&mut store, &mut init));
    (store, layer)
}

fn unary_case(kind: fn(&mut Tape<f64>, Var) -> Var) -> Case {
    Box::new(move |rng| {
        let x = rand_tensor(rng, &[6]);
        let w = rand_vec(rng, 6);
        check_gradients(&[x], &checker(rng, 6), |tape, v| {
            let y = kind(tape, v[0]);
            project(tape, y, &w)
        })
    })
}

fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        (
            "matmul",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (a, b) = (rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2]));
                let w = rand_vec(rng, 6);
                check_gradients(&[a, b], &checker(rng, 6), |tape, v| {
                    let y = tape.matmul(v[0], v[1])?;
                    project(tape, y, &w)
                })
            }) as Case,
        ),
        (
            "add_sub_mul",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (a, b, s) = (rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[1]));
                let w = rand_vec(rng, 6);
                check_gradients(&[a, b, s], &checker(rng, 6), |tape, v| {
                    let x = tape.add(v[0], v[1])?;
                    let x = tape.mul(x, v[0])?;
                    let x = tape.sub(x, v[2])?;
                    let x = tape.mul(x, v[2])?;
                    project(tape, x, &w)
                })
            }),
        ),
        ("gelu", unary_case(|t, x| t.gelu(x))),
        ("relu", unary_case(|t, x| t.relu(x))),
        ("sigmoid", unary_case(|t, x| t.sigmoid(x))),
        ("tanh", unary_case(|t, x| t.tanh(x))),
        ("exp", unary_case(|t, x| t.exp(x))),
        (
            "shape_ops",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = rand_tensor(rng, &[2, 3, 4]);
                let w = rand_vec(rng, 12);
                check_gradients(&[x], &checker(rng, 6), |tape, v| {
                    let p = tape.permute(v[0], &[2, 0, 1])?;
                    let m = tape.mean_axis(p, 1)?;
                    let s0 = tape.select(v[0], 0)?;
                    let s1 = tape.select(v[0], 1)?;
                    let st = tape.stack(&[s0, s1])?;
                    let r = tape.reshape(st, &[6, 4])?;
                    let t = tape.transpose(r)?;
                    let c = tape.concat(&[m, t], 1)?;
                    let c = tape.scale(c, 0.7);
                    let c = tape.add_scalar(c, 0.2);
                    let q = tape.mul(c, c)?;
                    let red = tape.mean_axis(q, 1)?;
                    let tail = tape.mean(q);
                    let l = project(tape, red, &w[..4])?;
                    tape.add(l, tail)
                })
            }),
        ),
        (
            "add_bias",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (x, b) = (rand_tensor(rng, &[3, 2, 4]), rand_tensor(rng, &[2]));
                let w = rand_vec(rng, 24);
                check_gradients(&[x, b], &checker(rng, 6), |tape, v| {
                    let y = tape.add_bias(v[0], v[1], 1)?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (x, g, b) = (rand_tensor(rng, &[3, 5]), rand_tensor(rng, &[5]), rand_tensor(rng, &[5]));
                let w = rand_vec(rng, 15);
                check_gradients(&[x, g, b], &checker(rng, 6), |tape, v| {
                    let y = tape.layer_norm(v[0], v[1], v[2], 1e-6)?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = rand_tensor(rng, &[4, 2]);
                let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
                let w = rand_vec(rng, 8);
                check_gradients(&[x], &checker(rng, 6), |tape, v| {
                    let s = tape.softmax(v[0])?;
                    let ls = tape.log_softmax(v[0])?;
                    let a = project(tape, s, &w)?;
                    let b = project(tape, ls, &w)?;
                    let ce = cross_entropy_loss(tape, v[0], &labels)?;
                    let ab = tape.add(a, b)?;
                    tape.add(ab, ce)
                })
            }),
        ),
        (
            "conv2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (x, k) = (rand_tensor(rng, &[2, 5, 5]), rand_tensor(rng, &[4, 1, 3, 3]));
                let spec = Conv2dSpec {
                    stride: 2,
                    pad: 1,
                    groups: 2,
                };
                let w = rand_vec(rng, 4 * 3 * 3);
                check_gradients(&[x, k], &checker(rng, 6), |tape, v| {
                    let y = tape.conv2d(v[0], v[1], spec)?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "conv1d_temporal",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (x, k) = (rand_tensor(rng, &[5, 2, 3]), rand_tensor(rng, &[2, 3, 3]));
                let w = rand_vec(rng, 5 * 2 * 2);
                check_gradients(&[x, k], &checker(rng, 6), |tape, v| {
                    let y = tape.conv1d_temporal(v[0], v[1], 1)?;
                    project(tape, y, &w)
                })
            }),
        ),
    ]
}

/// Runs `f` with the parameters of `store` followed by `extra` as inputs.
fn with_params<F>(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>, cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let n = inputs.len();
    inputs.extend(extra);
    check_gradients(&inputs, cfg, |tape, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        f(tape, &p, &v[n..])
    })
}

fn path_graph(v: usize) -> FacialGraph {
    let edges: Vec<(usize, usize)> = (1..v).map(|i| (i - 1, i)).collect();
    FacialGraph::from_edges(v, &edges).expect("valid path graph")
}

fn layer_cases() -> Vec<(String, Case)> {
    let mut cases: Vec<(String, Case)> = vec![
        (
            "linear".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let (store, lin) = store_with(rng, |b| Linear::new(b, 3, 2));
                let x = rand_tensor(rng, &[4, 3]);
                let w = rand_vec(rng, 8);
                with_params(&store, vec![x], &checker(rng, 8), |tape, p, v| {
                    let y = lin.forward(tape, p, v[0])?;
                    project(tape, y, &w)
                })
            }) as Case,
        ),
        (
            "lstm_cell".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let (store, lstm) = store_with(rng, |b| LstmParams::new(b, 2, 3));
                let (x, h, c) = (rand_tensor(rng, &[2]), rand_tensor(rng, &[3]), rand_tensor(rng, &[3]));
                let w = rand_vec(rng, 6);
                with_params(&store, vec![x, h, c], &checker(rng, 8), |tape, p, v| {
                    let bl = lstm.bind(tape, p)?;
                    let step = lstm_cell_step(tape, &bl, v[0], LstmState { h: v[1], c: v[2] })?;
                    let both = tape.concat(&[step.state.h, step.state.c], 0)?;
                    project(tape, both, &w)
                })
            }),
        ),
        (
            "graph_convolution".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = path_graph(4).adjacency_norm().clone();
                let (x, wt) = (rand_tensor(rng, &[4, 2]), rand_tensor(rng, &[2, 3]));
                let w = rand_vec(rng, 12);
                check_gradients(&[a, x, wt], &checker(rng, 6), |tape, v| {
                    let y = graph_convolution(tape, v[0], v[1], v[2])?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "temporal_conv".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let (store, tc) = store_with(rng, |b| TemporalConv::new(b, 2, 2, 3).expect("odd kernel"));
                let x = rand_tensor(rng, &[4, 3, 2]);
                let w = rand_vec(rng, 24);
                with_params(&store, vec![x], &checker(rng, 8), |tape, p, v| {
                    let y = tc.forward(tape, p, v[0])?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "convlstm".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let (store, layer) = store_with(rng, |b| ConvLstm::new(b, 2, 2));
                let x = rand_tensor(rng, &[3, 3, 2]);
                let a = path_graph(3).adjacency_norm().clone();
                let w = rand_vec(rng, 18);
                with_params(&store, vec![x, a], &checker(rng, 8), |tape, p, v| {
                    let y = convlstm_sequence(tape, &layer, p, v[1], v[0])?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "stgcn_block".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let cfg = StgcnBlockConfig {
                    c_in: 2,
                    c_out: 3,
                    temporal_kernel: 3,
                    use_gate: true,
                };
                let (store, block) = store_with(rng, |b| StgcnBlock::new(b, cfg).expect("valid block"));
                let x = rand_tensor(rng, &[3, 4, 2]);
                let a = path_graph(4).adjacency_norm().clone();
                let w = rand_vec(rng, 36);
                with_params(&store, vec![x, a], &checker(rng, 8), |tape, p, v| {
                    let y = block.forward(tape, p, v[1], v[0])?;
                    project(tape, y, &w)
                })
            }),
        ),
        (
            "convnext_block".into(),
            Box::new(|rng: &mut ChaCha8Rng| {
                let (store, block) = store_with(rng, |b| ConvNextBlock::new(b, 3, 2));
                let x = rand_tensor(rng, &[3, 4, 4]);
                let w = rand_vec(rng, 48);
                with_params(&store, vec![x], &checker(rng, 8), |tape, p, v| {
                    let y = block.forward(tape, p, v[0])?;
                    project(tape, y, &w)
                })
            }),
        ),
    ];
    for variant in LstmVariant::ALL {
        cases.push((
            format!("sequence_lstm_{variant}"),
            Box::new(move |rng: &mut ChaCha8Rng| {
                let (store, seq) = store_with(rng, |b| SequenceLstm::new(b, variant, 2, 3));
                let x = rand_tensor(rng, &[3, 2]);
                let w = rand_vec(rng, seq.output_dim());
                with_params(&store, vec![x], &checker(rng, 8), |tape, p, v| {
                    let y = seq.forward(tape, p, v[0])?;
                    project(tape, y, &w)
                })
            }),
        ));
    }
    cases
}

/// Toy configuration of each model kind for end-to-end checks.
pub fn toy_model_config(kind: ModelKind, backbone: Backbone) -> ModelConfig {
    let mut cfg = ModelConfig::with_kind(kind).with_widths(&[2, 3, 3]);
    for b in &mut cfg.blocks {
        b.temporal_kernel = 3;
    }
    cfg.lstm_hidden = 3;
    cfg.frames = 3;
    cfg.backbone = backbone;
    cfg.feature_dim = 4;
    cfg.convnext = ConvNextConfig {
        stage_channels: [3, 3, 4, 4],
        stage_blocks: [1, 1, 1, 1],
        image_size: 32,
        expansion: 2,
    };
    cfg
}

fn model_case(kind: ModelKind, backbone: Backbone) -> Case {
    Box::new(move |rng: &mut ChaCha8Rng| {
        let g = path_graph(5);
        let model = Model::<f64>::new(toy_model_config(kind, backbone), &g, rng.gen())?;
        let mut x = rand_tensor(rng, &model.input_shape());
        x.set_requires_grad(false);
        let w = rand_vec(rng, 2);
        let cfg = checker(rng, 4);
        with_params(model.params(), vec![x], &cfg, |tape, p, v| {
            let y = model.forward(tape, p, v[0])?;
            project(tape, y, &w)
        })
    })
}

fn run_case(name: String, tolerance: f64, case: &Case, trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check {
        name,
        tolerance,
        max_rel_err: 0.0,
        trials,
        coords: 0,
    };
    for _ in 0..trials {
        let report = case(&mut rng)?;
        check.max_rel_err = check.max_rel_err.max(report.max_rel_err);
        check.coords += report.checked;
    }
    Ok(check)
}

/// Gradient checks of every primitive and layer (tolerance 1e-4) and of
/// each model kind end to end (tolerance 1e-3), `trials` random draws each.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut k = 0u64;
    let mut next = || {
        k += 1;
        seed.wrapping_mul(0x100_0000_01b3).wrapping_add(k)
    };
    for (name, case) in primitive_cases() {
        out.push(run_case(name.to_string(), PRIMITIVE_TOL, &case, trials, next())?);
    }
    for (name, case) in layer_cases() {
        out.push(run_case(name, PRIMITIVE_TOL, &case, trials, next())?);
    }
    let models = [
        ("model_stgcn", ModelKind::Stgcn, Backbone::PrecomputedFeatures),
        ("model_stgcn_lstm", ModelKind::StgcnLstm, Backbone::PrecomputedFeatures),
        ("model_hybrid_features", ModelKind::Hybrid, Backbone::PrecomputedFeatures),
        ("model_hybrid_convnext", ModelKind::Hybrid, Backbone::ToyConvnext),
    ];
    for (name, kind, backbone) in models {
        out.push(run_case(name.to_string(), END_TO_END_TOL, &model_case(kind, backbone), trials, next())?);
    }
    Ok(out)
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
fn spectral_radius(a: &Tensor<f64>) -> f64 {
    let n = a.shape()[0];
    let d = a.data();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.61).sin() * 0.5).collect();
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| d[i * n + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Named pass/fail invariants of the canonical facial graph.
pub fn graph_invariants() -> Vec<(String, bool)> {
    let g = build_facial_adjacency();
    let a = g.adjacency_norm();
    let n = g.num_nodes();
    let d = a.data();
    let symmetric = (0..n).all(|i| (0..n).all(|j| (d[i * n + j] - d[j * n + i]).abs() <= 1e-12));
    let rho = spectral_radius(a);
    vec![
        (format!("graph has 68 nodes (got {n})"), n == 68),
        (format!("graph has 67 edges (got {})", g.edges().len()), g.edges().len() == 67),
        (
            format!("graph has 9 components (got {})", g.component_count()),
            g.component_count() == 9,
        ),
        ("normalized adjacency is symmetric".into(), symmetric),
        (format!("spectral radius {rho:.12} <= 1"), rho <= 1.0 + 1e-9),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_few_trials() {
        let checks = gradient_suite(2, 0).unwrap();
        assert!(checks.len() > 20);
        for c in &checks {
            assert!(c.passed(), "{}", c.line());
            assert!(c.coords > 0, "{}", c.name);
        }
    }

    #[test]
    fn canonical_graph_invariants_hold() {
        for (name, ok) in graph_invariants() {
            assert!(ok, "{name}");
        }
    }
}
