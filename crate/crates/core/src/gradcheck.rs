//! Central finite-difference verification of analytic gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::mft::ViewMask;
use crate::model::{ModelConfig, MtfModel, PoseBatch};
use crate::nn::{dropout, BatchNorm, Forward, Initializer, LayerNorm, Linear, ParamStore};
use crate::seed;
use crate::tensor::Tensor;
use crate::tft::make_frame_mask;
use crate::train::loss_mpjpe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub entries_per_tensor: usize,
    /// Magnitude floor in the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, entries_per_tensor: 6, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of `loss` against central differences.
/// `loss` must be a deterministic function of the store.
pub fn check<F>(label: &str, store: &ParamStore<f64>, cfg: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (graph, out) = loss(store)?;
    let grads = graph.backward(out)?;
    let mut rng = seed::rng(cfg.seed, label, 0);
    let mut tensors = Vec::new();
    for (name, value) in store.params() {
        let Some(analytic) = grads.named().get(name) else { continue };
        let indices: Vec<usize> = if value.len() <= cfg.entries_per_tensor {
            (0..value.len()).collect()
        } else {
            let mut v = sample(&mut rng, value.len(), cfg.entries_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = TensorCheck { name: name.clone(), checked: 0, worst_rel_err: 0.0, analytic: 0.0, numeric: 0.0 };
        for i in indices {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = value.to_vec();
                data[i] += delta;
                let mut perturbed = store.clone();
                perturbed.set_param(name, Tensor::new(value.shape(), data)?)?;
                let (g, v) = loss(&perturbed)?;
                Ok(g.value(v).item())
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err >= report.worst_rel_err {
                report.worst_rel_err = err;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport { label: label.to_string(), tensors })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[0.2, 1.2]` with a random sign, away from the ReLU kink.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.2..1.2);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Contracts `y` with fixed random weights so every output entry carries gradient.
fn probe(graph: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = seed::rng(seed, "probe", graph.value(y).len() as u64);
    let w = random_tensor(&mut rng, graph.shape(y), -1.0, 1.0);
    let w = graph.constant(w)?;
    let prod = graph.mul(y, w)?;
    graph.sum_all(prod)
}

type Builder = Box<dyn Fn(&mut Forward<'_, f64>) -> Result<Var>>;

fn primitive(label: &str, store: ParamStore<f64>, cfg: &GradCheckConfig, build: Builder) -> Result<GradCheckReport> {
    let probe_seed = seed::derive(cfg.seed, label, 1);
    let dropout_seed = seed::derive(cfg.seed, label, 2);
    check(label, &store, cfg, |s| {
        let mut cx = Forward::new(s, true, seed::rng(dropout_seed, "dropout", 0));
        let y = build(&mut cx)?;
        let (mut g, _) = cx.into_parts();
        let loss = probe(&mut g, y, probe_seed)?;
        Ok((g, loss))
    })
}

/// Gradient checks for every primitive op and layer, on random inputs.
pub fn primitive_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = seed::rng(cfg.seed, "primitive-inputs", 0);
    let mut out = Vec::new();
    let store_with = |entries: Vec<(&str, Tensor<f64>)>| {
        let mut s = ParamStore::new();
        for (k, v) in entries {
            s.insert_param(k, v);
        }
        s
    };

    out.push(primitive(
        "matmul",
        store_with(vec![("a", random_tensor(&mut rng, &[3, 4], -1.0, 1.0)), ("b", random_tensor(&mut rng, &[4, 2], -1.0, 1.0))]),
        cfg,
        Box::new(|cx| {
            let (a, b) = (cx.param("a")?, cx.param("b")?);
            cx.graph.matmul(a, b)
        }),
    )?);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        out.push(primitive(
            &format!("bmm[ta={ta},tb={tb}]"),
            store_with(vec![("a", random_tensor(&mut rng, &sa, -1.0, 1.0)), ("b", random_tensor(&mut rng, &sb, -1.0, 1.0))]),
            cfg,
            Box::new(move |cx| {
                let (a, b) = (cx.param("a")?, cx.param("b")?);
                cx.graph.bmm(a, b, ta, tb)
            }),
        )?);
    }
    let pair = |rng: &mut ChaCha8Rng| {
        store_with(vec![("x", random_tensor(rng, &[3, 4], -1.0, 1.0)), ("y", random_tensor(rng, &[3, 4], -1.0, 1.0))])
    };
    out.push(primitive("add", pair(&mut rng), cfg, Box::new(|cx| {
        let (x, y) = (cx.param("x")?, cx.param("y")?);
        cx.graph.add(x, y)
    }))?);
    out.push(primitive("sub", pair(&mut rng), cfg, Box::new(|cx| {
        let (x, y) = (cx.param("x")?, cx.param("y")?);
        cx.graph.sub(x, y)
    }))?);
    out.push(primitive("mul", pair(&mut rng), cfg, Box::new(|cx| {
        let (x, y) = (cx.param("x")?, cx.param("y")?);
        cx.graph.mul(x, y)
    }))?);
    let suffix = |rng: &mut ChaCha8Rng| {
        store_with(vec![("x", random_tensor(rng, &[2, 3, 4], -1.0, 1.0)), ("y", random_tensor(rng, &[3, 4], -1.0, 1.0))])
    };
    out.push(primitive("add_suffix", suffix(&mut rng), cfg, Box::new(|cx| {
        let (x, y) = (cx.param("x")?, cx.param("y")?);
        cx.graph.add_suffix(x, y)
    }))?);
    out.push(primitive("mul_suffix", suffix(&mut rng), cfg, Box::new(|cx| {
        let (x, y) = (cx.param("x")?, cx.param("y")?);
        cx.graph.mul_suffix(x, y)
    }))?);
    let single = |rng: &mut ChaCha8Rng, shape: &[usize]| store_with(vec![("x", random_tensor(rng, shape, -1.0, 1.0))]);
    out.push(primitive("scale", single(&mut rng, &[5]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.scale(x, -2.5)
    }))?);
    out.push(primitive("relu", store_with(vec![("x", signed_away_from_zero(&mut rng, &[4, 3]))]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.relu(x)
    }))?);
    out.push(primitive("sqrt", store_with(vec![("x", random_tensor(&mut rng, &[6], 0.3, 2.0))]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.sqrt(x)
    }))?);
    out.push(primitive("permute", single(&mut rng, &[2, 3, 4]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.permute(x, &[2, 0, 1])
    }))?);
    out.push(primitive("gather_rows", single(&mut rng, &[4, 3]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.gather_rows(x, Arc::new(vec![2, 0, 2, 3, 2]))
    }))?);
    out.push(primitive(
        "concat",
        store_with(vec![("x", random_tensor(&mut rng, &[3, 2], -1.0, 1.0)), ("y", random_tensor(&mut rng, &[3, 4], -1.0, 1.0))]),
        cfg,
        Box::new(|cx| {
            let (x, y) = (cx.param("x")?, cx.param("y")?);
            cx.graph.concat(&[x, y])
        }),
    )?);
    out.push(primitive("sum_axis", single(&mut rng, &[2, 3, 4]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.sum_axis(x, 1)
    }))?);
    out.push(primitive("mean_all", single(&mut rng, &[3, 3]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        let m = cx.graph.mean_all(x)?;
        cx.graph.scale(m, 3.0)
    }))?);
    let keep: Vec<bool> = (0..24).map(|i| i % 5 != 2 || i < 4).collect();
    out.push(primitive("masked_softmax", single(&mut rng, &[2, 3, 4]), cfg, Box::new(move |cx| {
        let x = cx.param("x")?;
        cx.graph.masked_softmax(x, &keep, 1)
    }))?);
    out.push(primitive("batch_norm_train", single(&mut rng, &[6, 3]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        Ok(cx.graph.batch_norm_train(x, 1e-5)?.0)
    }))?);
    out.push(primitive("layer_norm", single(&mut rng, &[3, 5]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        cx.graph.layer_norm(x, 1e-5)
    }))?);

    // Layers, with their own parameters plus a differentiable input.
    let mut init = Initializer::new(seed::rng(cfg.seed, "primitive-init", 0));
    let mut store = single(&mut rng, &[4, 5]);
    let linear = Linear::register(&mut store, &mut init, "lin", 5, 3, true);
    store.set_param("lin.bias", random_tensor(&mut rng, &[3], -0.5, 0.5))?;
    out.push(primitive("linear", store, cfg, Box::new(move |cx| {
        let x = cx.param("x")?;
        linear.forward(cx, x)
    }))?);
    let mut store = single(&mut rng, &[5, 3]);
    let bn = BatchNorm::register(&mut store, "bn", 3);
    store.set_param("bn.gamma", random_tensor(&mut rng, &[3], 0.5, 1.5))?;
    out.push(primitive("batch_norm_layer", store, cfg, Box::new(move |cx| {
        let x = cx.param("x")?;
        bn.forward(cx, x)
    }))?);
    let mut store = single(&mut rng, &[3, 4]);
    let ln = LayerNorm::register(&mut store, "ln", 4);
    store.set_param("ln.gamma", random_tensor(&mut rng, &[4], 0.5, 1.5))?;
    out.push(primitive("layer_norm_layer", store, cfg, Box::new(move |cx| {
        let x = cx.param("x")?;
        ln.forward(cx, x)
    }))?);
    out.push(primitive("dropout", single(&mut rng, &[4, 4]), cfg, Box::new(|cx| {
        let x = cx.param("x")?;
        dropout(cx, x, 0.3)
    }))?);
    Ok(out)
}

/// Inputs for a full-model check: a random batch with partially dropped view
/// pairs and varied frame masks, and random root-relative targets.
pub fn model_check_batch(config: &ModelConfig, clips: usize, views: usize, seed_value: u64) -> Result<(PoseBatch<f64>, Tensor<f64>)> {
    let mut rng = seed::rng(seed_value, "model-check-batch", 0);
    let (j, t) = (config.topology.num_joints(), config.max_frames);
    let coords = random_tensor(&mut rng, &[clips, views, t, j, 2], -0.6, 0.6);
    let conf = random_tensor(&mut rng, &[clips, views, t, j], 0.05, 1.0);
    let view_masks = (0..clips).map(|_| ViewMask::sample(views, 0.4, &mut rng)).collect();
    let frame_masks = (0..clips).map(|b| make_frame_mask(t, [t, 1, (t / 2) | 1][b % 3])).collect::<Result<_>>()?;
    let mut target = random_tensor(&mut rng, &[clips, views, j, 3], -400.0, 400.0).to_vec();
    for pose in target.chunks_mut(j * 3) {
        let r = config.topology.root;
        let root = [pose[3 * r], pose[3 * r + 1], pose[3 * r + 2]];
        for k in 0..j {
            for c in 0..3 {
                pose[3 * k + c] -= root[c];
            }
        }
    }
    Ok((PoseBatch { coords, conf, view_masks, frame_masks }, Tensor::new(&[clips, views, j, 3], target)?))
}

/// Checks every parameter of a freshly initialized model through the
/// training-mode forward pass and the MPJPE loss (in metres).
pub fn model_check(config: &ModelConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, store) = MtfModel::init::<f64>(config, seed::derive(cfg.seed, "model-check-init", 0))?;
    let (batch, target) = model_check_batch(config, 3, 3, cfg.seed)?;
    let dropout_seed = seed::derive(cfg.seed, "model-check-dropout", 0);
    check("model", &store, cfg, |s| {
        let mut cx = Forward::new(s, true, seed::rng(dropout_seed, "dropout", 0));
        let pred = model.forward(&mut cx, &batch)?;
        let (mut g, _) = cx.into_parts();
        let loss = loss_mpjpe(&mut g, pred, &target, config.topology.root)?;
        let loss = g.scale(loss, 1e-3)?;
        Ok((g, loss))
    })
}
