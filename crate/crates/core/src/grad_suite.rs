//! Finite-difference checks of every differentiable operation, the layers built
//! from them, the UPR losses and the end-to-end training objective, all at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfa_decoder::{cross_branch_attention, multi_level_fuse, CfaFlags, DecoderConfig};
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::layers;
use crate::model::{forward, ModelConfig};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::params::{ParamStore, Session};
use crate::upr::{self, Gates, UprConfig};

pub const TOLERANCE: f64 = 1e-4;
/// Central differences at `eps = 1e-5` carry ~1e-11 of rounding noise, far below this.
pub const DENOM_FLOOR: f64 = 1e-6;

type Obj = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<(String, Tensor<f64>)>,
    f: Obj,
    max_coords: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero: `|x| in [0.2, 1.5]` with random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contract a tensor output to a scalar with fixed pseudo-random weights so that
/// every output coordinate carries a distinct sensitivity.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn case(
    name: &'static str,
    params: Vec<(&str, Tensor<f64>)>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        params: named(params),
        f: Box::new(f),
        max_coords: None,
    }
}

/// Wrap an op with one or two inputs into a probed objective.
fn op1(name: &'static str, x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static) -> Case {
    case(name, vec![("x", x)], move |g, v| {
        let y = f(g, v[0])?;
        probe(g, y, 1)
    })
}

fn op2(
    name: &'static str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + 'static,
) -> Case {
    case(name, vec![("a", a), ("b", b)], move |g, v| {
        let y = f(g, v[0], v[1])?;
        probe(g, y, 2)
    })
}

/// Bind every parameter name to the matching graph variable.
fn session<'g, 'p>(
    g: &'g mut Graph<f64>,
    store: &'p ParamStore<f64>,
    names: &[String],
    vars: &[Var],
) -> Session<'g, 'p, f64> {
    Session::frozen(g, store).with_bound(names.iter().cloned().zip(vars.iter().copied()))
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut c = Vec::new();
    c.push(op2(
        "add_broadcast",
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[3, 1], -1.0, 1.0),
        |g, a, b| g.add(a, b),
    ));
    c.push(op2(
        "sub_broadcast",
        uniform(rng, &[2, 1, 4], -1.0, 1.0),
        uniform(rng, &[3, 4], -1.0, 1.0),
        |g, a, b| g.sub(a, b),
    ));
    c.push(op2(
        "mul_broadcast",
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[4], -1.0, 1.0),
        |g, a, b| g.mul(a, b),
    ));
    c.push(op1("scale", uniform(rng, &[3, 3], -1.0, 1.0), |g, x| Ok(g.scale(x, -2.5))));
    c.push(op1("add_scalar", uniform(rng, &[5], -1.0, 1.0), |g, x| Ok(g.add_scalar(x, 0.7))));
    c.push(op1("rsub_scalar", uniform(rng, &[5], -1.0, 1.0), |g, x| Ok(g.rsub_scalar(1.0, x))));
    c.push(op1("sigmoid", uniform(rng, &[2, 5], -4.0, 4.0), |g, x| Ok(g.sigmoid(x))));
    c.push(op1("relu", off_zero(rng, &[2, 5]), |g, x| Ok(g.relu(x))));
    c.push(op1("gelu", uniform(rng, &[2, 5], -3.0, 3.0), |g, x| Ok(g.gelu(x))));
    c.push(op1("exp", uniform(rng, &[2, 5], -2.0, 2.0), |g, x| Ok(g.exp(x))));
    c.push(op1("log", uniform(rng, &[2, 5], 0.2, 3.0), |g, x| Ok(g.log(x))));
    c.push(op1("abs", off_zero(rng, &[2, 5]), |g, x| Ok(g.abs(x))));
    c.push(op1("tanh", uniform(rng, &[2, 5], -2.0, 2.0), |g, x| Ok(g.tanh(x))));
    c.push(op1("recip", uniform(rng, &[2, 5], 0.3, 3.0), |g, x| Ok(g.recip(x))));
    // keep inputs clear of the clamp bounds
    let clamp_in = Tensor::from_fn(&[12], |i| [-2.0, -0.3, 0.2, 0.45, 1.7, -1.2][i % 6] + 0.01 * i as f64);
    c.push(op1("clamp", clamp_in, |g, x| Ok(g.clamp(x, -1.0, 1.0))));
    c.push(op2(
        "matmul_batched",
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[2, 4, 5], -1.0, 1.0),
        |g, a, b| g.matmul(a, b),
    ));
    c.push(op2(
        "matmul_shared_rhs",
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[4, 2], -1.0, 1.0),
        |g, a, b| g.matmul(a, b),
    ));
    c.push(op1("permute", uniform(rng, &[2, 3, 4], -1.0, 1.0), |g, x| g.permute(x, &[2, 0, 1])));
    c.push(op1("transpose_last", uniform(rng, &[2, 3, 4], -1.0, 1.0), |g, x| g.transpose_last(x)));
    c.push(op1("reshape", uniform(rng, &[2, 6], -1.0, 1.0), |g, x| g.reshape(x, &[3, 4])));
    c.push(op2(
        "concat",
        uniform(rng, &[2, 3, 2], -1.0, 1.0),
        uniform(rng, &[2, 1, 2], -1.0, 1.0),
        |g, a, b| g.concat(&[a, b, a], 1),
    ));
    c.push(op1("narrow", uniform(rng, &[2, 5, 3], -1.0, 1.0), |g, x| g.narrow(x, 1, 1, 3)));
    c.push(op1("sum_all", uniform(rng, &[3, 4], -1.0, 1.0), |g, x| Ok(g.sum_all(x))));
    c.push(op1("mean_all", uniform(rng, &[3, 4], -1.0, 1.0), |g, x| Ok(g.mean_all(x))));
    c.push(op1("sum_axes", uniform(rng, &[2, 3, 4], -1.0, 1.0), |g, x| g.sum_axes(x, &[0, 2])));
    c.push(op1("mean_axes", uniform(rng, &[2, 3, 4], -1.0, 1.0), |g, x| g.mean_axes(x, &[1])));
    c.push(op1("softmax_lastdim", uniform(rng, &[2, 3, 5], -2.0, 2.0), |g, x| g.softmax_lastdim(x)));
    c.push(case(
        "layernorm",
        vec![
            ("x", uniform(rng, &[3, 6], -2.0, 2.0)),
            ("gain", uniform(rng, &[6], 0.5, 1.5)),
            ("bias", uniform(rng, &[6], -0.5, 0.5)),
        ],
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
            probe(g, y, 3)
        },
    ));
    c.push(op2(
        "conv2d_stride2_pad1",
        uniform(rng, &[2, 3, 6, 6], -1.0, 1.0),
        uniform(rng, &[4, 3, 3, 3], -0.5, 0.5),
        |g, x, w| g.conv2d(x, w, 2, 1),
    ));
    c.push(op2(
        "conv2d_1x1",
        uniform(rng, &[1, 4, 3, 3], -1.0, 1.0),
        uniform(rng, &[2, 4, 1, 1], -0.5, 0.5),
        |g, x, w| g.conv2d(x, w, 1, 0),
    ));
    c.push(op2(
        "conv_transpose2d",
        uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(rng, &[3, 2, 2, 2], -0.5, 0.5),
        |g, x, w| g.conv_transpose2d(x, w, 2, 0),
    ));
    c.push(op1("resize_bilinear_up", uniform(rng, &[2, 2, 3, 4], -1.0, 1.0), |g, x| {
        g.resize_bilinear(x, 7, 8)
    }));
    c.push(op1("resize_bilinear_down", uniform(rng, &[1, 2, 8, 6], -1.0, 1.0), |g, x| {
        g.resize_bilinear(x, 3, 4)
    }));
    c
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut c = Vec::new();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let attn_names = names(&[
        "q_in", "kv_in", "a.q.weight", "a.q.bias", "a.k.weight", "a.k.bias", "a.v.weight", "a.v.bias", "a.out.weight",
        "a.out.bias",
    ]);
    let dims: [&[usize]; 10] = [&[2, 3, 4], &[2, 5, 6], &[4, 4], &[4], &[6, 4], &[4], &[6, 4], &[4], &[4, 4], &[4]];
    let params: Vec<(&str, Tensor<f64>)> = attn_names
        .iter()
        .zip(dims)
        .map(|(n, d)| (n.as_str(), uniform(rng, d, -0.8, 0.8)))
        .collect();
    let n2 = attn_names.clone();
    c.push(case("multi_head_attention", params, move |g, v| {
        let store = ParamStore::new();
        let mut s = session(g, &store, &n2[2..], &v[2..]);
        let y = layers::attention(&mut s, v[0], v[1], v[1], "a", 2)?;
        probe(s.graph, y, 4)
    }));

    let mlp_names = names(&["x", "m.fc1.weight", "m.fc1.bias", "m.fc2.weight", "m.fc2.bias"]);
    let dims: [&[usize]; 5] = [&[2, 3, 4], &[4, 8], &[8], &[8, 4], &[4]];
    let params: Vec<(&str, Tensor<f64>)> = mlp_names
        .iter()
        .zip(dims)
        .map(|(n, d)| (n.as_str(), uniform(rng, d, -0.8, 0.8)))
        .collect();
    let n2 = mlp_names.clone();
    c.push(case("mlp", params, move |g, v| {
        let store = ParamStore::new();
        let mut s = session(g, &store, &n2[1..], &v[1..]);
        let y = layers::mlp(&mut s, v[0], "m")?;
        probe(s.graph, y, 5)
    }));

    let ln_names = names(&["x", "n.gain", "n.bias"]);
    let params = vec![
        ("x", uniform(rng, &[2, 4, 3, 3], -1.0, 1.0)),
        ("n.gain", uniform(rng, &[4], 0.5, 1.5)),
        ("n.bias", uniform(rng, &[4], -0.5, 0.5)),
    ];
    let n2 = ln_names.clone();
    c.push(case("layernorm2d", params, move |g, v| {
        let store = ParamStore::new();
        let mut s = session(g, &store, &n2[1..], &v[1..]);
        let y = layers::layernorm2d(&mut s, v[0], "n")?;
        probe(s.graph, y, 6)
    }));

    c.push(case(
        "cross_branch_attention",
        vec![
            ("f_v", uniform(rng, &[2, 4, 6], -1.0, 1.0)),
            ("f_c", uniform(rng, &[2, 4, 5], -1.0, 1.0)),
            ("w_q", uniform(rng, &[6, 4], -0.7, 0.7)),
            ("w_k", uniform(rng, &[5, 4], -0.7, 0.7)),
        ],
        |g, v| {
            let store = ParamStore::new();
            let mut s = Session::frozen(g, &store);
            let y = cross_branch_attention(&mut s, v[0], v[1], v[2], v[3], 2)?;
            probe(s.graph, y, 7)
        },
    ));

    let fuse_names = names(&["shallow", "final", "cnn", "f.conv.weight", "f.conv.bias", "f.norm.gain", "f.norm.bias"]);
    let dims: [&[usize]; 7] = [&[2, 3, 3, 3], &[2, 3, 3, 3], &[2, 3, 3, 3], &[4, 9, 1, 1], &[4], &[4], &[4]];
    let params: Vec<(&str, Tensor<f64>)> = fuse_names
        .iter()
        .zip(dims)
        .map(|(n, d)| (n.as_str(), uniform(rng, d, -0.8, 0.8)))
        .collect();
    let n2 = fuse_names.clone();
    c.push(case("multi_level_fuse", params, move |g, v| {
        let store = ParamStore::new();
        let mut s = session(g, &store, &n2[3..], &v[3..]);
        let y = multi_level_fuse(&mut s, v[0], v[1], v[2], "f")?;
        probe(s.graph, y, 8)
    }));
    c
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn upr_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut c = Vec::new();
    c.push(case("pixel_confidence", vec![("logits", off_zero(rng, &[2, 1, 3, 3]))], |g, v| {
        let cp = upr::pixel_confidence(g, v[0])?;
        probe(g, cp, 9)
    }));
    let y = binary_mask(rng, &[2, 1, 3, 3]);
    c.push(case(
        "hint_mix",
        vec![("prob", uniform(rng, &[2, 1, 3, 3], 0.1, 0.9)), ("c", uniform(rng, &[2], 0.2, 0.9))],
        move |g, v| {
            let t = g.constant(y.clone());
            let m = upr::hint_mix(g, v[0], t, v[1], &[true, false])?;
            probe(g, m, 10)
        },
    ));
    c.push(case("confidence_loss", vec![("c", uniform(rng, &[3], 0.05, 1.0))], |g, v| {
        upr::confidence_loss(g, v[0])
    }));
    let y = binary_mask(rng, &[2, 1, 3, 3]);
    c.push(case(
        "segmentation_loss",
        vec![("p_mixed", uniform(rng, &[2, 1, 3, 3], 0.05, 0.95)), ("iou_pred", uniform(rng, &[2], 0.0, 1.0))],
        move |g, v| {
            let t = g.constant(y.clone());
            let seg = upr::segmentation_loss(g, v[0], t, v[1], v[0], Some(&[0.3, 0.6]))?;
            Ok(seg.seg)
        },
    ));
    let y = binary_mask(rng, &[2, 1, 4, 4]);
    c.push(case(
        "upr_objective",
        vec![("logits", off_zero(rng, &[2, 1, 4, 4])), ("iou_score", uniform(rng, &[2, 1], 0.1, 0.9))],
        move |g, v| {
            let t = g.constant(y.clone());
            let out = upr::objective::<f64, ChaCha8Rng>(
                g,
                v[0],
                v[1],
                t,
                &UprConfig::default(),
                Gates::Given(vec![true, false]),
                Some(&[0.5, 0.25]),
            )?;
            Ok(out.total)
        },
    ));
    c
}

/// Smallest model exercising every decoder path.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vit_input: 16,
            cnn_input: 8,
            patch: 4,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            neck_dim: 8,
            cnn_channels: vec![4, 8],
            intermediate_block_index: 0,
        },
        decoder: DecoderConfig {
            heads: 2,
            mlp_dim: 8,
            blocks: 2,
            cross_heads: 2,
            cross_head_dim: 4,
            upscale_channels: [4, 4],
            iou_hidden: 8,
        },
        cfa: CfaFlags::ALL,
    }
}

fn end_to_end_case(rng: &mut ChaCha8Rng, cfg: ModelConfig, name: &'static str) -> Case {
    let store = cfg.init_params::<f64>(11).expect("tiny config is valid");
    let names: Vec<String> = store.names().cloned().collect();
    let params: Vec<(String, Tensor<f64>)> = store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    let b = 2;
    let e = cfg.encoder.clone();
    let vit_img = uniform(rng, &[b, 3, e.vit_input, e.vit_input], 0.0, 1.0);
    let cnn_img = uniform(rng, &[b, 3, e.cnn_input, e.cnn_input], 0.0, 1.0);
    let side = e.vit_input;
    let mask = binary_mask(rng, &[b, 1, side, side]);
    let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let empty = ParamStore::new();
        let mut s = session(g, &empty, &names, v);
        let vi = s.graph.constant(vit_img.clone());
        let ci = s.graph.constant(cnn_img.clone());
        let out = forward(&mut s, &cfg, vi, ci)?;
        let g = s.graph;
        let logits = g.resize_bilinear(out.decoder.logits, side, side)?;
        let t = g.constant(mask.clone());
        let u = upr::objective::<f64, ChaCha8Rng>(
            g,
            logits,
            out.decoder.iou_score,
            t,
            &UprConfig::default(),
            Gates::Given(vec![true, false]),
            Some(&[0.4, 0.7]),
        )?;
        Ok(u.total)
    };
    Case {
        name,
        params,
        f: Box::new(f),
        max_coords: Some(3),
    }
}

/// Every check with its report, in a fixed order.
pub fn run_suite() -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(layer_cases(&mut rng));
    cases.extend(upr_cases(&mut rng));
    cases.push(end_to_end_case(&mut rng, tiny_model(), "end_to_end_loss"));
    let mut sam_only = tiny_model();
    sam_only.cfa = CfaFlags::NONE;
    cases.push(end_to_end_case(&mut rng, sam_only, "end_to_end_loss_without_cfa"));
    cases
        .into_iter()
        .map(|c| {
            let opts = GradCheckOptions {
                eps: 1e-5,
                tol: TOLERANCE,
                max_coords_per_param: c.max_coords,
                skip_near_zero: false,
                denom_floor: DENOM_FLOOR,
                seed: 7,
            };
            grad_check(c.name, &c.params, c.f, &opts)
        })
        .collect()
}

/// `op,max_rel_error,tolerance,checked,passed` table.
pub fn report_table(reports: &[GradCheckReport]) -> String {
    let mut s = String::from("op,max_rel_error,tolerance,checked,passed\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.3e},{:.0e},{},{}\n",
            r.op_name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
