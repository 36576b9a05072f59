//! Gradient verification suite: every differentiable operation in
//! isolation, multi-head attention, and the desk-mini networks end to end.

use std::rc::Rc;

use crate::error::Result;
use crate::model::{attention_specs, forward, mhsa, AttentionVars, Model, ModelConfig, ModelKind};
use crate::rng::Rng64;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, OpKind, ParamSet, ParamVars, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub component: String,
    pub report: GradCheckReport,
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParamSet<f64>,
    loss: LossFn,
}

fn random(rng: &mut Rng64, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.next_f64() * 2.0 - 1.0) * scale)
}

fn params(seed: u64, case: &str, shapes: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut rng = Rng64::keyed(seed, case);
    let mut set = ParamSet::new();
    for (name, shape) in shapes {
        set.insert(*name, random(&mut rng, shape, 1.0)).expect("distinct names");
    }
    set
}

/// Reduces `out` to a scalar through a fixed random weighting so that every
/// output element carries a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(random(&mut Rng64::keyed(seed, "probe"), &shape, 1.0));
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut add = |name: &'static str, shapes: &[(&str, &[usize])], loss: LossFn| {
        cases.push(Case {
            name,
            params: params(seed, name, shapes),
            loss,
        });
    };
    add(
        "add",
        &[("x", &[2, 3]), ("y", &[2, 3])],
        Box::new(move |g, p| {
            let o = g.add(p.get("x")?, p.get("y")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "mul",
        &[("x", &[2, 3]), ("y", &[2, 3])],
        Box::new(move |g, p| {
            let o = g.mul(p.get("x")?, p.get("y")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "scale",
        &[("x", &[4])],
        Box::new(move |g, p| {
            let o = g.scale(p.get("x")?, -1.7);
            probe(g, o, seed)
        }),
    );
    add(
        "sum",
        &[("x", &[2, 2, 3])],
        Box::new(move |g, p| {
            let o = g.sum(p.get("x")?);
            probe(g, o, seed)
        }),
    );
    add(
        "matmul_batched",
        &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])],
        Box::new(move |g, p| {
            let o = g.matmul(p.get("a")?, p.get("b")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "matmul_shared",
        &[("a", &[2, 3, 4]), ("b", &[4, 5])],
        Box::new(move |g, p| {
            let o = g.matmul(p.get("a")?, p.get("b")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "permute",
        &[("x", &[2, 3, 4])],
        Box::new(move |g, p| {
            let o = g.transpose_last2(p.get("x")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "reshape",
        &[("x", &[2, 6])],
        Box::new(move |g, p| {
            let o = g.reshape(p.get("x")?, &[3, 4])?;
            probe(g, o, seed)
        }),
    );
    add(
        "softmax",
        &[("x", &[3, 5])],
        Box::new(move |g, p| {
            let o = g.softmax_lastdim(p.get("x")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "gelu",
        &[("x", &[3, 4])],
        Box::new(move |g, p| {
            let x = g.scale(p.get("x")?, 3.0);
            let o = g.gelu(x);
            probe(g, o, seed)
        }),
    );
    add(
        "sigmoid",
        &[("x", &[3, 4])],
        Box::new(move |g, p| {
            let x = g.scale(p.get("x")?, 3.0);
            let o = g.sigmoid(x);
            probe(g, o, seed)
        }),
    );
    add(
        "layer_norm",
        &[("x", &[2, 3, 2, 2]), ("gamma", &[3]), ("beta", &[3])],
        Box::new(move |g, p| {
            let o = g.layer_norm_channels(p.get("x")?, p.get("gamma")?, p.get("beta")?, 1e-5)?;
            probe(g, o, seed)
        }),
    );
    add(
        "conv2d_3x3",
        &[("x", &[1, 2, 5, 5]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
        Box::new(move |g, p| {
            let o = g.conv2d(p.get("x")?, p.get("w")?, p.get("b")?, 1, 1)?;
            probe(g, o, seed)
        }),
    );
    add(
        "conv2d_stride2",
        &[("x", &[2, 2, 6, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
        Box::new(move |g, p| {
            let o = g.conv2d(p.get("x")?, p.get("w")?, p.get("b")?, 2, 1)?;
            probe(g, o, seed)
        }),
    );
    add(
        "conv2d_1x1",
        &[("x", &[2, 3, 3, 3]), ("w", &[2, 3, 1, 1]), ("b", &[2])],
        Box::new(move |g, p| {
            let o = g.conv2d(p.get("x")?, p.get("w")?, p.get("b")?, 1, 0)?;
            probe(g, o, seed)
        }),
    );
    add(
        "conv_transpose2d",
        &[("x", &[2, 3, 3, 3]), ("w", &[3, 2, 2, 2]), ("b", &[2])],
        Box::new(move |g, p| {
            let o = g.conv_transpose2d(p.get("x")?, p.get("w")?, p.get("b")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "concat",
        &[("a", &[2, 2, 3, 3]), ("b", &[2, 1, 3, 3])],
        Box::new(move |g, p| {
            let o = g.concat_channels(p.get("a")?, p.get("b")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "upsample",
        &[("x", &[1, 2, 3, 3])],
        Box::new(move |g, p| {
            let o = g.upsample_nearest2x(p.get("x")?)?;
            probe(g, o, seed)
        }),
    );
    add(
        "mse",
        &[("pred", &[2, 1, 3, 3]), ("target", &[2, 1, 3, 3])],
        Box::new(|g, p| g.mse(p.get("pred")?, p.get("target")?)),
    );
    let weights: Rc<[f64]> = (0..18).map(|i| f64::from(i % 3 != 0)).collect();
    add(
        "mse_weighted",
        &[("pred", &[2, 1, 3, 3]), ("target", &[2, 1, 3, 3])],
        Box::new(move |g, p| g.mse_weighted(p.get("pred")?, p.get("target")?, weights.clone())),
    );
    cases
}

fn mhsa_case(seed: u64) -> Result<Case> {
    let mut set = ParamSet::initialize(&attention_specs("attn", 4), seed)?;
    set.insert("tokens", random(&mut Rng64::keyed(seed, "mhsa.tokens"), &[2, 3, 4], 1.0))?;
    Ok(Case {
        name: "mhsa",
        params: set,
        loss: Box::new(move |g, p| {
            let w = AttentionVars::lookup(p, "attn")?;
            let o = mhsa(g, &w, p.get("tokens")?, 2)?;
            probe(g, o, seed)
        }),
    })
}

fn network_case(seed: u64, kind: ModelKind) -> Result<Case> {
    let cfg = ModelConfig::desk_mini();
    let model = Model::<f64>::new(cfg.clone(), kind, seed)?;
    let mut rng = Rng64::keyed(seed, "network.data");
    let input = Tensor::from_fn(&[1, 2, cfg.height, cfg.width], |_| rng.next_f64());
    let target = Tensor::from_fn(&[1, 1, cfg.height, cfg.width], |_| rng.next_f64());
    Ok(Case {
        name: match kind {
            ModelKind::Rmt => "desk-mini rmt end-to-end",
            ModelKind::Baseline => "desk-mini baseline end-to-end",
        },
        params: model.params,
        loss: Box::new(move |g, p| {
            let x = g.constant(input.clone());
            let t = g.constant(target.clone());
            let y = forward(g, p, &cfg, kind, x)?;
            g.mse(y, t)
        }),
    })
}

/// Runs every case; `fault` corrupts one backward rule everywhere.
pub fn gradient_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let mut cases = op_cases(seed);
    cases.push(mhsa_case(seed)?);
    cases.push(network_case(seed, ModelKind::Rmt)?);
    cases.push(network_case(seed, ModelKind::Baseline)?);
    let opts = GradCheckOptions {
        seed,
        fault,
        ..GradCheckOptions::default()
    };
    cases
        .into_iter()
        .map(|case| {
            Ok(SuiteEntry {
                component: case.name.to_string(),
                report: grad_check(&case.loss, &case.params, &opts)?,
            })
        })
        .collect()
}
