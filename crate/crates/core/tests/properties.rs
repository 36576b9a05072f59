use proptest::prelude::*;

use rmt_core::data::{
    denormalize_dbm, generate_layout, los_wall_count, normalize_dbm, synth_radio_map, GeoMap, LayoutParams,
    RadioMap, SynthChannelParams,
};
use rmt_core::model::{
    attention_specs, decoder_forward, encoder_forward, forward, mhsa, partition, unpartition, AttentionVars, Model,
    ModelConfig, ModelKind, Partition,
};
use rmt_core::rng::Rng64;
use rmt_core::tensor::{grad_check, GradCheckOptions, Graph, ParamSet, ParamVars, Tensor, Var};
use rmt_core::train::{metric_coverage_error, metric_rmse};
use rmt_core::Result;

fn random(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 2.0 * rng.next_f64() - 1.0)
}

fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = x.dims4();
    let [cout, _, k, _] = w.dims4();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(ni, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(n in 1usize..48, rows in 1usize..5, seed in any::<u64>(), scale in 1e-3f64..1e6) {
        let mut rng = Rng64::new(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&mut rng, &[rows, n]).map(|v| v * scale));
        let s = g.softmax_lastdim(x).unwrap();
        for row in g.value(s).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn conv2d_matches_nested_loops(
        n in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4,
        h in 1usize..=16, w in 1usize..=16,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut rng = Rng64::new(seed);
        let (xt, wt, bt) = (random(&mut rng, &[n, cin, h, w]), random(&mut rng, &[cout, cin, k, k]), random(&mut rng, &[cout]));
        let (want, shape) = conv_oracle(&xt, &wt, &bt, stride, pad);
        let mut g = Graph::<f64>::new();
        let (x, wv, b) = (g.constant(xt), g.constant(wt), g.constant(bt));
        let y = g.conv2d(x, wv, b, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y), &shape[..]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_stride2_conv(
        n in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4, h in 1usize..=8, w in 1usize..=8, seed in any::<u64>(),
    ) {
        // <tconv(x; K), y> = <x, conv_s2(y; K)> with K read as [cin, cout, 2, 2].
        let mut rng = Rng64::new(seed);
        let xt = random(&mut rng, &[n, cin, h, w]);
        let yt = random(&mut rng, &[n, cout, 2 * h, 2 * w]);
        let kt = random(&mut rng, &[cin, cout, 2, 2]);
        let mut g = Graph::<f64>::new();
        let (x, y, k) = (g.constant(xt), g.constant(yt), g.constant(kt));
        let (b_out, b_in) = (g.constant(Tensor::zeros(&[cout])), g.constant(Tensor::zeros(&[cin])));
        let tx = g.conv_transpose2d(x, k, b_out).unwrap();
        let cy = g.conv2d(y, k, b_in, 2, 0).unwrap();
        let lhs = dot(g.value(tx).data(), g.value(y).data());
        let rhs = dot(g.value(x).data(), g.value(cy).data());
        prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()));
    }

    #[test]
    fn partition_round_trip_is_bit_exact(
        b in 1usize..=2, c in 1usize..=6, p in 1usize..=4, nh in 1usize..=4, nw in 1usize..=4,
        grid in any::<bool>(), seed in any::<u64>(),
    ) {
        let shape = [b, c, p * nh, p * nw];
        let kind = if grid { Partition::Grid } else { Partition::Block };
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&mut Rng64::new(seed), &shape));
        let t = partition(&mut g, x, p, kind).unwrap();
        prop_assert_eq!(g.shape(t), &[b * nh * nw, p * p, c][..]);
        let y = unpartition(&mut g, t, shape, p, kind).unwrap();
        prop_assert_eq!(g.value(x).data(), g.value(y).data());
    }

    #[test]
    fn mhsa_is_permutation_equivariant(t in 1usize..=16, heads in 1usize..=4, hd in 1usize..=4, seed in any::<u64>()) {
        let c = heads * hd;
        let mut rng = Rng64::new(seed);
        let params = ParamSet::<f64>::initialize(&attention_specs("a", c), seed).unwrap();
        let x = random(&mut rng, &[1, t, c]);
        let mut perm: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut perm);
        let xp = Tensor::from_fn(&[1, t, c], |i| x.data()[perm[i / c] * c + i % c]);
        let mut g = Graph::<f64>::new();
        let pv = g.params(&params);
        let w = AttentionVars::lookup(&pv, "a").unwrap();
        let (a, ap) = (g.constant(x), g.constant(xp));
        let y = mhsa(&mut g, &w, a, hd).unwrap();
        let yp = mhsa(&mut g, &w, ap, hd).unwrap();
        for i in 0..t * c {
            let d = g.value(yp).data()[i] - g.value(y).data()[perm[i / c] * c + i % c];
            prop_assert!(d.abs() <= 1e-12);
        }
    }

    #[test]
    fn coverage_invariant_under_increasing_transforms(
        n in 1usize..200, k_thres in 1u32..1024, seed in any::<u64>(), which in 0usize..3,
    ) {
        // Dyadic values keep every transform below exact in f32, so ties and
        // strict orderings survive.
        let mut rng = Rng64::new(seed);
        let mut grid = |_| (rng.below(1025) as f32) / 1024.0;
        let p: Vec<f32> = (0..n).map(&mut grid).collect();
        let t: Vec<f32> = (0..n).map(&mut grid).collect();
        let roi: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        let thres = f64::from(k_thres) / 1024.0;
        let f = |v: f64| match which {
            0 => v * v,
            1 => v / 4.0 + 0.5,
            _ => 1.0 - (1.0 - v) * (1.0 - v),
        };
        let map = |v: &[f32]| RadioMap::new(1, n, v.iter().map(|&x| f(f64::from(x)) as f32).collect()).unwrap();
        let base = metric_coverage_error(
            &[RadioMap::new(1, n, p.clone()).unwrap()],
            &[RadioMap::new(1, n, t.clone()).unwrap()],
            &[&roi],
            thres,
        );
        let moved = metric_coverage_error(&[map(&p)], &[map(&t)], &[&roi], f(thres));
        prop_assert_eq!(base.unwrap(), moved.unwrap());
    }

    #[test]
    fn rmse_matches_definition(n in 1usize..300, seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let p: Vec<f32> = (0..n).map(|_| rng.next_f64() as f32).collect();
        let t: Vec<f32> = (0..n).map(|_| rng.next_f64() as f32).collect();
        let want = (p.iter().zip(&t).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let got = metric_rmse(&[RadioMap::new(1, n, p).unwrap()], &[RadioMap::new(1, n, t).unwrap()]).unwrap();
        prop_assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn wall_count_is_symmetric(seed in any::<u64>(), pts in prop::collection::vec((0usize..32, 0usize..32), 2..8)) {
        let geo = generate_layout(seed, 32, 32, &LayoutParams::for_size(32), 1.0).unwrap();
        for a in &pts {
            for b in &pts {
                prop_assert_eq!(los_wall_count(&geo, *a, *b).unwrap(), los_wall_count(&geo, *b, *a).unwrap());
            }
        }
    }

    #[test]
    fn normalization_round_trips(v in 0.0f64..=1.0) {
        let back = normalize_dbm(denormalize_dbm(v));
        prop_assert!((back - v).abs() <= f64::EPSILON);
    }

    #[test]
    fn free_space_power_decreases_with_distance(alpha in 1.0f64..5.0, beta in 0.0f64..60.0, tx in 0usize..32) {
        let geo = GeoMap::open(1, 32, 3.0, (0, tx)).unwrap();
        let params = SynthChannelParams {
            alpha, beta, sigma_sf: 0.0, wall_loss_db: 0.0, d0_m: 1.0, sf_smooth: 0, tx_power_dbm: 0.0,
        };
        let m = synth_radio_map(&geo, &params, 0).unwrap();
        for c in tx..31 {
            prop_assert!(m.get(0, c + 1) <= m.get(0, c));
        }
        for c in 1..=tx {
            prop_assert!(m.get(0, c - 1) <= m.get(0, c));
        }
        // Loss stays below 254 dB here, so every free cell is strictly positive.
        prop_assert!(m.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>()) {
        let geo = generate_layout(seed, 16, 16, &LayoutParams::for_size(16), 0.86).unwrap();
        let p = SynthChannelParams::default();
        prop_assert_eq!(synth_radio_map(&geo, &p, seed).unwrap(), synth_radio_map(&geo, &p, seed).unwrap());
    }
}

fn small_config(rng: &mut Rng64) -> ModelConfig {
    loop {
        let mut cfg = ModelConfig::desk_mini();
        let stages = 1 + rng.below(3) as usize;
        cfg.head_dim = [2, 4][rng.below(2) as usize];
        cfg.stem_channels = 2 + rng.below(4) as usize;
        cfg.stage_channels = (0..stages).map(|_| cfg.head_dim * (1 + rng.below(3) as usize)).collect();
        let unit = 1usize << (stages + 1);
        cfg.height = unit * (1 + rng.below(3) as usize);
        cfg.width = unit * (1 + rng.below(3) as usize);
        cfg.window = [1, 2][rng.below(2) as usize];
        cfg.depth = 1 + rng.below(2) as usize;
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

#[test]
fn encoder_halves_extents_and_decoder_restores_them() {
    let mut rng = Rng64::new(17);
    for _ in 0..12 {
        let cfg = small_config(&mut rng);
        for kind in [ModelKind::Rmt, ModelKind::Baseline] {
            let model = Model::<f32>::new(cfg.clone(), kind, 3).unwrap();
            let mut g = Graph::new();
            let pv = g.params(&model.params);
            let x = g.constant(Tensor::full(&[2, 2, cfg.height, cfg.width], 0.5));
            let pyr = encoder_forward(&mut g, &pv, &cfg, kind, x).unwrap();
            let (mut h, mut w) = (cfg.height, cfg.width);
            for &level in &pyr.levels {
                let s = g.shape(level);
                assert_eq!((s[2], s[3]), (h / 2, w / 2), "{cfg:?}");
                (h, w) = (s[2], s[3]);
            }
            let dec = decoder_forward(&mut g, &pv, &cfg, &pyr, x).unwrap();
            assert_eq!(g.shape(dec.output), [2, 1, cfg.height, cfg.width], "{cfg:?}");
        }
    }
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let cfg = ModelConfig::desk_mini();
    let model = Model::<f32>::new(cfg.clone(), ModelKind::Rmt, 4).unwrap();
    let mut rng = Rng64::new(4);
    let input = Tensor::from_fn(&[2, 2, 16, 16], |_| rng.next_f64() as f32);
    let target = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.next_f64() as f32);
    let grads = || {
        let mut g = Graph::new();
        let pv = g.params(&model.params);
        let (x, t) = (g.constant(input.clone()), g.constant(target.clone()));
        let y = forward(&mut g, &pv, &cfg, ModelKind::Rmt, x).unwrap();
        let loss = g.mse(y, t).unwrap();
        g.backward(loss).unwrap().into_param_grads()
    };
    let (a, b) = (grads(), grads());
    assert_eq!(a.len(), model.params.len());
    for (name, ga) in &a {
        assert_eq!(ga.data(), b[name].data(), "{name}");
    }
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>>;

fn probe(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(random(&mut Rng64::new(99), &shape));
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

/// One random-shape instance of every differentiable op.
fn op_instances(rng: &mut Rng64) -> Vec<(&'static str, ParamSet<f64>, Loss)> {
    let mut d = |lo: u64, hi: u64| rng.range_inclusive(lo, hi) as usize;
    let (n, c, c2, h, w) = (d(1, 2), d(1, 3), d(1, 3), d(1, 4), d(1, 4));
    let (m, k, p) = (d(1, 4), d(1, 4), d(1, 4));
    let hh = 2 * d(1, 3);
    let t = d(1, 4);
    let hd = d(1, 2);
    let heads = d(1, 2);
    let mut seed_rng = Rng64::new(m as u64 * 31 + k as u64);
    let mut set = |shapes: &[(&str, Vec<usize>)]| {
        let mut s = ParamSet::new();
        for (name, shape) in shapes {
            s.insert(*name, random(&mut seed_rng, shape)).unwrap();
        }
        s
    };
    let v4 = vec![n, c, h, w];
    let mut out: Vec<(&'static str, ParamSet<f64>, Loss)> = Vec::new();
    out.push((
        "add",
        set(&[("x", v4.clone()), ("y", v4.clone())]),
        Box::new(|g, p| {
            let o = g.add(p.get("x")?, p.get("y")?)?;
            probe(g, o)
        }),
    ));
    out.push((
        "mul",
        set(&[("x", v4.clone()), ("y", v4.clone())]),
        Box::new(|g, p| {
            let o = g.mul(p.get("x")?, p.get("y")?)?;
            probe(g, o)
        }),
    ));
    out.push((
        "scale_sum",
        set(&[("x", v4.clone())]),
        Box::new(|g, p| {
            let o = g.scale(p.get("x")?, 0.3);
            let s = g.sum(o);
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        }),
    ));
    out.push((
        "matmul",
        set(&[("a", vec![n, m, k]), ("b", vec![n, k, p]), ("s", vec![k, p])]),
        Box::new(|g, p| {
            let o = g.matmul(p.get("a")?, p.get("b")?)?;
            let q = g.matmul(p.get("a")?, p.get("s")?)?;
            let r = g.add(o, q)?;
            probe(g, r)
        }),
    ));
    out.push((
        "transpose_reshape",
        set(&[("x", vec![n, m, k])]),
        Box::new(move |g, p| {
            let o = g.transpose_last2(p.get("x")?)?;
            let r = g.reshape(o, &[n * k * m])?;
            probe(g, r)
        }),
    ));
    out.push((
        "softmax",
        set(&[("x", vec![m, k + 1])]),
        Box::new(|g, p| {
            let o = g.softmax_lastdim(p.get("x")?)?;
            probe(g, o)
        }),
    ));
    out.push((
        "gelu_sigmoid",
        set(&[("x", v4.clone())]),
        Box::new(|g, p| {
            let x = g.scale(p.get("x")?, 2.5);
            let a = g.gelu(x);
            let b = g.sigmoid(x);
            let o = g.add(a, b)?;
            probe(g, o)
        }),
    ));
    out.push((
        "layer_norm",
        set(&[("x", vec![n, c + 1, h, w]), ("g", vec![c + 1]), ("b", vec![c + 1])]),
        Box::new(|g, p| {
            let o = g.layer_norm_channels(p.get("x")?, p.get("g")?, p.get("b")?, 1e-5)?;
            probe(g, o)
        }),
    ));
    let stride = 1 + (h % 2);
    out.push((
        "conv2d",
        set(&[("x", vec![n, c, hh, hh]), ("w", vec![c2, c, 3, 3]), ("b", vec![c2])]),
        Box::new(move |g, p| {
            let o = g.conv2d(p.get("x")?, p.get("w")?, p.get("b")?, stride, 1)?;
            probe(g, o)
        }),
    ));
    out.push((
        "conv_transpose2d",
        set(&[("x", v4.clone()), ("w", vec![c, c2, 2, 2]), ("b", vec![c2])]),
        Box::new(|g, p| {
            let o = g.conv_transpose2d(p.get("x")?, p.get("w")?, p.get("b")?)?;
            probe(g, o)
        }),
    ));
    out.push((
        "concat_upsample",
        set(&[("a", v4.clone()), ("b", vec![n, c2, h, w])]),
        Box::new(|g, p| {
            let o = g.concat_channels(p.get("a")?, p.get("b")?)?;
            let u = g.upsample_nearest2x(o)?;
            probe(g, u)
        }),
    ));
    out.push((
        "partition",
        set(&[("x", vec![n, c, hh, hh])]),
        Box::new(move |g, p| {
            let kind = if n == 1 { Partition::Block } else { Partition::Grid };
            let o = partition(g, p.get("x")?, 2, kind)?;
            probe(g, o)
        }),
    ));
    out.push((
        "mse",
        set(&[("p", v4.clone()), ("t", v4.clone())]),
        Box::new(|g, p| {
            let a = g.mse(p.get("p")?, p.get("t")?)?;
            let weights = (0..g.value(p.get("p")?).numel()).map(|i| f64::from(i % 2 == 0)).collect();
            let b = g.mse_weighted(p.get("p")?, p.get("t")?, weights)?;
            let s = g.scale(b, 0.5);
            g.add(a, s)
        }),
    ));
    let cm = heads * hd;
    out.push((
        "mhsa",
        {
            let mut s = ParamSet::initialize(&attention_specs("a", cm), t as u64).unwrap();
            s.insert("x", random(&mut seed_rng, &[n, t, cm])).unwrap();
            s
        },
        Box::new(move |g, p| {
            let w = AttentionVars::lookup(p, "a")?;
            let o = mhsa(g, &w, p.get("x")?, hd)?;
            probe(g, o)
        }),
    ));
    out
}

#[test]
fn every_op_passes_grad_check_on_three_random_shapes() {
    let mut rng = Rng64::new(2718);
    for round in 0..3 {
        for (name, params, loss) in op_instances(&mut rng) {
            let report = grad_check(loss, &params, &GradCheckOptions::default()).unwrap();
            assert!(report.pass, "{name} round {round}: {:?}", report.max_rel_error);
        }
    }
}
