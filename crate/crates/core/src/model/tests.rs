use proptest::prelude::*;

use super::layers::{modulate, ChannelAttention, Rdb};
use super::*;
use crate::autodiff::{grad, ops, Tensor, Var};
use crate::losses;
use crate::testkit::{self, concat, naive_conv, param, rng, uniform};

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn conv_ref(p: &ParamSet<f64>, name: &str, x: &Tensor<f64>, pad: usize, dil: usize) -> Tensor<f64> {
    naive_conv(x, param(p, &format!("{name}.weight")), param(p, &format!("{name}.bias")), pad, dil)
}

fn relu_ref(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

fn rdb_ref(p: &ParamSet<f64>, name: &str, x: &Tensor<f64>, layers: usize) -> Tensor<f64> {
    let mut feats = vec![x.clone()];
    for l in 0..layers {
        let input = concat(&feats.iter().collect::<Vec<_>>());
        feats.push(relu_ref(&conv_ref(p, &format!("{name}.dense{l}"), &input, 1, 1)));
    }
    let fused = conv_ref(p, &format!("{name}.fusion"), &concat(&feats.iter().collect::<Vec<_>>()), 0, 1);
    fused.zip_map(x, |a, b| a + b)
}

fn pool_ref(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 1, 1], |[s, ch, _, _]| x.plane(s, ch).iter().sum::<f64>() / (h * w) as f64)
}

fn ca_coeffs_ref(p: &ParamSet<f64>, name: &str, x: &Tensor<f64>, dilations: &[usize]) -> Tensor<f64> {
    let pooled = pool_ref(x);
    let levels: Vec<Tensor<f64>> = dilations
        .iter()
        .map(|&d| relu_ref(&conv_ref(p, &format!("{name}.pyramid_d{d}"), &pooled, d, d)))
        .collect();
    conv_ref(p, &format!("{name}.merge"), &concat(&levels.iter().collect::<Vec<_>>()), 1, 1).map(sig)
}

fn modulate_ref(x: &Tensor<f64>, a: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |[s, c, r, col]| x.at([s, c, r, col]) * a.at([s, c, 0, 0]))
}

fn backbone_ref(p: &ParamSet<f64>, cfg: &NetConfig, x: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut taps = Vec::new();
    let mut f = conv_ref(p, "encoder.1", &relu_ref(&conv_ref(p, "encoder.0", x, 1, 1)), 1, 1);
    taps.push(f.clone());
    for k in 0..cfg.blocks {
        let r = rdb_ref(p, &format!("rdb{k}"), &f, cfg.rdb_layers);
        f = modulate_ref(&r, &ca_coeffs_ref(p, &format!("ca{k}"), &r, &cfg.dilations));
        taps.push(f.clone());
    }
    let dec = conv_ref(p, "decoder.1", &relu_ref(&conv_ref(p, "decoder.0", &f, 1, 1)), 1, 1);
    let out = dec.zip_map(&conv_ref(p, "skip", x, 0, 1), |a, b| a + b);
    taps.push(out.clone());
    (out, taps)
}

fn tiny_parts(seed: u64) -> (ParamSet<f64>, Rdb, ChannelAttention) {
    let mut params = ParamSet::default();
    let mut r = rng(seed);
    let mut b = layers::Builder {
        params: &mut params,
        rng: &mut r,
        init: InitScheme::He,
    };
    let rdb = Rdb::build(&mut b, "rdb", 8, 2, 4);
    let ca = ChannelAttention::build(&mut b, "ca", 8, 4, &[3, 5, 7]);
    (params, rdb, ca)
}

fn randomize_biases(p: &mut ParamSet<f64>, seed: u64) {
    let mut r = rng(seed);
    for i in 0..p.len() {
        if p.names()[i].ends_with(".bias") {
            let shape = p.vars()[i].shape();
            p.set(i, uniform(&mut r, shape, -0.3, 0.3));
        }
    }
}

#[test]
fn rdb_preserves_shape_and_zero_weights_are_identity() {
    let (mut p, rdb, _) = tiny_parts(1);
    let x = Var::constant(uniform(&mut rng(2), [2, 8, 5, 3], -1.0, 1.0));
    assert_eq!(rdb.forward(&p, &x).shape(), [2, 8, 5, 3]);
    for i in 0..p.len() {
        let shape = p.vars()[i].shape();
        p.set(i, Tensor::zeros(shape));
    }
    assert_eq!(rdb.forward(&p, &x).value(), x.value());
}

#[test]
fn rdb_matches_layer_by_layer_oracle() {
    let (mut p, rdb, _) = tiny_parts(3);
    randomize_biases(&mut p, 4);
    let x = uniform(&mut rng(5), [1, 8, 4, 4], -1.0, 1.0);
    let got = rdb.forward(&p, &Var::constant(x.clone()));
    assert!(got.value().max_abs_diff(&rdb_ref(&p, "rdb", &x, 2)) < 1e-9);
}

#[test]
fn channel_attention_range_zero_input_and_oracle() {
    let (mut p, _, ca) = tiny_parts(6);
    let zeros = Var::constant(Tensor::zeros([2, 8, 4, 4]));
    let a = ca.coefficients(&p, &zeros);
    assert_eq!(a.shape(), [2, 8, 1, 1]);
    assert!(a.value().data().iter().all(|&v| v == 0.5));

    randomize_biases(&mut p, 7);
    let x = uniform(&mut rng(8), [3, 8, 4, 4], -2.0, 2.0);
    let a = ca.coefficients(&p, &Var::constant(x.clone()));
    assert!(a.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(a.value().max_abs_diff(&ca_coeffs_ref(&p, "ca", &x, &[3, 5, 7])) < 1e-9);
}

#[test]
fn unit_coefficients_leave_features_unchanged() {
    let x = Var::constant(uniform(&mut rng(9), [2, 3, 4, 4], -1.0, 1.0));
    let ones = Var::constant(Tensor::full([2, 3, 1, 1], 1.0));
    assert_eq!(modulate(&x, &ones).value(), x.value());
}

#[test]
fn generator_shape_determinism_and_errors() {
    let cfg = NetConfig::tiny();
    let g1 = Generator::<f64>::new(&cfg, Conditioning::Concat, &mut rng(10)).unwrap();
    let g2 = Generator::<f64>::new(&cfg, Conditioning::Concat, &mut rng(10)).unwrap();
    let z = Var::constant(uniform(&mut rng(11), [2, 3, 8, 6], 0.0, 1.0));
    let a = Var::constant(uniform(&mut rng(12), [2, 1, 8, 6], 0.0, 1.0));
    let out = g1.forward(&z, &a).unwrap();
    assert_eq!(out.shape(), [2, 1, 8, 6]);
    assert_eq!(out.value(), g2.forward(&z, &a).unwrap().value());

    let bad = Var::constant(Tensor::zeros([2, 1, 8, 5]));
    assert!(matches!(g1.forward(&z, &bad), Err(crate::Error::ShapeMismatch(_))));
    assert!(g1.forward(&a, &a).is_err());
}

#[test]
fn generator_matches_composition_oracle() {
    let cfg = NetConfig::tiny();
    let mut g = Generator::<f64>::new(&cfg, Conditioning::Concat, &mut rng(13)).unwrap();
    randomize_biases(&mut g.params, 14);
    let z = uniform(&mut rng(15), [2, 3, 6, 6], 0.0, 1.0);
    let a = uniform(&mut rng(16), [2, 1, 6, 6], 0.0, 1.0);
    let got = g.forward(&Var::constant(z.clone()), &Var::constant(a.clone())).unwrap();
    let (want, _) = backbone_ref(&g.params, &cfg, &concat(&[&z, &a]));
    assert!(got.value().max_abs_diff(&want) < 1e-9);
}

#[test]
fn multiply_with_unit_attention_sees_raw_source() {
    let cfg = NetConfig::tiny();
    let g = Generator::<f64>::new(&cfg, Conditioning::Multiply, &mut rng(17)).unwrap();
    assert_eq!(g.params.var(g.backbone.encoder[0].weight).shape()[1], 3);
    let z = Var::constant(uniform(&mut rng(18), [1, 3, 6, 6], 0.0, 1.0));
    let ones = Var::constant(Tensor::full([1, 1, 6, 6], 1.0));
    let via_attention = g.forward(&z, &ones).unwrap();
    let raw = g.backbone.forward(&g.params, &z).0;
    assert_eq!(via_attention.value(), raw.value());
}

#[test]
fn discriminator_taps_and_score_oracle() {
    let cfg = NetConfig {
        blocks: 2,
        ..NetConfig::tiny()
    };
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng(19)).unwrap();
    randomize_biases(&mut d.params, 20);
    let x = uniform(&mut rng(21), [2, 1, 6, 6], 0.0, 1.0);
    let out = d.forward(&Var::constant(x.clone())).unwrap();
    assert_eq!(out.taps.len(), cfg.tap_count());
    assert_eq!(out.score.shape(), [2, 1, 1, 1]);

    let (features, taps) = backbone_ref(&d.params, &cfg, &x);
    for (got, want) in out.taps.iter().zip(&taps) {
        assert!(got.value().max_abs_diff(want) < 1e-9);
    }
    let leaky = |t: Tensor<f64>| t.map(|v| if v > 0.0 { v } else { 0.2 * v });
    let h = leaky(conv_ref(&d.params, "mlp.0", &pool_ref(&features), 0, 1));
    let h = leaky(conv_ref(&d.params, "mlp.1", &h, 0, 1));
    let score = conv_ref(&d.params, "mlp.2", &h, 0, 1);
    assert!(out.score.value().max_abs_diff(&score) < 1e-9);
    assert!(d.forward(&Var::constant(Tensor::zeros([1, 2, 6, 6]))).is_err());
}

#[test]
fn default_critic_exposes_eight_taps() {
    assert_eq!(NetConfig::default().tap_count(), 8);
}

fn energy_ref(tap: &Tensor<f64>) -> Vec<Vec<f64>> {
    let [n, c, h, w] = tap.shape();
    (0..n)
        .map(|s| (0..h * w).map(|i| (0..c).map(|ch| tap.plane(s, ch)[i].abs()).sum()).collect())
        .collect()
}

fn norm_ref(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

fn attention_ref(variant: AttentionVariant, taps: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let energies: Vec<_> = taps.iter().map(energy_ref).collect();
    let n = energies[0].len();
    (0..n)
        .map(|s| {
            let px = energies[0][s].len();
            let inner = |e: &[f64]| -> Vec<f64> {
                match variant {
                    AttentionVariant::V1 => e.to_vec(),
                    AttentionVariant::V2 => e.iter().map(|&v| sig(v)).collect(),
                    AttentionVariant::V3 => norm_ref(e),
                }
            };
            let mut total = vec![0.0; px];
            for e in &energies {
                for (t, v) in total.iter_mut().zip(inner(&e[s])) {
                    *t += v;
                }
            }
            match variant {
                AttentionVariant::V3 => norm_ref(&total),
                _ => total.into_iter().map(sig).collect(),
            }
        })
        .collect()
}

fn vars(taps: &[Tensor<f64>]) -> Vec<Var<f64>> {
    taps.iter().cloned().map(Var::constant).collect()
}

#[test]
fn attention_variants_match_formula_oracle() {
    let mut r = rng(22);
    for case in 0..30 {
        let taps: Vec<_> = (0..3).map(|_| uniform(&mut r, [2, 2, 4, 4], -1.0, 1.0)).collect();
        for variant in AttentionVariant::ALL {
            let got = spatial_attention(variant, &vars(&taps)).unwrap();
            let want = attention_ref(variant, &taps);
            for (s, plane) in want.iter().enumerate() {
                for (g, w) in got.value().plane(s, 0).iter().zip(plane) {
                    assert!((g - w).abs() < 1e-9, "case {case} {variant}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn attention_closed_forms() {
    let zeros: Vec<_> = (0..6).map(|_| Var::constant(Tensor::<f64>::zeros([1, 3, 4, 4]))).collect();
    let v1 = spatial_attention_v1(&zeros).unwrap();
    assert!(v1.value().data().iter().all(|&v| v == 0.5));
    let v2 = spatial_attention_v2(&zeros).unwrap();
    assert!(v2.value().data().iter().all(|&v| (v - 0.952_574_126_822_433_4).abs() < 1e-12));
    let v3 = spatial_attention_v3(&zeros).unwrap();
    assert!(v3.value().data().iter().all(|&v| v == 0.0));
    assert!(matches!(spatial_attention_v3::<f64>(&[]), Err(crate::Error::EmptyTaps)));

    let mut tap = Tensor::<f64>::full([1, 2, 3, 3], 0.1);
    tap.data_mut()[4] = -2.0;
    let v3 = spatial_attention_v3(&[Var::constant(tap)]).unwrap();
    assert_eq!(v3.value().data()[4], 1.0);
    assert_eq!(v3.value().data().iter().cloned().fold(f64::MIN, f64::max), 1.0);
}

#[test]
fn v1_saturates_on_large_activations() {
    let taps: Vec<_> = (0..3).map(|k| uniform(&mut rng(30 + k), [1, 4, 8, 8], -1.0, 1.0)).collect();
    let big: Vec<_> = taps.iter().map(|t| Var::constant(t.map(|v| v * 100.0))).collect();
    let v1 = spatial_attention_v1(&big).unwrap();
    assert!(v1.value().data().iter().all(|&v| v > 0.99));
}

#[test]
fn attention_rejects_spatial_mismatch() {
    let taps = [
        Var::constant(Tensor::<f64>::zeros([1, 2, 4, 4])),
        Var::constant(Tensor::zeros([1, 2, 4, 3])),
    ];
    assert!(matches!(spatial_attention_v1(&taps), Err(crate::Error::ShapeMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn v3_extremes_and_tap_scale_invariance(seed in 0u64..10_000, k in 0usize..3, scale in 0.01f64..100.0) {
        let taps: Vec<_> = (0..3).map(|i| uniform(&mut rng(seed * 3 + i as u64), [1, 2, 5, 5], -1.0, 1.0)).collect();
        let base = spatial_attention_v3(&vars(&taps)).unwrap();
        let data = base.value().data();
        prop_assert_eq!(data.iter().cloned().fold(f64::MAX, f64::min), 0.0);
        prop_assert_eq!(data.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        let mut scaled = taps.clone();
        scaled[k] = scaled[k].map(|v| v * scale);
        let other = spatial_attention_v3(&vars(&scaled)).unwrap();
        prop_assert!(base.value().max_abs_diff(other.value()) < 1e-9);
    }

    #[test]
    fn attention_ignores_channel_order(seed in 0u64..10_000) {
        let tap = uniform(&mut rng(seed), [1, 3, 4, 4], -1.0, 1.0);
        let swapped = Tensor::from_fn(tap.shape(), |[s, c, r, col]| tap.at([s, 2 - c, r, col]));
        for variant in AttentionVariant::ALL {
            let a = spatial_attention(variant, &[Var::constant(tap.clone())]).unwrap();
            let b = spatial_attention(variant, &[Var::constant(swapped.clone())]).unwrap();
            prop_assert!(a.value().max_abs_diff(b.value()) < 1e-12);
        }
    }

    #[test]
    fn v1_v2_stay_inside_unit_interval(seed in 0u64..10_000) {
        let taps: Vec<_> = (0..2).map(|i| uniform(&mut rng(seed + i), [1, 2, 3, 3], -3.0, 3.0)).collect();
        for variant in [AttentionVariant::V1, AttentionVariant::V2] {
            let a = spatial_attention(variant, &vars(&taps)).unwrap();
            prop_assert!(a.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

// Gradient checks against central finite differences.

fn critic_score_grad_norm(d: &Discriminator<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let leaf = Var::leaf(x.clone());
    let g = grad(&ops::sum_all(&d.score(&leaf).unwrap()), &[&leaf], false)[0].clone().unwrap();
    let [n, ..] = x.shape();
    (0..n).map(|s| g.value().sample(s).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

#[test]
fn critic_input_gradient_matches_finite_differences() {
    let cfg = NetConfig::tiny();
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng(40)).unwrap();
    randomize_biases(&mut d.params, 41);
    let x = uniform(&mut rng(42), [2, 1, 8, 8], 0.0, 1.0);
    let norms = critic_score_grad_norm(&d, &x);
    let h = 1e-3;
    for (s, norm) in norms.iter().enumerate() {
        let mut sq = 0.0;
        for i in 0..64 {
            let probe = |delta: f64| {
                let mut t = x.select_batch(&[s]);
                t.data_mut()[i] += delta;
                d.score(&Var::constant(t)).unwrap().item()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            sq += fd * fd;
        }
        assert!(testkit::rel_err(*norm, sq.sqrt()) < 1e-3, "{norm} vs {}", sq.sqrt());
    }
}

#[test]
fn gradient_penalty_parameter_gradients_match_finite_differences() {
    let cfg = NetConfig::tiny();
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng(43)).unwrap();
    randomize_biases(&mut d.params, 44);
    let x = uniform(&mut rng(45), [2, 1, 8, 8], 0.0, 1.0);
    let xh = uniform(&mut rng(46), [2, 1, 8, 8], 0.0, 1.0);
    let net = d.clone();
    let f = move |p: &ParamSet<f64>| {
        let critic = Discriminator {
            params: p.clone(),
            ..net.clone()
        };
        losses::gradient_penalty(|v| critic.score(v), &x, &xh, &[0.3, 0.8]).unwrap().value
    };
    let err = testkit::max_param_grad_error(&mut d.params, &f, 4, 1e-5, 47);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn critic_objective_gradients_match_finite_differences() {
    let cfg = NetConfig::tiny();
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng(48)).unwrap();
    randomize_biases(&mut d.params, 49);
    let y = uniform(&mut rng(50), [2, 1, 8, 8], 0.0, 1.0);
    let yt = uniform(&mut rng(51), [2, 1, 8, 8], 0.0, 1.0);
    let xh = uniform(&mut rng(52), [2, 1, 8, 8], 0.0, 1.0);
    let w = losses::LossWeights::default();
    let net = d.clone();
    for variant in AttentionVariant::ALL {
        let (net, y, yt, xh) = (net.clone(), y.clone(), yt.clone(), xh.clone());
        let f = move |p: &ParamSet<f64>| {
            let critic = Discriminator {
                params: p.clone(),
                ..net.clone()
            };
            let real = critic.forward(&Var::constant(y.clone())).unwrap();
            let fake = critic.forward(&Var::constant(xh.clone())).unwrap();
            let up = critic.forward(&Var::constant(yt.clone())).unwrap();
            let a_real = spatial_attention(variant, &real.taps).unwrap();
            let a_fake = spatial_attention(variant, &fake.taps).unwrap();
            let a_up = spatial_attention(variant, &up.taps).unwrap();
            let gp = losses::gradient_penalty(|v| critic.score(v), &y, &xh, &[0.4, 0.6]).unwrap();
            let l_sa = losses::spatial_attention_loss(&a_fake, &a_real).unwrap();
            let l_da = losses::domain_adaptation_loss(&a_up, &a_real).unwrap();
            losses::critic_objective(&real.score, &fake.score, &gp.value, &l_sa, &l_da, &w)
        };
        let err = testkit::max_param_grad_error(&mut d.params, &f, 3, 1e-5, 53);
        assert!(err < 1e-3, "{variant}: relative error {err}");
    }
}

#[test]
fn generator_objective_gradients_match_finite_differences() {
    let cfg = NetConfig::tiny();
    let mut g = Generator::<f64>::new(&cfg, Conditioning::Concat, &mut rng(54)).unwrap();
    randomize_biases(&mut g.params, 55);
    let d = Discriminator::<f64>::new(&cfg, &mut rng(56)).unwrap();
    let z = uniform(&mut rng(57), [2, 3, 8, 8], 0.0, 1.0);
    let a = uniform(&mut rng(58), [2, 1, 8, 8], 0.0, 1.0);
    let y = uniform(&mut rng(59), [2, 1, 8, 8], 0.0, 1.0);
    let w = losses::LossWeights::default();
    let net = g.clone();
    let f = move |p: &ParamSet<f64>| {
        let gen = Generator {
            params: p.clone(),
            ..net.clone()
        };
        let xh = gen.forward(&Var::constant(z.clone()), &Var::constant(a.clone())).unwrap();
        let l_p = losses::pixel_loss(&xh, &Var::constant(y.clone()), w.pixel_reduction).unwrap();
        losses::generator_objective(&d.score(&xh).unwrap(), &l_p, &w)
    };
    let err = testkit::max_param_grad_error(&mut g.params, &f, 4, 1e-5, 60);
    assert!(err < 1e-3, "relative error {err}");
}
