mod common;

use attrlab::gradients::{head_gradient, head_hessian, prob_grad_wrt_activations, prob_grad_wrt_neurons};
use attrlab::model::{cross_entropy, forward, forward_patched, Activation, Parameters};
use attrlab::neuron_attribution::{attribute_tokens, TargetClass};
use attrlab::model::InterventionSpec;
use attrlab::model::NeuronId;
use attrlab::data::Dataset;
use common::*;
use rand::Rng;

const H: f64 = 1e-5;

fn loss_with_head(params: &Parameters, theta: &[f64], tokens: &[u32], label: usize) -> f64 {
    let mut p = params.clone();
    p.set_head_flat(theta);
    cross_entropy(&forward(&p, tokens, None).unwrap().logits, label)
}

fn mean_loss_with_head(params: &Parameters, theta: &[f64], data: &Dataset) -> f64 {
    let mut p = params.clone();
    p.set_head_flat(theta);
    data.iter()
        .map(|i| cross_entropy(&forward(&p, &i.tokens(), None).unwrap().logits, i.label))
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn head_gradient_matches_central_differences() {
    for draw in 0..20u64 {
        let act = if draw % 2 == 0 { Activation::Gelu } else { Activation::Relu };
        let params = random_model(draw, act);
        let mut r = rng(100 + draw);
        let tokens = random_tokens(&mut r, &params.config);
        let label = r.gen_range(0..params.config.n_classes);
        let g = head_gradient(&params, &tokens, label).unwrap();
        let theta = params.head_flat();
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += H;
                dn[i] -= H;
                (loss_with_head(&params, &up, &tokens, label) - loss_with_head(&params, &dn, &tokens, label))
                    / (2.0 * H)
            })
            .collect();
        let err = max_rel(g.as_slice(), &fd);
        assert!(err < 1e-6, "draw {draw}: relative error {err}");
    }
}

fn prob_after_patch(params: &Parameters, tokens: &[u32], layer: usize, scale: f64, target: usize, edit: impl Fn(&mut attrlab::tensor::Mat)) -> f64 {
    let trace = forward_patched(params, tokens, layer, |act| {
        for v in &mut act.data {
            *v *= scale;
        }
        edit(act);
    })
    .unwrap();
    trace.probs[target]
}

#[test]
fn activation_gradient_matches_central_differences() {
    for draw in 0..20u64 {
        let params = random_model(200 + draw, Activation::Gelu);
        let cfg = params.config.clone();
        let mut r = rng(300 + draw);
        let tokens = random_tokens(&mut r, &cfg);
        let layer = r.gen_range(0..cfg.n_layers);
        let target = r.gen_range(0..cfg.n_classes);
        let scale = [1.0, 0.5, 0.25][draw as usize % 3];
        let pg = prob_grad_wrt_activations(&params, &tokens, layer, target, scale).unwrap();
        let base = prob_after_patch(&params, &tokens, layer, scale, target, |_| {});
        assert!((pg.prob - base).abs() < 1e-14);
        for t in 0..tokens.len() {
            for u in 0..cfg.d_mlp {
                let up = prob_after_patch(&params, &tokens, layer, scale, target, |a| {
                    let v = a.get(t, u);
                    a.set(t, u, v + H)
                });
                let dn = prob_after_patch(&params, &tokens, layer, scale, target, |a| {
                    let v = a.get(t, u);
                    a.set(t, u, v - H)
                });
                let fd = (up - dn) / (2.0 * H);
                let an = pg.grad.get(t, u);
                if fd.abs() > 1e-6 {
                    let rel = (an - fd).abs() / fd.abs();
                    assert!(rel < 1e-5, "draw {draw} ({t},{u}): {an} vs {fd}");
                } else {
                    assert!((an - fd).abs() < 1e-10, "draw {draw} ({t},{u}): {an} vs {fd}");
                }
            }
        }
        // Position-summed gradient: shift a unit by the same amount everywhere.
        let summed = prob_grad_wrt_neurons(&params, &tokens, layer, target, scale).unwrap();
        let fd: Vec<f64> = (0..cfg.d_mlp)
            .map(|u| {
                let shift = |d: f64| {
                    move |a: &mut attrlab::tensor::Mat| {
                        for t in 0..a.rows {
                            let v = a.get(t, u);
                            a.set(t, u, v + d);
                        }
                    }
                };
                let up = prob_after_patch(&params, &tokens, layer, scale, target, shift(H));
                let dn = prob_after_patch(&params, &tokens, layer, scale, target, shift(-H));
                (up - dn) / (2.0 * H)
            })
            .collect();
        assert!(max_rel(&summed, &fd) < 1e-5, "draw {draw}");
    }
}

#[test]
fn head_hessian_matches_second_differences() {
    let h = 1e-4;
    let damping = 1e-3;
    for draw in 0..5u64 {
        let params = random_model(400 + draw, Activation::Gelu);
        let mut r = rng(500 + draw);
        let data = random_dataset(&mut r, "train", 6, &params.config);
        let hess = head_hessian(&params, &data, damping).unwrap();
        let theta = params.head_flat();
        let n = theta.len();
        let f = |di: usize, si: f64, dj: usize, sj: f64| {
            let mut t = theta.clone();
            t[di] += si * h;
            t[dj] += sj * h;
            mean_loss_with_head(&params, &t, &data)
        };
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                let fd = (f(i, 1.0, j, 1.0) - f(i, 1.0, j, -1.0) - f(i, -1.0, j, 1.0) + f(i, -1.0, j, -1.0))
                    / (4.0 * h * h);
                let an = hess.get(i, j) - if i == j { damping } else { 0.0 };
                worst = worst.max((an - fd).abs());
                assert_eq!(hess.get(i, j), hess.get(j, i));
            }
        }
        assert!(worst < 1e-5, "draw {draw}: max abs error {worst}");
        assert!(hess.min_eigenvalue() >= damping - 1e-12);
    }
}

#[test]
fn damped_solve_has_small_residual() {
    for draw in 0..5u64 {
        let params = random_model(600 + draw, Activation::Relu);
        let mut r = rng(700 + draw);
        let data = random_dataset(&mut r, "train", 10, &params.config);
        let hess = head_hessian(&params, &data, 1e-2).unwrap();
        let v: Vec<f64> = (0..hess.dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = attrlab::gradients::solve_hvp(&hess, &v).unwrap();
        let back = hess.matvec(&x);
        assert!(max_rel(&back, &v) < 1e-8);
    }
}

#[test]
fn integrated_gradients_are_complete_per_layer() {
    let mut checked = 0;
    let mut draw = 0u64;
    while checked < 10 {
        draw += 1;
        let params = random_model(800 + draw, Activation::Relu);
        let cfg = params.config.clone();
        let mut r = rng(900 + draw);
        let tokens = random_tokens(&mut r, &cfg);
        let full = forward(&params, &tokens, None).unwrap();
        let target = full.predicted;
        let scores = attribute_tokens(&params, &tokens, 0, 300, TargetClass::Predicted).unwrap();
        for layer in 0..cfg.n_layers {
            let zeroed = forward(
                &params,
                &tokens,
                Some(&InterventionSpec::deny((0..cfg.d_mlp).map(|u| NeuronId::new(layer, u)))),
            )
            .unwrap();
            let delta = full.probs[target] - zeroed.probs[target];
            // A layer whose removal barely moves the output has no meaningful
            // relative error; such draws are skipped.
            if delta.abs() < 1e-2 {
                continue;
            }
            let total: f64 = scores.layer(layer).iter().sum();
            let rel = (total - delta).abs() / delta.abs();
            assert!(rel < 0.02, "draw {draw} layer {layer}: {total} vs {delta}");
            checked += 1;
        }
    }
}

#[test]
fn integrated_gradients_converge_in_steps() {
    for draw in 0..10u64 {
        let params = random_model(1000 + draw, Activation::Gelu);
        let mut r = rng(1100 + draw);
        let tokens = random_tokens(&mut r, &params.config);
        let coarse = attribute_tokens(&params, &tokens, 0, 20, TargetClass::Predicted).unwrap();
        let fine = attribute_tokens(&params, &tokens, 0, 320, TargetClass::Predicted).unwrap();
        let diff: f64 = coarse.scores.iter().zip(&fine.scores).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fine.scores.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff / norm < 0.05, "draw {draw}: {}", diff / norm);
    }
}

