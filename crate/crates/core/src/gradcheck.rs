//! Central finite differences for checking hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{self, LayerParams};
use crate::network::{
    fuse_predictions, fuse_predictions_backward, normalize_confidence, normalize_confidence_backward, ConfidenceMask,
};
use crate::sampler::{bilinear_sample, bilinear_sample_backward, FlowField};
use crate::tensor::Tensor;
use crate::trainer::{cross_entropy_loss, l1_loss};

/// Step used by the gradient checks.
pub const STEP: f64 = 1e-5;

/// `(f(x+h) − f(x−h)) / 2h` for one scalar perturbed through `set`.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (eval(x + h) - eval(x - h)) / (2.0 * h)
}

/// Relative error `|a−b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero gradients from being judged on rounding noise alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of a batch of finite-difference probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Probes compared against the analytic gradient.
    pub probes: usize,
    /// Candidate points discarded as degenerate: the forward and backward difference
    /// quotients disagree, so a kink (ReLU, |·|, integer sampling coordinate) lies
    /// within one step of the point.
    pub resampled: usize,
    pub max_rel_error: f64,
}

impl ProbeReport {
    pub fn empty() -> Self {
        ProbeReport {
            probes: 0,
            resampled: 0,
            max_rel_error: 0.0,
        }
    }

    pub fn merge(self, other: ProbeReport) -> Self {
        ProbeReport {
            probes: self.probes + other.probes,
            resampled: self.resampled + other.resampled,
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
        }
    }
}

/// Compares `analytic(i)` with the central difference of `eval(i, δ)` (the objective
/// with coordinate `i` shifted by `δ`) at `probes` coordinates drawn by `pick`.
///
/// A candidate is resampled when its one-sided quotients differ by more than `tol`
/// relative error; at most `20 · probes` candidates are tried.
pub fn probe_partials(
    probes: usize,
    floor: f64,
    tol: f64,
    mut pick: impl FnMut() -> usize,
    mut analytic: impl FnMut(usize) -> f64,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> ProbeReport {
    let mut report = ProbeReport::empty();
    let mut tries = 0;
    while report.probes < probes && tries < 20 * probes {
        tries += 1;
        let i = pick();
        let (plus, here, minus) = (eval(i, STEP), eval(i, 0.0), eval(i, -STEP));
        let forward = (plus - here) / STEP;
        let backward = (here - minus) / STEP;
        if relative_error(forward, backward, floor) > tol {
            report.resampled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        report.probes += 1;
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic(i), numeric, floor));
    }
    report
}

/// Scalar function of a case's arguments.
pub type Objective = Box<dyn Fn(&[Tensor]) -> f64>;

/// One randomized instance of a differentiable component: its arguments, the analytic
/// gradient of `objective` w.r.t. each argument, and the scalar objective itself.
pub struct Case {
    pub args: Vec<Tensor>,
    pub grads: Vec<Tensor>,
    pub objective: Objective,
}

/// Probes fresh cases from `make` (100 probes each) until `probes` are done.
pub fn probe_cases(
    probes: usize,
    seed: u64,
    floor: f64,
    tol: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Case,
) -> ProbeReport {
    const PER_CASE: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ProbeReport::empty();
    let mut cases = 0;
    while report.probes < probes {
        cases += 1;
        if cases > 20 * probes.div_ceil(PER_CASE) {
            break;
        }
        let case = make(&mut rng);
        let mut pick_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let sizes: Vec<usize> = case.args.iter().map(Tensor::len).collect();
        let want = PER_CASE.min(probes - report.probes);
        let r = probe_partials(
            want,
            floor,
            tol,
            || {
                let a = pick_rng.random_range(0..sizes.len());
                (a << 32) | pick_rng.random_range(0..sizes[a])
            },
            |code| case.grads[code >> 32].data()[code & 0xffff_ffff],
            |code, d| {
                let mut args = case.args.clone();
                args[code >> 32].data_mut()[code & 0xffff_ffff] += d;
                (case.objective)(&args)
            },
        );
        report = report.merge(r);
    }
    report
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

fn weights(rng: &mut ChaCha8Rng, like: &Tensor) -> Tensor {
    normal_tensor(rng, like.shape(), 1.0)
}

/// Component names checked by [`gradient_suite`], in order.
pub const SUITE_COMPONENTS: [&str; 10] = [
    "conv2d",
    "upconv2d",
    "fully_connected",
    "relu",
    "concat",
    "sampler/source",
    "sampler/flow",
    "l1_loss",
    "cross_entropy_loss",
    "confidence_fusion",
];

/// Checks every layer, both sampler arguments, both losses and the confidence
/// normalization/fusion against central differences with `probes` probes each.
pub fn gradient_suite(probes: usize, seed: u64, tol: f64) -> Vec<(&'static str, ProbeReport)> {
    const FLOOR: f64 = 1e-6;
    let mut out = Vec::new();
    for (k, name) in SUITE_COMPONENTS.iter().enumerate() {
        let seed = seed.wrapping_add(k as u64 * 7919);
        let report = match *name {
            "conv2d" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let x = normal_tensor(rng, &[2, 3, 7, 6], 1.0);
                let p = LayerParams::new(
                    "c",
                    normal_tensor(rng, &[4, 3, 3, 3], 0.5),
                    normal_tensor(rng, &[4], 0.5),
                );
                let y = layers::conv2d(&x, &p, stride, pad).expect("conv");
                let r = weights(rng, &y);
                let g = layers::conv2d_backward(&x, &p, stride, pad, &r).expect("conv backward");
                Case {
                    args: vec![x, p.weight.clone(), p.bias.clone()],
                    grads: vec![g.grad_input, g.grad_weight, g.grad_bias],
                    objective: Box::new(move |a| {
                        let p = LayerParams::new("c", a[1].clone(), a[2].clone());
                        layers::conv2d(&a[0], &p, stride, pad).expect("conv").dot(&r)
                    }),
                }
            }),
            "upconv2d" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let x = normal_tensor(rng, &[2, 3, 4, 3], 1.0);
                let p = LayerParams::new(
                    "u",
                    normal_tensor(rng, &[3, 2, 4, 4], 0.5),
                    normal_tensor(rng, &[2], 0.5),
                );
                let y = layers::upconv2d(&x, &p, 2, 1).expect("upconv");
                let r = weights(rng, &y);
                let g = layers::upconv2d_backward(&x, &p, 2, 1, &r).expect("upconv backward");
                Case {
                    args: vec![x, p.weight.clone(), p.bias.clone()],
                    grads: vec![g.grad_input, g.grad_weight, g.grad_bias],
                    objective: Box::new(move |a| {
                        let p = LayerParams::new("u", a[1].clone(), a[2].clone());
                        layers::upconv2d(&a[0], &p, 2, 1).expect("upconv").dot(&r)
                    }),
                }
            }),
            "fully_connected" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let x = normal_tensor(rng, &[3, 10], 1.0);
                let p = LayerParams::new("f", normal_tensor(rng, &[7, 10], 0.5), normal_tensor(rng, &[7], 0.5));
                let y = layers::fully_connected(&x, &p).expect("fc");
                let r = weights(rng, &y);
                let g = layers::fully_connected_backward(&x, &p, &r).expect("fc backward");
                Case {
                    args: vec![x, p.weight.clone(), p.bias.clone()],
                    grads: vec![g.grad_input, g.grad_weight, g.grad_bias],
                    objective: Box::new(move |a| {
                        let p = LayerParams::new("f", a[1].clone(), a[2].clone());
                        layers::fully_connected(&a[0], &p).expect("fc").dot(&r)
                    }),
                }
            }),
            "relu" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let x = normal_tensor(rng, &[4, 5, 3, 3], 1.0);
                let r = weights(rng, &x);
                let g = layers::relu_backward(&x, &r).expect("relu backward");
                Case {
                    args: vec![x],
                    grads: vec![g],
                    objective: Box::new(move |a| layers::relu(&a[0]).dot(&r)),
                }
            }),
            "concat" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let a = normal_tensor(rng, &[2, 3, 2, 2], 1.0);
                let b = normal_tensor(rng, &[2, 2, 2, 2], 1.0);
                let y = layers::concat(&a, &b, 1).expect("concat");
                let r = weights(rng, &y);
                let (ga, gb) = layers::concat_backward(&r, 3, 1).expect("concat backward");
                Case {
                    args: vec![a, b],
                    grads: vec![ga, gb],
                    objective: Box::new(move |t| layers::concat(&t[0], &t[1], 1).expect("concat").dot(&r)),
                }
            }),
            "sampler/source" | "sampler/flow" => {
                let flow_arg = *name == "sampler/flow";
                probe_cases(probes, seed, FLOOR, tol, move |rng| {
                    let (n, h, w) = (2, 6, 7);
                    let src = normal_tensor(rng, &[n, 3, h, w], 1.0);
                    let offsets = Tensor::from_fn(&[n, 2, h, w], |_| rng.random_range(-3.0..3.0));
                    let flow = FlowField::new(offsets.clone()).expect("flow");
                    let y = bilinear_sample(&src, &flow).expect("sample");
                    let r = weights(rng, &y);
                    let g = bilinear_sample_backward(&src, &flow, &r).expect("sample backward");
                    let (args, grads) = if flow_arg {
                        (vec![offsets, src], vec![g.grad_flow, g.grad_source])
                    } else {
                        (vec![src, offsets], vec![g.grad_source, g.grad_flow])
                    };
                    Case {
                        // Only the first argument is probed.
                        args: args[..1].to_vec(),
                        grads: grads[..1].to_vec(),
                        objective: Box::new(move |a| {
                            let (s, f) = if flow_arg { (&args[1], &a[0]) } else { (&a[0], &args[1]) };
                            let flow = FlowField::new(f.clone()).expect("flow");
                            bilinear_sample(s, &flow).expect("sample").dot(&r)
                        }),
                    }
                })
            }
            "l1_loss" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let p = normal_tensor(rng, &[2, 3, 4, 4], 1.0);
                let t = normal_tensor(rng, &[2, 3, 4, 4], 1.0);
                let mask = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
                let use_mask = rng.random_bool(0.5);
                let m = use_mask.then_some(mask);
                let (_, g) = l1_loss(&p, &t, m.as_ref()).expect("l1");
                Case {
                    args: vec![p],
                    grads: vec![g],
                    objective: Box::new(move |a| l1_loss(&a[0], &t, m.as_ref()).expect("l1").0),
                }
            }),
            "cross_entropy_loss" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let x = normal_tensor(rng, &[2, 1, 4, 4], 3.0);
                let y = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                let (_, g) = cross_entropy_loss(&x, &y).expect("ce");
                Case {
                    args: vec![x],
                    grads: vec![g],
                    objective: Box::new(move |a| cross_entropy_loss(&a[0], &y).expect("ce").0),
                }
            }),
            "confidence_fusion" => probe_cases(probes, seed, FLOOR, tol, |rng| {
                let views = rng.random_range(1..=3);
                let preds: Vec<Tensor> = (0..views).map(|_| normal_tensor(rng, &[2, 3, 3, 3], 1.0)).collect();
                let raw: Vec<Tensor> = (0..views)
                    .map(|_| Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(0.05..2.0)))
                    .collect();
                let fuse = |preds: &[Tensor], raw: &[Tensor]| {
                    let masks = normalize_confidence(
                        &raw.iter()
                            .map(|r| ConfidenceMask { raw: r.clone() })
                            .collect::<Vec<_>>(),
                    )
                    .expect("normalize");
                    let fused = fuse_predictions(preds, &masks).expect("fuse");
                    (masks, fused)
                };
                let (masks, fused) = fuse(&preds, &raw);
                let r = weights(rng, &fused);
                let (gp, gm) = fuse_predictions_backward(&preds, &masks, &r).expect("fuse backward");
                let conf: Vec<ConfidenceMask> = raw.iter().map(|r| ConfidenceMask { raw: r.clone() }).collect();
                let gr = normalize_confidence_backward(&conf, &masks, &gm).expect("normalize backward");
                let mut args = preds;
                args.extend(raw);
                let mut grads = gp;
                grads.extend(gr);
                Case {
                    args,
                    grads,
                    objective: Box::new(move |a| {
                        let (p, q) = a.split_at(views);
                        fuse(p, q).1.dot(&r)
                    }),
                }
            }),
            _ => unreachable!("listed component"),
        };
        out.push((*name, report));
    }
    out
}
