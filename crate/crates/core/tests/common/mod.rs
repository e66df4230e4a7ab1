//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use clickadapt::params::ParamVars;
use clickadapt::{Architecture, Gradients, Graph, ImportanceSet, ParamSet, Prediction, SegNet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, for coordinates whose gradient vanishes.
pub const FD_FLOOR: f64 = 1e-6;

/// Tiny network used for finite-difference checks.
pub fn tiny_arch() -> Architecture {
    Architecture {
        input_size: 8,
        widths: vec![2, 3],
        ..Architecture::default()
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Tiny network, random input, labels, sparse corrections, p0, θ* and Ω.
pub struct Fixture {
    pub net: SegNet,
    pub x: Tensor,
    pub y: Tensor,
    pub corrections: Tensor,
    pub p0: Prediction,
    pub theta_star: ParamSet,
    pub omega: ImportanceSet,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SegNet::build(tiny_arch(), seed).unwrap();
    // zero biases put dead-channel pre-activations exactly on the ReLU kink
    net.params = net
        .params
        .iter()
        .map(|(k, t)| {
            let t = if k.ends_with("bias") { random_tensor(&mut rng, t.shape(), -0.1, 0.1) } else { t.clone() };
            (k.clone(), t)
        })
        .collect();
    assert!(net.params.num_scalars() < 5000);
    let n = tiny_arch().input_size;
    let x = random_tensor(&mut rng, &[5, n, n], 0.0, 1.0);
    let y = Tensor::new(vec![n, n], (0..n * n).map(|_| f64::from(rng.random_bool(0.4))).collect()).unwrap();
    let corrections = Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|i| if i % 7 == 3 { f64::from(rng.random_bool(0.5)) } else { -1.0 })
            .collect(),
    )
    .unwrap();
    let p0 = Prediction::from_probabilities(&random_tensor(&mut rng, &[n, n], 0.0, 1.0));
    let theta_star: ParamSet = net
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.map(|v| v + 0.05)))
        .collect();
    let omega = ImportanceSet::from_params(
        net.params
            .iter()
            .map(|(k, t)| (k.clone(), random_tensor(&mut rng, t.shape(), 0.1, 2.0)))
            .collect(),
    )
    .unwrap();
    Fixture { net, x, y, corrections, p0, theta_star, omega }
}

pub fn net_with(params: &ParamSet) -> SegNet {
    SegNet::from_params(tiny_arch(), params.clone()).unwrap()
}

pub fn analytic(fx: &Fixture, loss: impl Fn(&mut Graph, Var, &ParamVars) -> Var) -> Gradients {
    let mut g = Graph::new();
    let vars = fx.net.params.register(&mut g, true);
    let xv = g.constant(fx.x.clone());
    let probs = fx.net.forward(&mut g, &vars, xv).unwrap();
    let l = loss(&mut g, probs, &vars);
    g.backward(l).unwrap()
}

/// Direct six-loop cross-correlation with zero padding.
pub fn conv_loops(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = bias.data()[o];
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let yy = (y * stride + i) as isize - padding as isize;
                            let xx = (x * stride + j) as isize - padding as isize;
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += kernel.data()[((o * ci + c) * kh + i) * kw + j]
                                    * input.data()[(c * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + x] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

/// Cross-entropy over pixels with `target != -1`, averaged, probabilities
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loops(probs: &[f64], target: &[f64]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&p, &t) in probs.iter().zip(target) {
        if t == -1.0 {
            continue;
        }
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        n += 1;
    }
    sum / n as f64
}

/// Copy of `params` with one scalar shifted by `delta`.
pub fn perturbed(params: &ParamSet, name: &str, index: usize, delta: f64) -> ParamSet {
    params
        .iter()
        .map(|(n, t)| {
            let mut data = t.data().to_vec();
            if n == name {
                data[index] += delta;
            }
            (n.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect()
}

/// Relative error used for gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between `grads` and central differences of `f`.
pub fn fd_worst(
    params: &ParamSet,
    grads: &clickadapt::Gradients,
    h: f64,
    floor: f64,
    f: impl Fn(&ParamSet) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, t) in params.iter() {
        let g = grads.get(name).unwrap_or_else(|| panic!("missing gradient for {name}"));
        for i in 0..t.len() {
            let numeric = (f(&perturbed(params, name, i, h)) - f(&perturbed(params, name, i, -h))) / (2.0 * h);
            let e = rel_err(g.data()[i], numeric, floor);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {} numeric {numeric}", g.data()[i]));
            }
        }
    }
    worst
}

/// Union of random rectangles with 5% of pixels flipped.
pub fn random_mask<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    // blobby masks: random rectangles, so regions have interiors
    let mut m = vec![false; n * n];
    for _ in 0..rng.random_range(1..6) {
        let (r0, c0) = (rng.random_range(0..n), rng.random_range(0..n));
        let (r1, c1) = (rng.random_range(r0..n), rng.random_range(c0..n));
        for r in r0..=r1 {
            for c in c0..=c1 {
                m[r * n + c] = true;
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(0.05) {
            *v = !*v;
        }
    }
    m
}

pub fn mask_tensor(m: &[bool], n: usize) -> Tensor {
    Tensor::new(vec![n, n], m.iter().map(|&b| f64::from(b)).collect()).unwrap()
}

/// Exhaustive clicker: union-find components of the error map, largest
/// first (earliest top-left pixel on ties), then the region pixel with the
/// largest squared distance to any non-region pixel or the outer frame
/// (row-major first on ties). Returns `(row, col, positive)`.
pub fn brute_force_click(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Option<(usize, usize, bool)> {
    let wrong: Vec<bool> = pred.iter().zip(gt).map(|(a, b)| a != b).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !wrong[i] {
                continue;
            }
            for j in [(r + 1 < h).then(|| i + w), (c + 1 < w).then(|| i + 1)].into_iter().flatten() {
                if wrong[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &bad) in wrong.iter().enumerate() {
        if bad {
            let root = find(&mut parent, i);
            members.entry(root).or_default().push(i);
        }
    }
    // members are keyed by their smallest index, i.e. the top-left pixel
    let mut best: Option<&Vec<usize>> = None;
    for region in members.values() {
        if best.is_none_or(|b| region.len() > b.len()) {
            best = Some(region);
        }
    }
    let region = best?;
    let inside: std::collections::HashSet<usize> = region.iter().copied().collect();
    let mut outside: Vec<(i64, i64)> = Vec::new();
    for r in -1..=h as i64 {
        for c in -1..=w as i64 {
            let in_image = r >= 0 && c >= 0 && r < h as i64 && c < w as i64;
            if !in_image || !inside.contains(&(r as usize * w + c as usize)) {
                outside.push((r, c));
            }
        }
    }
    let mut pick = (0usize, -1i64);
    for &i in region {
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        let d = outside.iter().map(|&(y, x)| (y - r).pow(2) + (x - c).pow(2)).min().unwrap();
        if d > pick.1 {
            pick = (i, d);
        }
    }
    Some((pick.0 / w, pick.0 % w, gt[pick.0]))
}

/// First index reaching `q`, scanning every entry; `budget` otherwise.
pub fn brute_force_clicks(curve: &[f64], q: f64, budget: usize) -> usize {
    let mut hits: Vec<usize> = (0..curve.len()).filter(|&k| curve[k] >= q).collect();
    hits.sort();
    hits.first().copied().unwrap_or(budget)
}
