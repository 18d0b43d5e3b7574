//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod cases;

use hseg::data::{PhantomSlice, Sample};
use hseg::model::HUNetCompound;
use hseg::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct T {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        T {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        T::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn dims4(&self) -> [usize; 4] {
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> T {
        T::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, o: &T, f: impl Fn(f64, f64) -> f64) -> T {
        assert_eq!(self.shape, o.shape);
        T::new(&self.shape, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }
}

pub fn conv2d(x: &T, k: &T, b: &T, stride: usize, pad: usize) -> T {
    let [n, c, h, w] = x.dims4();
    let [f, kc, kh, kw] = k.dims4();
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    T::new(&[n, f, oh, ow], out)
}

pub fn maxpool2(x: &T) -> T {
    let [n, c, h, w] = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(plane * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    T::new(&[n, c, oh, ow], out)
}

pub fn upsample2(x: &T) -> T {
    let [n, c, h, w] = x.dims4();
    let mut out = Vec::with_capacity(n * c * h * w * 4);
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(x.data[(plane * h + y / 2) * w + xx / 2]);
            }
        }
    }
    T::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn concat(a: &T, b: &T) -> T {
    let [n, ca, h, w] = a.dims4();
    let cb = b.shape[1];
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for bi in 0..n {
        out.extend_from_slice(&a.data[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&b.data[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    T::new(&[n, ca + cb, h, w], out)
}

pub fn relu(x: &T) -> T {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &T) -> T {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn softmax(x: &T) -> T {
    let [n, c, h, w] = x.dims4();
    let plane = h * w;
    let mut out = x.data.clone();
    for bi in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (bi * c + ch) * plane + p;
            let total: f64 = (0..c).map(|ch| x.data[idx(ch)].exp()).sum();
            for ch in 0..c {
                out[idx(ch)] = x.data[idx(ch)].exp() / total;
            }
        }
    }
    T::new(&x.shape, out)
}

pub fn add(a: &T, b: &T) -> T {
    a.zip(b, |x, y| x + y)
}

pub fn sub(a: &T, b: &T) -> T {
    a.zip(b, |x, y| x - y)
}

pub fn mul(a: &T, b: &T) -> T {
    a.zip(b, |x, y| x * y)
}

pub fn div(a: &T, b: &T) -> T {
    a.zip(b, |x, y| x / y)
}

pub fn ln(x: &T) -> T {
    x.map(f64::ln)
}

pub fn clamp(x: &T, lo: f64, hi: f64) -> T {
    x.map(|v| v.clamp(lo, hi))
}

pub fn sum(x: &T) -> f64 {
    x.data.iter().sum()
}

pub fn sum_per_channel(x: &T) -> Vec<f64> {
    let [n, c, h, w] = x.dims4();
    let plane = h * w;
    (0..c)
        .map(|ch| (0..n).map(|b| x.data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>()).sum())
        .collect()
}

pub const LOG_CLIP: f64 = 1e-7;

/// Per-label soft Dice losses.
pub fn dice_per_label(pred: &T, target: &T, eps: f64) -> Vec<f64> {
    let inter = sum_per_channel(&mul(pred, target));
    let both = sum_per_channel(&add(pred, target));
    inter.iter().zip(&both).map(|(i, s)| 1.0 - 2.0 * i / (s + eps)).collect()
}

pub fn weighted_dice(pred: &T, target: &T, weights: &[f64], eps: f64) -> f64 {
    dice_per_label(pred, target, eps).iter().zip(weights).map(|(d, w)| d * w).sum()
}

pub fn weighted_ce(pred: &T, target: &T, weights: &[f64]) -> f64 {
    let [n, c, h, w] = pred.dims4();
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                let i = (b * c + ch) * plane + p;
                let q = pred.data[i].clamp(LOG_CLIP, 1.0 - LOG_CLIP);
                total -= weights[ch] * target.data[i] * q.ln();
            }
        }
    }
    total
}

pub fn binary_ce(pred: &T, target: &T) -> f64 {
    pred.data
        .iter()
        .zip(&target.data)
        .map(|(&p, &y)| {
            let p = p.clamp(LOG_CLIP, 1.0 - LOG_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

pub fn cnet_total(pred: &T, target: &T, weights: &[f64], lambda: f64, eps: f64) -> f64 {
    lambda * weighted_ce(pred, target, weights) + (1.0 - lambda) * weighted_dice(pred, target, weights, eps)
}

/// Parameters of a model by name, as f64.
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<T>,
}

impl Params {
    pub fn of(model: &HUNetCompound) -> Self {
        Params {
            names: model.params().iter().map(|p| p.name.clone()).collect(),
            values: model.params().iter().map(|p| T::from_tensor(&p.value)).collect(),
        }
    }

    fn get(&self, name: &str) -> &T {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.values[i]
    }

    fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    fn conv(&self, name: &str, x: &T) -> T {
        let k = self.get(&format!("{name}.weight"));
        let pad = k.shape[2] / 2;
        conv2d(x, k, self.get(&format!("{name}.bias")), 1, pad)
    }
}

fn unet(p: &Params, prefix: &str, x: &T) -> T {
    let mut depth = 0;
    while p.has(&format!("{prefix}.enc{depth}.conv1.weight")) {
        depth += 1;
    }
    let mut x = p.conv(&format!("{prefix}.adapter"), x);
    let mut skips = Vec::new();
    for level in 0..depth {
        x = relu(&p.conv(&format!("{prefix}.enc{level}.conv1"), &x));
        x = relu(&p.conv(&format!("{prefix}.enc{level}.conv2"), &x));
        skips.push(x.clone());
        x = maxpool2(&x);
    }
    x = relu(&p.conv(&format!("{prefix}.bottleneck.conv1"), &x));
    x = relu(&p.conv(&format!("{prefix}.bottleneck.conv2"), &x));
    for level in (0..depth).rev() {
        let up = upsample2(&x);
        x = concat(&skips[level], &up);
        x = relu(&p.conv(&format!("{prefix}.dec{level}.conv1"), &x));
        x = relu(&p.conv(&format!("{prefix}.dec{level}.conv2"), &x));
    }
    p.conv(&format!("{prefix}.head"), &x)
}

/// `(lung, classes)` of the cascade, or `(None, classes)` for a flat model.
pub fn hunet_forward(p: &Params, image: &T) -> (Option<T>, T) {
    if p.has("lnet.adapter.weight") {
        let lung = sigmoid(&unet(p, "lnet", image));
        let classes = softmax(&unet(p, "cnet", &concat(image, &lung)));
        (Some(lung), classes)
    } else {
        (None, softmax(&unet(p, "cnet", image)))
    }
}

/// Directed and symmetric modified Hausdorff distance by all-pairs search.
pub fn mhd_brute(a: &[(i64, i64)], b: &[(i64, i64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        let mut total = 0.0;
        for &(ar, ac) in a {
            let mut best = f64::INFINITY;
            for &(br, bc) in b {
                let d = (((ar - br).pow(2) + (ac - bc).pow(2)) as f64).sqrt();
                best = best.min(d);
            }
            total += best;
        }
        total / a.len() as f64
    };
    Some(directed(a, b).max(directed(b, a)))
}

fn gamma_half(twice: u64) -> f64 {
    // Γ(twice/2) for positive integers `twice`.
    let mut g = if twice.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut a = if twice.is_multiple_of(2) { 1.0 } else { 0.5 };
    while 2.0 * a < twice as f64 {
        g *= a;
        a += 1.0;
    }
    g
}

/// Pearson r from exact integer sums and a two-sided p-value by Simpson
/// quadrature of the Student t density.
pub fn pearson_oracle(x: &[i64], y: &[i64]) -> (f64, f64) {
    let n = x.len() as i128;
    let sx: i128 = x.iter().map(|&v| v as i128).sum();
    let sy: i128 = y.iter().map(|&v| v as i128).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let sxx: i128 = x.iter().map(|&a| a as i128 * a as i128).sum();
    let syy: i128 = y.iter().map(|&b| b as i128 * b as i128).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    let r = cov as f64 / ((vx as f64).sqrt() * (vy as f64).sqrt());
    let nu = (x.len() - 2) as u64;
    let nuf = nu as f64;
    let c = gamma_half(nu + 1) / ((nuf * std::f64::consts::PI).sqrt() * gamma_half(nu));
    let density = |t: f64| c * (1.0 + t * t / nuf).powf(-(nuf + 1.0) / 2.0);
    let t = (r * (nuf / (1.0 - r * r)).sqrt()).abs();
    let steps = 200_000;
    let h = t / steps as f64;
    let mut acc = density(0.0) + density(t);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * density(i as f64 * h);
    }
    let central = acc * h / 3.0;
    (r, 1.0 - 2.0 * central)
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values whose magnitudes stay at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values on a grid of spacing `step`, randomly permuted.
pub fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize], step: f32) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * step).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// Random one-hot target `[n, l, h, w]`.
pub fn random_one_hot(rng: &mut ChaCha8Rng, n: usize, l: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; n * l * plane];
    for b in 0..n {
        for p in 0..plane {
            let c = rng.random_range(0..l);
            data[(b * l + c) * plane + p] = 1.0;
        }
    }
    Tensor::new(&[n, l, h, w], data).unwrap()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of `Σ c·f(inputs)` with central differences of
/// the f64 oracle `reference`. `build` maps input handles to the output.
pub fn grad_check(
    seed: u64,
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[T]) -> Vec<f64>,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let coeff = random_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let c = tape.constant(coeff.clone());
    let weighted = tape.mul(out, c).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();
    let coeff64: Vec<f64> = coeff.data().iter().map(|&v| v as f64).collect();
    let objective = |xs: &[T]| -> f64 { reference(xs).iter().zip(&coeff64).map(|(a, b)| a * b).sum() };
    let base: Vec<T> = inputs.iter().map(T::from_tensor).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input gradient");
        for j in 0..base[i].data.len() {
            let mut plus = base.clone();
            plus[i].data[j] += h;
            let mut minus = base.clone();
            minus[i].data[j] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic.data()[j] as f64;
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-4 {
                worst = worst.max((a - numeric).abs() / scale);
                checked += 1;
            }
        }
    }
    GradCheck {
        max_rel_err: worst,
        checked,
    }
}

pub fn to_sample(s: &PhantomSlice) -> Sample {
    Sample {
        name: s.name(),
        volume_id: s.volume_id.clone(),
        slice_index: s.slice_index,
        image: s.image.clone(),
        labels: s.labels.clone(),
    }
}
