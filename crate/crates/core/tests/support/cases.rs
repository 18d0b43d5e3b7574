//! Gradient-check cases: one per differentiable operation and loss, plus the
//! end-to-end cascade.

use hseg::losses::{
    binary_ce_loss, cnet_total_loss, dice_loss_label, weighted_ce_loss, weighted_dice_loss, LossConfig, OneHotTarget,
};
use hseg::model::{HUNetCompound, UNetConfig};
use hseg::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Case = fn(u64) -> GradCheck;

const H: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_case(seed: u64, x: &[usize], k: &[usize], stride: usize, pad: usize) -> GradCheck {
    let mut r = rng(seed);
    let inputs = [
        random_tensor(&mut r, x, -1.0, 1.0),
        random_tensor(&mut r, k, -1.0, 1.0),
        random_tensor(&mut r, &[k[0]], -0.5, 0.5),
    ];
    grad_check(
        seed,
        &inputs,
        H,
        |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
        |x| conv2d(&x[0], &x[1], &x[2], stride, pad).data,
    )
}

fn conv3(seed: u64) -> GradCheck {
    conv_case(seed, &[2, 3, 6, 6], &[4, 3, 3, 3], 1, 1)
}

fn conv_strided(seed: u64) -> GradCheck {
    conv_case(seed, &[1, 2, 7, 7], &[3, 2, 3, 3], 2, 1)
}

fn conv_pointwise(seed: u64) -> GradCheck {
    conv_case(seed, &[2, 3, 4, 4], &[5, 3, 1, 1], 1, 0)
}

fn maxpool(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = distinct_values(&mut r, &[2, 2, 4, 4], 0.01);
    grad_check(seed, &[x], H, |t, v| t.maxpool2(v[0]).unwrap(), |x| super::maxpool2(&x[0]).data)
}

fn upsample(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
    grad_check(seed, &[x], H, |t, v| t.upsample_nearest2(v[0]).unwrap(), |x| upsample2(&x[0]).data)
}

fn concat_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    grad_check(
        seed,
        &[a, b],
        H,
        |t, v| t.concat_channels(v[0], v[1]).unwrap(),
        |x| concat(&x[0], &x[1]).data,
    )
}

fn relu_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 4, 4], 0.01);
    grad_check(seed, &[x], H, |t, v| t.relu(v[0]), |x| relu(&x[0]).data)
}

fn sigmoid_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 1, 4, 4], -4.0, 4.0);
    grad_check(seed, &[x], H, |t, v| t.sigmoid(v[0]), |x| sigmoid(&x[0]).data)
}

fn softmax_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 4, 3, 3], -3.0, 3.0);
    grad_check(seed, &[x], H, |t, v| t.softmax_channels(v[0]).unwrap(), |x| softmax(&x[0]).data)
}

fn binary_case(seed: u64, positive_b: bool, op: fn(&mut Tape, Var, Var) -> Var, reference: fn(&T, &T) -> T) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 3], -2.0, 2.0);
    let b = if positive_b {
        random_tensor(&mut r, &[2, 3, 3], 0.5, 2.0)
    } else {
        random_tensor(&mut r, &[2, 3, 3], -2.0, 2.0)
    };
    grad_check(seed, &[a, b], H, |t, v| op(t, v[0], v[1]), |x| reference(&x[0], &x[1]).data)
}

fn add_case(seed: u64) -> GradCheck {
    binary_case(seed, false, |t, a, b| t.add(a, b).unwrap(), add)
}

fn sub_case(seed: u64) -> GradCheck {
    binary_case(seed, false, |t, a, b| t.sub(a, b).unwrap(), sub)
}

fn mul_case(seed: u64) -> GradCheck {
    binary_case(seed, false, |t, a, b| t.mul(a, b).unwrap(), mul)
}

fn div_case(seed: u64) -> GradCheck {
    binary_case(seed, true, |t, a, b| t.div(a, b).unwrap(), div)
}

fn same_input_twice(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    grad_check(
        seed,
        &[a],
        H,
        |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.add(sq, v[0]).unwrap()
        },
        |x| add(&mul(&x[0], &x[0]), &x[0]).data,
    )
}

fn scale_shift(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[5, 3], -2.0, 2.0);
    let factor = r.random_range(-3.0f32..3.0);
    let offset = r.random_range(-1.0f32..1.0);
    grad_check(
        seed,
        &[a],
        H,
        move |t, v| {
            let s = t.scale(v[0], factor);
            t.add_scalar(s, offset)
        },
        move |x| x[0].data.iter().map(|v| v * factor as f64 + offset as f64).collect(),
    )
}

fn ln_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4, 4], 0.1, 3.0);
    grad_check(seed, &[a], H, |t, v| t.ln(v[0]), |x| ln(&x[0]).data)
}

fn clamp_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let data: Vec<f32> = (0..24)
        .map(|_| loop {
            let v = r.random_range(-1.0f32..1.0);
            if (v.abs() - 0.5).abs() > 0.01 {
                break v;
            }
        })
        .collect();
    let a = Tensor::new(&[4, 6], data).unwrap();
    grad_check(seed, &[a], H, |t, v| t.clamp(v[0], -0.5, 0.5), |x| clamp(&x[0], -0.5, 0.5).data)
}

fn reductions(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let pick = r.random_range(0..3);
    grad_check(
        seed,
        &[a],
        H,
        move |t, v| {
            let per = t.sum_per_channel(v[0]).unwrap();
            let chosen = t.pick(per, pick).unwrap();
            let total = t.sum(v[0]);
            let sq = t.mul(per, per).unwrap();
            let sq_total = t.sum(sq);
            let both = t.add(chosen, total).unwrap();
            t.add(both, sq_total).unwrap()
        },
        move |x| {
            let per = sum_per_channel(&x[0]);
            vec![per[pick] + sum(&x[0]) + per.iter().map(|v| v * v).sum::<f64>()]
        },
    )
}

struct LossInputs {
    pred: Tensor,
    target: Tensor,
    config: LossConfig,
}

fn loss_inputs(seed: u64) -> LossInputs {
    let mut r = rng(seed);
    let pred = random_tensor(&mut r, &[2, 4, 3, 3], 0.05, 0.95);
    let target = random_one_hot(&mut r, 2, 4, 3, 3);
    let mut config = LossConfig::uniform(4);
    config.class_weights = (0..4).map(|_| r.random_range(0.5f32..2.0)).collect();
    config.lambda = r.random_range(0.1f32..0.9);
    LossInputs { pred, target, config }
}

fn weights64(c: &LossConfig) -> Vec<f64> {
    c.class_weights.iter().map(|&w| w as f64).collect()
}

fn dice_label_case(seed: u64) -> GradCheck {
    let li = loss_inputs(seed);
    let label = (seed % 4) as usize;
    let target = OneHotTarget::new(li.target.clone()).unwrap();
    let t64 = T::from_tensor(&li.target);
    let eps = li.config.epsilon;
    grad_check(
        seed,
        &[li.pred],
        H,
        move |t, v| dice_loss_label(t, v[0], &target, label, eps).unwrap(),
        move |x| vec![dice_per_label(&x[0], &t64, eps as f64)[label]],
    )
}

fn weighted_dice_case(seed: u64) -> GradCheck {
    let li = loss_inputs(seed);
    let target = OneHotTarget::new(li.target.clone()).unwrap();
    let t64 = T::from_tensor(&li.target);
    let w = weights64(&li.config);
    let cfg = li.config.clone();
    grad_check(
        seed,
        &[li.pred],
        H,
        move |t, v| weighted_dice_loss(t, v[0], &target, &cfg).unwrap(),
        move |x| vec![weighted_dice(&x[0], &t64, &w, li.config.epsilon as f64)],
    )
}

fn weighted_ce_case(seed: u64) -> GradCheck {
    let li = loss_inputs(seed);
    let target = OneHotTarget::new(li.target.clone()).unwrap();
    let t64 = T::from_tensor(&li.target);
    let w = weights64(&li.config);
    let cfg = li.config;
    grad_check(
        seed,
        &[li.pred],
        H,
        move |t, v| weighted_ce_loss(t, v[0], &target, &cfg).unwrap(),
        move |x| vec![weighted_ce(&x[0], &t64, &w)],
    )
}

fn binary_ce_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let pred = random_tensor(&mut r, &[2, 1, 3, 3], 0.05, 0.95);
    let target = Tensor::new(&[2, 1, 3, 3], (0..18).map(|_| r.random_range(0..2) as f32).collect()).unwrap();
    let t64 = T::from_tensor(&target);
    grad_check(
        seed,
        &[pred],
        H,
        move |t, v| binary_ce_loss(t, v[0], &target).unwrap(),
        move |x| vec![binary_ce(&x[0], &t64)],
    )
}

fn cnet_total_case(seed: u64) -> GradCheck {
    let li = loss_inputs(seed);
    let target = OneHotTarget::new(li.target.clone()).unwrap();
    let t64 = T::from_tensor(&li.target);
    let w = weights64(&li.config);
    let cfg = li.config.clone();
    grad_check(
        seed,
        &[li.pred],
        H,
        move |t, v| cnet_total_loss(t, v[0], &target, &cfg).unwrap(),
        move |x| {
            vec![cnet_total(
                &x[0],
                &t64,
                &w,
                li.config.lambda as f64,
                li.config.epsilon as f64,
            )]
        },
    )
}

/// Loss through softmax, the path the class network trains on.
fn softmax_loss_case(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let logits = random_tensor(&mut r, &[1, 4, 4, 4], -2.0, 2.0);
    let target_t = random_one_hot(&mut r, 1, 4, 4, 4);
    let target = OneHotTarget::new(target_t.clone()).unwrap();
    let t64 = T::from_tensor(&target_t);
    let cfg = LossConfig::uniform(4);
    grad_check(
        seed,
        &[logits],
        H,
        move |t, v| {
            let p = t.softmax_channels(v[0]).unwrap();
            cnet_total_loss(t, p, &target, &cfg).unwrap()
        },
        move |x| vec![cnet_total(&softmax(&x[0]), &t64, &[1.0; 4], 0.5, 1e-6)],
    )
}

pub const OPS: &[(&str, Case)] = &[
    ("conv2d 3x3", conv3),
    ("conv2d stride 2", conv_strided),
    ("conv2d 1x1", conv_pointwise),
    ("maxpool2", maxpool),
    ("upsample2", upsample),
    ("concat", concat_case),
    ("relu", relu_case),
    ("sigmoid", sigmoid_case),
    ("softmax", softmax_case),
    ("add", add_case),
    ("sub", sub_case),
    ("mul", mul_case),
    ("div", div_case),
    ("shared input", same_input_twice),
    ("scale and shift", scale_shift),
    ("ln", ln_case),
    ("clamp", clamp_case),
    ("reductions", reductions),
    ("dice per label", dice_label_case),
    ("weighted dice", weighted_dice_case),
    ("weighted cross-entropy", weighted_ce_case),
    ("binary cross-entropy", binary_ce_case),
    ("blended class loss", cnet_total_case),
    ("softmax into class loss", softmax_loss_case),
];

/// Joint cascade objective at 16x16: analytic parameter gradients against
/// central differences of the f64 forward pass, on a sample of entries from
/// every parameter tensor.
pub fn hunet_end_to_end(seed: u64, per_tensor: usize) -> GradCheck {
    let model = HUNetCompound::build(UNetConfig::lung_stage(2, 4), UNetConfig::class_stage(2, 4), seed).unwrap();
    let mut r = rng(seed.wrapping_add(99));
    let image = random_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
    let target_t = random_one_hot(&mut r, 1, 4, 16, 16);
    let lung_t = Tensor::new(
        &[1, 1, 16, 16],
        (0..256).map(|p| 1.0 - target_t.data()[p]).collect(),
    )
    .unwrap();
    let mut cfg = LossConfig::uniform(4);
    cfg.class_weights = vec![0.5, 1.0, 1.5, 2.0];
    let lnet_weight = 0.7f32;

    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = model.forward(&mut tape, x).unwrap();
    let target = OneHotTarget::new(target_t.clone()).unwrap();
    let cnet = cnet_total_loss(&mut tape, out.classes, &target, &cfg).unwrap();
    let bce = binary_ce_loss(&mut tape, out.lung.unwrap(), &lung_t).unwrap();
    let bce = tape.scale(bce, lnet_weight);
    let total = tape.add(cnet, bce).unwrap();
    let grads = tape.backward(total).unwrap();

    let image64 = T::from_tensor(&image);
    let target64 = T::from_tensor(&target_t);
    let lung64 = T::from_tensor(&lung_t);
    let w = weights64(&cfg);
    let objective = |p: &Params| {
        let (lung, classes) = hunet_forward(p, &image64);
        cnet_total(&classes, &target64, &w, 0.5, 1e-6) + lnet_weight as f64 * binary_ce(&lung.unwrap(), &lung64)
    };
    let mut params = Params::of(&model);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, var) in out.params.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        let n = params.values[i].data.len();
        for _ in 0..per_tensor.min(n) {
            let j = r.random_range(0..n);
            let orig = params.values[i].data[j];
            params.values[i].data[j] = orig + h;
            let up = objective(&params);
            params.values[i].data[j] = orig - h;
            let down = objective(&params);
            params.values[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
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
