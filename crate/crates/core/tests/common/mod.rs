#![allow(dead_code)]

use cosim_core::losses::{
    balanced_pixel_cross_entropy, contrastive_loss, cosine_loss, mlso_loss, pixel_cross_entropy,
    thresholded_contrastive_loss, ChangeMask, LayerInput, LossConfig,
};
use cosim_core::metric::cos_change_graph;
use cosim_core::numerics::{grad_check, ops, Graph, Tensor, Var, NORMALIZE_EPS};
use cosim_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 25;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in `[min_abs, 1]` and random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(min_abs..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p_changed: f64) -> ChangeMask {
    let changed: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p_changed)).collect();
    ChangeMask::from_changed(h, w, &changed).unwrap()
}

/// `Σ r ⊙ x` with fixed random `r`, turning any tensor node into a scalar
/// with O(1) gradients everywhere.
fn project(g: &Graph<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n: usize = g.shape(x).iter().product();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(g.sum(g.mul_const(x, &r)?))
}

fn check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check(f, inputs, GRAD_EPS).unwrap()
}

fn seed_of(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> f64 {
    let (stride, pad) = if rng.random_bool(0.5) { (1, 1) } else { (2, 0) };
    let x = uniform(rng, &[2, 5, 5], -1.0, 1.0);
    let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let s = seed_of(rng);
    check(
        move |g, v| {
            project(
                g,
                g.conv2d(v[0], v[1], v[2], stride, pad)?,
                &mut self::rng(s),
            )
        },
        &[x, k, b],
    )
}

fn relu_case(rng: &mut ChaCha8Rng) -> f64 {
    let x = away_from_zero(rng, &[2, 4, 4], 0.1);
    let s = seed_of(rng);
    check(
        move |g, v| project(g, g.relu(v[0]), &mut self::rng(s)),
        &[x],
    )
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> f64 {
    // Distinct values 0.15 apart, shuffled, so no window has a near tie.
    let n = 2 * 6 * 6;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.15 - 5.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 6, 6], v).unwrap();
    let s = seed_of(rng);
    check(
        move |g, v| project(g, g.maxpool2d(v[0], 2, 2)?, &mut self::rng(s)),
        &[x],
    )
}

fn upsample_case(rng: &mut ChaCha8Rng) -> f64 {
    let h = rng.random_range(2..5);
    let w = rng.random_range(2..5);
    let x = uniform(rng, &[2, h, w], -1.0, 1.0);
    let (oh, ow) = (h + rng.random_range(0..6), w + rng.random_range(0..6));
    let s = seed_of(rng);
    check(
        move |g, v| project(g, g.bilinear_upsample(v[0], oh, ow)?, &mut self::rng(s)),
        &[x],
    )
}

fn normalize_case(rng: &mut ChaCha8Rng) -> f64 {
    let x = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let s = seed_of(rng);
    check(
        move |g, v| {
            project(
                g,
                g.l2_normalize_channels(v[0], NORMALIZE_EPS)?,
                &mut self::rng(s),
            )
        },
        &[x],
    )
}

fn l2_distance_case(rng: &mut ChaCha8Rng) -> f64 {
    let a = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let s = seed_of(rng);
    check(
        move |g, v| project(g, g.l2_distance(v[0], v[1])?, &mut self::rng(s)),
        &[a, b],
    )
}

fn cosine_similarity_case(rng: &mut ChaCha8Rng) -> f64 {
    let a = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let s = seed_of(rng);
    check(
        move |g, v| {
            project(
                g,
                g.cosine_similarity(v[0], v[1], NORMALIZE_EPS)?,
                &mut self::rng(s),
            )
        },
        &[a, b],
    )
}

/// Cosine change map with `|w·s + b| > 0.1` at every pixel.
fn cos_change_map_case(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let a = uniform(rng, &[4, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[4, 3, 3], -1.0, 1.0);
        let w = rng.random_range(0.5..2.0);
        let shift = rng.random_range(-1.5..-0.5);
        let sim = cosim_core::metric::cosine_similarity_map(&a, &b).unwrap();
        if sim
            .values
            .data()
            .iter()
            .any(|s| (w * s + shift).abs() <= 0.1)
        {
            continue;
        }
        return check(
            |g, v| {
                let s = g.cosine_similarity(v[0], v[1], NORMALIZE_EPS)?;
                Ok(g.mean(cos_change_graph(g, s, v[2], v[3])?))
            },
            &[a, b, Tensor::scalar(w), Tensor::scalar(shift)],
        );
    }
}

/// Unit-normalized features whose per-pixel distances avoid 0 and every
/// value in `kinks` by more than 0.05.
fn features_away_from(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    kinks: &[f64],
) -> (Tensor<f64>, Tensor<f64>) {
    loop {
        let a = uniform(rng, &[c, h, w], -1.0, 1.0);
        let b = uniform(rng, &[c, h, w], -1.0, 1.0);
        let na = ops::l2_normalize_channels(&a, NORMALIZE_EPS).unwrap();
        let nb = ops::l2_normalize_channels(&b, NORMALIZE_EPS).unwrap();
        let d = cosim_core::metric::l2_distance_map(&na, &nb).unwrap();
        let ok = d
            .values
            .data()
            .iter()
            .all(|&d| d > 0.05 && kinks.iter().all(|k| (d - k).abs() > 0.05));
        if ok {
            return (a, b);
        }
    }
}

fn contrastive_case(rng: &mut ChaCha8Rng) -> f64 {
    let margin = rng.random_range(0.5..1.5);
    let (a, b) = features_away_from(rng, 3, 3, 3, &[margin]);
    let mask = random_mask(rng, 3, 3, 0.5);
    check(
        move |g, v| {
            let f0 = g.l2_normalize_channels(v[0], NORMALIZE_EPS)?;
            let f1 = g.l2_normalize_channels(v[1], NORMALIZE_EPS)?;
            contrastive_loss(g, f0, f1, &mask, margin)
        },
        &[a, b],
    )
}

fn tcl_case(rng: &mut ChaCha8Rng) -> f64 {
    let margin = rng.random_range(0.8..1.5);
    let tau = rng.random_range(0.1..0.6);
    let (a, b) = features_away_from(rng, 3, 3, 3, &[margin, tau]);
    let mask = random_mask(rng, 3, 3, 0.5);
    check(
        move |g, v| {
            let f0 = g.l2_normalize_channels(v[0], NORMALIZE_EPS)?;
            let f1 = g.l2_normalize_channels(v[1], NORMALIZE_EPS)?;
            thresholded_contrastive_loss(g, f0, f1, &mask, margin, tau)
        },
        &[a, b],
    )
}

fn cosine_loss_case(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let a = uniform(rng, &[3, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[3, 3, 3], -1.0, 1.0);
        let w = rng.random_range(0.5..2.0);
        let shift = rng.random_range(-1.5..-0.5);
        let sim = cosim_core::metric::cosine_similarity_map(&a, &b).unwrap();
        if sim
            .values
            .data()
            .iter()
            .any(|s| (w * s + shift).abs() <= 0.05)
        {
            continue;
        }
        let mask = random_mask(rng, 3, 3, 0.5);
        return check(
            move |g, v| cosine_loss(g, v[0], v[1], &mask, v[2], v[3]),
            &[a, b, Tensor::scalar(w), Tensor::scalar(shift)],
        );
    }
}

fn mlso_case(rng: &mut ChaCha8Rng) -> f64 {
    let sizes = [(2, 4), (3, 2), (4, 1)];
    let mut inputs = Vec::new();
    let mut masks = Vec::new();
    for &(c, hw) in &sizes {
        let (a, b) = features_away_from(rng, c, hw, hw, &[1.0]);
        inputs.push(a);
        inputs.push(b);
        masks.push(random_mask(rng, hw, hw, 0.4));
    }
    let cfg = LossConfig {
        betas: (0..3).map(|_| rng.random_range(0.1..2.0)).collect(),
        balance_classes: rng.random_bool(0.5),
        ..LossConfig::<f64>::default()
    };
    check(
        move |g, v| {
            let mut layers = Vec::new();
            for (l, mask) in masks.iter().enumerate() {
                layers.push(LayerInput {
                    f0: g.l2_normalize_channels(v[2 * l], NORMALIZE_EPS)?,
                    f1: g.l2_normalize_channels(v[2 * l + 1], NORMALIZE_EPS)?,
                    mask,
                });
            }
            Ok(mlso_loss(g, &layers, &cfg, None)?.total)
        },
        &inputs,
    )
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> f64 {
    let logits = uniform(rng, &[2, 4, 4], -2.0, 2.0);
    let mask = random_mask(rng, 4, 4, 0.3);
    let balanced = rng.random_bool(0.5);
    check(
        move |g, v| {
            if balanced {
                balanced_pixel_cross_entropy(g, v[0], &mask)
            } else {
                pixel_cross_entropy(g, v[0], &mask)
            }
        },
        &[logits],
    )
}

fn elementwise_case(rng: &mut ChaCha8Rng) -> f64 {
    let x = away_from_zero(rng, &[2, 3, 3], 0.1);
    let y = uniform(rng, &[2, 3, 3], -1.0, 1.0);
    let z = uniform(rng, &[1, 3, 3], -1.0, 1.0);
    let s = seed_of(rng);
    check(
        move |g, v| {
            let a = g.exp(g.affine(g.abs(v[0]), -0.5, 0.2));
            let b = g.square(g.mul(a, v[1])?);
            let c = g.concat_channels(b, v[2])?;
            let d = g.weighted_sum(&[(c, 0.7), (g.concat_channels(v[1], v[2])?, -1.3)])?;
            project(g, g.add(d, d)?, &mut self::rng(s))
        },
        &[x, y, z],
    )
}

pub type GradCase = (&'static str, fn(&mut ChaCha8Rng) -> f64);

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        ("conv2d", conv2d_case),
        ("relu", relu_case),
        ("maxpool2d", maxpool_case),
        ("bilinear_upsample", upsample_case),
        ("l2_normalize_channels", normalize_case),
        ("l2_distance_map", l2_distance_case),
        ("cosine_similarity_map", cosine_similarity_case),
        ("cosine_change_map", cos_change_map_case),
        ("contrastive_loss", contrastive_case),
        ("thresholded_contrastive_loss", tcl_case),
        ("cosine_loss", cosine_loss_case),
        ("mlso_loss", mlso_case),
        ("pixel_cross_entropy", cross_entropy_case),
        ("elementwise_and_concat", elementwise_case),
    ]
}

/// Worst relative error of a case over `GRAD_INSTANCES` seeded instances.
pub fn worst_gradient_error(case: &GradCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..GRAD_INSTANCES)
        .map(|_| (case.1)(&mut r))
        .fold(0.0, f64::max)
}

/// Straight per-pixel loop references for the three metric losses.
pub mod reference {
    use cosim_core::losses::ChangeMask;
    use cosim_core::numerics::Tensor;

    fn column(t: &Tensor<f64>, p: usize) -> Vec<f64> {
        let (c, h, w) = t.dims3().unwrap();
        (0..c).map(|k| t.data()[k * h * w + p]).collect()
    }

    fn distance(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s.sqrt()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    fn label(mask: &ChangeMask, p: usize) -> f64 {
        if mask.is_changed(p) {
            0.0
        } else {
            1.0
        }
    }

    pub fn contrastive(a: &Tensor<f64>, b: &Tensor<f64>, mask: &ChangeMask, m: f64) -> f64 {
        thresholded(a, b, mask, m, 0.0)
    }

    pub fn thresholded(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        mask: &ChangeMask,
        m: f64,
        tau: f64,
    ) -> f64 {
        let n = mask.len();
        let mut total = 0.0;
        for p in 0..n {
            let d = distance(&column(a, p), &column(b, p));
            let y = label(mask, p);
            let pull = if d > tau { d - tau } else { 0.0 };
            let push = if m > d { m - d } else { 0.0 };
            total += y * pull + (1.0 - y) * push;
        }
        total / n as f64
    }

    pub fn cosine_objective(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        mask: &ChangeMask,
        w: f64,
        shift: f64,
    ) -> f64 {
        let mut total = 0.0;
        for p in 0..mask.len() {
            let s = cosine(&column(a, p), &column(b, p));
            let r = label(mask, p) - (-(w * s + shift).abs()).exp();
            total += r * r;
        }
        total
    }
}

/// Worst absolute gap of the taped CL, TCL and cosine losses against the
/// per-pixel references over `n` random 8×8×C pairs.
pub fn loss_oracle_gap(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = r.random_range(1..=16);
        let a = uniform(&mut r, &[c, 8, 8], -1.0, 1.0);
        let b = uniform(&mut r, &[c, 8, 8], -1.0, 1.0);
        let p = r.random_range(0.05..0.95);
        let mask = random_mask(&mut r, 8, 8, p);
        let m = r.random_range(0.2..2.0);
        let tau = r.random_range(0.0..m);
        let (w, shift) = (r.random_range(0.1..3.0), r.random_range(-2.0..0.5));

        let g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let (vw, vs) = (
            g.constant(Tensor::scalar(w)),
            g.constant(Tensor::scalar(shift)),
        );
        let cl = g
            .item(contrastive_loss(&g, va, vb, &mask, m).unwrap())
            .unwrap();
        let tcl = g
            .item(thresholded_contrastive_loss(&g, va, vb, &mask, m, tau).unwrap())
            .unwrap();
        let cos = g
            .item(cosine_loss(&g, va, vb, &mask, vw, vs).unwrap())
            .unwrap();
        for (got, want) in [
            (cl, reference::contrastive(&a, &b, &mask, m)),
            (tcl, reference::thresholded(&a, &b, &mask, m, tau)),
            (cos, reference::cosine_objective(&a, &b, &mask, w, shift)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

/// Worst gap between TCL at `τ = 0` and CL over `n` instances, values and
/// input gradients together.
pub fn tcl_zero_gap(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = r.random_range(1..=8);
        let a = uniform(&mut r, &[c, 6, 6], -1.0, 1.0);
        let b = uniform(&mut r, &[c, 6, 6], -1.0, 1.0);
        let mask = random_mask(&mut r, 6, 6, 0.5);
        let m = r.random_range(0.2..2.0);
        let cl = |g: &Graph<f64>, v: &[Var]| contrastive_loss(g, v[0], v[1], &mask, m);
        let tcl =
            |g: &Graph<f64>, v: &[Var]| thresholded_contrastive_loss(g, v[0], v[1], &mask, m, 0.0);
        let inputs = [a, b];
        let value = |f: &dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>| {
            let g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            g.item(f(&g, &v).unwrap()).unwrap()
        };
        worst = worst.max((value(&cl) - value(&tcl)).abs());
        let ga = cosim_core::numerics::analytic_gradient(&cl, &inputs).unwrap();
        let gb = cosim_core::numerics::analytic_gradient(&tcl, &inputs).unwrap();
        for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// `(one-hot gap, sum gap)` of the multi-layer loss over `n` instances.
/// One-hot gaps are exact differences and should be 0.
pub fn mlso_identity_gaps(n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut one_hot, mut sum): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let sizes = [(4, 8), (6, 4), (8, 2)];
        let feats: Vec<(Tensor<f64>, Tensor<f64>, ChangeMask)> = sizes
            .iter()
            .map(|&(c, s)| {
                (
                    uniform(&mut r, &[c, s, s], -1.0, 1.0),
                    uniform(&mut r, &[c, s, s], -1.0, 1.0),
                    random_mask(&mut r, s, s, 0.3),
                )
            })
            .collect();
        let kind = [
            cosim_core::losses::LossKind::L2Contrastive,
            cosim_core::losses::LossKind::Thresholded,
            cosim_core::losses::LossKind::Cosine,
        ][r.random_range(0..3)];
        let base = LossConfig {
            kind,
            tau: 0.2,
            balance_classes: r.random_bool(0.5),
            ..LossConfig::<f64>::default()
        };
        let eval = |betas: Vec<f64>| {
            let g = Graph::new();
            let layers: Vec<LayerInput<'_>> = feats
                .iter()
                .map(|(a, b, m)| LayerInput {
                    f0: g.constant(a.clone()),
                    f1: g.constant(b.clone()),
                    mask: m,
                })
                .collect();
            let heads: Vec<(Var, Var)> = (0..3)
                .map(|l| {
                    (
                        g.constant(Tensor::scalar(1.0 + 0.5 * l as f64)),
                        g.constant(Tensor::scalar(-1.0)),
                    )
                })
                .collect();
            let cfg = LossConfig {
                betas,
                ..base.clone()
            };
            let out = mlso_loss(&g, &layers, &cfg, Some(&heads)).unwrap();
            (out.total_value, out.per_layer_values)
        };
        let (total, per_layer) = eval(vec![1.0; 3]);
        sum = sum.max((total - per_layer.iter().sum::<f64>()).abs());
        for h in 0..3 {
            let mut betas = vec![0.0; 3];
            betas[h] = 1.0;
            let (t, _) = eval(betas);
            one_hot = one_hot.max((t - per_layer[h]).abs());
        }
    }
    (one_hot, sum)
}

/// Number of random mask pairs, out of `n`, where any pooled metric differs
/// from brute-force per-pixel counting.
pub fn evaluation_mismatches(n: usize, seed: u64) -> usize {
    use cosim_core::evalsuite::{confusion, fpr_fnr, precision_recall_f};
    let mut r = rng(seed);
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..n)
        .filter(|_| {
            let (h, w) = (r.random_range(1..12), r.random_range(1..12));
            let p = r.random_range(0.0..1.0);
            let pred = random_mask(&mut r, h, w, p);
            let q = r.random_range(0.0..1.0);
            let gt = random_mask(&mut r, h, w, q);
            let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..h * w {
                match (pred.is_changed(i), gt.is_changed(i)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let prec = ratio(tp, tp + fp);
            let rec = ratio(tp, tp + fn_);
            let f = if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            };
            let want = (prec, rec, f, ratio(fp, fp + tn), ratio(fn_, fn_ + tp));
            let c = confusion(&pred, &gt).unwrap();
            let (gp, gr, gf) = precision_recall_f(&c);
            let (gfpr, gfnr) = fpr_fnr(&c);
            (c.tp, c.fp, c.tn, c.fn_) != (tp, fp, tn, fn_) || (gp, gr, gf, gfpr, gfnr) != want
        })
        .count()
}
