//! Shared fixtures for the integration suites: randomized finite-difference
//! cases for every differentiable primitive and composite loss, and
//! brute-force reference implementations of the ranking and detection
//! metrics.

#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_forge::data::{AttributeSet, BoundingBox, Color, DatasetManifest, ImageRecord, SplitTag, VehicleType};
use reid_forge::detection::Detection;
use reid_forge::eval::ItemMeta;
use reid_forge::losses::{self, TermWeights};
use reid_forge::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor, Var, BN_EPS};
use reid_forge::Result;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.05, 1), so ±ε never crosses a kink at 0.
pub fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces any output to a scalar through fixed random coefficients, so
/// every output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, coeffs: &[f64]) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let c = tape.constant(Tensor::new(shape, coeffs[..n].to_vec())?);
    let p = tape.mul(y, c)?;
    tape.sum(p)
}

fn coeffs(r: &mut impl Rng) -> Vec<f64> {
    (0..4096).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub struct GradCase {
    pub name: &'static str,
    pub check: fn(u64) -> Result<GradCheckReport>,
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = [1, 3][r.random_range(0..2)];
    let (h, w) = (r.random_range(3..=7), r.random_range(3..=7));
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=k / 2);
    let inputs = [
        uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
        uniform(&mut r, &[o, c, k, k], -1.0, 1.0),
        uniform(&mut r, &[o], -1.0, 1.0),
    ];
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            project(t, y, &cf)
        },
        &inputs,
        FD_EPS,
    )
}

fn relu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=6)];
    let x = away_from_zero(&mut r, &shape);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn feature_map(r: &mut impl Rng) -> Tensor {
    let shape = [
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(1..=5),
        r.random_range(1..=5),
    ];
    uniform(r, &shape, -1.0, 1.0)
}

fn global_avg_pool(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = feature_map(&mut r);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn weighted_pool(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = feature_map(&mut r);
    let s = x.shape().to_vec();
    let w = uniform(&mut r, &[s[0], s[2], s[3]], 1.0, 2.0);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.weighted_pool(v[0], &w)?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn bn_inputs(r: &mut impl Rng) -> [Tensor; 3] {
    let (n, c) = (r.random_range(2..=6), r.random_range(1..=4));
    [
        uniform(r, &[n, c], -1.0, 1.0),
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
    ]
}

fn batchnorm_train(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = bn_inputs(&mut r);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], BN_EPS)?;
            project(t, y, &cf)
        },
        &inputs,
        FD_EPS,
    )
}

fn batchnorm_eval(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = bn_inputs(&mut r);
    let c = inputs[1].len();
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS)?;
            project(t, y, &cf)
        },
        &inputs,
        FD_EPS,
    )
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (b, i, o) = (r.random_range(1..=5), r.random_range(1..=6), r.random_range(1..=4));
    let inputs = [
        uniform(&mut r, &[b, i], -1.0, 1.0),
        uniform(&mut r, &[o, i], -1.0, 1.0),
        uniform(&mut r, &[o], -1.0, 1.0),
    ];
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, &cf)
        },
        &inputs,
        FD_EPS,
    )
}

fn softmax_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (b, n) = (r.random_range(1..=5), r.random_range(2..=7));
    let x = uniform(&mut r, &[b, n], -3.0, 3.0);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
    finite_difference_check(|t, v| t.softmax_cross_entropy(v[0], &labels), &[x], FD_EPS)
}

fn sigmoid_bce(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (b, n) = (r.random_range(1..=5), r.random_range(1..=4));
    let x = uniform(&mut r, &[b, n], -4.0, 4.0);
    let labels: Vec<bool> = (0..b * n).map(|_| r.random()).collect();
    finite_difference_check(|t, v| t.sigmoid_bce(v[0], &labels), &[x], FD_EPS)
}

fn pairwise_sq_distances(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(2..=6), r.random_range(1..=4)];
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.pairwise_sq_distances(v[0])?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn sqrt(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=5)];
    let x = uniform(&mut r, &shape, 0.2, 2.0);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.sqrt(v[0])?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn binary(seed: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>, separated: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=5)];
    let a = uniform(&mut r, &shape, -1.0, 1.0);
    let mut b = uniform(&mut r, &shape, -1.0, 1.0);
    if separated {
        // keep |a − b| ≥ 0.05 so no perturbation flips the selected branch
        for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
            if (*bv - av).abs() < 0.05 {
                *bv = av + 0.1;
            }
        }
    }
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, &cf)
        },
        &[a, b],
        FD_EPS,
    )
}

fn add(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |t, a, b| t.add(a, b), false)
}

fn sub(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |t, a, b| t.sub(a, b), false)
}

fn mul(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |t, a, b| t.mul(a, b), false)
}

fn max(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |t, a, b| t.max(a, b), true)
}

fn unary(seed: u64, op: fn(&mut Tape, Var, f64) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=5)];
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let c = r.random_range(-2.0..2.0);
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = op(t, v[0], c)?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn scale(seed: u64) -> Result<GradCheckReport> {
    unary(seed, |t, x, c| t.scale(x, c))
}

fn add_scalar(seed: u64) -> Result<GradCheckReport> {
    unary(seed, |t, x, c| t.add_scalar(x, c))
}

fn reduction(seed: u64, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=5)];
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let cf = coeffs(&mut r);
    // square first so the reduction's gradient is checked against a
    // non-constant upstream
    finite_difference_check(
        |t, v| {
            let c = t.constant(Tensor::new(
                t.value(v[0]).shape().to_vec(),
                cf[..t.value(v[0]).len()].to_vec(),
            )?);
            let y = t.mul(v[0], c)?;
            let y = t.mul(y, v[0])?;
            op(t, y)
        },
        &[x],
        FD_EPS,
    )
}

fn sum(seed: u64) -> Result<GradCheckReport> {
    reduction(seed, |t, x| t.sum(x))
}

fn mean(seed: u64) -> Result<GradCheckReport> {
    reduction(seed, |t, x| t.mean(x))
}

fn gather(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let x = uniform(&mut r, &[n], -1.0, 1.0);
    let idx: Vec<usize> = (0..r.random_range(1..=10)).map(|_| r.random_range(0..n)).collect();
    let cf = coeffs(&mut r);
    finite_difference_check(
        |t, v| {
            let y = t.gather(v[0], &idx)?;
            project(t, y, &cf)
        },
        &[x],
        FD_EPS,
    )
}

fn euclid(e: &Tensor, a: usize, b: usize) -> f64 {
    e.row(a)
        .iter()
        .zip(e.row(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// P×K embeddings whose batch-hard selections and hinges are all at least
/// `gap` away from a tie, so the loss is smooth around them.
fn triplet_batch(r: &mut impl Rng, margin: f64, gap: f64) -> (Tensor, Vec<i64>) {
    loop {
        let (p, k, c) = (r.random_range(2..=4), r.random_range(2..=3), r.random_range(2..=5));
        let ids: Vec<i64> = (0..p * k).map(|i| (i / k) as i64).collect();
        let e = uniform(r, &[p * k, c], -1.0, 1.0);
        let b = ids.len();
        let mut ok = true;
        for a in 0..b {
            let mut pos: Vec<f64> = (0..b)
                .filter(|&j| j != a && ids[j] == ids[a])
                .map(|j| euclid(&e, a, j))
                .collect();
            let mut neg: Vec<f64> = (0..b).filter(|&j| ids[j] != ids[a]).map(|j| euclid(&e, a, j)).collect();
            pos.sort_by(|x, y| y.total_cmp(x));
            neg.sort_by(|x, y| x.total_cmp(y));
            let close = |v: &[f64]| v.len() > 1 && (v[0] - v[1]).abs() < gap;
            if close(&pos) || close(&neg) || (margin + pos[0] - neg[0]).abs() < gap {
                ok = false;
            }
        }
        if ok {
            return (e, ids);
        }
    }
}

fn batch_hard_triplet(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let margin = r.random_range(0.1..1.0);
    let (e, ids) = triplet_batch(&mut r, margin, 1e-2);
    finite_difference_check(|t, v| losses::batch_hard_triplet(t, v[0], &ids, margin), &[e], FD_EPS)
}

fn cross_entropy_loss(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (b, n) = (r.random_range(1..=6), r.random_range(2..=9));
    let x = uniform(&mut r, &[b, n], -5.0, 5.0);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
    finite_difference_check(|t, v| losses::cross_entropy(t, v[0], &labels), &[x], FD_EPS)
}

fn attribute_bce_loss(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let b = r.random_range(1..=6);
    let x = uniform(&mut r, &[b, 4], -5.0, 5.0);
    let labels: Vec<[bool; 4]> = (0..b).map(|_| std::array::from_fn(|_| r.random())).collect();
    finite_difference_check(|t, v| losses::attribute_bce(t, v[0], &labels), &[x], FD_EPS)
}

fn contrastive(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    loop {
        let (p, k, c) = (r.random_range(2..=4), r.random_range(2..=3), r.random_range(2..=4));
        let ids: Vec<i64> = (0..p * k).map(|i| (i / k) as i64).collect();
        let e = uniform(&mut r, &[p * k, c], -1.0, 1.0);
        let margin = r.random_range(0.5..2.0);
        let (pos, neg) = losses::contrastive_pairs(&ids, r.random())?;
        // the hinge max(0, m − d) must not switch under perturbation
        if neg.iter().any(|&(a, b)| (margin - euclid(&e, a, b)).abs() < 1e-2) {
            continue;
        }
        return finite_difference_check(
            |t, v| losses::contrastive_loss(t, v[0], &pos, &neg, margin),
            &[e],
            FD_EPS,
        );
    }
}

/// Triplet + ID + color + type + attribute terms on a shared embedding
/// through linear heads, combined with random term weights.
fn multi_task(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let margin = losses::DEFAULT_MARGIN;
    let (e, ids) = triplet_batch(&mut r, margin, 1e-2);
    let (b, c) = (e.shape()[0], e.shape()[1]);
    let n_ids = ids.iter().max().map_or(1, |m| *m as usize + 1);
    let heads: Vec<Tensor> = [n_ids, 9, 7, 4]
        .iter()
        .flat_map(|&o| [uniform(&mut r, &[o, c], -1.0, 1.0), uniform(&mut r, &[o], -0.5, 0.5)])
        .collect();
    let color: Vec<usize> = (0..b).map(|_| r.random_range(0..9)).collect();
    let vtype: Vec<usize> = (0..b).map(|_| r.random_range(0..7)).collect();
    let flags: Vec<[bool; 4]> = (0..b).map(|_| std::array::from_fn(|_| r.random())).collect();
    let labels: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let weights = TermWeights {
        w_triplet_avg: r.random_range(0.1..2.0),
        w_triplet_dp: 0.0,
        w_id: r.random_range(0.1..2.0),
        w_color: r.random_range(0.1..2.0),
        w_type: r.random_range(0.1..2.0),
        w_attr: r.random_range(0.1..2.0),
        w_contrastive: 0.0,
    };
    let mut inputs = vec![e];
    inputs.extend(heads);
    finite_difference_check(
        |t, v| {
            let trip = losses::batch_hard_triplet(t, v[0], &ids, margin)?;
            let logits: Vec<Var> = (0..4)
                .map(|h| t.linear(v[0], v[1 + 2 * h], v[2 + 2 * h]))
                .collect::<Result<_>>()?;
            let id = losses::cross_entropy(t, logits[0], &labels)?;
            let col = losses::cross_entropy(t, logits[1], &color)?;
            let typ = losses::cross_entropy(t, logits[2], &vtype)?;
            let attr = losses::attribute_bce(t, logits[3], &flags)?;
            losses::combine_on_tape(
                t,
                &[Some(trip), None, Some(id), Some(col), Some(typ), Some(attr), None],
                &weights,
            )
        },
        &inputs,
        FD_EPS,
    )
}

/// Weighted-pool branch followed by batch norm and the batch-hard triplet,
/// as trained by the part-weighted variant.
fn weighted_triplet(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let margin = losses::DEFAULT_MARGIN;
    loop {
        let (p, k, c) = (r.random_range(2..=3), 2, r.random_range(2..=4));
        let ids: Vec<i64> = (0..p * k).map(|i| (i / k) as i64).collect();
        let (h, w) = (r.random_range(2..=4), r.random_range(2..=4));
        let x = uniform(&mut r, &[p * k, c, h, w], -1.0, 1.0);
        let wts = uniform(&mut r, &[p * k, h, w], 1.0, 1.5);
        let gamma = uniform(&mut r, &[c], 0.5, 1.5);
        let beta = uniform(&mut r, &[c], -0.5, 0.5);
        // screen for near-ties in the resulting embedding
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(gamma.clone());
        let bt = tape.constant(beta.clone());
        let pooled = tape.weighted_pool(xv, &wts)?;
        let (emb, _) = tape.batchnorm_train(pooled, g, bt, BN_EPS)?;
        let e = tape.value(emb).clone();
        let b = ids.len();
        let smooth = (0..b).all(|a| {
            let mut pos: Vec<f64> = (0..b)
                .filter(|&j| j != a && ids[j] == ids[a])
                .map(|j| euclid(&e, a, j))
                .collect();
            let mut neg: Vec<f64> = (0..b).filter(|&j| ids[j] != ids[a]).map(|j| euclid(&e, a, j)).collect();
            pos.sort_by(|x, y| y.total_cmp(x));
            neg.sort_by(|x, y| x.total_cmp(y));
            let close = |v: &[f64]| v.len() > 1 && (v[0] - v[1]).abs() < 5e-2;
            !close(&pos) && !close(&neg) && (margin + pos[0] - neg[0]).abs() > 5e-2
        });
        if !smooth {
            continue;
        }
        return finite_difference_check(
            |t, v| {
                let pooled = t.weighted_pool(v[0], &wts)?;
                let (emb, _) = t.batchnorm_train(pooled, v[1], v[2], BN_EPS)?;
                losses::batch_hard_triplet(t, emb, &ids, margin)
            },
            &[x, gamma, beta],
            FD_EPS,
        );
    }
}

pub fn grad_cases() -> Vec<GradCase> {
    macro_rules! cases {
        ($($f:ident),* $(,)?) => { vec![$(GradCase { name: stringify!($f), check: $f }),*] };
    }
    cases![
        conv2d,
        relu,
        global_avg_pool,
        weighted_pool,
        batchnorm_train,
        batchnorm_eval,
        linear,
        softmax_cross_entropy,
        sigmoid_bce,
        pairwise_sq_distances,
        sqrt,
        add,
        sub,
        mul,
        max,
        scale,
        add_scalar,
        sum,
        mean,
        gather,
        batch_hard_triplet,
        cross_entropy_loss,
        attribute_bce_loss,
        contrastive,
        multi_task,
        weighted_triplet,
    ]
}

/// Worst relative error of a case over `n` randomized instances.
pub fn worst_over_seeds(case: &GradCase, n: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let report = (case.check)(seed)?;
        assert!(report.coordinates > 0, "{} seed {seed} checked nothing", case.name);
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

// ---- ranking references --------------------------------------------------

/// Random retrieval instance: every query has at least one positive.
pub struct RetrievalCase {
    pub dist: Tensor,
    pub query: Vec<ItemMeta>,
    pub gallery: Vec<ItemMeta>,
}

pub fn retrieval_case(seed: u64) -> RetrievalCase {
    let mut r = rng(seed);
    let q = r.random_range(1..=20);
    let g = r.random_range(1..=50);
    let n_ids = r.random_range(1..=g.min(8));
    let camera = |r: &mut ChaCha8Rng| r.random_range(0..3);
    // the first n_ids slots cover every identity, so each query has a positive
    let mut gallery: Vec<ItemMeta> = (0..g)
        .map(|i| ItemMeta {
            identity: if i < n_ids {
                i as i64
            } else {
                r.random_range(0..n_ids as i64)
            },
            camera: camera(&mut r),
        })
        .collect();
    gallery.shuffle(&mut r);
    let query: Vec<ItemMeta> = (0..q)
        .map(|_| ItemMeta {
            identity: r.random_range(0..n_ids as i64),
            camera: camera(&mut r),
        })
        .collect();
    // coarse quantization on some instances exercises the tie-break
    let coarse = r.random::<bool>();
    let data = (0..q * gallery.len())
        .map(|_| {
            let d: f64 = r.random_range(0.0..10.0);
            if coarse {
                d.round()
            } else {
                d
            }
        })
        .collect();
    RetrievalCase {
        dist: Tensor::new(vec![q, gallery.len()], data).unwrap(),
        query,
        gallery,
    }
}

/// Rank of gallery item `j` for query row `d`: one plus the number of items
/// strictly closer, or equally close with a smaller index.
fn rank_of(d: &[f64], j: usize) -> usize {
    1 + (0..d.len()).filter(|&g| d[g] < d[j] || (d[g] == d[j] && g < j)).count()
}

pub fn reference_map(c: &RetrievalCase) -> f64 {
    let mut total = 0.0;
    for (qi, qm) in c.query.iter().enumerate() {
        let d = c.dist.row(qi);
        let ranks: Vec<usize> = (0..d.len())
            .filter(|&j| c.gallery[j].identity == qm.identity)
            .map(|j| rank_of(d, j))
            .collect();
        let ap: f64 = ranks
            .iter()
            .map(|&rk| ranks.iter().filter(|&&o| o <= rk).count() as f64 / rk as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        total += ap;
    }
    total / c.query.len() as f64
}

pub fn reference_cmc(c: &RetrievalCase, max_k: usize) -> Vec<f64> {
    (1..=max_k)
        .map(|k| {
            let hits = c
                .query
                .iter()
                .enumerate()
                .filter(|(qi, qm)| {
                    let d = c.dist.row(*qi);
                    (0..d.len()).any(|j| c.gallery[j].identity == qm.identity && rank_of(d, j) <= k)
                })
                .count();
            hits as f64 / c.query.len() as f64
        })
        .collect()
}

// ---- detection references ------------------------------------------------

pub fn random_boxes(r: &mut impl Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let (w, h) = (r.random_range(5.0..40.0), r.random_range(5.0..40.0));
            let (x, y) = (r.random_range(0.0..60.0), r.random_range(0.0..60.0));
            BoundingBox::new(x, y, x + w, y + h).unwrap()
        })
        .collect()
}

pub fn random_detections(r: &mut impl Rng, n: usize) -> Vec<Detection> {
    random_boxes(r, n)
        .into_iter()
        .map(|b| {
            // a few repeated scores exercise the index tie-break
            let s: f64 = r.random();
            let score = if r.random_range(0..4) == 0 {
                (s * 4.0).round() / 4.0
            } else {
                s
            };
            Detection::new(b, score).unwrap()
        })
        .collect()
}

/// IoU via inclusion–exclusion on interval lengths.
pub fn reference_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| {
        if a1 <= b0 || b1 <= a0 {
            0.0
        } else {
            a1.min(b1) - a0.max(b0)
        }
    };
    let inter = overlap(a.x_min, a.x_max, b.x_min, b.x_max) * overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let area = |b: &BoundingBox| (b.x_max - b.x_min) * (b.y_max - b.y_min);
    if inter == 0.0 {
        0.0
    } else {
        inter / (area(a) + area(b) - inter)
    }
}

fn priority(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    order
}

/// Greedy NMS characterized as a fixed point and found by exhaustive
/// search: the kept set K is the unique subset in which a box belongs to K
/// exactly when it overlaps no higher-priority member of K beyond `thr`.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let order = priority(dets);
    let n = dets.len();
    let overlap: Vec<Vec<f64>> = dets
        .iter()
        .map(|a| dets.iter().map(|b| reference_iou(&a.bbox, &b.bbox)).collect())
        .collect();
    let mut found = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|pos| {
            let i = order[pos];
            let free = order[..pos].iter().all(|&j| !member(j) || overlap[i][j] <= thr);
            member(i) == free
        });
        if consistent {
            found.push(order.iter().copied().filter(|&i| member(i)).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    found.pop().unwrap()
}

/// Pooled (tp, fp, fn) over images from the full IoU matrix.
pub fn reference_counts(
    preds: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    conf: f64,
    iou_thr: f64,
) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let matrix: Vec<Vec<f64>> = p
            .iter()
            .map(|d| g.iter().map(|b| reference_iou(&d.bbox, b)).collect())
            .collect();
        let mut taken = vec![false; g.len()];
        for i in priority(p) {
            if p[i].score < conf {
                continue;
            }
            let mut pick: Option<usize> = None;
            for j in 0..g.len() {
                if !taken[j] && matrix[i][j] >= iou_thr && pick.is_none_or(|k| matrix[i][j] > matrix[i][k]) {
                    pick = Some(j);
                }
            }
            match pick {
                Some(j) => {
                    taken[j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
        fn_ += taken.iter().filter(|t| !**t).count();
    }
    (tp, fp, fn_)
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

// ---- manifests -----------------------------------------------------------

pub fn random_attributes(r: &mut impl Rng) -> AttributeSet {
    AttributeSet {
        color: *Color::ALL.choose(r).unwrap(),
        vtype: *VehicleType::ALL.choose(r).unwrap(),
        skylight: r.random(),
        bumper: r.random(),
        spare_tire: r.random(),
        luggage_rack: r.random(),
    }
}

/// Random manifest where every test identity spans at least two cameras;
/// identities come in attribute-sharing pairs with some probability.
pub fn random_manifest(seed: u64) -> DatasetManifest {
    let mut r = rng(0x7000 + seed);
    let n_ids = r.random_range(1..=12);
    let n_cams = r.random_range(2..=4);
    let twins = r.random_bool(0.5);
    let mut records = Vec::new();
    let mut attrs = random_attributes(&mut r);
    for id in 0..n_ids {
        if !(twins && id % 2 == 1) {
            attrs = random_attributes(&mut r);
        }
        let train = r.random_bool(0.3);
        let n = r.random_range(2..=9);
        let offset = r.random_range(0..n_cams);
        let mut cams: Vec<i64> = (0..n).map(|i| ((i + offset) % n_cams) as i64).collect();
        cams.shuffle(&mut r);
        for (j, cam) in cams.into_iter().enumerate() {
            records.push(ImageRecord {
                image_id: format!("i{id}_{j}"),
                identity_id: id as i64,
                camera_id: cam,
                attributes: attrs,
                parts: Vec::new(),
                tensor_ref: format!("tensors/i{id}_{j}.tnsr"),
                width: 64,
                height: 64,
                split: if train {
                    SplitTag::Train
                } else {
                    SplitTag::UnassignedTest
                },
            });
        }
    }
    DatasetManifest::new(records).unwrap()
}
