#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_adapt::eval::{DistanceMatrix, Meta};
use reid_adapt::graph::grad_check_many;
use reid_adapt::losses;
use reid_adapt::{Graph, Tensor, TensorError, Var};

pub type GResult = Result<Var, TensorError>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero, so relu kinks are
/// never straddled by a finite-difference probe.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Tensor<f64> {
    Tensor::new(&[b, m], (0..b * m).map(|_| f64::from(rng.gen_range(0..=1u8))).collect()).unwrap()
}

fn loss(e: losses::LossError) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Two-layer relu MLP over graph vars `[w0, b0, w1, b1]`.
pub fn mlp(g: &mut Graph<f64>, x: Var, p: &[Var]) -> GResult {
    let h = g.matmul(x, p[0])?;
    let h = g.add_bias(h, p[1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, p[2])?;
    g.add_bias(o, p[3])
}

pub fn mlp_params(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<Tensor<f64>> {
    vec![
        uniform(rng, &[dims[0], dims[1]], -0.8, 0.8),
        uniform(rng, &[dims[1]], -0.3, 0.3),
        uniform(rng, &[dims[1], dims[2]], -0.8, 0.8),
        uniform(rng, &[dims[2]], -0.3, 0.3),
    ]
}

/// Forward pass of [`mlp`] on constants, plus the smallest hidden
/// pre-activation magnitude.
pub fn mlp_margin(x: &Tensor<f64>, p: &[Tensor<f64>]) -> (Tensor<f64>, f64) {
    let mut g = Graph::new();
    let v: Vec<Var> = std::iter::once(x).chain(p).map(|t| g.constant(t.clone())).collect();
    let h = g.matmul(v[0], v[1]).unwrap();
    let h = g.add_bias(h, v[2]).unwrap();
    let margin = g.value(h).data().iter().fold(f64::INFINITY, |m, z| m.min(z.abs()));
    let out = mlp(&mut g, v[0], &v[1..]).unwrap();
    (g.value(out).clone(), margin)
}

/// Minimum distance of hidden pre-activations from the relu kink required
/// before a case is checked.
pub const KINK_MARGIN: f64 = 1e-3;

/// Redraws from `seed`-derived streams until `draw` reports a margin
/// above [`KINK_MARGIN`].
fn kink_free<T>(seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> (T, f64)) -> T {
    (0..)
        .map(|attempt| draw(&mut rng(seed.wrapping_mul(1_000_003).wrapping_add(attempt))))
        .find(|(_, m)| *m > KINK_MARGIN)
        .map(|(t, _)| t)
        .unwrap()
}

pub const EPS: f64 = 1e-6;

/// One grad-check case: a name and the worst relative error for `seed`.
pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> GResult, inputs: &[Tensor<f64>]) -> f64 {
    grad_check_many(f, inputs, EPS).unwrap()
}

fn op_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0));
    check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let s = g.square(p)?;
            g.sum(s)
        },
        &[a, b],
    )
}

fn op_add_bias(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (x, b) = (uniform(&mut r, &[4, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0));
    check(
        |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            let s = g.square(y)?;
            g.mean(s)
        },
        &[x, b],
    )
}

fn binary(seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> GResult) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (uniform(&mut r, &[3, 3], -1.0, 1.0), uniform(&mut r, &[3, 3], -1.0, 1.0));
    let w = uniform(&mut r, &[3, 3], -1.0, 1.0);
    check(
        move |g, v| {
            let y = op(g, v[0], v[1])?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        },
        &[a, b],
    )
}

fn unary(seed: u64, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> GResult) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(&mut r, x.shape(), -1.0, 1.0);
    check(
        move |g, v| {
            let y = op(g, v[0])?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        },
        &[x],
    )
}

/// Reductions: square the scalar so the gradient depends on `x`.
fn reduce(seed: u64, op: fn(&mut Graph<f64>, Var) -> GResult) -> f64 {
    check(
        move |g, v| {
            let y = op(g, v[0])?;
            g.square(y)
        },
        &[wide(seed)],
    )
}

fn wide(seed: u64) -> Tensor<f64> {
    uniform(&mut rng(seed), &[3, 4], -3.0, 3.0)
}

fn op_concat_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[3, 3], -1.0, 1.0));
    let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
    check(
        move |g, v| {
            let y = g.concat_rows(v[0], v[1])?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            let y = g.square(y)?;
            g.sum(y)
        },
        &[a, b],
    )
}

fn eq1_attr(seed: u64) -> f64 {
    let (x, y, inputs) = kink_free(seed, |r| {
        let x = uniform(r, &[5, 6], -1.0, 1.0);
        let y = labels(r, 5, 3);
        let (m, c) = (mlp_params(r, [6, 7, 4]), mlp_params(r, [4, 5, 3]));
        let (f, m1) = mlp_margin(&x, &m);
        let (_, m2) = mlp_margin(&f, &c);
        let inputs: Vec<Tensor<f64>> = m.into_iter().chain(c).collect();
        ((x, y, inputs), m1.min(m2))
    });
    check(
        move |g, v| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let f = mlp(g, xv, &v[..4])?;
            let z = mlp(g, f, &v[4..])?;
            losses::attr_loss(g, z, yv).map_err(loss)
        },
        &inputs,
    )
}

/// Discriminator loss of either variant, differentiated w.r.t. `D` only.
fn d_side(seed: u64, lsgan: bool) -> f64 {
    let (real, fake, inputs) = kink_free(seed, |r| {
        let real = uniform(r, &[4, 5], -1.0, 1.0);
        let fake = uniform(r, &[6, 5], -1.0, 1.0);
        let d = mlp_params(r, [5, 4, 1]);
        let margin = mlp_margin(&real, &d).1.min(mlp_margin(&fake, &d).1);
        ((real, fake, d), margin)
    });
    check(
        move |g, v| {
            let rv = g.constant(real.clone());
            let fv = g.constant(fake.clone());
            let dr = mlp(g, rv, v)?;
            let df = mlp(g, fv, v)?;
            if lsgan {
                losses::lsgan_d_loss(g, dr, df)
            } else {
                losses::adda_d_loss(g, dr, df)
            }
            .map_err(loss)
        },
        &inputs,
    )
}

/// Mapping loss of either variant through a fixed `D`, w.r.t. `M`.
fn m_side(seed: u64, lsgan: bool) -> f64 {
    let (x, d, inputs) = kink_free(seed, |r| {
        let x = uniform(r, &[6, 5], -1.0, 1.0);
        let d = mlp_params(r, [4, 4, 1]);
        let m = mlp_params(r, [5, 6, 4]);
        let (f, m1) = mlp_margin(&x, &m);
        let m2 = mlp_margin(&f, &d).1;
        ((x, d, m), m1.min(m2))
    });
    check(
        move |g, v| {
            let xv = g.constant(x.clone());
            let dp: Vec<Var> = d.iter().map(|t| g.constant(t.clone())).collect();
            let f = mlp(g, xv, v)?;
            let o = mlp(g, f, &dp)?;
            if lsgan {
                losses::lsgan_m_loss(g, o)
            } else {
                losses::adda_m_loss(g, o)
            }
            .map_err(loss)
        },
        &inputs,
    )
}

fn eq4_combined(seed: u64) -> f64 {
    let (xs, xt, ys, d, inputs) = kink_free(seed, |r| {
        let xs = uniform(r, &[4, 5], -1.0, 1.0);
        let xt = uniform(r, &[3, 5], -1.0, 1.0);
        let ys = labels(r, 4, 3);
        let d = mlp_params(r, [4, 4, 1]);
        let (m, c) = (mlp_params(r, [5, 6, 4]), mlp_params(r, [4, 3, 3]));
        let (fs, m1) = mlp_margin(&xs, &m);
        let (ft, m2) = mlp_margin(&xt, &m);
        let margin = [
            m1,
            m2,
            mlp_margin(&fs, &c).1,
            mlp_margin(&fs, &d).1,
            mlp_margin(&ft, &d).1,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        let inputs: Vec<Tensor<f64>> = m.into_iter().chain(c).collect();
        ((xs, xt, ys, d, inputs), margin)
    });
    check(
        move |g, v| {
            let s = g.constant(xs.clone());
            let t = g.constant(xt.clone());
            let y = g.constant(ys.clone());
            let dp: Vec<Var> = d.iter().map(|t| g.constant(t.clone())).collect();
            let union = g.concat_rows(s, t)?;
            let fu = mlp(g, union, &v[..4])?;
            let du = mlp(g, fu, &dp)?;
            let adv = losses::lsgan_m_loss(g, du).map_err(loss)?;
            let fs = mlp(g, s, &v[..4])?;
            let z = mlp(g, fs, &v[4..])?;
            let attr = losses::attr_loss(g, z, y).map_err(loss)?;
            losses::combined_objective(g, adv, attr, 0.1).map_err(loss)
        },
        &inputs,
    )
}

pub const CASES: &[Case] = &[
    Case {
        name: "matmul",
        run: op_matmul,
    },
    Case {
        name: "add_bias",
        run: op_add_bias,
    },
    Case {
        name: "add",
        run: |s| binary(s, |g, a, b| g.add(a, b)),
    },
    Case {
        name: "sub",
        run: |s| binary(s, |g, a, b| g.sub(a, b)),
    },
    Case {
        name: "mul",
        run: |s| binary(s, |g, a, b| g.mul(a, b)),
    },
    Case {
        name: "scale",
        run: |s| unary(s, wide(s), |g, x| g.scale(x, -1.7)),
    },
    Case {
        name: "neg",
        run: |s| unary(s, wide(s), |g, x| g.neg(x)),
    },
    Case {
        name: "add_scalar",
        run: |s| unary(s, wide(s), |g, x| g.add_scalar(x, 0.4)),
    },
    Case {
        name: "relu",
        run: |s| unary(s, away_from_zero(&mut rng(s), &[3, 4], 0.01), |g, x| g.relu(x)),
    },
    Case {
        name: "sigmoid",
        run: |s| unary(s, wide(s), |g, x| g.sigmoid(x)),
    },
    Case {
        name: "softplus",
        run: |s| unary(s, wide(s), |g, x| g.softplus(x)),
    },
    Case {
        name: "square",
        run: |s| unary(s, wide(s), |g, x| g.square(x)),
    },
    Case {
        name: "sum",
        run: |s| reduce(s, |g, x| g.sum(x)),
    },
    Case {
        name: "mean",
        run: |s| reduce(s, |g, x| g.mean(x)),
    },
    Case {
        name: "concat_rows",
        run: op_concat_rows,
    },
    Case {
        name: "attr_loss (M, C)",
        run: eq1_attr,
    },
    Case {
        name: "adda d_loss (D)",
        run: |s| d_side(s, false),
    },
    Case {
        name: "adda m_loss (M)",
        run: |s| m_side(s, false),
    },
    Case {
        name: "lsgan d_loss (D)",
        run: |s| d_side(s, true),
    },
    Case {
        name: "lsgan m_loss (M)",
        run: |s| m_side(s, true),
    },
    Case {
        name: "combined objective (M, C)",
        run: eq4_combined,
    },
];

/// Worst error over `seeds` for every case, in [`CASES`] order.
pub fn grad_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|c| (c.name, (0..seeds).map(|s| (c.run)(s)).fold(0.0, f64::max)))
        .collect()
}

/// Random retrieval instance with distinct distances.
pub struct Instance {
    pub dist: DistanceMatrix,
    pub query: Vec<Meta>,
    pub gallery: Vec<Meta>,
}

pub fn random_instance(seed: u64, nq: usize, ng: usize, n_ids: u32, n_cams: u32) -> Instance {
    let mut r = rng(seed);
    let meta = |r: &mut ChaCha8Rng| Meta {
        person_id: r.gen_range(0..n_ids),
        camera_id: r.gen_range(0..n_cams),
    };
    let query = (0..nq).map(|_| meta(&mut r)).collect();
    let gallery = (0..ng).map(|_| meta(&mut r)).collect();
    let rows: Vec<Vec<f64>> = (0..nq)
        .map(|_| (0..ng).map(|_| r.gen_range(0.0..10.0)).collect())
        .collect();
    Instance {
        dist: DistanceMatrix::from_rows(&rows),
        query,
        gallery,
    }
}

/// Filtered gallery order for query `i`: ascending distance, ties by index,
/// same person on the same camera removed.
fn brute_order(inst: &Instance, i: usize, exclude: bool) -> Vec<usize> {
    let q = inst.query[i];
    let mut kept: Vec<usize> = (0..inst.gallery.len())
        .filter(|&j| {
            let g = inst.gallery[j];
            !(exclude && g.person_id == q.person_id && g.camera_id == q.camera_id)
        })
        .collect();
    // Selection sort: deliberately unlike the library's sort.
    for a in 0..kept.len() {
        let mut best = a;
        for b in a + 1..kept.len() {
            let (db, dbest) = (inst.dist.get(i, kept[b]), inst.dist.get(i, kept[best]));
            if db < dbest || (db == dbest && kept[b] < kept[best]) {
                best = b;
            }
        }
        kept.swap(a, best);
    }
    kept
}

/// Brute-force CMC over ranks `1..=k` and mAP, plus excluded count.
pub fn brute_metrics(inst: &Instance, k: usize, exclude: bool) -> Option<(Vec<f64>, f64, usize)> {
    let mut cmc = vec![0.0; k];
    let (mut ap_sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for i in 0..inst.query.len() {
        let order = brute_order(inst, i, exclude);
        let pid = inst.query[i].person_id;
        let rel: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &j)| inst.gallery[j].person_id == pid)
            .map(|(p, _)| p + 1)
            .collect();
        if rel.is_empty() {
            excluded += 1;
            continue;
        }
        n += 1;
        for (rank, c) in cmc.iter_mut().enumerate() {
            if rel[0] <= rank + 1 {
                *c += 1.0;
            }
        }
        let r = rel.len() as f64;
        ap_sum += rel
            .iter()
            .enumerate()
            .map(|(h, &p)| (h + 1) as f64 / p as f64)
            .sum::<f64>()
            / r;
    }
    (n > 0).then(|| (cmc.iter().map(|c| c / n as f64).collect(), ap_sum / n as f64, excluded))
}
