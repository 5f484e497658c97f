//! Independent oracles shared by the unit-level suites and the acceptance run.

use chainstack::ingest::Part;
use chainstack::metrics::PredictionMatrix;
use chainstack::tensor::{grad_check, Graph, Op, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
pub type Case = (Vec<Tensor>, Build);
pub type CaseGen = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero, so kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

/// Weighted sum of `out` against a fixed random probe, making the loss scalar.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    g.sum_all(m)
}

/// Relative gradient error of one generated case at `seed`.
pub fn op_error(case: &CaseGen, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, f) = case(&mut rng);
    grad_check(
        |g, v| {
            let o = f(g, v)?;
            probe(g, o, seed)
        },
        &params,
        H,
    )
    .unwrap()
}

fn unary(op: Op) -> (String, CaseGen) {
    let name = op.name().to_string();
    let gen: CaseGen = Box::new(move |rng| {
        let shape = [dim(rng), dim(rng)];
        let x = match op {
            Op::Log => rand_tensor(rng, &shape, 0.2, 3.0),
            _ => away_from_zero(rng, &shape),
        };
        let op = op.clone();
        (vec![x], Box::new(move |g: &mut Graph, v: &[Var]| g.apply(op.clone(), &[v[0]])))
    });
    (name, gen)
}

fn binary(op: Op) -> (String, CaseGen) {
    let name = op.name().to_string();
    let gen: CaseGen = Box::new(move |rng| {
        let (m, n, p) = (dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, &[m, n, p], -1.0, 1.0);
        let bshape: Vec<usize> = match rng.random_range(0..4) {
            0 => vec![m, n, p],
            1 => vec![p],
            2 => vec![n, 1],
            _ => vec![m, 1, p],
        };
        let b = rand_tensor(rng, &bshape, -1.0, 1.0);
        let op = op.clone();
        (vec![a, b], Box::new(move |g: &mut Graph, v: &[Var]| g.apply(op.clone(), &[v[0], v[1]])))
    });
    (name, gen)
}

fn axis_op(name: &str, make: fn(usize) -> Op) -> (String, CaseGen) {
    let gen: CaseGen = Box::new(move |rng| {
        let shape = [dim(rng) + 1, dim(rng) + 1, dim(rng)];
        let axis = rng.random_range(0..3);
        let x = rand_tensor(rng, &shape, -2.0, 2.0);
        let op = make(axis);
        (vec![x], Box::new(move |g: &mut Graph, v: &[Var]| g.apply(op.clone(), &[v[0]])))
    });
    (name.to_string(), gen)
}

/// One random-case generator per op kind.
pub fn op_cases() -> Vec<(String, CaseGen)> {
    let mut cases: Vec<(String, CaseGen)> = Vec::new();
    let mut push = |name: &str, gen: CaseGen| cases.push((name.to_string(), gen));
    push(
        "matmul",
        Box::new(|rng| {
            let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            let a = rand_tensor(rng, &[b, m, k], -1.0, 1.0);
            let w = if rng.random_bool(0.5) {
                rand_tensor(rng, &[k, n], -1.0, 1.0)
            } else {
                rand_tensor(rng, &[b, k, n], -1.0, 1.0)
            };
            (vec![a, w], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])))
        }),
    );
    push(
        "add_bias",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
            let b = rand_tensor(rng, &[n], -1.0, 1.0);
            (vec![a, b], Box::new(|g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1])))
        }),
    );
    push(
        "concat",
        Box::new(|rng| {
            let axis = rng.random_range(0..3);
            let base = [dim(rng), dim(rng), dim(rng)];
            let parts: Vec<Tensor> = (0..rng.random_range(2..4))
                .map(|_| {
                    let mut s = base;
                    s[axis] = dim(rng);
                    rand_tensor(rng, &s, -1.0, 1.0)
                })
                .collect();
            (parts, Box::new(move |g: &mut Graph, v: &[Var]| g.concat(v, axis)))
        }),
    );
    push(
        "slice",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng) + 1, dim(rng)];
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis]);
            let end = rng.random_range(start + 1..=shape[axis]);
            let x = rand_tensor(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(move |g: &mut Graph, v: &[Var]| g.apply(Op::Slice { axis, start, end }, &[v[0]])))
        }),
    );
    push(
        "reshape+transpose",
        Box::new(|rng| {
            let (a, b, c) = (dim(rng), dim(rng), dim(rng));
            let x = rand_tensor(rng, &[a, b * c], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let r = g.reshape(v[0], &[a, b, c])?;
                    g.transpose(r)
                }),
            )
        }),
    );
    push(
        "sum_all",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng)];
            let x = rand_tensor(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(|g: &mut Graph, v: &[Var]| g.sum_all(v[0])))
        }),
    );
    push(
        "mean_all",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng)];
            let x = rand_tensor(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(|g: &mut Graph, v: &[Var]| g.mean_all(v[0])))
        }),
    );
    push(
        "embedding",
        Box::new(|rng| {
            let (vocab, d) = (dim(rng) + 1, dim(rng));
            let table = rand_tensor(rng, &[vocab, d], -1.0, 1.0);
            let idx: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..vocab)).collect();
            (vec![table], Box::new(move |g: &mut Graph, v: &[Var]| g.embedding(v[0], &idx)))
        }),
    );
    push(
        "clip",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng)];
            let x = rand_tensor(rng, &shape, -1.0, 1.0);
            // keep entries off the clip boundaries
            let x = x.map(|v| if (v.abs() - 0.5).abs() < 0.01 { v * 0.9 } else { v });
            (vec![x], Box::new(|g: &mut Graph, v: &[Var]| g.clip(v[0], -0.5, 0.5)))
        }),
    );
    push(
        "ce_with_logits",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng)];
            let z = rand_tensor(rng, &shape, -3.0, 3.0);
            let t = rand_tensor(rng, &shape, 0.0, 1.0);
            (vec![z, t], Box::new(|g: &mut Graph, v: &[Var]| g.ce_with_logits(v[0], v[1])))
        }),
    );
    push(
        "bce",
        Box::new(|rng| {
            let shape = [dim(rng), dim(rng)];
            let p = rand_tensor(rng, &shape, 0.05, 0.95);
            let t = rand_tensor(rng, &shape, 0.0, 1.0);
            (vec![p, t], Box::new(|g: &mut Graph, v: &[Var]| g.bce(v[0], v[1])))
        }),
    );
    for op in [Op::Add, Op::Sub, Op::Mul] {
        cases.push(binary(op));
    }
    for op in [Op::Sigmoid, Op::Tanh, Op::Relu, Op::Exp, Op::Log, Op::Scale { factor: -2.5 }] {
        cases.push(unary(op));
    }
    cases.push(axis_op("softmax", |axis| Op::Softmax { axis }));
    cases.push(axis_op("l2_normalize", |axis| Op::L2Normalize { axis }));
    cases.push(axis_op("mean", |axis| Op::Mean { axis }));
    cases.push(axis_op("sum", |axis| Op::Sum { axis }));
    cases.push(axis_op("max", |axis| Op::Max { axis }));
    cases
}

/// GAP recomputed from scratch at every cut of the sorted list: precision
/// and recall of the first i tuples, summed as p(i) * (r(i) - r(i-1)).
pub fn brute_force_gap(pred: &PredictionMatrix, labels: &[Vec<usize>], top_k: usize) -> f64 {
    let mut tuples = Vec::new();
    for (v, ls) in labels.iter().enumerate() {
        let row = pred.row(v);
        let mut order: Vec<usize> = (0..row.len()).collect();
        // selection by repeated arg-max, lowest index on ties
        let mut chosen = Vec::new();
        while chosen.len() < top_k.min(row.len()) {
            let mut best: Option<usize> = None;
            for &l in &order {
                if best.is_none_or(|b| row[l] > row[b]) {
                    best = Some(l);
                }
            }
            let b = best.unwrap();
            order.retain(|&l| l != b);
            chosen.push(b);
        }
        for l in chosen {
            tuples.push((row[l], v, l, ls.contains(&l)));
        }
    }
    // insertion sort by (conf desc, video asc, label asc)
    let mut sorted: Vec<(f64, usize, usize, bool)> = Vec::new();
    for t in tuples {
        let pos = sorted
            .iter()
            .position(|s| t.0 > s.0 || (t.0 == s.0 && (t.1, t.2) < (s.1, s.2)))
            .unwrap_or(sorted.len());
        sorted.insert(pos, t);
    }
    let total: usize = labels.iter().map(|l| l.len().min(top_k)).sum();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 1..=sorted.len() {
        let hits = sorted[..i].iter().filter(|t| t.3).count() as f64;
        let precision = hits / i as f64;
        let recall = hits / total as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (PredictionMatrix, Vec<Vec<usize>>, usize) {
    let n = rng.random_range(1..=50);
    let l = rng.random_range(1..=30);
    // coarse grid makes ties common
    let coarse = rng.random_bool(0.5);
    let values: Vec<f64> = (0..n * l)
        .map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random::<f64>() })
        .collect();
    let mut labels: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..l).filter(|_| rng.random_bool(0.15)).collect())
        .collect();
    if labels.iter().all(Vec::is_empty) {
        labels[0].push(rng.random_range(0..l));
    }
    let top_k = if rng.random_bool(0.7) { 20 } else { rng.random_range(1..=l) };
    (PredictionMatrix::new(n, l, values).unwrap(), labels, top_k)
}

/// 40 corpus-style names with the part each must land in.
pub fn split_fixture() -> Vec<(String, Option<Part>)> {
    let mut v = Vec::new();
    for s in ["00", "0a", "zz", "A9", "-_", "ab", "99", "x1"] {
        v.push((format!("train{s}.tfrecord"), Some(Part::Train1)));
    }
    for s in ["a0", "aa", "aZ", "a-", "a9"] {
        v.push((format!("validate{s}.tfrecord"), Some(Part::Validate1)));
    }
    for s in ["b0", "zz", "A1", "_x", "Zb", "c9", "-a"] {
        v.push((format!("validate{s}.tfrecord"), Some(Part::Train2)));
    }
    for s in ["00", "7Q", "9z", "5a", "0-"] {
        v.push((format!("validate{s}.tfrecord"), Some(Part::Validate2)));
    }
    for s in ["00", "zz", "a1", "Q7", "--"] {
        v.push((format!("test{s}.tfrecord"), Some(Part::Test)));
    }
    for bad in ["train0.tfrecord", "train000.tfrecord", "validatea.tfrecord", "validate123.tfrecord", "test1.tfrecord",
        "tests00.tfrecord", "Train00.tfrecord", "validateab", "model.toml", "train00"] {
        v.push((bad.to_string(), None));
    }
    v
}
