//! Finite-difference checks of every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tunembed::audio_branch::{init_cnn, objective, VariantConfig};
use tunembed::nd::{Graph, ParamSet, Tensor, Var};
use tunembed::user_branch::class_objective;
use tunembed::Result;

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Magnitudes below this are compared absolutely.
const FLOOR: f64 = 1e-4;
const MAX_COORDS: usize = 12;

type Make<'a> = dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Builder<'static>>) + 'a;
type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + 'a;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss_of(build: &Builder, leaves: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, leaves).unwrap();
    g.value(loss).data()[0]
}

/// Fraction of sampled coordinates allowed to be skipped as kink crossings.
pub const MAX_SKIPPED: f64 = 0.05;

/// Worst relative error between analytic and central-difference gradients,
/// plus (checked, skipped) coordinate counts. A coordinate is skipped when
/// its one-sided differences disagree, i.e. the step straddles a ReLU or
/// max-pool kink and the central difference is meaningless there.
fn check(rng: &mut ChaCha8Rng, leaves: Vec<Tensor<f64>>, build: &Builder) -> (f64, usize, usize) {
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, &leaves).unwrap();
    let f0 = g.value(loss).data()[0];
    let grads = g.backward(loss).unwrap();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; leaves[li].numel()]);
        let n = leaves[li].numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = leaves.clone();
            plus[li].data_mut()[j] += STEP;
            let mut minus = leaves.clone();
            minus[li].data_mut()[j] -= STEP;
            let (fp, fm) = (loss_of(build, &plus), loss_of(build, &minus));
            let (fwd, bwd) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            checked += 1;
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(FLOOR) {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
        }
    }
    (worst, checked, skipped)
}

fn leaves_of(g: &mut Graph<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| g.leaf(t.clone().with_grad())).collect()
}

/// Random-weighted scalar readout of a vector, matrix or `[C,H,W]` node.
fn readout(g: &mut Graph<f64>, v: Var, w: &[f64]) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let out = match shape.len() {
        1 => {
            let wt = g.constant(Tensor::new(vec![1, shape[0]], w[..shape[0]].to_vec())?);
            g.dense(v, wt, None)?
        }
        2 => {
            let x = g.constant(Tensor::vector(w[..shape[1]].to_vec()));
            let rows = g.dense(x, v, None)?;
            let wt = g.constant(Tensor::new(vec![1, shape[0]], w[shape[1]..shape[1] + shape[0]].to_vec())?);
            g.dense(rows, wt, None)?
        }
        _ => {
            let n: usize = shape.iter().product();
            let mut ks = vec![1];
            ks.extend_from_slice(&shape);
            let k = g.constant(Tensor::new(ks, w[..n].to_vec())?);
            let full = g.conv2d(v, k, None, 1, 0)?;
            g.global_avg_pool(full)?
        }
    };
    Ok(g.sum(out))
}

/// Cosines of `v[0]` with each of `v[1..]`.
fn sims(g: &mut Graph<f64>, v: &[Var]) -> Result<Vec<Var>> {
    v[1..].iter().map(|&r| g.cosine(v[0], r)).collect()
}

fn weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs every check; returns `(operation, instances, worst relative error)`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, make: &Make<'_>| {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for _ in 0..INSTANCES {
            let (leaves, build) = make(rng);
            let (w, c, s) = check(rng, leaves, &*build);
            worst = worst.max(w);
            checked += c;
            skipped += s;
        }
        if skipped as f64 > MAX_SKIPPED * checked as f64 {
            worst = f64::INFINITY;
        }
        out.push((name, INSTANCES, worst));
    };

    run("conv2d", &mut rng, &|rng| {
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let leaves = vec![random(rng, &[ci, h, w]), random(rng, &[co, ci, k, k]), random(rng, &[co])];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    run("maxpool2d", &mut rng, &|rng| {
        let c = rng.random_range(1..4);
        let (h, w) = (2 * rng.random_range(1..5), 2 * rng.random_range(1..5));
        let leaves = vec![random(rng, &[c, h, w])];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.maxpool2d(v[0], (2, 2))?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    run("dense", &mut rng, &|rng| {
        let (m, n) = (rng.random_range(1..9), rng.random_range(1..9));
        let leaves = vec![random(rng, &[n]), random(rng, &[m, n]), random(rng, &[m])];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    for (name, slope) in [("relu", 0.0), ("leaky_relu", 0.01)] {
        run(name, &mut rng, &|rng| {
            let n = rng.random_range(1..20);
            let leaves = vec![random(rng, &[n])];
            let rw = weights(rng);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                    let v = leaves_of(g, ts);
                    let y = g.leaky_relu(v[0], slope);
                    Ok((readout(g, y, &rw)?, v))
                }),
            )
        });
    }
    run("global_avg_pool", &mut rng, &|rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6)];
        let leaves = vec![random(rng, &shape)];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.global_avg_pool(v[0])?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    run("cosine", &mut rng, &|rng| {
        let n = rng.random_range(2..41);
        let leaves = vec![random(rng, &[n]), random(rng, &[n])];
        (
            leaves,
            Box::new(|g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.cosine(v[0], v[1])?;
                Ok((g.sum(y), v))
            }),
        )
    });
    run("gather_mean", &mut rng, &|rng| {
        let (rows, d) = (rng.random_range(1..8), rng.random_range(1..6));
        let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..rows)).collect();
        let leaves = vec![random(rng, &[rows, d])];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.gather_mean(v[0], &ids)?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    run("gather_rows", &mut rng, &|rng| {
        let (rows, d) = (rng.random_range(1..8), rng.random_range(1..6));
        let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..rows)).collect();
        let leaves = vec![random(rng, &[rows, d])];
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.gather_rows(v[0], &ids)?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });
    run("concat", &mut rng, &|rng| {
        let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
        let leaves: Vec<Tensor<f64>> = lens.iter().map(|&n| random(rng, &[n])).collect();
        let rw = weights(rng);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let y = g.concat(&v)?;
                Ok((readout(g, y, &rw)?, v))
            }),
        )
    });

    // losses over cosines of random embeddings
    run("hinge_loss", &mut rng, &|rng| {
        let n = rng.random_range(1..5);
        let leaves: Vec<Tensor<f64>> = (0..n + 2).map(|_| random(rng, &[40])).collect();
        let margin = rng.random_range(0.1..1.5);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let s = sims(g, &v)?;
                Ok((g.hinge(s[0], &s[1..], margin)?, v))
            }),
        )
    });
    run("binary_loss", &mut rng, &|rng| {
        let leaves = vec![random(rng, &[40]), random(rng, &[40])];
        let liked = rng.random_bool(0.5);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let s = sims(g, &v)?;
                Ok((g.sigmoid_bce(s[0], liked)?, v))
            }),
        )
    });
    run("multi_loss", &mut rng, &|rng| {
        let n = rng.random_range(1..5);
        let leaves: Vec<Tensor<f64>> = (0..n + 2).map(|_| random(rng, &[40])).collect();
        (
            leaves,
            Box::new(|g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                let s = sims(g, &v)?;
                let logits = g.concat(&s)?;
                Ok((g.softmax_ce(logits, 0)?, v))
            }),
        )
    });
    run("sampled_class_loss", &mut rng, &|rng| {
        let vocab = rng.random_range(3..12);
        let positive = rng.random_range(0..vocab);
        let mut negatives: Vec<usize> = (0..vocab).filter(|&c| c != positive).collect();
        negatives.truncate(rng.random_range(1..vocab));
        let leaves = vec![random(rng, &[vocab, 40]), random(rng, &[40])];
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let v = leaves_of(g, ts);
                Ok((class_objective(g, v[0], v[1], positive, &negatives)?, v))
            }),
        )
    });
    run("audio_branch", &mut rng, &|rng| {
        let variants = [
            VariantConfig::basic_binary(3.0),
            VariantConfig::dcue(3.0),
            VariantConfig::multi(2, 3.0),
            VariantConfig::metric(2, 3.0),
        ];
        let variant = variants[rng.random_range(0..4)];
        let channels: Vec<usize> = (0..5).map(|_| rng.random_range(2..5)).collect();
        let mut params = ParamSet::new();
        init_cnn(&mut params, &channels, rng).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        let frames = rng.random_range(32..40);
        let n_inputs = if variant.is_ranked() { 1 + variant.n_negatives } else { 1 };
        // positive conv biases keep some units active in such narrow layers
        let mut leaves: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t: Tensor<f64> = params.get(n).unwrap().cast();
                if n.ends_with("bias") {
                    let k = t.numel();
                    Tensor::vector((0..k).map(|_| rng.random_range(0.05..0.5)).collect())
                } else {
                    t
                }
            })
            .collect();
        leaves.push(random(rng, &[40]));
        let inputs: Vec<Tensor<f64>> = (0..n_inputs).map(|_| random(rng, &[1, 128, frames])).collect();
        let liked = rng.random_bool(0.5);
        (
            leaves,
            Box::new(move |g: &mut Graph<f64>, ts: &[Tensor<f64>]| {
                let mut p = ParamSet::<f64>::new();
                for (n, t) in names.iter().zip(ts) {
                    p.insert(n.clone(), t.clone().with_grad());
                }
                let bound = p.bind(g);
                let mut vars: Vec<Var> = names.iter().map(|n| bound.var(n).unwrap()).collect();
                let anchor = g.leaf(ts[names.len()].clone().with_grad());
                vars.push(anchor);
                let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
                Ok((objective(&variant, g, &bound, anchor, &xs, liked)?, vars))
            }),
        )
    });
    out
}
