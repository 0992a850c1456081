use rayon::prelude::*;

use crate::error::{ensure, Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.0 / 128.0;
pub const DEFAULT_C: f64 = 1.0;
pub const KKT_TOLERANCE: f64 = 1e-3;
const MAX_ITERATIONS: usize = 10_000_000;
const TAU: f64 = 1e-12;
/// Decision values this close to zero count as a tie.
const TIE_EPS: f64 = 1e-9;

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Two-class RBF SVM trained by sequential minimal optimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySvm {
    /// Dual variable of every training sample, in input order.
    alpha: Vec<f64>,
    support: Vec<Vec<f64>>,
    /// `αᵢ·yᵢ` of each support vector.
    coef: Vec<f64>,
    rho: f64,
    gamma: f64,
    c: f64,
    /// Maximal KKT violation when the solver stopped.
    kkt_gap: f64,
}

impl BinarySvm {
    /// `labels[i]` is true for the positive class.
    pub fn fit(x: &[Vec<f64>], labels: &[bool], gamma: f64, c: f64) -> Result<Self> {
        let n = x.len();
        ensure!(n == labels.len(), Dimension, "{n} samples but {} labels", labels.len());
        ensure!(
            labels.iter().any(|&l| l) && labels.iter().any(|&l| !l),
            Contract,
            "a binary SVM needs samples of both classes"
        );
        ensure!(gamma > 0.0 && c > 0.0, Contract, "gamma and C must be positive");
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let k: Vec<f64> = (0..n * n).map(|idx| rbf(&x[idx / n], &x[idx % n], gamma)).collect();
        let kij = |i: usize, j: usize| k[i * n + j];
        let mut alpha = vec![0.0; n];
        // gradient of ½αᵀQα − eᵀα, with Q = y yᵀ ∘ K
        let mut grad = vec![-1.0; n];
        let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
        let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);
        let mut gap = f64::INFINITY;
        for _ in 0..MAX_ITERATIONS {
            let mut i = usize::MAX;
            let mut gmax = f64::NEG_INFINITY;
            for t in 0..n {
                if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                    gmax = -y[t] * grad[t];
                    i = t;
                }
            }
            let mut j = usize::MAX;
            let mut gmin = f64::INFINITY;
            let mut best = f64::INFINITY;
            for t in 0..n {
                if !low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                if i != usize::MAX && v < gmax {
                    let b = gmax - v;
                    let a = (kij(i, i) + kij(t, t) - 2.0 * kij(i, t)).max(TAU);
                    if -b * b / a <= best {
                        best = -b * b / a;
                        j = t;
                    }
                }
            }
            gap = gmax - gmin;
            if gap <= KKT_TOLERANCE || i == usize::MAX || j == usize::MAX {
                break;
            }
            let (ai, aj) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (kij(i, i) + kij(j, j) - 2.0 * kij(i, j)).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = ai - aj;
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (kij(i, i) + kij(j, j) - 2.0 * kij(i, j)).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = ai + aj;
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
            for t in 0..n {
                grad[t] += y[t] * (y[i] * kij(i, t) * di + y[j] * kij(j, t) * dj);
            }
        }
        if gap > KKT_TOLERANCE {
            return Err(Error::Contract(format!("SMO stopped with KKT gap {gap}")));
        }
        let rho = offset(&alpha, &y, &grad, c);
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for t in 0..n {
            if alpha[t] > 0.0 {
                support.push(x[t].clone());
                coef.push(alpha[t] * y[t]);
            }
        }
        Ok(Self {
            alpha,
            support,
            coef,
            rho,
            gamma,
            c,
            kkt_gap: gap,
        })
    }

    /// `Σ αᵢ yᵢ k(xᵢ, x) − ρ`; positive means the positive class.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * rbf(s, x, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn kkt_gap(&self) -> f64 {
        self.kkt_gap
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }
}

/// ρ from the free support vectors, or the midpoint of the feasible range.
fn offset(alpha: &[f64], y: &[f64], grad: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            free += 1;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// One-vs-one multiclass RBF SVM over classes `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    n_classes: usize,
    dim: usize,
    /// `(a, b, machine)` for every pair `a < b`; positive decisions vote for `a`.
    pairs: Vec<(usize, usize, BinarySvm)>,
}

impl SvmModel {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], gamma: f64, c: f64) -> Result<Self> {
        ensure!(!x.is_empty() && x.len() == labels.len(), Dimension, "samples and labels must match and be non-empty");
        let dim = x[0].len();
        ensure!(x.iter().all(|r| r.len() == dim), Dimension, "samples have differing lengths");
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let present: Vec<usize> = (0..n_classes).filter(|k| labels.contains(k)).collect();
        ensure!(present.len() >= 2, Contract, "an SVM needs at least two classes");
        let pair_ids: Vec<(usize, usize)> = present
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| present[i + 1..].iter().map(move |&b| (a, b)))
            .collect();
        let pairs = pair_ids
            .par_iter()
            .map(|&(a, b)| {
                let (xs, ys): (Vec<Vec<f64>>, Vec<bool>) = x
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == a || l == b)
                    .map(|(r, &l)| (r.clone(), l == a))
                    .unzip();
                Ok((a, b, BinarySvm::fit(&xs, &ys, gamma, c)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_classes, dim, pairs })
    }

    pub fn binary(&self, a: usize, b: usize) -> Option<&BinarySvm> {
        self.pairs.iter().find(|p| p.0 == a && p.1 == b).map(|p| &p.2)
    }

    pub fn machines(&self) -> impl Iterator<Item = (usize, usize, &BinarySvm)> {
        self.pairs.iter().map(|(a, b, m)| (*a, *b, m))
    }

    /// Majority vote; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        ensure!(x.len() == self.dim, Dimension, "feature has {} values, model expects {}", x.len(), self.dim);
        let mut votes = vec![0usize; self.n_classes];
        for (a, b, m) in &self.pairs {
            if m.decision(x) >= -TIE_EPS {
                votes[*a] += 1;
            } else {
                votes[*b] += 1;
            }
        }
        let top = *votes.iter().max().expect("at least two classes");
        Ok(votes.iter().position(|&v| v == top).expect("max exists"))
    }
}
