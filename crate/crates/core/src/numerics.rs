//! Verification kit: analytic gradients for the differentiable operations,
//! a central finite-difference checker and brute-force reference oracles.
//!
//! The reference implementations here are written as plain loops and do not
//! call into the code paths they are used to check.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::att::{assign_clusters, biased_attention, merge_clusters};
use crate::cce::{focal_loss, sigmoid, softplus, ScoreMap};
use crate::error::{Error, Result};
use crate::fmcore::TokenSet;
use crate::linalg::Matrix;

/// Relative-error threshold for a passing gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub operation: String,
    pub max_relative_error: f64,
    pub elements: usize,
    pub epsilon: f64,
    pub pass: bool,
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x0`.
pub fn fd_check<F>(
    operation: &str,
    f: F,
    x0: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x0.len() {
        return Err(Error::Shape(format!(
            "{} analytic partials for {} parameters",
            analytic.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x);
        x[i] = orig - epsilon;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(i));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport {
        operation: operation.to_string(),
        max_relative_error: worst,
        elements: x.len(),
        epsilon,
        pass: worst < GRAD_TOLERANCE,
    })
}

/// Folds several reports of the same operation into one.
pub fn merge_reports(operation: &str, reports: &[GradCheckReport]) -> GradCheckReport {
    GradCheckReport {
        operation: operation.to_string(),
        max_relative_error: reports
            .iter()
            .map(|r| r.max_relative_error)
            .fold(0.0, f64::max),
        elements: reports.iter().map(|r| r.elements).sum(),
        epsilon: reports.first().map_or(FD_EPSILON, |r| r.epsilon),
        pass: !reports.is_empty() && reports.iter().all(|r| r.pass),
    }
}

/// Gradient of the `e^p`-weighted cluster mean `y` contracted with `g_y`:
/// `∂/∂x_j = w_j g_y`, `∂/∂p_j = w_j (x_j − y)·g_y`.
pub fn merge_backward(x: &Matrix, p: &[f64], g_y: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    if p.len() != x.rows() || g_y.len() != x.cols() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "merge backward with {}x{} features, {} scores, {} upstream",
            x.rows(),
            x.cols(),
            p.len(),
            g_y.len()
        )));
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut y = vec![0.0; x.cols()];
    for (j, wj) in w.iter().enumerate() {
        for (c, yc) in y.iter_mut().enumerate() {
            *yc += wj * x.get(j, c);
        }
    }
    let mut g_x = Matrix::zeros(x.rows(), x.cols());
    let mut g_p = vec![0.0; x.rows()];
    for j in 0..x.rows() {
        let mut acc = 0.0;
        for c in 0..x.cols() {
            g_x.set(j, c, w[j] * g_y[c]);
            acc += (x.get(j, c) - y[c]) * g_y[c];
        }
        g_p[j] = w[j] * acc;
    }
    Ok((g_x, g_p))
}

/// Gradients of `merge_clusters` features w.r.t. token features and scores,
/// given upstream gradients on every merged token.
pub fn merge_clusters_backward(
    ts: &TokenSet,
    assignment: &[usize],
    p: &[f64],
    num_clusters: usize,
    upstream: &Matrix,
) -> Result<(Matrix, Vec<f64>)> {
    if upstream.rows() != num_clusters || upstream.cols() != ts.dim() {
        return Err(Error::Shape(
            "upstream gradient does not match merged tokens".into(),
        ));
    }
    let mut members = vec![Vec::new(); num_clusters];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    let mut g_x = Matrix::zeros(ts.len(), ts.dim());
    let mut g_p = vec![0.0; ts.len()];
    for (k, m) in members.iter().enumerate() {
        let rows: Vec<Vec<f64>> = m.iter().map(|&i| ts.feature(i).to_vec()).collect();
        let ps: Vec<f64> = m.iter().map(|&i| p[i]).collect();
        let (gx, gp) = merge_backward(&Matrix::from_rows(&rows)?, &ps, upstream.row(k))?;
        for (t, &i) in m.iter().enumerate() {
            g_x.row_mut(i).copy_from_slice(gx.row(t));
            g_p[i] = gp[t];
        }
    }
    Ok((g_x, g_p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub p: Vec<f64>,
}

/// Analytic gradients of `softmax(Q Kᵀ/√d_k + 1 pᵀ) V`.
pub fn biased_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    p: &[f64],
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    let (n, m, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    if k.cols() != d
        || v.rows() != m
        || p.len() != m
        || upstream.rows() != n
        || upstream.cols() != dv
    {
        return Err(Error::Shape(
            "biased attention backward shape mismatch".into(),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut g_q = Matrix::zeros(n, d);
    let mut g_k = Matrix::zeros(m, d);
    let mut g_v = Matrix::zeros(m, dv);
    let mut g_p = vec![0.0; m];
    for i in 0..n {
        let mut a: Vec<f64> = (0..m)
            .map(|j| {
                let s: f64 = (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum();
                s * scale + p[j]
            })
            .collect();
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        a.iter_mut().for_each(|x| *x = (*x - max).exp());
        let z: f64 = a.iter().sum();
        a.iter_mut().for_each(|x| *x /= z);

        let g_a: Vec<f64> = (0..m)
            .map(|j| (0..dv).map(|c| upstream.get(i, c) * v.get(j, c)).sum())
            .collect();
        let inner: f64 = (0..m).map(|j| g_a[j] * a[j]).sum();
        for j in 0..m {
            let g_s = a[j] * (g_a[j] - inner);
            g_p[j] += g_s;
            for c in 0..d {
                g_q.set(i, c, g_q.get(i, c) + g_s * scale * k.get(j, c));
                g_k.set(j, c, g_k.get(j, c) + g_s * scale * q.get(i, c));
            }
            for c in 0..dv {
                g_v.set(j, c, g_v.get(j, c) + a[j] * upstream.get(i, c));
            }
        }
    }
    Ok(AttentionGrads {
        q: g_q,
        k: g_k,
        v: g_v,
        p: g_p,
    })
}

fn plain_weights(q: &Matrix, k: &Matrix) -> Vec<Vec<f64>> {
    let d = q.cols();
    let scale = (d as f64).sqrt();
    let mut rows = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let mut logits = Vec::with_capacity(k.rows());
        for j in 0..k.rows() {
            let mut s = 0.0;
            for c in 0..d {
                s += q.get(i, c) * k.get(j, c);
            }
            logits.push(s / scale);
        }
        let mut top = logits[0];
        for &l in &logits {
            if l > top {
                top = l;
            }
        }
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - top).exp();
            total += *l;
        }
        for l in logits.iter_mut() {
            *l /= total;
        }
        rows.push(logits);
    }
    rows
}

/// Unbiased scaled dot-product attention, written out as loops.
pub fn plain_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::Shape("plain attention shape mismatch".into()));
    }
    let a = plain_weights(q, k);
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for (i, row) in a.iter().enumerate() {
        for c in 0..v.cols() {
            let mut acc = 0.0;
            for (j, w) in row.iter().enumerate() {
                acc += w * v.get(j, c);
            }
            out.set(i, c, acc);
        }
    }
    Ok(out)
}

/// Attention matrix rows of plain attention.
pub fn plain_attention_weights(q: &Matrix, k: &Matrix) -> Vec<Vec<f64>> {
    plain_weights(q, k)
}

/// Gradients of plain attention via the explicit softmax Jacobian
/// `∂a_j/∂s_l = a_j (δ_jl − a_l)`.
pub fn plain_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let a = plain_weights(q, k);
    let (n, m, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let scale = (d as f64).sqrt();
    let mut g_q = Matrix::zeros(n, d);
    let mut g_k = Matrix::zeros(m, d);
    let mut g_v = Matrix::zeros(m, dv);
    for i in 0..n {
        let mut g_a = vec![0.0; m];
        for j in 0..m {
            for c in 0..dv {
                g_a[j] += upstream.get(i, c) * v.get(j, c);
                g_v.set(j, c, g_v.get(j, c) + a[i][j] * upstream.get(i, c));
            }
        }
        for l in 0..m {
            let mut g_s = 0.0;
            for j in 0..m {
                let kron = if j == l { 1.0 } else { 0.0 };
                g_s += g_a[j] * a[i][j] * (kron - a[i][l]);
            }
            for c in 0..d {
                g_q.set(i, c, g_q.get(i, c) + g_s * k.get(l, c) / scale);
                g_k.set(l, c, g_k.get(l, c) + g_s * q.get(i, c) / scale);
            }
        }
    }
    Ok((g_q, g_k, g_v))
}

/// Gradient of `focal_loss` with respect to the logits.
pub fn focal_loss_backward(pred: &ScoreMap, gt: &ScoreMap) -> Result<ScoreMap> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape("focal loss backward shape mismatch".into()));
    }
    let positives = gt.values().iter().filter(|&&g| g == 1.0).count().max(1) as f64;
    let grads = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&z, &g)| {
            let p = sigmoid(z);
            let q = 1.0 - p;
            let d = if g == 1.0 {
                let log_p = -softplus(-z);
                2.0 * p * q * q * log_p - q * q * q
            } else {
                let log_q = -softplus(z);
                -(1.0 - g).powi(4) * (2.0 * p * p * q * log_q - p * p * p)
            };
            d / positives
        })
        .collect();
    ScoreMap::new(pred.width(), pred.height(), grads)
}

/// Reference grouping: an unvectorized double loop over tokens and centers
/// with the same tie and pinning rules as `assign_clusters`.
pub fn brute_force_assign(ts: &TokenSet, centers: &[usize], beta: f64) -> Result<Vec<usize>> {
    if centers.is_empty() || centers.iter().any(|&c| c >= ts.len()) {
        return Err(Error::Index("invalid center list".into()));
    }
    let mut out = Vec::with_capacity(ts.len());
    for i in 0..ts.len() {
        let mut best = 0;
        let mut best_delta = f64::INFINITY;
        for (j, &c) in centers.iter().enumerate() {
            if c == i {
                best = j;
                break;
            }
            let mut feat = 0.0;
            for ch in 0..ts.dim() {
                let diff = ts.feature(i)[ch] - ts.feature(c)[ch];
                feat += diff * diff;
            }
            let du = ts.positions()[i][0] - ts.positions()[c][0];
            let dv = ts.positions()[i][1] - ts.positions()[c][1];
            let delta = feat - beta * (du * du + dv * dv);
            if delta < best_delta {
                best_delta = delta;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Finite-difference check of `merge_backward` on one random cluster.
pub fn check_merge_instance<R: Rng>(
    rng: &mut R,
    size: usize,
    dim: usize,
) -> Result<GradCheckReport> {
    let x = uniform_vec(rng, size * dim, -1.0, 1.0);
    let p = uniform_vec(rng, size, -1.0, 1.0);
    let g_y = uniform_vec(rng, dim, -1.0, 1.0);
    let (gx, gp) = merge_backward(&Matrix::from_vec(size, dim, x.clone())?, &p, &g_y)?;
    let mut params = x;
    params.extend_from_slice(&p);
    let mut analytic = gx.into_vec();
    analytic.extend_from_slice(&gp);
    let f = |theta: &[f64]| {
        let (xs, ps) = theta.split_at(size * dim);
        // Direct evaluation of the weighted mean, read out along g_y.
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for j in 0..size {
            let e = ps[j].exp();
            den += e;
            for c in 0..dim {
                num[c] += e * xs[j * dim + c];
            }
        }
        (0..dim).map(|c| g_y[c] * num[c] / den).sum()
    };
    fd_check("merge_backward", f, &params, &analytic, FD_EPSILON)
}

/// Finite-difference check of `biased_attention_backward` on one random
/// instance with `n` queries, `m` keys and width `d`.
pub fn check_attention_instance<R: Rng>(
    rng: &mut R,
    n: usize,
    m: usize,
    d: usize,
) -> Result<GradCheckReport> {
    let dv = d;
    let q = uniform_vec(rng, n * d, -1.0, 1.0);
    let k = uniform_vec(rng, m * d, -1.0, 1.0);
    let v = uniform_vec(rng, m * dv, -1.0, 1.0);
    let p = uniform_vec(rng, m, -1.0, 1.0);
    let r = Matrix::from_vec(n, dv, uniform_vec(rng, n * dv, -1.0, 1.0))?;
    let grads = biased_attention_backward(
        &Matrix::from_vec(n, d, q.clone())?,
        &Matrix::from_vec(m, d, k.clone())?,
        &Matrix::from_vec(m, dv, v.clone())?,
        &p,
        &r,
    )?;
    let params: Vec<f64> = [q, k, v, p].concat();
    let analytic: Vec<f64> = [
        grads.q.into_vec(),
        grads.k.into_vec(),
        grads.v.into_vec(),
        grads.p,
    ]
    .concat();
    let f = |theta: &[f64]| {
        let (qs, rest) = theta.split_at(n * d);
        let (ks, rest) = rest.split_at(m * d);
        let (vs, ps) = rest.split_at(m * dv);
        let out = biased_attention(
            &Matrix::from_vec(n, d, qs.to_vec()).unwrap(),
            &Matrix::from_vec(m, d, ks.to_vec()).unwrap(),
            &Matrix::from_vec(m, dv, vs.to_vec()).unwrap(),
            ps,
        )
        .unwrap();
        out.as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    fd_check(
        "biased_attention_backward",
        f,
        &params,
        &analytic,
        FD_EPSILON,
    )
}

/// Finite-difference check of `focal_loss_backward` on a random map. Logits
/// lie in `[-1, 2)`, positives are exact ones and negatives lie in `[0, 0.6)`
/// so no partial is small enough to drown in rounding noise.
pub fn check_focal_instance<R: Rng>(
    rng: &mut R,
    width: usize,
    height: usize,
) -> Result<GradCheckReport> {
    let n = width * height;
    let logits = uniform_vec(rng, n, -1.0, 2.0);
    let gt: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                1.0
            } else {
                rng.random_range(0.0..0.6)
            }
        })
        .collect();
    let gt = ScoreMap::new(width, height, gt)?;
    let analytic = focal_loss_backward(&ScoreMap::new(width, height, logits.clone())?, &gt)?;
    let f = |theta: &[f64]| {
        focal_loss(&ScoreMap::new(width, height, theta.to_vec()).unwrap(), &gt).unwrap()
    };
    fd_check(
        "focal_loss_backward",
        f,
        &logits,
        analytic.values(),
        FD_EPSILON,
    )
}

/// Finite-difference check of `merge_clusters` composed with a fixed linear
/// read-out of every merged feature.
pub fn check_merge_clusters_instance<R: Rng>(rng: &mut R) -> Result<GradCheckReport> {
    let (w, h, c) = (4, 3, 3);
    let n = w * h;
    let feats = uniform_vec(rng, n * c, -1.0, 1.0);
    let p = uniform_vec(rng, n, -1.0, 1.0);
    let regions: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let ts = TokenSet::new(
        w,
        h,
        Matrix::from_vec(n, c, feats.clone())?,
        regions.clone(),
    )?;
    let k = 4;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let centers: Vec<usize> = order[..k].to_vec();
    let assignment = assign_clusters(&ts, &centers, 0.0)?;
    let readout = Matrix::from_vec(k, c, uniform_vec(rng, k * c, -1.0, 1.0))?;
    let (gx, gp) = merge_clusters_backward(&ts, &assignment, &p, k, &readout)?;
    let params: Vec<f64> = [feats, p].concat();
    let analytic: Vec<f64> = [gx.into_vec(), gp].concat();
    let f = |theta: &[f64]| {
        let (xs, ps) = theta.split_at(n * c);
        let ts = TokenSet::new(
            w,
            h,
            Matrix::from_vec(n, c, xs.to_vec()).unwrap(),
            regions.clone(),
        )
        .unwrap();
        let (merged, _) = merge_clusters(&ts, &assignment, ps, &centers, 1).unwrap();
        merged
            .features()
            .as_slice()
            .iter()
            .zip(readout.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    fd_check("merge_clusters_readout", f, &params, &analytic, FD_EPSILON)
}

/// Random token set on a `w × h` grid with `n` tokens formed by merging
/// random pixel groups.
pub fn random_token_set<R: Rng>(rng: &mut R, w: usize, h: usize, n: usize, c: usize) -> TokenSet {
    let total = w * h;
    assert!(n >= 1 && n <= total);
    let mut pixels: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        pixels.swap(i, rng.random_range(0..=i));
    }
    let mut regions: Vec<Vec<usize>> = pixels[..n].iter().map(|&p| vec![p]).collect();
    for &p in &pixels[n..] {
        let t = rng.random_range(0..n);
        regions[t].push(p);
    }
    let feats = uniform_vec(rng, n * c, -1.0, 1.0);
    TokenSet::new(w, h, Matrix::from_vec(n, c, feats).unwrap(), regions).unwrap()
}

/// Random distinct center indices.
pub fn random_centers<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.truncate(k);
    idx
}

/// Instances per gradient-bearing operation in the verification suite.
pub const SUITE_INSTANCES: usize = 20;

/// Runs every gradient check and the grouping-oracle comparison, returning
/// one aggregated report per operation.
pub fn verification_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let merge: Vec<_> = (0..SUITE_INSTANCES)
        .map(|_| check_merge_instance(&mut rng, 5, 4))
        .collect::<Result<_>>()?;
    reports.push(merge_reports("merge_backward", &merge));

    let attn: Vec<_> = (0..SUITE_INSTANCES)
        .map(|_| check_attention_instance(&mut rng, 4, 3, 2))
        .collect::<Result<_>>()?;
    reports.push(merge_reports("biased_attention_backward", &attn));

    let focal: Vec<_> = (0..SUITE_INSTANCES)
        .map(|_| check_focal_instance(&mut rng, 6, 6))
        .collect::<Result<_>>()?;
    reports.push(merge_reports("focal_loss_backward", &focal));

    let composed: Vec<_> = (0..SUITE_INSTANCES)
        .map(|_| check_merge_clusters_instance(&mut rng))
        .collect::<Result<_>>()?;
    reports.push(merge_reports("merge_clusters_readout", &composed));

    let mut mismatches = 0usize;
    let mut instances = 0usize;
    for beta in [0.0, 0.05, 0.5] {
        for _ in 0..SUITE_INSTANCES {
            let n = rng.random_range(1..=64);
            let k = rng.random_range(1..=n.min(16));
            let ts = random_token_set(&mut rng, 8, 8, n, 3);
            let centers = random_centers(&mut rng, n, k);
            if assign_clusters(&ts, &centers, beta)? != brute_force_assign(&ts, &centers, beta)? {
                mismatches += 1;
            }
            instances += 1;
        }
    }
    reports.push(GradCheckReport {
        operation: "assign_clusters_vs_brute_force".into(),
        max_relative_error: mismatches as f64 / instances as f64,
        elements: instances,
        epsilon: 0.0,
        pass: mismatches == 0,
    });
    Ok(reports)
}
