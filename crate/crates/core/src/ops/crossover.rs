use crate::adapter::{svd_of_delta, AdapterState, FactorPair};
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

use super::{OpError, OperatorParams};

/// Combines the two parents tensor by tensor (A then B per slot).
fn zip_tensors(
    p1: &AdapterState,
    p2: &AdapterState,
    mut f: impl FnMut(&Tensor2D, &Tensor2D) -> Tensor2D,
) -> Result<AdapterState, OpError> {
    p1.check_compatible(p2)?;
    let mut child = p1.clone();
    for (pair, other) in child.slots.values_mut().zip(p2.slots.values()) {
        let a = f(&pair.a, &other.a);
        let b = f(&pair.b, &other.b);
        pair.a = a;
        pair.b = b;
    }
    Ok(child)
}

fn elementwise(x: &Tensor2D, y: &Tensor2D, f: impl Fn(f32, f32) -> f32) -> Tensor2D {
    x.zip_map(y, f).expect("compatible parents")
}

fn dare_process(t: &Tensor2D, p: f64, rng: &mut RngStream) -> Tensor2D {
    if p >= 1.0 {
        return Tensor2D::zeros(t.rows(), t.cols());
    }
    let rescale = (1.0 / (1.0 - p)) as f32;
    let mut out = t.clone();
    for v in out.data_mut() {
        if rng.bernoulli(1.0 - p) {
            *v *= rescale;
        } else {
            *v = 0.0;
        }
    }
    out
}

/// Drop-and-rescale each of the four factors independently, then average.
pub fn x1_dare(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    zip_tensors(p1, p2, |x, y| {
        let dx = dare_process(x, params.dare_p, rng);
        let dy = dare_process(y, params.dare_p, rng);
        elementwise(&dx, &dy, |a, b| (a + b) / 2.0)
    })
}

pub fn x2_layerwise(
    p1: &AdapterState,
    p2: &AdapterState,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    p1.check_compatible(p2)?;
    let mut child = p1.clone();
    for (pair, other) in child.slots.values_mut().zip(p2.slots.values()) {
        if rng.bernoulli(0.5) {
            *pair = other.clone();
        }
    }
    Ok(child)
}

/// Leading `k` singular components from parent 1, trailing `r - k` from parent 2.
pub fn x3_svd_subspace(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    p1.check_compatible(p2)?;
    let mut child = p1.clone();
    for (pair, other) in child.slots.values_mut().zip(p2.slots.values()) {
        let t1 = svd_of_delta(pair)?;
        let t2 = svd_of_delta(other)?;
        let r = t1.s.len();
        let k = match params.x3_k {
            Some(k) => k.min(r),
            // Uniform{1, ..., r-1}; rank 1 has no interior split, so flip a coin.
            None if r > 1 => 1 + rng.below(r - 1),
            None => rng.below(2),
        };
        let pick = |m1: &Tensor2D, m2: &Tensor2D| {
            Tensor2D::from_fn(m1.rows(), r, |i, j| if j < k { m1.get(i, j) } else { m2.get(i, j) })
        };
        let mut u = pick(&t1.u, &t2.u);
        let mut v = pick(&t1.v, &t2.v);
        let s: Vec<f32> = (0..r).map(|j| if j < k { t1.s[j] } else { t2.s[j] }).collect();
        for (j, &sj) in s.iter().enumerate() {
            let root = sj.sqrt();
            u.scale_col(j, root);
            v.scale_col(j, root);
        }
        *pair = FactorPair { a: v.transpose(), b: u };
    }
    Ok(child)
}

/// `(1 - η) p1 + η p2` with a single `η ~ U(η_min, η_max)` per call.
pub fn x4_extrapolative(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    let eta = rng.uniform_range(params.eta_min, params.eta_max) as f32;
    zip_tensors(p1, p2, |x, y| elementwise(x, y, |a, b| (1.0 - eta) * a + eta * b))
}

pub fn x5_linear(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
) -> Result<AdapterState, OpError> {
    let alpha = params.lin_alpha;
    zip_tensors(p1, p2, |x, y| elementwise(x, y, |a, b| alpha * a + (1.0 - alpha) * b))
}

pub fn linear_0_5(p1: &AdapterState, p2: &AdapterState) -> Result<AdapterState, OpError> {
    x5_linear(
        p1,
        p2,
        &OperatorParams {
            lin_alpha: 0.5,
            ..OperatorParams::default()
        },
    )
}

/// Zeroes the `⌊τ n⌋` smallest-magnitude entries (ties broken by index).
fn ties_trim(t: &Tensor2D, tau: f64) -> Tensor2D {
    let n = t.len();
    let m = ((tau * n as f64) + 1e-9).floor() as usize;
    let mut out = t.clone();
    if m == 0 {
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| t.data()[i].abs().total_cmp(&t.data()[j].abs()).then(i.cmp(&j)));
    for &i in idx.iter().take(m.min(n)) {
        out.data_mut()[i] = 0.0;
    }
    out
}

fn sign(v: f32) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

pub fn x6_ties(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
) -> Result<AdapterState, OpError> {
    zip_tensors(p1, p2, |x, y| {
        let tx = ties_trim(x, params.ties_tau);
        let ty = ties_trim(y, params.ties_tau);
        elementwise(&tx, &ty, |a, b| {
            let elected = sign(a + b);
            if elected == 0 {
                return 0.0;
            }
            match (sign(a) == elected, sign(b) == elected) {
                (true, true) => (a + b) / 2.0,
                (true, false) => a,
                (false, true) => b,
                (false, false) => 0.0,
            }
        })
    })
}

fn della_process(t: &Tensor2D, eps: f64, rng: &mut RngStream) -> Tensor2D {
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| t.data()[j].abs().total_cmp(&t.data()[i].abs()).then(i.cmp(&j)));
    let mut out = Tensor2D::zeros(t.rows(), t.cols());
    for (rank, &i) in order.iter().enumerate() {
        let p = if n == 1 {
            eps
        } else {
            eps + (1.0 - eps) * rank as f64 / (n - 1) as f64
        };
        let keep = rng.bernoulli(1.0 - p);
        if keep && p < 1.0 {
            out.data_mut()[i] = (t.data()[i] as f64 / (1.0 - p)) as f32;
        }
    }
    out
}

/// Magnitude-ranked drop probabilities, rescale, average.
pub fn x7_della(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    zip_tensors(p1, p2, |x, y| {
        let dx = della_process(x, params.della_eps, rng);
        let dy = della_process(y, params.della_eps, rng);
        elementwise(&dx, &dy, |a, b| (a + b) / 2.0)
    })
}

fn slerp_tensor(x: &Tensor2D, y: &Tensor2D, t: f64) -> Tensor2D {
    let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        dot += a as f64 * b as f64;
        nx += a as f64 * a as f64;
        ny += b as f64 * b as f64;
    }
    let (nx, ny) = (nx.sqrt(), ny.sqrt());
    let lerp = |a: f32, b: f32| ((1.0 - t) * a as f64 + t * b as f64) as f32;
    if nx < 1e-8 || ny < 1e-8 {
        return elementwise(x, y, lerp);
    }
    let cos = (dot / (nx * ny)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = theta.sin();
    if sin.abs() < 1e-6 {
        return elementwise(x, y, lerp);
    }
    let wa = ((1.0 - t) * theta).sin() / sin;
    let wb = (t * theta).sin() / sin;
    elementwise(x, y, |a, b| (wa * a as f64 + wb * b as f64) as f32)
}

pub fn x8_slerp(
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
) -> Result<AdapterState, OpError> {
    zip_tensors(p1, p2, |x, y| slerp_tensor(x, y, params.slerp_t))
}

/// Squared-magnitude weighted average, `(p1³ + p2³) / (p1² + p2² + 1e-8)`.
pub fn x9_fisher(p1: &AdapterState, p2: &AdapterState) -> Result<AdapterState, OpError> {
    zip_tensors(p1, p2, |x, y| {
        elementwise(x, y, |a, b| {
            let (a, b) = (a as f64, b as f64);
            let (fa, fb) = (a * a, b * b);
            ((fa * a + fb * b) / (fa + fb + 1e-8)) as f32
        })
    })
}
