use crate::adapter::{refactor_balanced, svd_of_delta, AdapterState, SvdTriple};
use crate::rng::RngStream;
use crate::tensor::{tensor_std, Tensor2D};

use super::{ceil_count, OpError, OperatorParams};

/// Applies `f` to the SVD of every slot's delta and refactors with the balanced split.
fn per_slot_svd(
    parent: &AdapterState,
    rng: &mut RngStream,
    mut f: impl FnMut(SvdTriple, &mut RngStream) -> SvdTriple,
) -> Result<AdapterState, OpError> {
    let mut child = parent.clone();
    for pair in child.slots.values_mut() {
        let triple = svd_of_delta(pair)?;
        *pair = refactor_balanced(&f(triple, rng))?;
    }
    Ok(child)
}

fn gaussian_like(t: &Tensor2D, scale: f32, rng: &mut RngStream) -> Tensor2D {
    let mut out = t.clone();
    if scale == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        *v += scale * rng.normal();
    }
    out
}

fn near_identity_rotation(r: usize, eps: f32, rng: &mut RngStream) -> Tensor2D {
    let m = Tensor2D::from_fn(r, r, |_, _| rng.normal());
    Tensor2D::from_fn(r, r, |i, j| {
        let k = 0.5 * (m.get(i, j) - m.get(j, i));
        let id = if i == j { 1.0 } else { 0.0 };
        id + eps * k
    })
}

/// Spectrum noise then first-order Cayley rotations of both singular bases,
/// re-sorted so the spectrum stays non-increasing.
pub fn m1_perturb_triple(t: SvdTriple, eps: f32, rng: &mut RngStream) -> SvdTriple {
    let r = t.s.len();
    let s: Vec<f32> = t.s.iter().map(|&s| s * (eps * rng.normal()).exp()).collect();
    let rot_u = near_identity_rotation(r, eps, rng);
    let rot_v = near_identity_rotation(r, eps, rng);
    let u = t.u.matmul(&rot_u).expect("r x r rotation");
    let v = t.v.matmul(&rot_v).expect("r x r rotation");
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    SvdTriple {
        u: u.select_cols(&order),
        s: order.iter().map(|&i| s[i]).collect(),
        v: v.select_cols(&order),
    }
}

pub fn m1_svd(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    per_slot_svd(parent, rng, |t, rng| m1_perturb_triple(t, params.m1_eps, rng))
}

pub fn m2_layer_gauss(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    let names: Vec<String> = parent.slots.keys().cloned().collect();
    let count = ceil_count(params.m2_frac, names.len());
    let mut chosen = rng.sample_without_replacement(names.len(), count);
    chosen.sort_unstable();
    let mut child = parent.clone();
    for idx in chosen {
        let pair = child.slots.get_mut(&names[idx]).expect("slot exists");
        let sa = params.m2_eps * tensor_std(&pair.a);
        let sb = params.m2_eps * tensor_std(&pair.b);
        pair.a = gaussian_like(&pair.a, sa, rng);
        pair.b = gaussian_like(&pair.b, sb, rng);
    }
    Ok(child)
}

pub fn m3_component_mask(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    per_slot_svd(parent, rng, |mut t, rng| {
        let k = ceil_count(params.m3_rho, t.s.len());
        for idx in rng.sample_without_replacement(t.s.len(), k) {
            t.s[idx] = 0.0;
        }
        t
    })
}

pub fn m4_full_gauss(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    let mut child = parent.clone();
    for pair in child.slots.values_mut() {
        let sa = params.m4_eps * tensor_std(&pair.a);
        pair.a = gaussian_like(&pair.a, sa, rng);
        let sb = params.m4_eps * tensor_std(&pair.b);
        pair.b = gaussian_like(&pair.b, sb, rng);
    }
    Ok(child)
}

/// Uniform noise on the input factor `A` (`L x d`) bounded by `α / √(L d)`.
pub fn m5_neftune(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    let mut child = parent.clone();
    for pair in child.slots.values_mut() {
        let bound = params.neft_alpha as f64 / ((pair.a.len()) as f64).sqrt();
        for v in pair.a.data_mut() {
            *v += rng.uniform_range(-bound, bound) as f32;
        }
    }
    Ok(child)
}

pub fn m6_rank_perturb(
    parent: &AdapterState,
    params: &OperatorParams,
    rng: &mut RngStream,
) -> Result<AdapterState, OpError> {
    per_slot_svd(parent, rng, |mut t, rng| {
        let r = t.s.len();
        let keep = r.saturating_sub(params.rank_k);
        for (i, s) in t.s.iter_mut().enumerate() {
            if i < keep {
                // N(1, σ) can go negative for large σ; clamp so the split stays real.
                *s = (*s * (1.0 + params.rank_sigma * rng.normal())).max(0.0);
            } else {
                *s = 0.0;
            }
        }
        t
    })
}

pub fn copy_parent(parent: &AdapterState) -> AdapterState {
    parent.clone()
}
