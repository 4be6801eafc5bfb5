//! Shared fixtures and the property suites that both the per-area test files
//! and the acceptance runner execute.

#![allow(dead_code)]

use std::time::Instant;

use arena_core::adapter::{effective_delta, svd_of_delta, AdapterState, FactorPair};
use arena_core::format::{self, FormatError};
use arena_core::ops::{apply_operator, m1_perturb_triple, OperatorId, OperatorParams};
use arena_core::ratings::{
    pfsp_sample, pfsp_weights, predicted_win_prob, std_normal_cdf, std_normal_pdf,
    update_ratings, RatingConfig, RatingState,
};
use arena_core::rl::{factor_gradients, logit_score, masked_softmax, AdvantageBatch, DeltaGrad, RolloutBatch};
use arena_core::rng::RngStream;
use arena_core::tensor::{tensor_std, Tensor2D};

/// Result of one property suite.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn assert(&self, what: &str) {
        assert!(self.pass, "{what}: {}", self.detail);
    }
}

/// Counts named assertions and remembers the failing ones.
#[derive(Default)]
pub struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    pub fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name.into());
        }
    }

    pub fn outcome(self, extra: &str) -> Outcome {
        let pass = self.failed.is_empty();
        let mut detail = format!("{}/{} assertions", self.total - self.failed.len(), self.total);
        if !extra.is_empty() {
            detail.push_str("; ");
            detail.push_str(extra);
        }
        if !pass {
            detail.push_str(&format!("; failed: {}", self.failed.join(", ")));
        }
        Outcome { pass, detail }
    }
}

/// Slots are `(name, d_out, d_in)`; every factor entry is `N(0, std²)`.
pub fn random_adapter(seed: u64, slots: &[(&str, usize, usize)], rank: usize, std: f32) -> AdapterState {
    let mut rng = RngStream::new(seed);
    let mut st = AdapterState::new(rank, 2.0 * rank as f32);
    for &(name, d_out, d_in) in slots {
        let a = Tensor2D::from_fn(rank, d_in, |_, _| std * rng.normal());
        let b = Tensor2D::from_fn(d_out, rank, |_, _| std * rng.normal());
        st = st.with_slot(name, FactorPair::new(a, b).unwrap()).unwrap();
    }
    st
}

pub fn zero_adapter(slots: &[(&str, usize, usize)], rank: usize) -> AdapterState {
    let mut st = AdapterState::new(rank, 2.0 * rank as f32);
    for &(name, d_out, d_in) in slots {
        st = st.with_slot(name, FactorPair::zeros(rank, d_in, d_out)).unwrap();
    }
    st
}

/// Rank-one adapter with a single `1 x 1` slot `w`: `A = [[a]]`, `B = [[b]]`.
pub fn scalar_adapter(a: f32, b: f32) -> AdapterState {
    AdapterState::new(1, 2.0)
        .with_slot(
            "w",
            FactorPair::new(Tensor2D::from_rows(&[&[a]]), Tensor2D::from_rows(&[&[b]])).unwrap(),
        )
        .unwrap()
}

pub fn delta(a: &AdapterState, slot: &str) -> Tensor2D {
    effective_delta(a.slot(slot).unwrap()).unwrap()
}

/// Largest entrywise difference between the effective deltas of two adapters.
pub fn max_delta_diff(x: &AdapterState, y: &AdapterState) -> f32 {
    x.slots
        .keys()
        .map(|k| delta(x, k).max_abs_diff(&delta(y, k)).unwrap())
        .fold(0.0, f32::max)
}

pub fn same_layout(x: &AdapterState, y: &AdapterState) -> bool {
    x.rank == y.rank
        && x.slots.len() == y.slots.len()
        && x.slots.iter().zip(&y.slots).all(|((n1, p1), (n2, p2))| {
            n1 == n2 && p1.a.shape() == p2.a.shape() && p1.b.shape() == p2.b.shape()
        })
}

pub fn op1(id: OperatorId, p: &AdapterState, params: &OperatorParams, seed: u64) -> AdapterState {
    apply_operator(id, &[("p", p)], params, seed).unwrap().adapter
}

pub fn op2(
    id: OperatorId,
    p1: &AdapterState,
    p2: &AdapterState,
    params: &OperatorParams,
    seed: u64,
) -> AdapterState {
    apply_operator(id, &[("p1", p1), ("p2", p2)], params, seed)
        .unwrap()
        .adapter
}

pub fn parents_for(id: OperatorId, p1: &AdapterState, p2: &AdapterState) -> Vec<(&'static str, AdapterState)> {
    if id.arity() == 1 {
        vec![("p1", p1.clone())]
    } else {
        vec![("p1", p1.clone()), ("p2", p2.clone())]
    }
}

pub fn apply_any(id: OperatorId, p1: &AdapterState, p2: &AdapterState, params: &OperatorParams, seed: u64) -> AdapterState {
    let ps = parents_for(id, p1, p2);
    let refs: Vec<(&str, &AdapterState)> = ps.iter().map(|(n, a)| (*n, a)).collect();
    apply_operator(id, &refs, params, seed).unwrap().adapter
}

fn numerical_rank(s: &[f32]) -> usize {
    let max = s.iter().copied().fold(0.0f32, f32::max);
    s.iter().filter(|&&v| v > 1e-6 * max).count()
}

fn tensor_close(x: &Tensor2D, y: &Tensor2D, tol: f32) -> bool {
    x.max_abs_diff(y).map(|d| d <= tol).unwrap_or(false)
}

/// Identity limits, determinism, shape preservation and the worked examples
/// for all seventeen operators.
pub fn operator_suite() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();
    let d = OperatorParams::default;

    // m1_svd
    let p = random_adapter(1, &[("q", 16, 12), ("v", 16, 12)], 4, 0.5);
    let child = op1(OperatorId::M1Svd, &p, &OperatorParams { m1_eps: 0.0, ..d() }, 7);
    c.check("m1 eps=0 keeps the delta", max_delta_diff(&p, &child) < 1e-4);
    let child = op1(OperatorId::M1Svd, &p, &d(), 7);
    c.check("m1 eps=0.1 moves the delta", max_delta_diff(&p, &child) > 0.0);
    let triple = svd_of_delta(p.slot("q").unwrap()).unwrap();
    // Mean max-deviation of UᵀU and VᵀV from I over seeded draws; it scales as eps².
    let mut dev = (0.0f32, 0.0f32);
    for s in 0..200 {
        let big = m1_perturb_triple(triple.clone(), 0.1, &mut RngStream::new(s));
        let small = m1_perturb_triple(triple.clone(), 0.01, &mut RngStream::new(s));
        dev.0 += big.u.orthonormality_error().max(big.v.orthonormality_error()) / 200.0;
        dev.1 += small.u.orthonormality_error().max(small.v.orthonormality_error()) / 200.0;
    }
    c.check("m1 bases near-orthonormal at eps=0.1", dev.0 > 0.0 && dev.0 <= 0.05);
    c.check("m1 orthonormality error shrinks like eps^2", dev.1 <= dev.0 / 50.0);

    // m2_layer_gauss
    let six: Vec<(String, usize, usize)> = (0..6).map(|i| (format!("s{i}"), 8, 8)).collect();
    let six_ref: Vec<(&str, usize, usize)> = six.iter().map(|(n, a, b)| (n.as_str(), *a, *b)).collect();
    let p6 = random_adapter(2, &six_ref, 2, 0.5);
    let child = op1(OperatorId::M2LayerGauss, &p6, &OperatorParams { m2_frac: 0.0, ..d() }, 3);
    c.check("m2 frac=0 is bitwise identity", child.bitwise_eq(&p6));
    let counts_ok = (0..20).all(|s| {
        let ch = op1(OperatorId::M2LayerGauss, &p6, &d(), s);
        let differ = p6
            .slots
            .iter()
            .filter(|(k, v)| !v.bitwise_eq(&ch.slots[*k]))
            .count();
        differ == 2
    });
    c.check("m2 six slots at f=0.33 changes exactly two", counts_ok);
    let z6 = zero_adapter(&six_ref, 2);
    let child = op1(OperatorId::M2LayerGauss, &z6, &OperatorParams { m2_frac: 1.0, ..d() }, 3);
    c.check("m2 zero tensors get zero noise", child.bitwise_eq(&z6));

    // m3_component_mask
    let p10 = random_adapter(3, &[("w", 16, 16)], 10, 0.5);
    let child = op1(OperatorId::M3ComponentMask, &p10, &OperatorParams { m3_rho: 0.0, ..d() }, 4);
    c.check("m3 rho=0 keeps the delta", max_delta_diff(&p10, &child) < 1e-4);
    let child = op1(OperatorId::M3ComponentMask, &p10, &d(), 4);
    let s = svd_of_delta(child.slot("w").unwrap()).unwrap().s;
    let smax = s.iter().copied().fold(0.0f32, f32::max);
    c.check("m3 r=10 rho=0.3 zeroes three values", s.iter().filter(|&&v| v <= 1e-6 * smax).count() == 3);
    c.check("m3 child numerical rank is 7", numerical_rank(&s) == 7);

    // m4_full_gauss
    let big = random_adapter(4, &[("w", 256, 256)], 32, 0.5);
    let child = op1(OperatorId::M4FullGauss, &big, &OperatorParams { m4_eps: 0.0, ..d() }, 5);
    c.check("m4 eps=0 is bitwise identity", child.bitwise_eq(&big));
    let child = op1(OperatorId::M4FullGauss, &big, &d(), 5);
    let (pp, cp) = (big.slot("w").unwrap(), child.slot("w").unwrap());
    for (name, parent_t, child_t) in [("A", &pp.a, &cp.a), ("B", &pp.b, &cp.b)] {
        let resid = child_t.sub(parent_t).unwrap();
        let ratio = tensor_std(&resid) / (0.15 * tensor_std(parent_t));
        c.check(format!("m4 noise std on {name} within 10%"), (0.9..=1.1).contains(&ratio));
    }
    let z = zero_adapter(&[("w", 16, 16)], 4);
    c.check("m4 zero parent gives zero child", op1(OperatorId::M4FullGauss, &z, &d(), 5).bitwise_eq(&z));

    // m5_neftune
    let child = op1(OperatorId::M5Neftune, &big, &d(), 6);
    let cp = child.slot("w").unwrap();
    c.check("m5 leaves B bitwise", cp.b.bitwise_eq(&pp.b));
    let bound = 10.0 / (32.0f32 * 256.0).sqrt();
    let worst = cp.a.max_abs_diff(&pp.a).unwrap();
    c.check("m5 |dA| within alpha/sqrt(Ld)", worst <= bound * (1.0 + 1e-4) && worst > 0.5 * bound);
    let child = op1(OperatorId::M5Neftune, &big, &OperatorParams { neft_alpha: 0.0, ..d() }, 6);
    c.check("m5 alpha=0 is identity", child.bitwise_eq(&big));

    // m6_rank_perturb
    let p8 = random_adapter(5, &[("w", 16, 16)], 8, 0.5);
    let child = op1(OperatorId::M6RankPerturb, &p8, &OperatorParams { rank_k: 0, rank_sigma: 0.0, ..d() }, 8);
    c.check("m6 k=0 sigma=0 keeps the delta", max_delta_diff(&p8, &child) < 1e-4);
    let child = op1(OperatorId::M6RankPerturb, &p8, &d(), 8);
    let s = svd_of_delta(child.slot("w").unwrap()).unwrap().s;
    c.check("m6 k=2 r=8 leaves rank <= 6", numerical_rank(&s) <= 6);
    let child = op1(OperatorId::M6RankPerturb, &p8, &OperatorParams { rank_sigma: 0.0, ..d() }, 8);
    let sp = svd_of_delta(p8.slot("w").unwrap()).unwrap().s;
    let sc = svd_of_delta(child.slot("w").unwrap()).unwrap().s;
    c.check(
        "m6 sigma=0 keeps the top r-k spectrum",
        sp.iter().zip(&sc).take(6).all(|(a, b)| (a - b).abs() < 1e-4),
    );

    // copy_parent
    let mut child = op1(OperatorId::CopyParent, &p, &d(), 0);
    c.check("copy_parent is bitwise", child.bitwise_eq(&p));
    c.check("copy_parent serializes identically", format::encode(&child) == format::encode(&p));
    let before = p.clone();
    child.slot_mut("q").unwrap().a.set(0, 0, 99.0);
    c.check("mutating the copy leaves the parent", p.bitwise_eq(&before));

    // x1_dare
    let q1 = random_adapter(11, &[("w", 8, 8), ("u", 6, 8)], 2, 0.5);
    let q2 = random_adapter(12, &[("w", 8, 8), ("u", 6, 8)], 2, 0.5);
    let child = op2(OperatorId::X1Dare, &q1, &q2, &OperatorParams { dare_p: 0.0, ..d() }, 9);
    let mean_ok = child.slots.iter().all(|(k, pc)| {
        let (a, b) = (&q1.slots[k], &q2.slots[k]);
        pc.a.bitwise_eq(&a.a.zip_map(&b.a, |x, y| (x + y) / 2.0).unwrap())
            && pc.b.bitwise_eq(&a.b.zip_map(&b.b, |x, y| (x + y) / 2.0).unwrap())
    });
    c.check("x1 p=0 is the exact mean", mean_ok);
    let w1 = random_adapter(13, &[("w", 64, 64)], 8, 0.5);
    let w2 = random_adapter(14, &[("w", 64, 64)], 8, 0.5);
    let child = op2(OperatorId::X1Dare, &w1, &w2, &OperatorParams { dare_p: 0.99, ..d() }, 9);
    let (mut zeros, mut total, mut spikes_ok) = (0usize, 0usize, true);
    for (k, pc) in &child.slots {
        for (ct, at, bt) in [(&pc.a, &w1.slots[k].a, &w2.slots[k].a), (&pc.b, &w1.slots[k].b, &w2.slots[k].b)] {
            for ((&v, &x), &y) in ct.data().iter().zip(at.data()).zip(bt.data()) {
                total += 1;
                if v == 0.0 {
                    zeros += 1;
                } else {
                    let near = |t: f32| (v - t).abs() <= 1e-4 * t.abs().max(1e-3);
                    spikes_ok &= near(50.0 * x) || near(50.0 * y) || near(50.0 * (x + y));
                }
            }
        }
    }
    c.check("x1 p=0.99 is mostly zeros", zeros as f64 >= 0.9 * total as f64);
    c.check("x1 p=0.99 survivors are rescaled 100x then averaged", spikes_ok && zeros < total);

    // x2_layerwise
    let r1 = random_adapter(21, &[("a", 6, 6), ("b", 6, 6), ("c", 6, 6), ("d", 6, 6)], 2, 0.5);
    let r2 = random_adapter(22, &[("a", 6, 6), ("b", 6, 6), ("c", 6, 6), ("d", 6, 6)], 2, 0.5);
    c.check("x2 identical parents", op2(OperatorId::X2Layerwise, &r1, &r1, &d(), 1).bitwise_eq(&r1));
    let mut from_p1 = [0usize; 4];
    let mut exact = true;
    for s in 0..1000 {
        let ch = op2(OperatorId::X2Layerwise, &r1, &r2, &d(), s);
        for (i, (k, pc)) in ch.slots.iter().enumerate() {
            let (m1, m2) = (pc.bitwise_eq(&r1.slots[k]), pc.bitwise_eq(&r2.slots[k]));
            exact &= m1 != m2;
            from_p1[i] += m1 as usize;
        }
    }
    c.check("x2 every slot matches exactly one parent", exact);
    c.check(
        "x2 per-slot source frequency 0.5 +- 0.05",
        from_p1.iter().all(|&n| (n as f64 / 1000.0 - 0.5).abs() <= 0.05),
    );

    // x3_svd_subspace
    let t1 = random_adapter(31, &[("w", 10, 12)], 4, 0.5);
    let t2 = random_adapter(32, &[("w", 10, 12)], 4, 0.5);
    let ch = op2(OperatorId::X3SvdSubspace, &t1, &t2, &OperatorParams { x3_k: Some(4), ..d() }, 1);
    c.check("x3 k=r reproduces parent 1", max_delta_diff(&ch, &t1) < 1e-4);
    let ch = op2(OperatorId::X3SvdSubspace, &t1, &t2, &OperatorParams { x3_k: Some(0), ..d() }, 1);
    c.check("x3 k=0 reproduces parent 2", max_delta_diff(&ch, &t2) < 1e-4);
    let ch = op2(OperatorId::X3SvdSubspace, &t1, &t2, &OperatorParams { x3_k: Some(2), ..d() }, 1);
    let (s1, s2) = (svd_of_delta(t1.slot("w").unwrap()).unwrap(), svd_of_delta(t2.slot("w").unwrap()).unwrap());
    let u = Tensor2D::from_fn(10, 4, |i, j| if j < 2 { s1.u.get(i, j) } else { s2.u.get(i, j) });
    let sv: Vec<f32> = (0..4).map(|j| if j < 2 { s1.s[j] } else { s2.s[j] }).collect();
    let expect_b = Tensor2D::from_fn(10, 4, |i, j| u.get(i, j) * sv[j].sqrt());
    c.check("x3 child B is the spliced U scaled by sqrt(S)", tensor_close(&ch.slot("w").unwrap().b, &expect_b, 1e-5));
    c.check("x3 spliced basis is not orthonormal", u.orthonormality_error() > 1e-4);

    // x4_extrapolative
    let eta = |v: f64| OperatorParams { eta_min: v, eta_max: v, ..d() };
    c.check("x4 eta=1 gives parent 2", op2(OperatorId::X4Extrapolative, &q1, &q2, &eta(1.0), 2).bitwise_eq(&q2));
    c.check("x4 eta=0 gives parent 1", op2(OperatorId::X4Extrapolative, &q1, &q2, &eta(0.0), 2).bitwise_eq(&q1));
    let zq = zero_adapter(&[("w", 8, 8), ("u", 6, 8)], 2);
    let ch = op2(OperatorId::X4Extrapolative, &zq, &q2, &eta(1.5), 2);
    let scaled_ok = ch.slots.iter().all(|(k, pc)| {
        tensor_close(&pc.a, &q2.slots[k].a.scale(1.5), 1e-6) && tensor_close(&pc.b, &q2.slots[k].b.scale(1.5), 1e-6)
    });
    c.check("x4 zero parent 1, eta=1.5 gives 1.5 p2", scaled_ok);
    let drawn = (0..100).all(|s| {
        let ch = op2(OperatorId::X4Extrapolative, &zq, &q2, &d(), s);
        let ratio = ch.slot("w").unwrap().a.get(0, 0) / q2.slot("w").unwrap().a.get(0, 0);
        (1.0 - 1e-5..=1.5 + 1e-5).contains(&ratio)
    });
    c.check("x4 default eta lies in [1, 1.5]", drawn);

    // x5_linear and linear_0_5
    let (two, four) = (scalar_adapter(2.0, 2.0), scalar_adapter(4.0, 4.0));
    for id in [OperatorId::X5Linear, OperatorId::Linear05] {
        let ch = op2(id, &two, &four, &d(), 1);
        c.check(format!("{id} [[2]],[[4]] -> [[3]]"), ch.bitwise_eq(&scalar_adapter(3.0, 3.0)));
        c.check(format!("{id} (p, p) -> p"), op2(id, &q1, &q1, &d(), 1).bitwise_eq(&q1));
        c.check(
            format!("{id} is seed independent"),
            format::encode(&op2(id, &q1, &q2, &d(), 1)) == format::encode(&op2(id, &q1, &q2, &d(), 2)),
        );
    }
    let ch = op2(OperatorId::X5Linear, &q1, &q2, &OperatorParams { lin_alpha: 1.0, ..d() }, 1);
    c.check("x5 alpha=1 gives parent 1", ch.bitwise_eq(&q1));
    let ch = op2(OperatorId::Linear05, &q1, &q2, &OperatorParams { lin_alpha: 1.0, ..d() }, 1);
    c.check("linear_0_5 ignores lin_alpha", ch.bitwise_eq(&op2(OperatorId::X5Linear, &q1, &q2, &d(), 1)));

    // x6_ties
    let row = |a: &[f32]| {
        AdapterState::new(1, 2.0)
            .with_slot(
                "w",
                FactorPair::new(Tensor2D::from_rows(&[a]), Tensor2D::from_rows(&[&[1.0]])).unwrap(),
            )
            .unwrap()
    };
    let tau0 = OperatorParams { ties_tau: 0.0, ..d() };
    let ch = op2(OperatorId::X6Ties, &row(&[3.0, 2.0]), &row(&[-1.0, -2.0]), &tau0, 1);
    let a = &ch.slot("w").unwrap().a;
    c.check("x6 +3/-1 elects + and keeps 3", a.get(0, 0) == 3.0);
    c.check("x6 +2/-2 cancels to 0", a.get(0, 1) == 0.0);
    c.check("x6 identical parents", op2(OperatorId::X6Ties, &q1, &q1, &tau0, 1).bitwise_eq(&q1));

    // x7_della
    let dp = random_adapter(41, &[("w", 4, 8)], 2, 1.0);
    let dz = zero_adapter(&[("w", 4, 8)], 2);
    let src = &dp.slot("w").unwrap().a;
    let by_mag = |pick_max: bool| {
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.sort_by(|&i, &j| src.data()[j].abs().total_cmp(&src.data()[i].abs()).then(i.cmp(&j)));
        if pick_max {
            idx[0]
        } else {
            idx[idx.len() - 1]
        }
    };
    let (imax, imin) = (by_mag(true), by_mag(false));
    let mut smallest_dropped = true;
    let mut kept = 0usize;
    for s in 0..10_000 {
        let ch = op2(OperatorId::X7Della, &dp, &dz, &d(), s);
        let a = &ch.slot("w").unwrap().a;
        smallest_dropped &= a.data()[imin] == 0.0;
        kept += (a.data()[imax] != 0.0) as usize;
    }
    c.check("x7 smallest magnitude always dropped", smallest_dropped);
    c.check("x7 largest survives 0.9 +- 0.02", (kept as f64 / 10_000.0 - 0.9).abs() <= 0.02);
    let (one, zero1) = (scalar_adapter(0.9, 0.0), scalar_adapter(0.0, 0.0));
    let mut seen = (false, false);
    let mut single_ok = true;
    for s in 0..200 {
        let v = op2(OperatorId::X7Della, &one, &zero1, &d(), s).slot("w").unwrap().a.get(0, 0);
        if v == 0.0 {
            seen.0 = true;
        } else {
            seen.1 = true;
            single_ok &= (v - 0.5).abs() < 1e-6;
        }
    }
    c.check("x7 single element uses p=eps and rescales", single_ok && seen.0 && seen.1);

    // x8_slerp
    let ch = op2(OperatorId::X8Slerp, &q1, &op1(OperatorId::CopyParent, &q1, &d(), 0), &d(), 1);
    c.check("x8 identical parents", max_delta_diff(&ch, &q1) < 1e-5);
    let q1x2 = {
        let mut t = q1.clone();
        for pair in t.slots.values_mut() {
            pair.a = pair.a.scale(2.0);
            pair.b = pair.b.scale(2.0);
        }
        t
    };
    let ch = op2(OperatorId::X8Slerp, &q1, &q1x2, &d(), 1);
    let lerp_ok = ch.slots.iter().all(|(k, pc)| {
        tensor_close(&pc.a, &q1.slots[k].a.scale(1.5), 1e-5) && tensor_close(&pc.b, &q1.slots[k].b.scale(1.5), 1e-5)
    });
    c.check("x8 parallel parents fall back to lerp", lerp_ok);
    let ch = op2(OperatorId::X8Slerp, &row(&[1.0, 0.0]), &row(&[0.0, 1.0]), &d(), 1);
    let a = &ch.slot("w").unwrap().a;
    let h = std::f32::consts::FRAC_1_SQRT_2;
    c.check("x8 orthogonal unit vectors", (a.get(0, 0) - h).abs() < 1e-6 && (a.get(0, 1) - h).abs() < 1e-6);
    let ch = op2(OperatorId::X8Slerp, &q1, &q2, &OperatorParams { slerp_t: 0.0, ..d() }, 1);
    c.check("x8 t=0 gives parent 1", max_delta_diff(&ch, &q1) < 1e-5);

    // x9_fisher
    let ch = op2(OperatorId::X9Fisher, &scalar_adapter(3.0, 3.0), &scalar_adapter(1.0, 1.0), &d(), 1);
    c.check("x9 3 and 1 -> 2.8", (ch.slot("w").unwrap().a.get(0, 0) - 2.8).abs() < 1e-6);
    let ch = op2(OperatorId::X9Fisher, &q1, &q1, &d(), 1);
    let same = ch.slots.iter().all(|(k, pc)| {
        tensor_close(&pc.a, &q1.slots[k].a, 1e-6) && tensor_close(&pc.b, &q1.slots[k].b, 1e-6)
    });
    c.check("x9 equal parents", same);
    let ch = op2(OperatorId::X9Fisher, &zq, &zq, &d(), 1);
    c.check("x9 zeros stay zero", ch.slots.values().all(|p| p.a.max_abs() == 0.0 && p.b.max_abs() == 0.0));

    // registry
    c.check("apply copy_parent", op1(OperatorId::CopyParent, &q1, &d(), 5).bitwise_eq(&q1));
    c.check("apply x5 (p, p)", op2(OperatorId::X5Linear, &q1, &q1, &d(), 5).bitwise_eq(&q1));
    c.check(
        "apply m4 eps=0",
        op1(OperatorId::M4FullGauss, &q1, &OperatorParams { m4_eps: 0.0, ..d() }, 5).bitwise_eq(&q1),
    );
    c.check(
        "arity mismatch rejected",
        apply_operator(OperatorId::X1Dare, &[("p", &q1)], &d(), 1).is_err()
            && apply_operator(OperatorId::M1Svd, &[("p", &q1), ("q", &q2)], &d(), 1).is_err(),
    );
    c.check("unknown id rejected", "m9_unknown".parse::<OperatorId>().is_err());
    let other = random_adapter(13, &[("w", 8, 8), ("u", 6, 9)], 2, 0.5);
    c.check(
        "shape mismatch rejected",
        apply_operator(OperatorId::X5Linear, &[("a", &q1), ("b", &other)], &d(), 1).is_err(),
    );
    let prov = apply_operator(OperatorId::X1Dare, &[("left", &q1), ("right", &q2)], &d(), 77)
        .unwrap()
        .provenance;
    c.check(
        "provenance records op, seed and parents",
        prov.op == OperatorId::X1Dare && prov.seed == 77 && prov.parents == ["left", "right"],
    );

    // exhaustive shape preservation and determinism split
    let g1 = random_adapter(51, &[("w", 12, 10), ("u", 8, 10)], 4, 0.5);
    let g2 = random_adapter(52, &[("w", 12, 10), ("u", 8, 10)], 4, 0.5);
    for id in OperatorId::ALL {
        let a = apply_any(id, &g1, &g2, &d(), 100);
        let b = apply_any(id, &g1, &g2, &d(), 100);
        c.check(format!("{id} preserves layout"), same_layout(&a, &g1) && a.validate().is_ok());
        c.check(format!("{id} same seed same child"), format::encode(&a) == format::encode(&b));
        let differs = (101..111).any(|s| format::encode(&a) != format::encode(&apply_any(id, &g1, &g2, &d(), s)));
        c.check(format!("{id} seed dependence matches uses_rng"), differs == id.uses_rng());
    }

    // speed: 12 slots, d=256, r=8
    let names: Vec<String> = (0..12).map(|i| format!("layer{i}")).collect();
    let layers: Vec<(&str, usize, usize)> = names.iter().map(|n| (n.as_str(), 256, 256)).collect();
    let s1 = random_adapter(61, &layers, 8, 0.1);
    let s2 = random_adapter(62, &layers, 8, 0.1);
    let mut slowest = (OperatorId::CopyParent, 0.0f64);
    for id in OperatorId::ALL {
        let t = Instant::now();
        let _ = apply_any(id, &s1, &s2, &d(), 3);
        let secs = t.elapsed().as_secs_f64();
        c.check(format!("{id} under 1 s on 12 x 256 x r8"), secs < 1.0);
        if secs > slowest.1 {
            slowest = (id, secs);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    c.check("suite under 30 s", elapsed < 30.0);
    c.outcome(&format!("{elapsed:.1}s, slowest op {} {:.3}s", slowest.0, slowest.1))
}

/// `‖U S Vᵀ − B A‖_max < 1e-4` over random factor pairs with `d ≤ 64`, `r ≤ 8`.
pub fn svd_reconstruction(trials: usize) -> Outcome {
    let mut rng = RngStream::new(0x5fd);
    let mut worst = 0.0f32;
    let mut orth = 0.0f32;
    let mut sorted = true;
    for i in 0..trials {
        let d_in = 1 + rng.below(64);
        let d_out = 1 + rng.below(64);
        let r = 1 + rng.below(8.min(d_in.min(d_out)));
        let a = random_adapter(1000 + i as u64, &[("w", d_out, d_in)], r, 1.0 / (r as f32).sqrt());
        let pair = a.slot("w").unwrap();
        let t = svd_of_delta(pair).unwrap();
        let err = t.reconstruct().max_abs_diff(&effective_delta(pair).unwrap()).unwrap();
        worst = worst.max(err);
        orth = orth.max(t.u.orthonormality_error()).max(t.v.orthonormality_error());
        sorted &= t.s.windows(2).all(|w| w[0] >= w[1]) && t.s.iter().all(|&s| s >= 0.0);
    }
    Outcome {
        pass: worst < 1e-4 && sorted,
        detail: format!("{trials} pairs, max reconstruction error {worst:.2e}, max basis deviation {orth:.2e}"),
    }
}

/// Drop-and-rescale keeps every factor's expectation; the product of
/// averaged factors does not keep the expected delta.
pub fn dare_expectation(seeds: u64) -> Outcome {
    let p = random_adapter(71, &[("w", 16, 16)], 4, 0.5);
    let params = OperatorParams { dare_p: 0.7, ..OperatorParams::default() };
    let pair = p.slot("w").unwrap();
    let (mut sum_a, mut sum_b) = (vec![0.0f64; pair.a.len()], vec![0.0f64; pair.b.len()]);
    for s in 0..seeds {
        let ch = op2(OperatorId::X1Dare, &p, &p, &params, s);
        let cp = ch.slot("w").unwrap();
        for (acc, v) in sum_a.iter_mut().zip(cp.a.data()) {
            *acc += *v as f64;
        }
        for (acc, v) in sum_b.iter_mut().zip(cp.b.data()) {
            *acc += *v as f64;
        }
    }
    // Relative L1 error of the Monte-Carlo mean against the original factor.
    let rel = |sum: &[f64], orig: &Tensor2D| {
        let num: f64 = sum.iter().zip(orig.data()).map(|(s, &o)| (s / seeds as f64 - o as f64).abs()).sum();
        let den: f64 = orig.data().iter().map(|&o| (o as f64).abs()).sum();
        num / den
    };
    let (ea, eb) = (rel(&sum_a, &pair.a), rel(&sum_b, &pair.b));

    // Parents whose deltas cancel in the cross terms: B1 A1 = [1, 0],
    // B2 A2 = [0, -1], but the averaged factors multiply to zero.
    let make = |a: [f32; 2], b: f32| {
        AdapterState::new(1, 2.0)
            .with_slot("w", FactorPair::new(Tensor2D::from_rows(&[&a]), Tensor2D::from_rows(&[&[b]])).unwrap())
            .unwrap()
    };
    let (c1, c2) = (make([1.0, 0.0], 1.0), make([0.0, 1.0], -1.0));
    let target = [0.5f64, -0.5];
    let mut mean_delta = [0.0f64; 2];
    for s in 0..seeds {
        let dl = delta(&op2(OperatorId::X1Dare, &c1, &c2, &params, s), "w");
        mean_delta[0] += dl.get(0, 0) as f64 / seeds as f64;
        mean_delta[1] += dl.get(0, 1) as f64 / seeds as f64;
    }
    let delta_rel = ((mean_delta[0] - target[0]).abs() + (mean_delta[1] - target[1]).abs())
        / (target[0].abs() + target[1].abs());
    let delta_check_fails = delta_rel > 1e-2;
    Outcome {
        pass: ea < 1e-2 && eb < 1e-2 && delta_check_fails,
        detail: format!(
            "{seeds} seeds, factor errors A {ea:.4} B {eb:.4}; delta-level error on constructed parents {delta_rel:.3} (expected to exceed 1e-2)"
        ),
    }
}

/// Three actions, two one-hot contexts, logits `(B A) φ(c)`. REINFORCE over
/// `rollouts` samples against central differences of the exact objective.
pub fn gradient_oracle(rollouts: usize) -> Outcome {
    let started = Instant::now();
    let adapter = random_adapter(81, &[("pi", 3, 2)], 2, 0.8);
    let reward = [[1.0, -0.5, 0.2], [-1.0, 0.7, 0.3]];
    let pair = adapter.slot("pi").unwrap().clone();
    let to64 = |t: &Tensor2D| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (a0, b0) = (to64(&pair.a), to64(&pair.b));

    // Exact objective E_c E_a[r], c uniform.
    let objective = |a: &[f64], b: &[f64]| {
        let mut j = 0.0;
        for (ctx, rewards) in reward.iter().enumerate() {
            // logits_i = Σ_k B[i,k] A[k,ctx]
            let logits: Vec<f64> = (0..3).map(|i| (0..2).map(|k| b[i * 2 + k] * a[k * 2 + ctx]).sum()).collect();
            let p = masked_softmax(&logits, &[true; 3], 1.0);
            j += 0.5 * p.iter().zip(rewards).map(|(p, r)| p * r).sum::<f64>();
        }
        j
    };
    let h = 1e-5;
    let fd = |base: &[f64], is_a: bool| -> Vec<f64> {
        (0..base.len())
            .map(|i| {
                let (mut up, mut dn) = (base.to_vec(), base.to_vec());
                up[i] += h;
                dn[i] -= h;
                let (ju, jd) = if is_a {
                    (objective(&up, &b0), objective(&dn, &b0))
                } else {
                    (objective(&a0, &up), objective(&a0, &dn))
                };
                (ju - jd) / (2.0 * h)
            })
            .collect()
    };
    let (fd_a, fd_b) = (fd(&a0, true), fd(&b0, false));

    let mut rng = RngStream::new(82);
    let per_ctx = rollouts / 2;
    let mut batch = RolloutBatch::default();
    let mut adv = Vec::new();
    for (ctx, rewards) in reward.iter().enumerate() {
        let phi = if ctx == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        let logits: Vec<f64> = (0..3).map(|i| (0..2).map(|k| b0[i * 2 + k] * a0[k * 2 + ctx]).sum()).collect();
        let p = masked_softmax(&logits, &[true; 3], 1.0);
        let (mut rs, mut gs) = (Vec::with_capacity(per_ctx), Vec::with_capacity(per_ctx));
        for _ in 0..per_ctx {
            let act = rng.weighted_index(&p);
            let mut g = DeltaGrad::zeros(3, 2);
            g.add_outer(&logit_score(&p, act, 1.0), &phi);
            rs.push(rewards[act]);
            gs.push([("pi".to_string(), g)].into_iter().collect());
        }
        // Per-context mean baseline keeps the estimator unbiased up to O(1/n).
        let m = rs.iter().sum::<f64>() / rs.len() as f64;
        adv.push(rs.iter().map(|r| r - m).collect::<Vec<f64>>());
        batch.rewards.push(rs);
        batch.grads.push(gs);
    }
    let grads = factor_gradients(&adapter, &batch, &AdvantageBatch { advantages: adv }).unwrap();
    let (ga, gb) = &grads["pi"];
    let est: Vec<f64> = ga.iter().chain(gb).copied().collect();
    let exact: Vec<f64> = fd_a.iter().chain(&fd_b).copied().collect();
    let num: f64 = est.iter().zip(&exact).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = exact.iter().map(|y| y * y).sum::<f64>().sqrt();
    let rel = num / den;
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: rel < 0.02 && secs < 60.0,
        detail: format!("{rollouts} rollouts, relative error {rel:.4}, {secs:.1}s"),
    }
}

/// Reference two-player TrueSkill winner update, written out independently.
pub fn reference_win_delta(mu_w: f64, s_w: f64, mu_l: f64, s_l: f64, beta: f64) -> f64 {
    let c = (2.0 * beta * beta + s_w * s_w + s_l * s_l).sqrt();
    let t = (mu_w - mu_l) / c;
    let v = std_normal_pdf(t) / std_normal_cdf(t);
    s_w * s_w / c * v
}

pub fn trueskill_suite(updates: usize) -> Outcome {
    let mut c = Checks::default();
    let cfg = RatingConfig { tau_dyn: 0.0, ..RatingConfig::default() };
    let prior = cfg.prior();
    let (w, l) = update_ratings(&prior, &prior, &cfg).unwrap();
    let dmu = w.mu - prior.mu;
    let reference = reference_win_delta(25.0, 25.0 / 3.0, 25.0, 25.0 / 3.0, cfg.beta);
    c.check("equal-prior winner gains 4.2 +- 0.05", (dmu - 4.2).abs() <= 0.05);
    c.check("matches the closed form", (dmu - reference).abs() < 1e-9);
    c.check("symmetric at equal priors", ((w.mu - 25.0) + (l.mu - 25.0)).abs() < 1e-12);

    let dflt = RatingConfig::default();
    let mut rng = RngStream::new(91);
    let (mut mono, mut shrink, mut finite) = (true, true, true);
    for _ in 0..updates {
        let a = RatingState { mu: rng.uniform_range(10.0, 40.0), sigma: rng.uniform_range(1.0, 25.0 / 3.0), games: 0 };
        let b = RatingState { mu: rng.uniform_range(10.0, 40.0), sigma: rng.uniform_range(1.0, 25.0 / 3.0), games: 0 };
        let (nw, nl) = update_ratings(&a, &b, &dflt).unwrap();
        mono &= nw.mu > a.mu && nl.mu < b.mu;
        let tau2 = dflt.tau_dyn * dflt.tau_dyn;
        shrink &= nw.sigma < (a.sigma * a.sigma + tau2).sqrt() && nl.sigma < (b.sigma * b.sigma + tau2).sqrt();
        finite &= nw.mu.is_finite() && nl.mu.is_finite();
    }
    c.check(format!("winner up, loser down over {updates} updates"), mono);
    c.check("both sigmas shrink after the dynamics step", shrink);
    c.check("all updates finite", finite);

    // Long sequences, including lopsided ones, never drive sigma to zero.
    let mut pool = [dflt.prior(); 8];
    let mut positive = true;
    for _ in 0..updates {
        let i = rng.below(8);
        let mut j = rng.below(7);
        if j >= i {
            j += 1;
        }
        // Player 0 always wins, so its lead keeps growing.
        let (wi, li) = if j == 0 || (i != 0 && rng.bernoulli(0.5)) { (j, i) } else { (i, j) };
        let (nw, nl) = update_ratings(&pool[wi], &pool[li], &dflt).unwrap();
        pool[wi] = nw;
        pool[li] = nl;
        positive &= nw.sigma > 0.0 && nl.sigma > 0.0 && nw.sigma.is_finite() && nl.sigma.is_finite();
    }
    c.check(format!("sigma stays positive over {updates} sequential updates"), positive);

    let mut fav = prior;
    fav.mu = 45.0;
    let (fw, _) = update_ratings(&fav, &prior, &cfg).unwrap();
    c.check("heavy favourite moves less than an even winner", fw.mu - fav.mu < dmu);
    c.outcome(&format!("equal-prior delta {dmu:.4} (closed form {reference:.4})"))
}

/// PFSP picks against a pool whose predicted win probabilities are 0.5 and 0.99.
pub fn pfsp_frequencies() -> Outcome {
    let mut c = Checks::default();
    let cfg = RatingConfig::default();
    let me = cfg.prior();
    let denom = (2.0 * cfg.beta * cfg.beta + 2.0 * me.sigma * me.sigma).sqrt();
    // Φ(2.326348) = 0.99
    let weak = RatingState { mu: me.mu - 2.326_347_874 * denom, ..me };
    let pool = [me, weak];
    let p = predicted_win_prob(&me, &weak, &cfg);
    c.check("constructed opponent has p = 0.99", (p - 0.99).abs() < 1e-6);
    let w = pfsp_weights(&me, &pool, &cfg);
    let probs = [w[0] / (w[0] + w[1]), w[1] / (w[0] + w[1])];
    c.check("weights 0.25 and 0.0099", (w[0] - 0.25).abs() < 1e-9 && (w[1] - 0.0099).abs() < 1e-6);
    c.check("selection probability 0.962 / 0.038", (probs[0] - 0.962).abs() < 1e-3);
    let mut rng = RngStream::new(5);
    let draws = 100_000;
    let hits = (0..draws).filter(|_| pfsp_sample(&me, &pool, &cfg, &mut rng).unwrap() == 0).count();
    c.check("empirical frequency matches", (hits as f64 / draws as f64 - probs[0]).abs() < 0.005);
    let even = [me; 5];
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[pfsp_sample(&me, &even, &cfg, &mut rng).unwrap()] += 1;
    }
    c.check("equal pool is uniform within 3%", counts.iter().all(|&n| (n as f64 / 10_000.0 - 0.2).abs() <= 0.03));
    c.outcome(&format!("p(0.5) pick rate {:.4}", hits as f64 / draws as f64))
}

/// Random adapters with awkward shapes and special float values.
pub fn random_roundtrip_adapter(rng: &mut RngStream) -> AdapterState {
    let rank = 1 + rng.below(6);
    let slots = 1 + rng.below(4);
    let special = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-40, f32::MAX, -f32::MAX, f32::INFINITY, f32::NAN];
    let mut st = AdapterState::new(rank, rng.uniform_range(0.5, 64.0) as f32);
    for s in 0..slots {
        let d_in = rank + rng.below(20);
        let d_out = rank + rng.below(20);
        let mut draw = |_: usize, _: usize| {
            if rng.bernoulli(0.05) {
                special[rng.below(special.len())]
            } else {
                rng.normal()
            }
        };
        let a = Tensor2D::from_fn(rank, d_in, &mut draw);
        let b = Tensor2D::from_fn(d_out, rank, &mut draw);
        st = st.with_slot(format!("slot.{s}"), FactorPair::new(a, b).unwrap()).unwrap();
    }
    st
}

pub fn adapter_roundtrips(n: usize) -> Outcome {
    let mut rng = RngStream::new(111);
    let dir = tempfile::tempdir().unwrap();
    let mut bad = 0;
    for i in 0..n {
        let a = random_roundtrip_adapter(&mut rng);
        let mem = format::decode(&format::encode(&a)).unwrap();
        let path = dir.path().join(format!("a{}.plra", i % 8));
        format::save_adapter(&a, &path).unwrap();
        let disk = format::load_adapter(&path).unwrap();
        if !(mem.bitwise_eq(&a) && disk.bitwise_eq(&a) && mem.scaling.to_bits() == a.scaling.to_bits()) {
            bad += 1;
        }
    }
    Outcome { pass: bad == 0, detail: format!("{n} round-trips, {bad} mismatches") }
}

/// Every damaged container maps to its own error kind.
pub fn adapter_corruption() -> Outcome {
    let mut c = Checks::default();
    let a = random_adapter(121, &[("w", 6, 5), ("u", 4, 5)], 2, 1.0);
    let good = format::encode(&a);
    let mut magic = good.clone();
    magic[0] = b'X';
    c.check("bad magic", matches!(format::decode(&magic), Err(FormatError::BadMagic(_))));
    let mut version = good.clone();
    version[4] = 9;
    c.check("bad version", matches!(format::decode(&version), Err(FormatError::Version(9))));
    let short = &good[..good.len() - 3];
    c.check("truncated blob", matches!(format::decode(short), Err(FormatError::Truncated { .. })));
    c.check("empty file", matches!(format::decode(&[]), Err(FormatError::Truncated { .. })));
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    c.check("trailing bytes", matches!(format::decode(&long), Err(FormatError::ShapeMismatch(_))));
    let mut garbage = good.clone();
    // The header JSON starts after magic, version and its u64 length.
    garbage[16] = b'#';
    c.check("garbage header", matches!(format::decode(&garbage), Err(FormatError::Header(_))));
    let missing = std::path::Path::new("/nonexistent/dir/adapter.plra");
    c.check("missing file", matches!(format::load_adapter(missing), Err(FormatError::Io(_))));
    c.outcome("")
}

/// A few-step population state, small enough to corrupt in many ways.
pub fn small_checkpoint() -> (arena_core::engine::PopulationState, arena_core::engine::EngineConfig, Vec<u8>) {
    use arena_core::diagnostics::MemorySink;
    use arena_core::engine::{Engine, EngineConfig};
    let cfg = EngineConfig { steps: 3, cvt_cells: 16, cvt_samples: 2000, seed: Some(9), ..EngineConfig::default() };
    let eng = Engine::new(cfg.clone()).unwrap();
    let mut state = eng.init_state().unwrap();
    eng.run(&mut state, &mut MemorySink::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.plck");
    arena_core::engine::save_checkpoint(&state, &cfg, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (state, cfg, bytes)
}

/// Replaces the trailing SHA-256 so a deliberately edited body still passes
/// the checksum and reaches the parser.
pub fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

pub fn checkpoint_corruption() -> Outcome {
    use arena_core::engine::{decode_checkpoint as decode, load_checkpoint, CheckpointError as E};
    let mut c = Checks::default();
    let (state, cfg, good) = small_checkpoint();
    let body = good[..good.len() - 32].to_vec();
    c.check("round trip", decode(&good).is_ok_and(|(s, _)| s.state_hash(&cfg) == state.state_hash(&cfg)));
    c.check("resealed body is accepted", decode(&reseal(body.clone())).is_ok());
    let mut flipped = good.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    c.check("flipped byte", matches!(decode(&flipped), Err(E::Checksum)));
    c.check("truncated file", matches!(decode(&good[..good.len() - 100]), Err(E::Checksum)));
    c.check("short file", matches!(decode(&good[..10]), Err(E::TooShort(10))));
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"PLRA");
    c.check("bad magic", matches!(decode(&magic), Err(E::BadMagic(_))));
    let mut version = body.clone();
    version[4] = 7;
    c.check("bad version", matches!(decode(&reseal(version)), Err(E::Version(7))));
    let mut meta = body.clone();
    meta[16] = b'!';
    c.check("garbled metadata", matches!(decode(&reseal(meta)), Err(E::Meta(_))));
    let cut = reseal(body[..body.len() - 5].to_vec());
    c.check("cut adapter blob", matches!(decode(&cut), Err(E::Truncated(_))));
    let mut extra = body.clone();
    extra.push(0);
    c.check("trailing bytes", matches!(decode(&reseal(extra)), Err(E::Meta(_))));
    // Corrupt the last adapter's magic: its blob is the final bytes of the body.
    let last = &state.students.last().unwrap().adapter;
    let blob_len = format::encode(last).len();
    let mut inner = body.clone();
    let at = inner.len() - blob_len;
    inner[at] = b'Q';
    c.check("bad inner adapter", matches!(decode(&reseal(inner)), Err(E::Adapter(FormatError::BadMagic(_)))));
    c.check(
        "missing file",
        matches!(load_checkpoint(std::path::Path::new("/nonexistent/ck.plck")), Err(E::Io(_))),
    );
    c.outcome("")
}
