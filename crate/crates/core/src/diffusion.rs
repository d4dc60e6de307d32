//! Masked-region discrete diffusion: forward corruption restricted to
//! masked latent positions, the exact one-step (and multi-step) posterior,
//! the mixture reverse step weighted by a predicted clean-token
//! distribution, and the training losses.
//!
//! Probability-space functions run in f64 and back both inference and the
//! test oracles; the loss builders record the same math on a `Tape` so
//! gradients flow into the denoiser logits.

use std::collections::BTreeMap;

use crate::codec::{LatentMask, TokenGrid};
use crate::error::{Error, Result};
use crate::schedule::{cumulative_column, NoiseSchedule};
use crate::substrate::{sample_categorical, NodeId, Rng, Scalar, Tape};

/// Per-position probability vectors over C (clean-token predictions) or
/// C+1 (fields that can place mass on MASK) classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    pub k: usize,
    pub classes: usize,
    pub includes_mask_class: bool,
    pub probs: Vec<f64>,
}

impl CategoricalField {
    pub fn new(k: usize, classes: usize, includes_mask_class: bool, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != k * classes {
            return Err(Error::dim(format!(
                "field {k}x{classes} needs {} probs, got {}",
                k * classes,
                probs.len()
            )));
        }
        let field = CategoricalField {
            k,
            classes,
            includes_mask_class,
            probs,
        };
        field.check_normalized(1e-5)?;
        Ok(field)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.classes..(k + 1) * self.classes]
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for k in 0..self.k {
            let row = self.row(k);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::contract(format!("position {k}: negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::contract(format!(
                    "position {k}: probabilities sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn one_hot(k: usize, classes: usize, includes_mask_class: bool, hot: &[usize]) -> Self {
        let mut probs = vec![0.0; k * classes];
        for (pos, &h) in hot.iter().enumerate() {
            probs[pos * classes + h] = 1.0;
        }
        CategoricalField {
            k,
            classes,
            includes_mask_class,
            probs,
        }
    }
}

/// Distribution of z_t per position: masked positions follow the cumulative
/// chain from z0, unmasked positions are fixed points (exact one-hot).
pub fn forward_marginal(
    z0: &TokenGrid,
    mask: &LatentMask,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    check_grid(z0, mask, sched)?;
    let c = sched.c();
    let classes = c + 1;
    let mut probs = vec![0.0; z0.k() * classes];
    for (pos, (&id, &m)) in z0.ids.iter().zip(mask.bits.iter()).enumerate() {
        let row = &mut probs[pos * classes..(pos + 1) * classes];
        if m {
            row.copy_from_slice(&cumulative_column(id as usize, t, sched)?);
        } else {
            row[id as usize] = 1.0;
        }
    }
    CategoricalField::new(z0.k(), classes, true, probs)
}

/// Sample z_t. At t = T this equals `apply_mask(z0, mask)` bit-exactly for
/// any rng state because the cumulative column at T is one-hot at MASK.
pub fn forward_sample(
    z0: &TokenGrid,
    mask: &LatentMask,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TokenGrid> {
    check_grid(z0, mask, sched)?;
    let mut ids = Vec::with_capacity(z0.k());
    for (&id, &m) in z0.ids.iter().zip(mask.bits.iter()) {
        if m {
            let col = cumulative_column(id as usize, t, sched)?;
            ids.push(sample_categorical(&col, rng)? as u16);
        } else {
            ids.push(id);
        }
    }
    TokenGrid::new(z0.h, z0.w, z0.c, ids)
}

/// Unnormalized posterior vector over z_{t_lo} for one masked position:
/// num[j] = P(z_{t_hi} = v | z_{t_lo} = j) * P(z_{t_lo} = j | z_0 = z0_id).
/// `t_lo = 0` uses the identity for the second factor. Returns the
/// normalized distribution, or None when v is unreachable from z0_id (the
/// conditional is undefined; mixture callers drop such terms).
fn posterior_vector(
    v: usize,
    z0_id: usize,
    t_hi: usize,
    t_lo: usize,
    sched: &NoiseSchedule,
) -> Option<Vec<f64>> {
    let c = sched.c();
    let (a1, b1, g1) = sched.range_coeffs(t_lo, t_hi);
    let (a0, b0, g0) = if t_lo == 0 {
        (1.0, 0.0, 0.0)
    } else {
        sched.range_coeffs(0, t_lo)
    };
    let mut num = vec![0.0; c + 1];
    if v == c {
        // Masked at t_hi: any z_{t_lo} can absorb with g1; MASK stays MASK.
        for (j, slot) in num.iter_mut().take(c).enumerate() {
            let prior = if j == z0_id { a0 + b0 } else { b0 };
            *slot = g1 * prior;
        }
        num[c] = g0;
    } else {
        // Visible at t_hi: z_{t_lo} must be visible too.
        for (j, slot) in num.iter_mut().take(c).enumerate() {
            let trans = if j == v { a1 + b1 } else { b1 };
            let prior = if j == z0_id { a0 + b0 } else { b0 };
            *slot = trans * prior;
        }
    }
    let norm: f64 = num.iter().sum();
    if norm <= 0.0 {
        return None;
    }
    for p in num.iter_mut() {
        *p /= norm;
    }
    Some(num)
}

/// Exact posterior q(z_{t_lo} | z_{t_hi}, z_0) per position over the jump
/// t_hi -> t_lo (t_lo < t_hi). Unmasked positions are one-hot at z0.
pub fn posterior_jump(
    z_t: &TokenGrid,
    z0: &TokenGrid,
    t_hi: usize,
    t_lo: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    check_grid(z0, mask, sched)?;
    if t_lo >= t_hi || t_hi > sched.t_max() {
        return Err(Error::contract(format!("jump {t_hi}->{t_lo} invalid")));
    }
    check_support(z_t, z0, mask)?;
    let c = sched.c();
    let classes = c + 1;
    let mut probs = vec![0.0; z0.k() * classes];
    for pos in 0..z0.k() {
        let row = &mut probs[pos * classes..(pos + 1) * classes];
        if mask.bits[pos] {
            let v = z_t.ids[pos] as usize;
            let z0_id = z0.ids[pos] as usize;
            let post = posterior_vector(v, z0_id, t_hi, t_lo, sched).ok_or_else(|| {
                Error::contract(format!(
                    "position {pos}: z_t={v} unreachable from z0={z0_id} at t={t_hi}"
                ))
            })?;
            row.copy_from_slice(&post);
        } else {
            row[z0.ids[pos] as usize] = 1.0;
        }
    }
    CategoricalField::new(z0.k(), classes, true, probs)
}

/// One-step posterior q(z_{t-1} | z_t, z_0). At t = 1 this is one-hot at z0.
pub fn posterior(
    z_t: &TokenGrid,
    z0: &TokenGrid,
    t: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    if t < 1 {
        return Err(Error::contract("posterior needs t >= 1"));
    }
    posterior_jump(z_t, z0, t, t - 1, mask, sched)
}

/// Mixture reverse step over a jump: per masked position,
/// sum over clean-token hypotheses of the exact posterior weighted by the
/// predicted p0. Hypotheses that cannot produce the observed z_t are
/// dropped and the mixture renormalized (cannot occur for eta > 0 on
/// in-support states). Unmasked positions remain one-hot.
pub fn reverse_jump_distribution(
    z_t: &TokenGrid,
    p0: &CategoricalField,
    t_hi: usize,
    t_lo: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    let c = sched.c();
    if p0.includes_mask_class || p0.classes != c {
        return Err(Error::contract(
            "p0 must be a C-class field without MASK",
        ));
    }
    if p0.k != z_t.k() {
        return Err(Error::dim("p0/z_t position count mismatch"));
    }
    if t_lo >= t_hi || t_hi > sched.t_max() {
        return Err(Error::contract(format!("jump {t_hi}->{t_lo} invalid")));
    }
    let classes = c + 1;
    let mut probs = vec![0.0; z_t.k() * classes];
    for pos in 0..z_t.k() {
        let row = &mut probs[pos * classes..(pos + 1) * classes];
        if mask.bits[pos] {
            let v = z_t.ids[pos] as usize;
            let weights = p0.row(pos);
            let mut total_weight = 0.0;
            for (z0_hyp, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                if let Some(post) = posterior_vector(v, z0_hyp, t_hi, t_lo, sched) {
                    for (slot, p) in row.iter_mut().zip(post.iter()) {
                        *slot += w * p;
                    }
                    total_weight += w;
                }
            }
            if total_weight <= 0.0 {
                return Err(Error::contract(format!(
                    "position {pos}: no feasible z0 hypothesis for z_t={v}"
                )));
            }
            if total_weight != 1.0 {
                for slot in row.iter_mut() {
                    *slot /= total_weight;
                }
            }
        } else {
            row[z_t.ids[pos] as usize] = 1.0;
        }
    }
    CategoricalField::new(z_t.k(), classes, true, probs)
}

/// One-step mixture reverse distribution p(z_{t-1} | z_t) under predicted p0.
pub fn reverse_step_distribution(
    z_t: &TokenGrid,
    p0: &CategoricalField,
    t: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    if t < 1 {
        return Err(Error::contract("reverse step needs t >= 1"));
    }
    reverse_jump_distribution(z_t, p0, t, t - 1, mask, sched)
}

const KL_FLOOR: f64 = 1e-12;

/// 64-bit loss value on probability fields: at t = 1 the mean masked
/// negative log-likelihood of the true token under p0, otherwise the mean
/// masked KL(posterior || mixture). Backs the oracle tests and evaluation.
pub fn vlb_value(
    p0: &CategoricalField,
    z0: &TokenGrid,
    z_t: &TokenGrid,
    t: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return Ok(0.0);
    }
    if t == 1 {
        let mut total = 0.0;
        for &pos in &masked {
            total += -p0.row(pos)[z0.ids[pos] as usize].max(KL_FLOOR).ln();
        }
        return Ok(total / masked.len() as f64);
    }
    let q = posterior(z_t, z0, t, mask, sched)?;
    let p = reverse_step_distribution(z_t, p0, t, mask, sched)?;
    let mut total = 0.0;
    for &pos in &masked {
        let qr = q.row(pos);
        let pr = p.row(pos);
        let mut kl = 0.0;
        for (&qj, &pj) in qr.iter().zip(pr.iter()) {
            if qj > 0.0 {
                kl += qj * (qj.ln() - pj.max(KL_FLOOR).ln());
            }
        }
        total += kl;
    }
    Ok(total / masked.len() as f64)
}

/// Mean masked NLL of the true tokens under a C-class p0 field.
pub fn nll_from_p0(p0: &CategoricalField, z0: &TokenGrid, mask: &LatentMask) -> f64 {
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &pos in &masked {
        total += -p0.row(pos)[z0.ids[pos] as usize].max(KL_FLOOR).ln();
    }
    total / masked.len() as f64
}

/// Tape-recorded VLB term for training. `p0_logits` is the K x C logits
/// node. Gradients flow through softmax and the mixture matmul; the exact
/// posterior enters as constants.
pub fn vlb_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p0_logits: NodeId,
    z0: &TokenGrid,
    z_t: &TokenGrid,
    t: usize,
    mask: &LatentMask,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let c = sched.c();
    if tape.cols(p0_logits) != c || tape.rows(p0_logits) != z0.k() {
        return Err(Error::dim(format!(
            "logits {}x{} vs K={} C={c}",
            tape.rows(p0_logits),
            tape.cols(p0_logits),
            z0.k()
        )));
    }
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    if t == 1 {
        // Reverse distribution at t=1 is exactly p0, so the reconstruction
        // term is a masked cross-entropy on the logits.
        let rows = tape.gather_rows(p0_logits, &masked);
        let targets: Vec<usize> = masked.iter().map(|&pos| z0.ids[pos] as usize).collect();
        return tape.cross_entropy(rows, &targets);
    }

    check_support(z_t, z0, mask)?;
    let q = posterior(z_t, z0, t, mask, sched)?;

    let gathered = tape.gather_rows(p0_logits, &masked);
    let p0m = tape.softmax_rows(gathered);

    // Group masked positions by their z_t value; each group shares the same
    // per-hypothesis posterior matrix A_v[c][j] = q(z_{t-1}=j | z_t=v, z0=c).
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (row_idx, &pos) in masked.iter().enumerate() {
        groups.entry(z_t.ids[pos]).or_default().push(row_idx);
    }

    let mut entropy_const = 0.0; // sum_k sum_j q ln q
    let mut cross_terms: Vec<NodeId> = Vec::new();
    for (&v, row_idxs) in &groups {
        let mut a_v = vec![0.0f64; c * (c + 1)];
        for hyp in 0..c {
            let post = posterior_vector(v as usize, hyp, t, t - 1, sched).ok_or_else(|| {
                Error::contract(format!("z_t={v} unreachable from hypothesis {hyp} at t={t}"))
            })?;
            a_v[hyp * (c + 1)..(hyp + 1) * (c + 1)].copy_from_slice(&post);
        }
        let a_node = tape.constant_f64(c, c + 1, &a_v);

        let mut q_rows = vec![0.0f64; row_idxs.len() * (c + 1)];
        for (gi, &row_idx) in row_idxs.iter().enumerate() {
            let pos = masked[row_idx];
            let qr = q.row(pos);
            q_rows[gi * (c + 1)..(gi + 1) * (c + 1)].copy_from_slice(qr);
            for &qj in qr {
                if qj > 0.0 {
                    entropy_const += qj * qj.ln();
                }
            }
        }

        let p_g = tape.gather_rows(p0m, row_idxs);
        let mix = tape.matmul(p_g, a_node)?; // rows = mixture over z_{t-1}
        let log_mix = tape.log(mix);
        let q_node = tape.constant_f64(row_idxs.len(), c + 1, &q_rows);
        let weighted = tape.mul(log_mix, q_node)?;
        cross_terms.push(tape.sum_all(weighted));
    }

    // KL = sum q ln q - sum q ln p, averaged over masked positions.
    let mut cross_total = cross_terms[0];
    for &term in &cross_terms[1..] {
        cross_total = tape.add(cross_total, term)?;
    }
    let neg_cross = tape.scale(cross_total, -1.0);
    let h_const = tape.scalar_constant(entropy_const);
    let kl_sum = tape.add(neg_cross, h_const)?;
    Ok(tape.scale(kl_sum, 1.0 / masked.len() as f64))
}

/// Auxiliary clean-token loss: mean cross-entropy over masked positions.
/// Returns the loss node and a flag set when no positions were masked.
pub fn z0_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p0_logits: NodeId,
    z0: &TokenGrid,
    mask: &LatentMask,
) -> Result<(NodeId, bool)> {
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return Ok((tape.scalar_constant(0.0), true));
    }
    let rows = tape.gather_rows(p0_logits, &masked);
    let targets: Vec<usize> = masked.iter().map(|&pos| z0.ids[pos] as usize).collect();
    Ok((tape.cross_entropy(rows, &targets)?, false))
}

/// Total training loss: vlb + lambda * lz0.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    vlb: NodeId,
    lz0: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::contract(format!("lambda {lambda} must be >= 0")));
    }
    let scaled = tape.scale(lz0, lambda);
    tape.add(vlb, scaled)
}

fn check_grid(z0: &TokenGrid, mask: &LatentMask, sched: &NoiseSchedule) -> Result<()> {
    if z0.contains_mask() {
        return Err(Error::contract("z0 must not contain MASK"));
    }
    if z0.h != mask.h || z0.w != mask.w {
        return Err(Error::dim("grid/mask dimension mismatch"));
    }
    if z0.c != sched.c() {
        return Err(Error::dim(format!(
            "grid C={} vs schedule C={}",
            z0.c,
            sched.c()
        )));
    }
    Ok(())
}

fn check_support(z_t: &TokenGrid, z0: &TokenGrid, mask: &LatentMask) -> Result<()> {
    for pos in 0..z0.k() {
        if !mask.bits[pos] && z_t.ids[pos] != z0.ids[pos] {
            return Err(Error::contract(format!(
                "position {pos}: z_t disagrees with z0 on an unmasked position"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::apply_mask;
    use crate::schedule::make_schedule;
    use crate::substrate::Tensor;

    fn setup(c: usize, t_max: usize, eta: f64) -> (TokenGrid, LatentMask, NoiseSchedule) {
        let z0 = TokenGrid::new(2, 2, c, vec![0, 1, (c - 1) as u16, 1]).unwrap();
        let mask = LatentMask {
            h: 2,
            w: 2,
            bits: vec![true, false, true, false],
        };
        let sched = make_schedule(t_max, c, eta).unwrap();
        (z0, mask, sched)
    }

    #[test]
    fn marginal_unmasked_is_one_hot() {
        let (z0, _, sched) = setup(4, 5, 0.05);
        let clear = LatentMask::all_clear(2, 2);
        for t in 1..=5 {
            let f = forward_marginal(&z0, &clear, t, &sched).unwrap();
            for pos in 0..4 {
                let row = f.row(pos);
                assert_eq!(row[z0.ids[pos] as usize], 1.0);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn marginal_masked_at_t_max_is_mask() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let f = forward_marginal(&z0, &mask, 5, &sched).unwrap();
        assert_eq!(f.row(0)[4], 1.0);
        assert_eq!(f.row(2)[4], 1.0);
    }

    #[test]
    fn marginal_rejects_masked_z0() {
        let (_, mask, sched) = setup(4, 5, 0.05);
        let bad = TokenGrid::new(2, 2, 4, vec![0, 4, 1, 1]).unwrap();
        assert!(forward_marginal(&bad, &mask, 1, &sched).is_err());
    }

    #[test]
    fn forward_sample_at_t_max_equals_apply_mask() {
        let (z0, mask, sched) = setup(5, 7, 0.08);
        let zm = apply_mask(&z0, &mask).unwrap();
        for seed in 0..50 {
            let mut rng = Rng::new(seed, 3);
            let zt = forward_sample(&z0, &mask, 7, &sched, &mut rng).unwrap();
            assert_eq!(zt, zm);
        }
    }

    #[test]
    fn forward_sample_identity_when_unmasked() {
        let (z0, _, sched) = setup(5, 7, 0.08);
        let clear = LatentMask::all_clear(2, 2);
        let mut rng = Rng::new(1, 1);
        for t in 1..=7 {
            let zt = forward_sample(&z0, &clear, t, &sched, &mut rng).unwrap();
            assert_eq!(zt, z0);
        }
    }

    #[test]
    fn forward_sample_frequencies_match_marginal() {
        let (z0, mask, sched) = setup(3, 4, 0.1);
        let t = 2;
        let marginal = forward_marginal(&z0, &mask, t, &sched).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; 4];
        let mut rng = Rng::new(99, 0);
        for _ in 0..n {
            let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
            counts[zt.ids[0] as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(marginal.row(0).iter())
            .map(|(&cnt, &p)| (cnt as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn posterior_t1_is_one_hot_at_z0() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let mut rng = Rng::new(5, 0);
        let z1 = forward_sample(&z0, &mask, 1, &sched, &mut rng).unwrap();
        let q = posterior(&z1, &z0, 1, &mask, &sched).unwrap();
        for pos in 0..4 {
            assert_eq!(q.row(pos)[z0.ids[pos] as usize], 1.0);
        }
    }

    #[test]
    fn posterior_structure_eta_zero_at_t_max() {
        // At t=T with z_t=MASK and eta=0 the posterior mixes only MASK (from
        // gamma_bar_{T-1}) and z0 (from alpha_bar_{T-1}).
        let c = 3;
        let t_max = 4;
        let sched = make_schedule(t_max, c, 0.0).unwrap();
        let z0 = TokenGrid::new(1, 1, c, vec![2]).unwrap();
        let mask = LatentMask {
            h: 1,
            w: 1,
            bits: vec![true],
        };
        let zt = apply_mask(&z0, &mask).unwrap();
        let q = posterior(&zt, &z0, t_max, &mask, &sched).unwrap();
        let row = q.row(0);
        let gt = sched.gamma(t_max);
        let expect_z0 = gt * sched.alpha_bar(t_max - 1);
        let expect_mask = sched.gamma_bar(t_max - 1);
        let norm = expect_z0 + expect_mask;
        assert!((row[2] - expect_z0 / norm).abs() < 1e-12);
        assert!((row[3] - expect_mask / norm).abs() < 1e-12);
        assert!(row[0].abs() < 1e-15 && row[1].abs() < 1e-15);
    }

    /// Brute-force path enumeration oracle over all (C+1)^T chains.
    fn enum_posterior(
        v: usize,
        z0_id: usize,
        t: usize,
        t_max: usize,
        sched: &NoiseSchedule,
    ) -> Vec<f64> {
        let c = sched.c();
        let states = c + 1;
        let mut joint = vec![0.0; states]; // P(z_{t-1}=j, z_t=v | z0)
        let mut paths = vec![z0_id];
        // Depth-first over all paths z_1..z_t; weight = product of
        // single-step transition probabilities.
        fn go(
            depth: usize,
            t: usize,
            v: usize,
            weight: f64,
            prev: usize,
            sched: &NoiseSchedule,
            joint: &mut [f64],
            path: &mut Vec<usize>,
        ) {
            let states = sched.c() + 1;
            if depth == t + 1 {
                if path[t] == v {
                    joint[path[t - 1]] += weight;
                }
                return;
            }
            let col = crate::schedule::transition_column(prev, depth, sched).unwrap();
            for next in 0..states {
                if col[next] > 0.0 {
                    path.push(next);
                    go(depth + 1, t, v, weight * col[next], next, sched, joint, path);
                    path.pop();
                }
            }
        }
        let _ = t_max;
        go(1, t, v, 1.0, z0_id, sched, &mut joint, &mut paths);
        let norm: f64 = joint.iter().sum();
        joint.iter().map(|&p| p / norm).collect()
    }

    #[test]
    fn posterior_matches_path_enumeration() {
        for eta in [0.0, 0.1] {
            let c = 3;
            let t_max = 4;
            let sched = make_schedule(t_max, c, eta).unwrap();
            let z0 = TokenGrid::new(1, 1, c, vec![1]).unwrap();
            let mask = LatentMask {
                h: 1,
                w: 1,
                bits: vec![true],
            };
            for t in 2..=t_max {
                for v in 0..=c {
                    // Skip states unreachable at time t.
                    let reach = cumulative_column(1, t, &sched).unwrap();
                    if reach[v] <= 0.0 {
                        continue;
                    }
                    let zt = TokenGrid::new(1, 1, c, vec![v as u16]).unwrap();
                    let q = posterior(&zt, &z0, t, &mask, &sched).unwrap();
                    let oracle = enum_posterior(v, 1, t, t_max, &sched);
                    for j in 0..=c {
                        assert!(
                            (q.row(0)[j] - oracle[j]).abs() < 1e-8,
                            "eta={eta} t={t} v={v} j={j}: {} vs {}",
                            q.row(0)[j],
                            oracle[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn chain_consistency_by_enumeration() {
        // Marginalizing the posterior over the forward z_t distribution
        // reproduces the forward marginal at t-1.
        let c = 4;
        let t_max = 5;
        let sched = make_schedule(t_max, c, 0.07).unwrap();
        let z0 = TokenGrid::new(1, 1, c, vec![2]).unwrap();
        let mask = LatentMask {
            h: 1,
            w: 1,
            bits: vec![true],
        };
        for t in 2..=t_max {
            let pt = forward_marginal(&z0, &mask, t, &sched).unwrap();
            let pt1 = forward_marginal(&z0, &mask, t - 1, &sched).unwrap();
            let mut reconstructed = vec![0.0; c + 1];
            for v in 0..=c {
                let pv = pt.row(0)[v];
                if pv <= 0.0 {
                    continue;
                }
                let zt = TokenGrid::new(1, 1, c, vec![v as u16]).unwrap();
                let q = posterior(&zt, &z0, t, &mask, &sched).unwrap();
                for j in 0..=c {
                    reconstructed[j] += pv * q.row(0)[j];
                }
            }
            for j in 0..=c {
                assert!(
                    (reconstructed[j] - pt1.row(0)[j]).abs() < 1e-10,
                    "t={t} j={j}"
                );
            }
        }
    }

    #[test]
    fn posterior_rejects_support_violation() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let mut bad = apply_mask(&z0, &mask).unwrap();
        bad.ids[1] = 3; // unmasked position diverges from z0
        assert!(posterior(&bad, &z0, 5, &mask, &sched).is_err());
    }

    #[test]
    fn mixture_degenerates_to_posterior_with_one_hot_p0() {
        let (z0, mask, sched) = setup(5, 6, 0.05);
        let mut rng = Rng::new(21, 2);
        for t in 2..=6 {
            let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
            let hots: Vec<usize> = z0.ids.iter().map(|&id| id as usize).collect();
            let p0 = CategoricalField::one_hot(4, 5, false, &hots);
            let mix = reverse_step_distribution(&zt, &p0, t, &mask, &sched).unwrap();
            let q = posterior(&zt, &z0, t, &mask, &sched).unwrap();
            assert_eq!(mix.probs, q.probs, "t={t}");
        }
    }

    #[test]
    fn mixture_uniform_p0_at_t1_is_uniform() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let mut rng = Rng::new(4, 4);
        let z1 = forward_sample(&z0, &mask, 1, &sched, &mut rng).unwrap();
        let p0 = CategoricalField::new(4, 4, false, vec![0.25; 16]).unwrap();
        let mix = reverse_step_distribution(&z1, &p0, 1, &mask, &sched).unwrap();
        for pos in 0..4 {
            let row = mix.row(pos);
            if mask.bits[pos] {
                for j in 0..4 {
                    assert!((row[j] - 0.25).abs() < 1e-12);
                }
                assert!(row[4].abs() < 1e-15);
            } else {
                assert_eq!(row[z0.ids[pos] as usize], 1.0);
            }
        }
    }

    #[test]
    fn mixture_matches_direct_sum_oracle() {
        let (z0, mask, sched) = setup(4, 6, 0.09);
        let mut rng = Rng::new(8, 1);
        let t = 4;
        let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
        // Random normalized p0.
        let mut probs = vec![0.0; 4 * 4];
        for row in probs.chunks_exact_mut(4) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = rng.next_f64() + 1e-3;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let p0 = CategoricalField::new(4, 4, false, probs).unwrap();
        let mix = reverse_step_distribution(&zt, &p0, t, &mask, &sched).unwrap();
        for pos in 0..4 {
            if !mask.bits[pos] {
                continue;
            }
            let mut oracle = vec![0.0; 5];
            for hyp in 0..4 {
                let z0h = TokenGrid::new(2, 2, 4, {
                    let mut ids = z0.ids.clone();
                    ids[pos] = hyp as u16;
                    ids
                })
                .unwrap();
                let q = posterior(&zt, &z0h, t, &mask, &sched).unwrap();
                for j in 0..5 {
                    oracle[j] += p0.row(pos)[hyp] * q.row(pos)[j];
                }
            }
            for j in 0..5 {
                assert!((mix.row(pos)[j] - oracle[j]).abs() < 1e-8, "pos={pos} j={j}");
            }
        }
    }

    #[test]
    fn vlb_value_zero_for_perfect_prediction() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let mut rng = Rng::new(3, 3);
        for t in 2..=5 {
            let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
            let hots: Vec<usize> = z0.ids.iter().map(|&id| id as usize).collect();
            let p0 = CategoricalField::one_hot(4, 4, false, &hots);
            let v = vlb_value(&p0, &z0, &zt, t, &mask, &sched).unwrap();
            assert_eq!(v, 0.0, "KL(p||p) must be exactly zero at t={t}");
        }
    }

    #[test]
    fn vlb_value_t1_is_ln2_for_half_confidence() {
        let (z0, mask, sched) = setup(4, 5, 0.05);
        let mut rng = Rng::new(3, 7);
        let z1 = forward_sample(&z0, &mask, 1, &sched, &mut rng).unwrap();
        let mut probs = vec![0.0; 16];
        for pos in 0..4 {
            for j in 0..4 {
                probs[pos * 4 + j] = if j == z0.ids[pos] as usize {
                    0.5
                } else {
                    0.5 / 3.0
                };
            }
        }
        let p0 = CategoricalField::new(4, 4, false, probs).unwrap();
        let v = vlb_value(&p0, &z0, &z1, 1, &mask, &sched).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tape_vlb_matches_f64_oracle() {
        let (z0, mask, sched) = setup(4, 6, 0.05);
        let mut rng = Rng::new(12, 0);
        for t in 1..=6 {
            let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
            let logits_vals: Vec<f64> = (0..16).map(|_| rng.next_f64() * 4.0 - 2.0).collect();

            let mut tape: Tape<f64> = Tape::new();
            let logits =
                tape.leaf(&Tensor::<f64>::from_f64(vec![4, 4], &logits_vals).unwrap());
            let loss = vlb_loss(&mut tape, logits, &z0, &zt, t, &mask, &sched).unwrap();
            let got = tape.scalar_value(loss);

            // f64 oracle on explicit probabilities.
            let mut probs = vec![0.0; 16];
            for pos in 0..4 {
                let row = &logits_vals[pos * 4..(pos + 1) * 4];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..4 {
                    probs[pos * 4 + j] = exps[j] / sum;
                }
            }
            let p0 = CategoricalField::new(4, 4, false, probs).unwrap();
            let want = vlb_value(&p0, &z0, &zt, t, &mask, &sched).unwrap();
            assert!((got - want).abs() < 1e-6, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn z0_loss_values() {
        let (z0, mask, _) = setup(4, 5, 0.05);
        // Perfect one-hot logits -> ~0 loss; uniform -> ln(C).
        let mut tape: Tape<f64> = Tape::new();
        let mut vals = vec![0.0f64; 16];
        for pos in 0..4 {
            vals[pos * 4 + z0.ids[pos] as usize] = 100.0;
        }
        let sharp = tape.leaf(&Tensor::<f64>::from_f64(vec![4, 4], &vals).unwrap());
        let (l, warned) = z0_loss(&mut tape, sharp, &z0, &mask).unwrap();
        assert!(!warned);
        assert!(tape.scalar_value(l) < 1e-8);

        let uniform = tape.leaf(&Tensor::<f64>::zeros(vec![4, 4]));
        let (l2, _) = z0_loss(&mut tape, uniform, &z0, &mask).unwrap();
        assert!((tape.scalar_value(l2) - 4.0f64.ln()).abs() < 1e-12);

        let clear = LatentMask::all_clear(2, 2);
        let (l3, warned3) = z0_loss(&mut tape, uniform, &z0, &clear).unwrap();
        assert!(warned3);
        assert_eq!(tape.scalar_value(l3), 0.0);
    }

    #[test]
    fn z0_loss_uniform_c64_is_ln64() {
        let z0 = TokenGrid::new(1, 2, 64, vec![5, 9]).unwrap();
        let mask = LatentMask {
            h: 1,
            w: 2,
            bits: vec![true, true],
        };
        let mut tape: Tape<f64> = Tape::new();
        let uniform = tape.leaf(&Tensor::<f64>::zeros(vec![2, 64]));
        let (l, _) = z0_loss(&mut tape, uniform, &z0, &mask).unwrap();
        assert!((tape.scalar_value(l) - 64.0f64.ln()).abs() < 1e-12);
        assert!((64.0f64.ln() - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape: Tape<f64> = Tape::new();
        let vlb = tape.scalar_constant(1.0);
        let lz0 = tape.scalar_constant(2.0);
        let t0 = total_loss(&mut tape, vlb, lz0, 0.0).unwrap();
        assert_eq!(tape.scalar_value(t0), 1.0);
        let t1 = total_loss(&mut tape, vlb, lz0, 0.001).unwrap();
        assert!((tape.scalar_value(t1) - 1.002).abs() < 1e-12);
        assert!(total_loss(&mut tape, vlb, lz0, -1.0).is_err());
    }

    #[test]
    fn total_loss_gradient_is_sum_of_parts() {
        // d(total)/d(logits) == d(vlb)/d(logits) + lambda * d(lz0)/d(logits)
        let (z0, mask, sched) = setup(4, 6, 0.05);
        let mut rng = Rng::new(31, 0);
        let t = 3;
        let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
        let vals: Vec<f64> = (0..16).map(|_| rng.next_f64() - 0.5).collect();
        let lambda = 0.37;

        let grad_of = |which: u8| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let logits = tape.leaf(
                &Tensor::<f64>::from_f64(vec![4, 4], &vals)
                    .unwrap()
                    .requires_grad(),
            );
            let vlb = vlb_loss(&mut tape, logits, &z0, &zt, t, &mask, &sched).unwrap();
            let (lz0, _) = z0_loss(&mut tape, logits, &z0, &mask).unwrap();
            let loss = match which {
                0 => vlb,
                1 => lz0,
                _ => total_loss(&mut tape, vlb, lz0, lambda).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(logits).unwrap().to_vec()
        };
        let gv = grad_of(0);
        let gz = grad_of(1);
        let gt = grad_of(2);
        for i in 0..16 {
            assert!((gt[i] - (gv[i] + lambda * gz[i])).abs() < 1e-12);
        }

        // And the analytic gradient of the total matches finite differences.
        let f = |vals: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let logits = tape.leaf(&Tensor::<f64>::from_f64(vec![4, 4], vals).unwrap());
            let vlb = vlb_loss(&mut tape, logits, &z0, &zt, t, &mask, &sched).unwrap();
            let (lz0, _) = z0_loss(&mut tape, logits, &z0, &mask).unwrap();
            let loss = total_loss(&mut tape, vlb, lz0, lambda).unwrap();
            tape.scalar_value(loss)
        };
        let mut v = vals.clone();
        let h = 1e-5;
        for i in 0..16 {
            let orig = v[i];
            v[i] = orig + h;
            let fp = f(&v);
            v[i] = orig - h;
            let fm = f(&v);
            v[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = gt[i].abs().max(fd.abs()).max(1e-2);
            assert!((gt[i] - fd).abs() / denom < 1e-3, "i={i}");
        }
    }

    #[test]
    fn locality_everywhere() {
        // Unmasked positions are exact fixed points across every op.
        let (z0, mask, sched) = setup(5, 6, 0.05);
        let mut rng = Rng::new(77, 0);
        for t in 1..=6 {
            let f = forward_marginal(&z0, &mask, t, &sched).unwrap();
            let zt = forward_sample(&z0, &mask, t, &sched, &mut rng).unwrap();
            let q = posterior(&zt, &z0, t, &mask, &sched).unwrap();
            let p0 = CategoricalField::new(4, 5, false, vec![0.2; 20]).unwrap();
            let mix = reverse_step_distribution(&zt, &p0, t, &mask, &sched).unwrap();
            for pos in 0..4 {
                if mask.bits[pos] {
                    continue;
                }
                let id = z0.ids[pos] as usize;
                assert_eq!(zt.ids[pos], z0.ids[pos]);
                assert_eq!(f.row(pos)[id], 1.0);
                assert_eq!(q.row(pos)[id], 1.0);
                assert_eq!(mix.row(pos)[id], 1.0);
            }
        }
    }
}
