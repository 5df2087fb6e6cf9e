//! Training objectives: least-squares adversarial terms, the bridge
//! transport/entropy term, and the spatial and temporal contrastive terms.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::autodiff::{Bound, Var};
use crate::error::{Error, Result};
use crate::networks::FeatureHeads;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sb: f64,
    pub lambda_sc: f64,
    pub lambda_tc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sb: 1.0,
            lambda_sc: 1.0,
            lambda_tc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sb", self.lambda_sb),
            ("lambda_sc", self.lambda_sc),
            ("lambda_tc", self.lambda_tc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tc_temperature: f64,
    /// Shuffled negatives per location for the temporal term.
    pub negatives: usize,
    /// Spatial positions sampled per scale for the temporal term.
    pub tc_locations: usize,
    pub sc_temperature: f64,
    /// Spatial-term positions at 256x256; scaled with image side.
    pub sc_locations: usize,
    pub embed_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self::for_bins(3)
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k)).unwrap_or(usize::MAX)
}

impl ContrastiveConfig {
    pub fn for_bins(bins: usize) -> Self {
        let negatives = match bins {
            0 | 1 => 1,
            3 => 5,
            8 => 20,
            b => factorial(b).saturating_sub(1).min(20),
        };
        Self {
            tc_temperature: 0.11,
            negatives,
            tc_locations: 64,
            sc_temperature: 0.07,
            sc_locations: 256,
            embed_dim: 64,
        }
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if !(self.tc_temperature > 0.0) || !(self.sc_temperature > 0.0) {
            return Err(Error::Config("contrastive temperatures must be positive".into()));
        }
        if self.embed_dim == 0 || self.tc_locations == 0 {
            return Err(Error::Config("embed_dim and tc_locations must be positive".into()));
        }
        if self.sc_locations < 2 {
            return Err(Error::Config("sc_locations must be at least 2".into()));
        }
        if bins >= 2 {
            let avail = factorial(bins) - 1;
            if self.negatives == 0 || self.negatives > avail {
                return Err(Error::Config(format!(
                    "negatives must be in 1..={avail} for {bins} bins, got {}",
                    self.negatives
                )));
            }
        }
        Ok(())
    }

    /// Spatial-term positions for a `size`-pixel square input.
    pub fn sc_locations_for(&self, size: usize) -> usize {
        (self.sc_locations * size / 256).max(2)
    }
}

/// `mean((D(real) - 1)^2) + mean(D(fake)^2)`.
pub fn lsgan_critic_loss<'t>(real_scores: Var<'t>, fake_scores: Var<'t>) -> Var<'t> {
    real_scores
        .add_scalar(-1.0)
        .square()
        .mean()
        .add(fake_scores.square().mean())
}

/// `mean((D(fake) - 1)^2)`.
pub fn lsgan_generator_loss(fake_scores: Var<'_>) -> Var<'_> {
    fake_scores.add_scalar(-1.0).square().mean()
}

/// Transport term `mean((x_t - x1)^2)` plus the entropy surrogate
/// `2 tau (1 - t) |z - z_hat|^2 / d`.
pub fn sb_loss<'t>(x_t: Var<'t>, x1: Var<'t>, z: Var<'t>, z_hat: Var<'t>, t: f64, tau: f64) -> Var<'t> {
    let d = z.shape().iter().product::<usize>() as f64;
    let entropy = z.sub(z_hat).square().sum().scale(2.0 * tau * (1.0 - t) / d);
    x_t.mse(x1).add(entropy)
}

/// `count` distinct flat positions out of `n`, or all of them if fewer.
pub fn sample_positions<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, n, count.min(n)).into_vec()
}

/// `(C, H, W)` features at flat positions `idx`, as `[C, S]`.
fn columns_at<'t>(f: Var<'t>, idx: &[usize]) -> Var<'t> {
    let s = f.shape();
    f.reshape(&[s[0], s[1] * s[2]]).gather_cols(idx)
}

fn row_dots<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let s = a.shape();
    let ones = a.tape().constant(Tensor::full(&[s[1], 1], 1.0));
    a.mul(b).matmul(ones).reshape(&[1, s[0]])
}

/// Mean over rows of `-log softmax` picking the positive, for embeddings
/// `[S, D]` with `negatives` each `[S, D]`.
pub fn info_nce<'t>(query: Var<'t>, positive: Var<'t>, negatives: &[Var<'t>], tau: f64) -> Var<'t> {
    let s = query.shape()[0];
    let mut cols = Vec::with_capacity(negatives.len() + 1);
    cols.push(row_dots(query, positive));
    cols.extend(negatives.iter().map(|&n| row_dots(query, n)));
    let logits = Var::cat0(&cols).transpose().scale(1.0 / tau);
    logits.cross_entropy_rows(&vec![0; s])
}

/// PatchNCE: for each row of `query`, the same row of `keys` is the
/// positive and all other rows are negatives.
pub fn patch_nce<'t>(query: Var<'t>, keys: Var<'t>, tau: f64) -> Var<'t> {
    let s = query.shape()[0];
    let logits = query.matmul(keys.transpose()).scale(1.0 / tau);
    logits.cross_entropy_rows(&(0..s).collect::<Vec<_>>())
}

/// Mean PatchNCE over scales. Keys come from the source-domain encoding
/// and are detached.
pub fn spatial_contrastive_loss<'t, R: Rng + ?Sized>(
    day: &[Var<'t>],
    generated: &[Var<'t>],
    heads: &FeatureHeads,
    p: &Bound<'t, '_>,
    locations: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Var<'t>> {
    if day.len() != generated.len() || day.is_empty() {
        return Err(Error::Shape("spatial term needs matching non-empty scale lists".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for (l, (&f0, &f1)) in day.iter().zip(generated).enumerate() {
        let s = f0.shape();
        if f1.shape() != s {
            return Err(Error::Shape(format!("scale {l}: {s:?} vs {:?}", f1.shape())));
        }
        let n = s[1] * s[2];
        let count = locations.min(n);
        if count < 2 {
            return Err(Error::Config(format!(
                "spatial term needs at least 2 locations, scale {l} offers {count}"
            )));
        }
        let idx = sample_positions(n, count, rng);
        let q = heads.spatial(p, l, columns_at(f1, &idx).transpose());
        let k = heads.spatial(p, l, columns_at(f0, &idx).transpose()).detach();
        let loss = patch_nce(q, k, temperature);
        total = Some(match total {
            Some(t) => t.add(loss),
            None => loss,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / day.len() as f64))
}

/// Lexicographic successor; false once `v` is the last permutation.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// `r` distinct non-identity orderings of `0..bins`, uniform without
/// replacement.
pub fn shuffle_permutations<R: Rng + ?Sized>(bins: usize, r: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let avail = factorial(bins).saturating_sub(1);
    if r > avail || bins == 0 {
        return Err(Error::Config(format!(
            "requested {r} shuffled orderings but only {avail} non-identity permutations of {bins} bins exist"
        )));
    }
    if bins <= 8 {
        let mut all = Vec::with_capacity(avail);
        let mut cur: Vec<usize> = (0..bins).collect();
        while next_permutation(&mut cur) {
            all.push(cur.clone());
        }
        return Ok(sample(rng, avail, r).into_iter().map(|i| all[i].clone()).collect());
    }
    let identity: Vec<usize> = (0..bins).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(r);
    while out.len() < r {
        let mut cand = identity.clone();
        for i in (1..bins).rev() {
            cand.swap(i, rng.random_range(0..=i));
        }
        if cand != identity && seen.insert(cand.clone()) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Reorders the `bins` contiguous channel groups of a `[C, S]` block.
fn reorder_groups<'t>(cols: Var<'t>, perm: &[usize]) -> Var<'t> {
    let cg = cols.shape()[0] / perm.len();
    let parts: Vec<Var<'t>> = perm.iter().map(|&g| cols.narrow0(g * cg, cg)).collect();
    Var::cat0(&parts)
}

/// Outcome of the temporal term, which does not apply to single-bin data.
#[derive(Clone, Copy, Debug)]
pub enum TemporalLoss<'t> {
    Skipped,
    Value(Var<'t>),
}

impl<'t> TemporalLoss<'t> {
    pub fn value(&self) -> Option<Var<'t>> {
        match self {
            TemporalLoss::Skipped => None,
            TemporalLoss::Value(v) => Some(*v),
        }
    }
}

/// Temporally shuffling contrastive term, summed over scales and
/// averaged over the sampled positions of each scale.
#[allow(clippy::too_many_arguments)]
pub fn temporal_contrastive_loss<'t, R: Rng + ?Sized>(
    generated: &[Var<'t>],
    day: &[Var<'t>],
    heads: &FeatureHeads,
    p: &Bound<'t, '_>,
    bins: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<TemporalLoss<'t>> {
    if bins < 2 {
        return Ok(TemporalLoss::Skipped);
    }
    if day.len() != generated.len() || day.is_empty() {
        return Err(Error::Shape("temporal term needs matching non-empty scale lists".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for (l, (&fg, &fd)) in generated.iter().zip(day).enumerate() {
        let s = fg.shape();
        if fd.shape() != s || s[0] % bins != 0 {
            return Err(Error::Shape(format!(
                "scale {l}: shapes {s:?}/{:?} with {bins} bins",
                fd.shape()
            )));
        }
        let perms = shuffle_permutations(bins, cfg.negatives, rng)?;
        let idx = sample_positions(s[1] * s[2], cfg.tc_locations, rng);
        let gen_cols = columns_at(fg, &idx);
        let z = heads.temporal(p, l, gen_cols.transpose());
        let z_pos = heads.temporal(p, l, columns_at(fd, &idx).transpose());
        let z_neg: Vec<Var<'t>> = perms
            .iter()
            .map(|perm| heads.temporal(p, l, reorder_groups(gen_cols, perm).transpose()))
            .collect();
        let loss = info_nce(z, z_pos, &z_neg, cfg.tc_temperature);
        total = Some(match total {
            Some(t) => t.add(loss),
            None => loss,
        });
    }
    Ok(TemporalLoss::Value(total.expect("non-empty")))
}

/// Generator-side loss terms for one iteration.
pub struct LossTerms<'t> {
    pub adv_g: Var<'t>,
    pub sb: Var<'t>,
    pub sc: Var<'t>,
    pub tc: TemporalLoss<'t>,
}

/// Scalar values logged per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub sb: f64,
    pub sc: f64,
    pub tc: Option<f64>,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,t_i,adv_g,adv_d,sb,sc,tc,total";

impl LossBreakdown {
    pub fn csv_row(&self, iteration: usize, t_i: usize) -> String {
        let tc = match self.tc {
            Some(v) => v.to_string(),
            None => "skipped".to_string(),
        };
        format!(
            "{iteration},{t_i},{},{},{},{},{tc},{}",
            self.adv_g, self.adv_d, self.sb, self.sc, self.total
        )
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalAbort {
            component: name.to_string(),
            iteration: None,
        })
    }
}

/// `adv_g + lambda_sb sb + lambda_sc sc + lambda_tc tc`, refusing
/// non-finite components. `adv_d` is carried into the breakdown as logged.
pub fn total_loss<'t>(terms: &LossTerms<'t>, weights: &LossWeights, adv_d: f64) -> Result<(Var<'t>, LossBreakdown)> {
    let adv_g = finite("adv_g", terms.adv_g.item())?;
    let adv_d = finite("adv_d", adv_d)?;
    let sb = finite("sb", terms.sb.item())?;
    let sc = finite("sc", terms.sc.item())?;
    let tc = match terms.tc.value() {
        Some(v) => Some(finite("tc", v.item())?),
        None => None,
    };
    let mut total = terms
        .adv_g
        .add(terms.sb.scale(weights.lambda_sb))
        .add(terms.sc.scale(weights.lambda_sc));
    if let Some(v) = terms.tc.value() {
        total = total.add(v.scale(weights.lambda_tc));
    }
    let total_v = finite("total", total.item())?;
    Ok((
        total,
        LossBreakdown {
            adv_g,
            adv_d,
            sb,
            sc,
            tc,
            total: total_v,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn lsgan_values() {
        let t = Tape::no_grad();
        let ones = t.constant(Tensor::full(&[1, 2, 2], 1.0));
        let zeros = t.constant(Tensor::zeros(&[1, 2, 2]));
        let half = t.constant(Tensor::full(&[1, 2, 2], 0.5));
        assert_eq!(lsgan_critic_loss(ones, zeros).item(), 0.0);
        assert_eq!(lsgan_generator_loss(ones).item(), 0.0);
        assert_eq!(lsgan_critic_loss(half, half).item(), 0.5);
    }

    #[test]
    fn sb_loss_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tape::no_grad();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let z = Tensor::randn(&[8], 1.0, &mut rng);
        let zh = Tensor::randn(&[8], 1.0, &mut rng);
        let same = sb_loss(t.constant(x.clone()), t.constant(x.clone()), t.constant(z.clone()), t.constant(z.clone()), 0.2, 0.01);
        assert_eq!(same.item(), 0.0);
        // At t = 1 only the transport term remains; compare against a direct MSE.
        let at_end = sb_loss(t.constant(x.clone()), t.constant(y.clone()), t.constant(z.clone()), t.constant(zh.clone()), 1.0, 0.5);
        let mse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0;
        assert!((at_end.item() - mse).abs() <= 1e-10);
        let mid = sb_loss(t.constant(x.clone()), t.constant(y), t.constant(z.clone()), t.constant(zh.clone()), 0.4, 0.5);
        let ent: f64 = z.data().iter().zip(zh.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0;
        assert!((mid.item() - mse - 2.0 * 0.5 * 0.6 * ent).abs() <= 1e-10);
    }

    fn basis(rows: &[usize], dim: usize) -> Tensor {
        let mut t = Tensor::zeros(&[rows.len(), dim]);
        for (r, &c) in rows.iter().enumerate() {
            t.data_mut()[r * dim + c] = 1.0;
        }
        t
    }

    #[test]
    fn patch_nce_closed_form_with_orthogonal_negatives() {
        let t = Tape::no_grad();
        let rows: Vec<usize> = (0..256).collect();
        let e = t.constant(basis(&rows, 256));
        let got = patch_nce(e, e, 0.07).item();
        // Off-diagonal logits are zero, so each row sees 255 terms of e^0.
        let want = -((1.0f64 / 0.07).exp() / ((1.0f64 / 0.07).exp() + 255.0)).ln();
        assert!(close(got, want, 1e-9), "{got} vs {want}");
        assert!(close(got, 1.594e-4, 1e-3), "{got}");
        let single = info_nce(t.constant(basis(&[0], 2)), t.constant(basis(&[0], 2)), &[t.constant(basis(&[1], 2))], 0.07).item();
        assert!(close(single, (-1.0f64 / 0.07).exp().ln_1p(), 1e-6));
    }

    #[test]
    fn info_nce_closed_forms() {
        let t = Tape::no_grad();
        let q = t.constant(basis(&[0, 0, 0], 8));
        let negs: Vec<Var> = (1..6).map(|c| t.constant(basis(&[c, c, c], 8))).collect();
        let got = info_nce(q, q, &negs, 0.11).item();
        let e = (1.0f64 / 0.11).exp();
        let want = -(e / (e + 5.0)).ln();
        assert!(close(got, want, 1e-8));
        assert!(close(got, 5.64e-4, 2e-3), "{got}");
        let ortho = t.constant(basis(&[1, 1, 1], 8));
        let got = info_nce(q, ortho, &[q], 0.11).item();
        assert!(close(got, (1.0 + e).ln(), 1e-9));
    }

    #[test]
    fn negative_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tape::no_grad();
        let mk = |rng: &mut ChaCha8Rng| t.constant(Tensor::randn(&[4, 6], 1.0, rng)).l2_normalize_rows(1e-9);
        let q = mk(&mut rng);
        let pos = mk(&mut rng);
        let negs: Vec<Var> = (0..4).map(|_| mk(&mut rng)).collect();
        let mut rev = negs.clone();
        rev.reverse();
        let a = info_nce(q, pos, &negs, 0.1).item();
        let b = info_nce(q, pos, &rev, 0.1).item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn permutation_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p3 = shuffle_permutations(3, 5, &mut rng).unwrap();
        p3.sort();
        assert_eq!(
            p3,
            vec![vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
        );
        assert!(matches!(shuffle_permutations(1, 1, &mut rng), Err(Error::Config(_))));
        match shuffle_permutations(3, 6, &mut rng) {
            Err(Error::Config(m)) => assert!(m.contains('5'), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        let p8 = shuffle_permutations(8, 20, &mut rng).unwrap();
        let set: HashSet<_> = p8.iter().cloned().collect();
        assert_eq!(set.len(), 20);
        assert!(!set.contains(&(0..8).collect::<Vec<_>>()));
    }

    proptest! {
        #[test]
        fn permutations_are_distinct_and_not_identity(bins in 2usize..11, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let avail = factorial(bins) - 1;
            let r = 1 + ((avail.min(50) - 1) as f64 * frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perms = shuffle_permutations(bins, r, &mut rng).unwrap();
            prop_assert_eq!(perms.len(), r);
            let id: Vec<usize> = (0..bins).collect();
            let set: HashSet<_> = perms.iter().cloned().collect();
            prop_assert_eq!(set.len(), r);
            for p in &perms {
                prop_assert!(p != &id);
                let mut s = p.clone();
                s.sort();
                prop_assert_eq!(&s, &id);
            }
        }
    }

    #[test]
    fn total_loss_weights_and_nan() {
        let t = Tape::no_grad();
        let c = |v: f64| t.constant(Tensor::scalar(v));
        let terms = LossTerms {
            adv_g: c(0.5),
            sb: c(0.2),
            sc: c(0.1),
            tc: TemporalLoss::Value(c(0.3)),
        };
        let (v, b) = total_loss(&terms, &LossWeights::default(), 0.7).unwrap();
        assert!((v.item() - 1.1).abs() < 1e-12);
        assert_eq!(b.adv_d, 0.7);
        let zero = LossWeights {
            lambda_sb: 0.0,
            lambda_sc: 0.0,
            lambda_tc: 0.0,
        };
        assert_eq!(total_loss(&terms, &zero, 0.0).unwrap().0.item(), 0.5);
        let skipped = LossTerms { tc: TemporalLoss::Skipped, ..terms };
        let (_, b) = total_loss(&skipped, &LossWeights::default(), 0.0).unwrap();
        assert_eq!(b.tc, None);
        assert!(b.csv_row(3, 1).contains(",skipped,"));
        assert_eq!(b.csv_row(3, 1).split(',').count(), LOSS_CSV_HEADER.split(',').count());
        let bad = LossTerms {
            sb: c(f64::NAN),
            ..skipped
        };
        match total_loss(&bad, &LossWeights::default(), 0.0) {
            Err(Error::NumericalAbort { component, .. }) => assert_eq!(component, "sb"),
            other => panic!("unexpected {:?}", other.map(|x| x.1)),
        }
    }

    #[test]
    fn config_validation() {
        ContrastiveConfig::for_bins(3).validate(3).unwrap();
        ContrastiveConfig::for_bins(8).validate(8).unwrap();
        ContrastiveConfig::for_bins(1).validate(1).unwrap();
        let mut c = ContrastiveConfig::for_bins(3);
        c.negatives = 6;
        assert!(matches!(c.validate(3), Err(Error::Config(_))));
        assert_eq!(ContrastiveConfig::default().sc_locations_for(32), 32);
        let w = LossWeights {
            lambda_tc: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
