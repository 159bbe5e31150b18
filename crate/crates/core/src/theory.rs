//! Numerical checks of the contrastive divergence on finite supports.
//!
//! On a support of size `n` the inner maximization reduces to scalar rewards
//! `g ∈ [−1, 1]ⁿ` scaled by `α = |⟨g, p⟩|`, so the divergence is the box
//! maximum of `|⟨g, p⟩|·⟨g, p − q⟩`. [`d_cont_estimate`] returns a certified
//! lower estimate of that maximum; combined with the analytic upper bound
//! `2·tv` this is enough to check the sandwich `0.25·tv ≤ D ≤ 2·tv`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const SUM_TOL: f64 = 1e-12;
/// Tolerance on theorem checks.
pub const CHECK_TOL: f64 = 1e-9;
/// Largest support for which every box vertex is enumerated.
pub const MAX_VERTEX_SUPPORT: usize = 10;
pub const PGA_STEP: f64 = 0.05;
pub const PGA_ITERS: usize = 500;
pub const WITNESS_BETAS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid("distribution over an empty support".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("weights must be non-negative with a positive sum".into()));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let drift = 1.0 - probs.iter().sum::<f64>();
        let last = probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, _)| i)
            .last()
            .expect("positive total");
        probs[last] = (probs[last] + drift).max(0.0);
        Self::new(probs)
    }

    /// Empirical distribution of support indices.
    pub fn empirical(indices: &[usize], n: usize) -> Result<Self> {
        let mut counts = vec![0.0; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Invalid(format!("index {i} outside support of size {n}")));
            }
            counts[i] += 1.0;
        }
        Self::from_weights(&counts)
    }

    /// Flat-Dirichlet draw; each entry is zeroed with probability `sparsity`
    /// (at least one entry stays positive).
    pub fn random<R: Rng + ?Sized>(n: usize, sparsity: f64, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("distribution over an empty support".into()));
        }
        let keep = rng.gen_range(0..n);
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                let w: f64 = rng.sample(Exp1);
                let drop = rng.gen::<f64>() < sparsity;
                if drop && i != keep {
                    0.0
                } else {
                    w.max(f64::MIN_POSITIVE)
                }
            })
            .collect();
        Self::from_weights(&weights)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn same_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Invalid(format!(
            "supports differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_diff(g: &[f64], p: &[f64], q: &[f64]) -> f64 {
    g.iter().zip(p.iter().zip(q)).map(|(g, (p, q))| g * (p - q)).sum()
}

fn objective_unchecked(g: &[f64], p: &[f64], q: &[f64]) -> f64 {
    dot(g, p).abs() * dot_diff(g, p, q)
}

/// `½·Σ|pᵢ − qᵢ|`.
pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let s: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * s).clamp(0.0, 1.0))
}

/// `|⟨g, p⟩|·⟨g, p − q⟩` for `g` in the unit box.
pub fn inner_objective(g: &[f64], p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    if g.len() != p.len() {
        return Err(Error::Invalid(format!(
            "reward has {} entries for a support of {}",
            g.len(),
            p.len()
        )));
    }
    if g.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Invalid("reward entries must lie in [-1, 1]".into()));
    }
    Ok(objective_unchecked(g, &p.probs, &q.probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWitness {
    pub g: Vec<f64>,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub value: f64,
}

impl RewardWitness {
    /// Builds a witness, deriving `alpha` and the objective from `g`.
    pub fn new(
        g: Vec<f64>,
        beta: Option<f64>,
        p: &DiscreteDistribution,
        q: &DiscreteDistribution,
    ) -> Result<Self> {
        let value = inner_objective(&g, p, q)?;
        let alpha = dot(&g, &p.probs).abs();
        Ok(Self {
            g,
            alpha,
            beta,
            value,
        })
    }

    /// Whether `alpha` agrees with `|⟨g, p⟩|` within `SUM_TOL`.
    pub fn alpha_consistent(&self, p: &DiscreteDistribution) -> bool {
        self.g.len() == p.len() && (self.alpha - dot(&self.g, &p.probs).abs()).abs() <= SUM_TOL
    }
}

/// Two-level reward on `S = {p ≥ q}`: `(+1, −β)` when `p(S) ≥ p(Sᶜ)`,
/// otherwise `(+β, −1)`.
pub fn constructive_witness(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    beta: f64,
) -> Result<RewardWitness> {
    same_support(p, q)?;
    if !(0.0..=0.5).contains(&beta) {
        return Err(Error::Invalid(format!("beta {beta} outside [0, 0.5]")));
    }
    let in_s: Vec<bool> = p.probs.iter().zip(&q.probs).map(|(a, b)| a >= b).collect();
    let mass_s: f64 = p.probs.iter().zip(&in_s).filter(|(_, s)| **s).map(|(v, _)| v).sum();
    let (hi, lo) = if mass_s >= 1.0 - mass_s {
        (1.0, -beta)
    } else {
        (beta, -1.0)
    };
    let g = in_s.iter().map(|&s| if s { hi } else { lo }).collect();
    RewardWitness::new(g, Some(beta), p, q)
}

fn objective_gradient(g: &[f64], p: &[f64], q: &[f64], out: &mut [f64]) {
    let gp = dot(g, p);
    let gd = dot_diff(g, p, q);
    let sign = if gp >= 0.0 { 1.0 } else { -1.0 };
    let a = gp.abs();
    for (o, (pi, qi)) in out.iter_mut().zip(p.iter().zip(q)) {
        *o = sign * pi * gd + a * (pi - qi);
    }
}

fn projected_ascent(g: &mut [f64], p: &[f64], q: &[f64]) -> f64 {
    let mut grad = vec![0.0; g.len()];
    let mut best = objective_unchecked(g, p, q);
    for _ in 0..PGA_ITERS {
        objective_gradient(g, p, q, &mut grad);
        for (v, d) in g.iter_mut().zip(&grad) {
            *v = (*v + PGA_STEP * d).clamp(-1.0, 1.0);
        }
        best = best.max(objective_unchecked(g, p, q));
    }
    best
}

fn best_vertex(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len();
    let mut g = vec![0.0; n];
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1u32 << n) {
        for (i, v) in g.iter_mut().enumerate() {
            *v = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        best = best.max(objective_unchecked(&g, p, q));
    }
    best
}

/// Best objective over: every box vertex (`n ≤ 10`), the constructive
/// witnesses, the origin and `restarts` projected-gradient-ascent runs from
/// uniform box points.
pub fn d_cont_estimate(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    restarts: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    same_support(p, q)?;
    if restarts == 0 {
        return Err(Error::Invalid("d_cont_estimate needs at least one restart".into()));
    }
    let (pp, qq) = (&p.probs, &q.probs);
    let mut best = 0.0f64;
    if p.len() <= MAX_VERTEX_SUPPORT {
        best = best.max(best_vertex(pp, qq));
    }
    for beta in WITNESS_BETAS {
        best = best.max(constructive_witness(p, q, beta)?.value);
    }
    let mut g = vec![0.0; p.len()];
    for _ in 0..restarts {
        for v in g.iter_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        best = best.max(projected_ascent(&mut g, pp, qq));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub n: usize,
    pub tv: f64,
    pub d_cont_est: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// Value of the `β = 0.5` witness alone.
    pub witness_value: f64,
    pub witness_ok: bool,
    /// Whether the stronger `0.5·tv` lower bound held (reported, not required).
    pub half_ok: bool,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.lower_ok && self.upper_ok && self.witness_ok
    }
}

pub fn sandwich_check(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    restarts: usize,
    rng: &mut dyn RngCore,
) -> Result<SandwichReport> {
    let tv = tv_distance(p, q)?;
    let est = d_cont_estimate(p, q, restarts, rng)?;
    let witness_value = constructive_witness(p, q, 0.5)?.value;
    Ok(SandwichReport {
        n: p.len(),
        tv,
        d_cont_est: est,
        lower_ok: est >= 0.25 * tv - CHECK_TOL,
        upper_ok: est <= 2.0 * tv + CHECK_TOL,
        witness_value,
        witness_ok: witness_value >= 0.25 * tv - CHECK_TOL,
        half_ok: est >= 0.5 * tv - CHECK_TOL,
    })
}

/// Exact single-negative contrastive loss `softplus((s_n − s_p)/τ)`.
pub fn single_negative_loss(s_p: f64, s_n: f64, tau: f64) -> f64 {
    let z = (s_n - s_p) / tau;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Gradient of [`single_negative_loss`] with respect to `(s_p, s_n)`.
pub fn single_negative_grad(s_p: f64, s_n: f64, tau: f64) -> [f64; 2] {
    let z = (s_n - s_p) / tau;
    let sig = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    [-sig / tau, sig / tau]
}

/// Gradient of the first-order surrogate `(s_n − s_p)/(2τ)`.
pub fn linearized_grad(tau: f64) -> [f64; 2] {
    [-0.5 / tau, 0.5 / tau]
}

/// Max absolute gradient deviation between the exact loss and its
/// linearization at `trials` random points with `s_p = s_n ∈ [−1, 1]`.
pub fn taylor_check(tau: f64, trials: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    let lin = linearized_grad(tau);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let s: f64 = rng.gen_range(-1.0..=1.0);
        let exact = single_negative_grad(s, s, tau);
        for k in 0..2 {
            worst = worst.max((exact[k] - lin[k]).abs());
        }
    }
    Ok(worst)
}

/// One free unit vector per support point.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEncoder {
    rows: Vec<Vec<f64>>,
}

impl TableEncoder {
    pub fn random<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Invalid("table encoder needs a support and a dimension".into()));
        }
        let rows = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                unit(v)
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Embeddings of a batch of support indices as a tensor.
    pub fn embed(&self, indices: &[usize]) -> Result<diffmath::Tensor> {
        let dim = self.rows[0].len();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            let row = self
                .rows
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("index {i} outside the table")))?;
            data.extend_from_slice(row);
        }
        Ok(diffmath::Tensor::matrix(indices.len(), dim, data)?)
    }

    fn means(&self, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = self.rows[0].len();
        let mut e = vec![0.0; dim];
        let mut a = vec![0.0; dim];
        for (row, (pi, qi)) in self.rows.iter().zip(p.iter().zip(q)) {
            for k in 0..dim {
                e[k] += pi * row[k];
                a[k] += qi * row[k];
            }
        }
        (e, a)
    }

    /// Projected gradient ascent of the scaled gap `⟨ē, ē − ā⟩` over the
    /// table rows; returns the final gap.
    pub fn ascend_gap(
        &mut self,
        p: &DiscreteDistribution,
        q: &DiscreteDistribution,
        steps: usize,
        lr: f64,
    ) -> Result<f64> {
        same_support(p, q)?;
        if p.len() != self.rows.len() {
            return Err(Error::Invalid("table and support sizes differ".into()));
        }
        for _ in 0..steps {
            let (e, a) = self.means(&p.probs, &q.probs);
            for (row, (pi, qi)) in self.rows.iter_mut().zip(p.probs.iter().zip(&q.probs)) {
                let grad: Vec<f64> = (0..e.len()).map(|k| pi * (2.0 * e[k] - a[k]) - qi * e[k]).collect();
                let stepped: Vec<f64> = row.iter().zip(&grad).map(|(v, g)| v + lr * g).collect();
                *row = unit(stepped);
            }
        }
        Ok(self.scaled_gap(p, q))
    }

    /// Gap under the unnormalized mean reference, `r(x) = Φ(x)·ē`; this is
    /// the `α`-scaled reward whose maximum is the contrastive divergence.
    pub fn scaled_gap(&self, p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
        let (e, a) = self.means(&p.probs, &q.probs);
        e.iter().zip(&a).map(|(x, y)| x * (x - y)).sum()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    }
}

/// Random pair suite for the sandwich check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteConfig {
    pub pairs: usize,
    pub support_min: usize,
    pub support_max: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            support_min: 2,
            support_max: 8,
            restarts: 32,
            seed: 0,
        }
    }
}

/// Probability that a drawn entry is zeroed, so boundary cases appear.
const SUITE_SPARSITY: f64 = 0.2;

/// Runs the sandwich check on `pairs` random pairs. Pair `i` draws from its
/// own stream of `seed`, so results do not depend on evaluation order.
pub fn sandwich_suite(cfg: &SuiteConfig) -> Result<Vec<SandwichReport>> {
    if cfg.support_min < 1 || cfg.support_min > cfg.support_max {
        return Err(Error::Invalid(format!(
            "support range {}..={} is empty",
            cfg.support_min, cfg.support_max
        )));
    }
    (0..cfg.pairs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let n = rng.gen_range(cfg.support_min..=cfg.support_max);
            let p = DiscreteDistribution::random(n, SUITE_SPARSITY, &mut rng)?;
            let q = DiscreteDistribution::random(n, SUITE_SPARSITY, &mut rng)?;
            sandwich_check(&p, &q, cfg.restarts, &mut rng)
        })
        .collect()
}

pub const SUITE_HEADER: &str = "n,tv,d_cont_est,lower_ok,upper_ok,witness_value,witness_ok,half_ok";

pub fn suite_csv(reports: &[SandwichReport]) -> String {
    let mut s = String::from(SUITE_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n, r.tv, r.d_cont_est, r.lower_ok, r.upper_ok, r.witness_value, r.witness_ok, r.half_ok
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(DiscreteDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![]).is_err());
        let e = DiscreteDistribution::empirical(&[0, 0, 2, 1], 3).unwrap();
        assert_eq!(e.probs(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn tv_examples() {
        let p = dist(&[0.7, 0.3]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), 1.0);
        assert!((tv_distance(&p, &dist(&[0.5, 0.5])).unwrap() - 0.2).abs() < 1e-12);
        assert!(tv_distance(&p, &dist(&[1.0])).is_err());
    }

    #[test]
    fn objective_examples() {
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        assert_eq!(inner_objective(&[0.0, 0.0], &p, &q).unwrap(), 0.0);
        assert_eq!(inner_objective(&[1.0, -1.0], &p, &q).unwrap(), 2.0);
        assert!(inner_objective(&[1.5, 0.0], &p, &q).is_err());
        let g = [0.3, -0.8];
        let a = inner_objective(&g, &p, &q).unwrap();
        let b = inner_objective(&[-0.3, 0.8], &p, &q).unwrap();
        assert!((a + b).abs() < 1e-15);
    }

    #[test]
    fn witness_examples() {
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        let w = constructive_witness(&p, &q, 0.5).unwrap();
        assert_eq!(w.g, vec![1.0, -0.5]);
        assert_eq!(w.alpha, 1.0);
        assert!((w.value - 1.5).abs() < 1e-12);
        assert!(w.alpha_consistent(&p));
        assert_eq!(constructive_witness(&p, &p, 0.5).unwrap().value, 0.0);
        assert!(constructive_witness(&p, &q, 0.7).is_err());
    }

    #[test]
    fn tight_upper_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        let r = sandwich_check(&p, &q, 4, &mut rng).unwrap();
        assert!((r.d_cont_est - 2.0).abs() < 1e-9);
        assert!(r.lower_ok && r.upper_ok);
        let r = sandwich_check(&p, &p, 4, &mut rng).unwrap();
        assert_eq!((r.tv, r.d_cont_est), (0.0, 0.0));
        assert!(r.passed());
    }

    #[test]
    fn estimate_monotone_in_restarts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DiscreteDistribution::random(12, 0.0, &mut rng).unwrap();
        let q = DiscreteDistribution::random(12, 0.0, &mut rng).unwrap();
        let a = d_cont_estimate(&p, &q, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = d_cont_estimate(&p, &q, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn suite_is_deterministic_and_passes() {
        let cfg = SuiteConfig {
            pairs: 50,
            restarts: 4,
            seed: 11,
            ..SuiteConfig::default()
        };
        let a = sandwich_suite(&cfg).unwrap();
        assert!(a.iter().all(SandwichReport::passed));
        assert!(a.iter().all(|r| (2..=8).contains(&r.n)));
        assert_eq!(suite_csv(&a), suite_csv(&sandwich_suite(&cfg).unwrap()));
        let bad = SuiteConfig {
            support_min: 5,
            support_max: 3,
            ..cfg
        };
        assert!(sandwich_suite(&bad).is_err());
    }

    #[test]
    fn taylor_exact_at_equality_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tau in [0.07, 0.5, 1.0] {
            assert!(taylor_check(tau, 100, &mut rng).unwrap() < 1e-9);
        }
        let exact = single_negative_grad(0.9, 0.1, 0.07);
        assert!((exact[0] - linearized_grad(0.07)[0]).abs() > 1.0);
        assert!(taylor_check(0.0, 1, &mut rng).is_err());
        assert!((single_negative_loss(0.2, 0.2, 0.5) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn table_gap_below_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let p = DiscreteDistribution::random(n, 0.2, &mut rng).unwrap();
            let q = DiscreteDistribution::random(n, 0.2, &mut rng).unwrap();
            let mut table = TableEncoder::random(n, 4, &mut rng).unwrap();
            let before = table.scaled_gap(&p, &q);
            let after = table.ascend_gap(&p, &q, 200, 0.5).unwrap();
            let est = d_cont_estimate(&p, &q, 16, &mut rng).unwrap();
            assert!(before <= est + 1e-6 && after <= est + 1e-6);
            let ee = table.embed(&(0..n).collect::<Vec<_>>()).unwrap();
            let weighted = |d: &DiscreteDistribution| {
                let w = diffmath::Tensor::row(d.probs());
                w.matmul(&ee).unwrap()
            };
            let from_pcil = crate::pcil::scaled_al_gap_from_embeddings(&weighted(&p), &weighted(&q))
                .unwrap();
            assert!((from_pcil - after).abs() < 1e-12);
        }
    }
}
