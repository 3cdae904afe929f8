//! Exact checks of the objective decomposition on enumerable distributions.
//!
//! For a policy over `K` candidate memories with success probability `s(m)`,
//! the reward-weighted teacher log-likelihood minus `beta * KL(pi || ref)`
//! splits into a success-conditional part, a failure-conditional part and
//! `beta` times the mutual information between memory and outcome.
//! Everything uses natural logarithms.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("no outcomes".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Distribution(format!("entry {i} is {}", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Distribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Distribution(format!("weights sum to {total}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
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

/// `sum p log(p / q)`; terms with `p = 0` contribute nothing.
pub fn kl(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!("sizes {} and {} differ", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.probs.iter().zip(&q.probs).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(Error::Support { index: i, p: a });
        }
        total += a * (a / b).ln();
    }
    Ok(total.max(0.0))
}

pub fn entropy(p: &DiscreteDistribution) -> f64 {
    -p.probs.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Joint distribution over a memory outcome `m` and a binary reward `r`,
/// stored as `[P(m, r = 0), P(m, r = 1)]` per memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    cells: Vec<[f64; 2]>,
}

impl DiscreteJoint {
    pub fn new(cells: Vec<[f64; 2]>) -> Result<Self> {
        DiscreteDistribution::new(cells.iter().flatten().copied().collect())?;
        Ok(Self { cells })
    }

    /// `P(m, r) = pi(m) * P(r | m)` with `P(r = 1 | m) = success[m]`.
    pub fn from_policy(pi: &DiscreteDistribution, success: &[f64]) -> Result<Self> {
        check_success(pi, success)?;
        Ok(Self {
            cells: pi
                .probs
                .iter()
                .zip(success)
                .map(|(&p, &s)| [p * (1.0 - s), p * s])
                .collect(),
        })
    }

    pub fn cells(&self) -> &[[f64; 2]] {
        &self.cells
    }

    pub fn memory_marginal(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c[0] + c[1]).collect()
    }

    pub fn reward_marginal(&self) -> [f64; 2] {
        self.cells.iter().fold([0.0, 0.0], |acc, c| [acc[0] + c[0], acc[1] + c[1]])
    }
}

fn h(xs: impl IntoIterator<Item = f64>) -> f64 {
    -xs.into_iter().filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `I(M; r) = H(M) - H(M | r)`.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let pr = joint.reward_marginal();
    let h_m = h(joint.memory_marginal());
    let h_m_given_r: f64 = (0..2)
        .filter(|&r| pr[r] > 0.0)
        .map(|r| pr[r] * h(joint.cells.iter().map(|c| c[r] / pr[r])))
        .sum();
    (h_m - h_m_given_r).max(0.0)
}

/// `I(M; r) = H(r) - H(r | M)`, the same quantity read the other way.
pub fn mutual_information_via_reward(joint: &DiscreteJoint) -> f64 {
    let h_r = h(joint.reward_marginal());
    let h_r_given_m: f64 = joint
        .cells
        .iter()
        .filter(|c| c[0] + c[1] > 0.0)
        .map(|c| {
            let pm = c[0] + c[1];
            pm * h([c[0] / pm, c[1] / pm])
        })
        .sum();
    (h_r - h_r_given_m).max(0.0)
}

fn check_success(pi: &DiscreteDistribution, success: &[f64]) -> Result<()> {
    if success.len() != pi.len() {
        return Err(Error::Distribution(format!(
            "{} success probabilities for {} outcomes",
            success.len(),
            pi.len()
        )));
    }
    if let Some(i) = success.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Distribution(format!("success probability {i} is {}", success[i])));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremInstance {
    pub pi_theta: DiscreteDistribution,
    pub pi_ref: DiscreteDistribution,
    pub pi_teacher: DiscreteDistribution,
    pub success_prob: Vec<f64>,
    pub beta: f64,
}

/// The conditional policies given the outcome and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditionals {
    pub p_success: f64,
    pub given_success: Option<DiscreteDistribution>,
    pub given_failure: Option<DiscreteDistribution>,
}

impl TheoremInstance {
    pub fn validate(&self) -> Result<()> {
        let k = self.pi_theta.len();
        if self.pi_ref.len() != k || self.pi_teacher.len() != k {
            return Err(Error::Distribution("policies differ in size".into()));
        }
        check_success(&self.pi_theta, &self.success_prob)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be non-negative"));
        }
        for (i, &p) in self.pi_theta.probs.iter().enumerate() {
            if p > 0.0 && (self.pi_ref.probs[i] == 0.0 || self.pi_teacher.probs[i] == 0.0) {
                return Err(Error::Support { index: i, p });
            }
        }
        Ok(())
    }

    pub fn joint(&self) -> Result<DiscreteJoint> {
        DiscreteJoint::from_policy(&self.pi_theta, &self.success_prob)
    }

    /// Bayes conditionals `pi(m | r)`; a conditional on a zero-probability
    /// outcome is `None`.
    pub fn conditionals(&self) -> Result<Conditionals> {
        let joint = self.joint()?;
        let pr = joint.reward_marginal();
        let cond = |r: usize| -> Result<Option<DiscreteDistribution>> {
            if pr[r] <= 0.0 {
                return Ok(None);
            }
            DiscreteDistribution::from_weights(&joint.cells.iter().map(|c| c[r]).collect::<Vec<_>>()).map(Some)
        };
        Ok(Conditionals {
            p_success: pr[1],
            given_success: cond(1)?,
            given_failure: cond(0)?,
        })
    }
}

/// `sum_m pi(m) s(m) log teacher(m) - beta * KL(pi || ref)`.
pub fn objective_lhs(inst: &TheoremInstance) -> Result<f64> {
    inst.validate()?;
    let reward: f64 = inst
        .pi_theta
        .probs
        .iter()
        .zip(&inst.success_prob)
        .zip(&inst.pi_teacher.probs)
        .filter(|((p, s), _)| **p * **s > 0.0)
        .map(|((p, s), t)| p * s * t.ln())
        .sum();
    Ok(reward - inst.beta * kl(&inst.pi_theta, &inst.pi_ref)?)
}

/// `P(r=1) L_succ + P(r=0) L_fail + beta I(M; r)`. The term of an outcome
/// with probability zero is taken as zero.
pub fn objective_rhs(inst: &TheoremInstance) -> Result<f64> {
    inst.validate()?;
    let c = inst.conditionals()?;
    let l_succ = match &c.given_success {
        Some(d) => {
            let ll: f64 = d
                .probs
                .iter()
                .zip(&inst.pi_teacher.probs)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, t)| p * t.ln())
                .sum();
            c.p_success * (ll - inst.beta * kl(d, &inst.pi_ref)?)
        }
        None => 0.0,
    };
    let l_fail = match &c.given_failure {
        Some(d) => (1.0 - c.p_success) * (-inst.beta * kl(d, &inst.pi_ref)?),
        None => 0.0,
    };
    Ok(l_succ + l_fail + inst.beta * mutual_information(&inst.joint()?))
}

/// `|KL(pi || ref) - (sum_r P(r) KL(pi(.|r) || ref) - I)|`.
pub fn kl_chain_residual(inst: &TheoremInstance) -> Result<f64> {
    inst.validate()?;
    let c = inst.conditionals()?;
    let mut expected = 0.0;
    if let Some(d) = &c.given_success {
        expected += c.p_success * kl(d, &inst.pi_ref)?;
    }
    if let Some(d) = &c.given_failure {
        expected += (1.0 - c.p_success) * kl(d, &inst.pi_ref)?;
    }
    expected -= mutual_information(&inst.joint()?);
    Ok((kl(&inst.pi_theta, &inst.pi_ref)? - expected).abs())
}

/// Random instance: Dirichlet(1) policies and uniform success probabilities.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, k: usize, beta: f64) -> Result<TheoremInstance> {
    let dirichlet = |rng: &mut R| {
        let w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
        DiscreteDistribution::from_weights(&w)
    };
    Ok(TheoremInstance {
        pi_theta: dirichlet(rng)?,
        pi_ref: dirichlet(rng)?,
        pi_teacher: dirichlet(rng)?,
        success_prob: (0..k).map(|_| rng.gen::<f64>()).collect(),
        beta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub trials: usize,
    pub max_residual: f64,
    pub max_chain_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Randomized identity suite over `K` in 2..=8 and `beta` in [0, 2], with
/// every tenth instance forced to a degenerate success profile.
pub fn verify_suite<R: Rng + ?Sized>(rng: &mut R, trials: usize, tolerance: f64) -> Result<TheoremReport> {
    let (mut max_residual, mut max_chain) = (0.0f64, 0.0f64);
    for i in 0..trials {
        let k = rng.gen_range(2..=8);
        let beta = rng.gen_range(0.0..=2.0);
        let mut inst = random_instance(rng, k, beta)?;
        match i % 10 {
            3 => inst.success_prob.iter_mut().for_each(|s| *s = 0.0),
            7 => inst.success_prob.iter_mut().for_each(|s| *s = 1.0),
            _ => {}
        }
        max_residual = max_residual.max((objective_lhs(&inst)? - objective_rhs(&inst)?).abs());
        max_chain = max_chain.max(kl_chain_residual(&inst)?);
    }
    Ok(TheoremReport {
        trials,
        max_residual,
        max_chain_residual: max_chain,
        tolerance,
        passed: max_residual < tolerance && max_chain < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    /// Compensated summation, as a higher-precision reference.
    fn neumaier(xs: impl IntoIterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = sum + x;
            c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
            sum = t;
        }
        sum + c
    }

    #[test]
    fn kl_cases() {
        let p = d(&[0.3, 0.7]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!((kl(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(kl(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])), Err(Error::Support { index: 1, .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let inst = random_instance(&mut rng, 8, 0.0).unwrap();
            let (p, q) = (&inst.pi_theta, &inst.pi_ref);
            let oracle = neumaier(p.probs().iter().zip(q.probs()).map(|(a, b)| a * a.ln() - a * b.ln()));
            assert!((kl(p, q).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_distributions() {
        assert!(DiscreteDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(DiscreteDistribution::new(vec![]).is_err());
    }

    #[test]
    fn information_cases() {
        let indep = DiscreteJoint::from_policy(&d(&[0.2, 0.3, 0.5]), &[0.4, 0.4, 0.4]).unwrap();
        assert!(mutual_information(&indep).abs() < 1e-12);
        let functional = DiscreteJoint::from_policy(&d(&[0.5, 0.5]), &[1.0, 0.0]).unwrap();
        assert!((mutual_information(&functional) - 2f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let k = rng.gen_range(2..=8);
            let inst = random_instance(&mut rng, k, 1.0).unwrap();
            let j = inst.joint().unwrap();
            let a = mutual_information(&j);
            assert!(a >= 0.0);
            assert!((a - mutual_information_via_reward(&j)).abs() < 1e-12);
            assert!(entropy(&inst.pi_theta) >= 0.0);
        }
    }

    #[test]
    fn lhs_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inst = random_instance(&mut rng, 5, 0.0).unwrap();
        inst.success_prob = vec![0.0; 5];
        assert_eq!(objective_lhs(&inst).unwrap(), 0.0);
        inst.success_prob = vec![1.0; 5];
        let neg_ce: f64 = inst
            .pi_theta
            .probs()
            .iter()
            .zip(inst.pi_teacher.probs())
            .map(|(p, t)| p * t.ln())
            .sum();
        assert!((objective_lhs(&inst).unwrap() - neg_ce).abs() < 1e-12);
    }

    #[test]
    fn lhs_matches_joint_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let beta = rng.gen_range(0.0..2.0);
            let inst = random_instance(&mut rng, 6, beta).unwrap();
            let j = inst.joint().unwrap();
            // Enumerate (m, r) pairs: reward is r * log teacher(m).
            let reward: f64 = j
                .cells()
                .iter()
                .zip(inst.pi_teacher.probs())
                .map(|(c, t)| c[0] * 0.0 + c[1] * t.ln())
                .sum();
            let expect = reward - inst.beta * kl(&inst.pi_theta, &inst.pi_ref).unwrap();
            assert!((objective_lhs(&inst).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_success_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inst = random_instance(&mut rng, 4, 0.7).unwrap();
        inst.success_prob = vec![0.3; 4];
        let c = inst.conditionals().unwrap();
        for (a, b) in c.given_success.unwrap().probs().iter().zip(inst.pi_theta.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(mutual_information(&inst.joint().unwrap()).abs() < 1e-12);
        let ell: f64 = inst.pi_theta.probs().iter().zip(inst.pi_teacher.probs()).map(|(p, t)| p * t.ln()).sum();
        let expect = 0.3 * ell - 0.7 * kl(&inst.pi_theta, &inst.pi_ref).unwrap();
        assert!((objective_rhs(&inst).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn beta_free_corollary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 7, 0.0).unwrap();
        let c = inst.conditionals().unwrap();
        let cond_ll: f64 = c
            .given_success
            .unwrap()
            .probs()
            .iter()
            .zip(inst.pi_teacher.probs())
            .map(|(p, t)| p * t.ln())
            .sum();
        assert!((objective_rhs(&inst).unwrap() - c.p_success * cond_ll).abs() < 1e-12);
    }

    #[test]
    fn identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let report = verify_suite(&mut rng, 1000, 1e-9).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn support_violation_propagates() {
        let inst = TheoremInstance {
            pi_theta: d(&[0.5, 0.5]),
            pi_ref: d(&[1.0, 0.0]),
            pi_teacher: d(&[0.5, 0.5]),
            success_prob: vec![0.5, 0.5],
            beta: 1.0,
        };
        assert!(matches!(objective_lhs(&inst), Err(Error::Support { .. })));
        assert!(matches!(objective_rhs(&inst), Err(Error::Support { .. })));
    }
}
