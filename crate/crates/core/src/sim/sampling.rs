use rand::Rng;

use crate::moe::MoeRouting;
use crate::spec::SpecParams;

/// Tokens produced by one draft-and-verify cycle: the accepted prefix of `k`
/// independent Bernoulli(α) trials plus the verifier's bonus token.
pub fn sample_accepted<R: Rng + ?Sized>(spec: &SpecParams, rng: &mut R) -> u32 {
    if spec.alpha >= 1.0 {
        return spec.k + 1;
    }
    let mut accepted = 0;
    while accepted < spec.k && rng.random_bool(spec.alpha) {
        accepted += 1;
    }
    accepted + 1
}

/// Draws routing for `t` tokens, each picking `m` distinct experts of `M`
/// uniformly, and reports the fraction of experts touched.
#[derive(Debug, Clone)]
pub struct CoverageSampler {
    routing: MoeRouting,
    perm: Vec<u32>,
    touched: Vec<bool>,
}

impl CoverageSampler {
    pub fn new(routing: MoeRouting) -> Self {
        CoverageSampler {
            routing,
            perm: (0..routing.total).collect(),
            touched: vec![false; routing.total as usize],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, t: u64, rng: &mut R) -> f64 {
        let total = self.routing.total as usize;
        let m = self.routing.active as usize;
        if t == 0 {
            return 0.0;
        }
        if m == total {
            return 1.0;
        }
        self.touched.fill(false);
        let mut covered = 0;
        for _ in 0..t {
            // Partial Fisher-Yates: the first m slots become a uniform draw.
            for i in 0..m {
                let j = rng.random_range(i..total);
                self.perm.swap(i, j);
                let e = self.perm[i] as usize;
                if !self.touched[e] {
                    self.touched[e] = true;
                    covered += 1;
                }
            }
            if covered == total {
                break;
            }
        }
        covered as f64 / total as f64
    }
}

/// One-off coverage draw; see [`CoverageSampler`] for repeated use.
pub fn sample_expert_coverage<R: Rng + ?Sized>(routing: &MoeRouting, t: u64, rng: &mut R) -> f64 {
    CoverageSampler::new(*routing).sample(t, rng)
}
