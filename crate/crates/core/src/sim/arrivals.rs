use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::network::{DemandModel, Station};

/// Draws per-pair Poisson arrival counts for a fixed interval length.
///
/// Pairs with zero rate never touch the RNG; the others are sampled in
/// row-major order, so a given seed always yields the same stream.
#[derive(Debug, Clone)]
pub struct ArrivalSampler {
    pairs: Vec<(Station, Station, Poisson<f64>)>,
}

impl ArrivalSampler {
    pub fn new(demand: &DemandModel, dt: u64) -> Self {
        let n = demand.n();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let mean = demand.rate(i, j) * dt as f64;
                if i != j && mean > 0.0 {
                    pairs.push((i, j, Poisson::new(mean).expect("finite positive mean")));
                }
            }
        }
        Self { pairs }
    }

    /// Appends `(origin, destination, count)` for every pair with a nonzero draw.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<(Station, Station, u32)>) {
        for (i, j, dist) in &self.pairs {
            let c = dist.sample(rng) as u32;
            if c > 0 {
                out.push((*i, *j, c));
            }
        }
    }
}

/// One draw of arrivals over `dt` seconds for every origin-destination pair.
pub fn sample_arrivals<R: Rng + ?Sized>(demand: &DemandModel, rng: &mut R, dt: u64) -> Vec<(Station, Station, u32)> {
    let mut out = Vec::new();
    ArrivalSampler::new(demand, dt).sample_into(rng, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node(rate: f64) -> DemandModel {
        let mut m = Matrix::zeros(2);
        m.set(0, 1, rate);
        DemandModel::from_rates(m).unwrap()
    }

    #[test]
    fn zero_rate_never_arrives() {
        let demand = two_node(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_arrivals(&demand, &mut rng, 10).is_empty());
        }
    }

    #[test]
    fn poisson_mean_and_variance() {
        let demand = two_node(0.01);
        let sampler = ArrivalSampler::new(&demand, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 1_000_000;
        let mut buf = Vec::new();
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for _ in 0..draws {
            buf.clear();
            sampler.sample_into(&mut rng, &mut buf);
            let c = buf.first().map_or(0.0, |&(_, _, c)| c as f64);
            sum += c;
            sum_sq += c * c;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        assert!((mean - 0.01).abs() < 3e-4, "mean {mean}");
        assert!((var - 0.01).abs() < 0.05 * 0.01, "variance {var}");
    }

    #[test]
    fn same_seed_same_stream() {
        let demand = two_node(0.3);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..100).map(|_| sample_arrivals(&demand, &mut rng, 1)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..100).map(|_| sample_arrivals(&demand, &mut rng, 1)).collect()
        };
        assert_eq!(a, b);
    }
}
