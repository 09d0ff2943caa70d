//! Support/query episode sampling within one environment.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::signal::Dataset;

/// Observation indices refer to the environment's `observations` list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub env_id: u32,
    pub n_shots: usize,
    /// `support[c]` holds the `n_shots` observations of class `c`.
    pub support: Vec<Vec<usize>>,
    /// `(observation, label)` pairs.
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.support.len()
    }

    /// `(observation, label)` for every support observation, class-major.
    pub fn support_pairs(&self) -> Vec<(usize, usize)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(c, obs)| obs.iter().map(move |&o| (o, c)))
            .collect()
    }

    pub fn is_disjoint(&self) -> bool {
        let mut ids: Vec<usize> = self.support.iter().flatten().copied().collect();
        ids.extend(self.query.iter().map(|&(o, _)| o));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        ids.len() == n
    }
}

/// Draws `n_shots` support observations of every class and `n_query` disjoint
/// queries whose classes follow a random permutation, cycled.
pub fn sample_episode<R: Rng>(
    data: &Dataset,
    env_id: u32,
    n_shots: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_shots == 0 {
        return Err(Error::Sampling("episodes need at least one shot".into()));
    }
    let env = data
        .environment(env_id)
        .ok_or_else(|| Error::Sampling(format!("no environment {env_id}")))?;
    let nc = data.num_classes;
    let mut by_class = env.by_class(nc);
    let per_class_queries = n_query.div_ceil(nc.max(1));
    for (c, obs) in by_class.iter().enumerate() {
        if obs.len() < n_shots + per_class_queries {
            return Err(Error::Sampling(format!(
                "environment {env_id} has {} observations of class {c}; {n_shots} shots and {n_query} queries need {}",
                obs.len(),
                n_shots + per_class_queries
            )));
        }
    }
    for obs in &mut by_class {
        obs.shuffle(rng);
    }
    let support: Vec<Vec<usize>> = by_class.iter().map(|obs| obs[..n_shots].to_vec()).collect();
    let mut order: Vec<usize> = (0..nc).collect();
    order.shuffle(rng);
    let mut used = vec![0usize; nc];
    let query = (0..n_query)
        .map(|q| {
            let c = order[q % nc];
            let o = by_class[c][n_shots + used[c]];
            used[c] += 1;
            (o, c)
        })
        .collect();
    Ok(Episode {
        env_id,
        n_shots,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{build_dataset, default_class_specs, RadioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(obs: usize) -> Dataset {
        build_dataset(&RadioConfig::wifi(8, 4, 1), 2, &default_class_specs(6), obs, 0).unwrap()
    }

    #[test]
    fn counting_and_disjointness() {
        let d = data(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let e = sample_episode(&d, 1, 1, 5, &mut rng).unwrap();
            assert_eq!(e.support.iter().map(Vec::len).sum::<usize>(), 6);
            assert_eq!(e.query.len(), 5);
            assert!(e.is_disjoint());
            let env = d.environment(1).unwrap();
            for (c, obs) in e.support.iter().enumerate() {
                assert!(obs.iter().all(|&o| env.observations[o].label == c));
            }
            assert!(e.query.iter().all(|&(o, c)| env.observations[o].label == c));
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let d = data(3);
        let a = sample_episode(&d, 0, 2, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_episode(&d, 0, 2, 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_shots_is_an_error() {
        let d = data(3);
        let r = sample_episode(&d, 0, 3, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Sampling(_))));
        assert!(sample_episode(&d, 9, 1, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
