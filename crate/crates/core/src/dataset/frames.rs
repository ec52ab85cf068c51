//! Frame index sampling: sparse random sampling for pre-training, bin-center
//! uniform sampling for fine-tuning and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Random,
    Uniform,
}

/// Draw `m` frame indices from `0..m_total`, strictly increasing.
///
/// Uniform mode returns bin centers `floor((2i+1) * m_total / (2m))`; random
/// mode draws without replacement, a pure function of `(m_total, m, seed)`.
pub fn sample_frames(
    m_total: usize,
    m: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<Vec<u32>, DataError> {
    if m == 0 || m > m_total {
        return Err(DataError::BadFrameCount { m, m_total });
    }
    match mode {
        SamplingMode::Uniform => Ok((0..m)
            .map(|i| ((2 * i + 1) * m_total / (2 * m)) as u32)
            .collect()),
        SamplingMode::Random => {
            // Seeded Fisher-Yates over 0..m_total, keep the first m, sorted.
            // Hand-rolled so the draw depends only on (m_total, m, seed).
            let mut state = splitmix_init(seed);
            let mut pool: Vec<u32> = (0..m_total as u32).collect();
            for i in 0..m.min(m_total - 1) {
                let j = i + (next_u64(&mut state) % (m_total - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut picked: Vec<u32> = pool[..m].to_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Derive a sampling seed for one video in one epoch from the run seed.
pub fn derive_seed(run_seed: u64, epoch: usize, item: usize) -> u64 {
    let mut s = splitmix_init(run_seed);
    s ^= next_u64(&mut splitmix_init(epoch as u64 ^ 0x9e37_79b9_7f4a_7c15));
    s ^= next_u64(&mut splitmix_init(item as u64 ^ 0xbf58_476d_1ce4_e5b9));
    next_u64(&mut s)
}

fn splitmix_init(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

fn next_u64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_bin_centers() {
        assert_eq!(
            sample_frames(16, 8, SamplingMode::Uniform, 0).unwrap(),
            vec![1, 3, 5, 7, 9, 11, 13, 15]
        );
    }

    #[test]
    fn uniform_single_frame_is_middle() {
        assert_eq!(sample_frames(9, 1, SamplingMode::Uniform, 0).unwrap(), vec![4]);
    }

    #[test]
    fn random_is_deterministic() {
        let a = sample_frames(100, 7, SamplingMode::Random, 42).unwrap();
        let b = sample_frames(100, 7, SamplingMode::Random, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_frames(100, 7, SamplingMode::Random, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_frames_is_an_error() {
        assert!(sample_frames(4, 5, SamplingMode::Random, 0).is_err());
        assert!(sample_frames(4, 0, SamplingMode::Uniform, 0).is_err());
    }

    proptest! {
        #[test]
        fn uniform_is_strictly_increasing(m_total in 1usize..200, m_frac in 0.0f64..1.0) {
            let m = 1 + ((m_total - 1) as f64 * m_frac) as usize;
            let out = sample_frames(m_total, m, SamplingMode::Uniform, 0).unwrap();
            prop_assert_eq!(out.len(), m);
            prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((*out.last().unwrap() as usize) < m_total);
        }

        #[test]
        fn random_is_sorted_distinct_in_range(
            m_total in 1usize..200,
            m_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let m = 1 + ((m_total - 1) as f64 * m_frac) as usize;
            let out = sample_frames(m_total, m, SamplingMode::Random, seed).unwrap();
            prop_assert_eq!(out.len(), m);
            prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((*out.last().unwrap() as usize) < m_total);
        }
    }
}
