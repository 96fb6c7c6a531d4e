//! Zipfian categorical sampling: p(k) proportional to 1/k^e over
//! categories k = 1..n, with e = 0 degenerating to uniform.

use crate::error::EnvError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipfParams {
    pub n: usize,
    pub e: f64,
}

impl ZipfParams {
    pub fn new(n: usize, e: f64) -> Result<Self, EnvError> {
        if n == 0 {
            return Err(EnvError::InvalidArgument("zipf: n must be >= 1".into()));
        }
        if !(e >= 0.0 && e.is_finite()) {
            return Err(EnvError::InvalidArgument(format!(
                "zipf: exponent must be finite and >= 0, got {e}"
            )));
        }
        Ok(ZipfParams { n, e })
    }
}

/// pmf[k-1] = (1/k^e) / sum_{i=1..n} (1/i^e)
pub fn zipf_pmf(params: &ZipfParams) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=params.n)
        .map(|k| (k as f64).powf(-params.e))
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// Draw a 0-based index from an explicit pmf.
pub fn sample_index(pmf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

/// Independent Zipfian draws for the map and the target object.
/// Returns 0-based (map_id, object_id); index 0 is the most common.
pub fn sample_trial(
    rng: &mut ChaCha8Rng,
    maps: &ZipfParams,
    objects: &ZipfParams,
) -> (usize, usize) {
    let map_pmf = zipf_pmf(maps);
    let obj_pmf = zipf_pmf(objects);
    let m = sample_index(&map_pmf, rng);
    let o = sample_index(&obj_pmf, rng);
    (m, o)
}

/// Reusable sampler that precomputes both pmfs.
#[derive(Debug, Clone)]
pub struct TrialSampler {
    pub map_pmf: Vec<f64>,
    pub obj_pmf: Vec<f64>,
}

impl TrialSampler {
    pub fn new(maps: &ZipfParams, objects: &ZipfParams) -> Self {
        TrialSampler {
            map_pmf: zipf_pmf(maps),
            obj_pmf: zipf_pmf(objects),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let m = sample_index(&self.map_pmf, rng);
        let o = sample_index(&self.obj_pmf, rng);
        (m, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_category_is_certain() {
        let p = ZipfParams::new(1, 3.0).unwrap();
        assert_eq!(zipf_pmf(&p), vec![1.0]);
    }

    #[test]
    fn two_categories_e1() {
        let p = ZipfParams::new(2, 1.0).unwrap();
        let pmf = zipf_pmf(&p);
        assert!((pmf[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pmf[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn head_probability_n7_e2() {
        // Direct-summation oracle: 1 / sum_{i=1..7} i^-2
        let p = ZipfParams::new(7, 2.0).unwrap();
        let pmf = zipf_pmf(&p);
        let z: f64 = (1..=7).map(|i| (i as f64).powi(-2)).sum();
        assert!((pmf[0] - 1.0 / z).abs() < 1e-15);
        assert!((pmf[0] - 0.66146).abs() < 1e-5);
    }

    #[test]
    fn zero_n_is_rejected() {
        assert!(ZipfParams::new(0, 1.0).is_err());
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let p = ZipfParams::new(5, 0.0).unwrap();
        let pmf = zipf_pmf(&p);
        for v in pmf {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let maps = ZipfParams::new(7, 2.0).unwrap();
        let objs = ZipfParams::new(5, 2.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_trial(&mut rng, &maps, &objs))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }
}
