//! Property tests for the environment invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zipflab_envs::zipf::sample_index;
use zipflab_envs::{
    generate_maps, reachable_cells, zipf_pmf, Env, Gridworld, ThreeDWorld, ZipfParams,
};

proptest! {
    #[test]
    fn pmf_sums_to_one_and_decreases(n in 1usize..64, e in 0.0f64..3.0) {
        let pmf = zipf_pmf(&ZipfParams::new(n, e).unwrap());
        let total: f64 = pmf.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for w in pmf.windows(2) {
            if e > 0.0 {
                prop_assert!(w[0] > w[1], "pmf must strictly decrease for e > 0");
            } else {
                prop_assert!((w[0] - w[1]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sample_index_stays_in_range(n in 1usize..16, seed in 0u64..1000) {
        let pmf = zipf_pmf(&ZipfParams::new(n, 2.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            prop_assert!(sample_index(&pmf, &mut rng) < n);
        }
    }

    #[test]
    fn gridworld_terminates_within_step_limit(
        seed in 0u64..200,
        actions in proptest::collection::vec(0usize..4, 150),
    ) {
        let maps = generate_maps(seed, 1, 4, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[0].clone(), 1, 100);
        env.reset(seed as usize % 4).unwrap();
        let mut done = false;
        let mut steps = 0;
        for &a in &actions {
            let r = env.step(a).unwrap();
            steps += 1;
            if r.done {
                done = true;
                break;
            }
        }
        prop_assert!(done, "episode must terminate");
        prop_assert!(steps <= 100);
    }

    #[test]
    fn threedworld_terminates_within_step_limit(
        seed in 0u64..100,
        actions in proptest::collection::vec(0usize..5, 250),
    ) {
        let maps = generate_maps(seed, 1, 3, (9, 9)).unwrap();
        let mut env = ThreeDWorld::new(maps[0].clone(), 1, 200, 3);
        env.reset(seed as usize % 3).unwrap();
        let mut done = false;
        for &a in &actions {
            let r = env.step(a).unwrap();
            if r.done {
                done = true;
                break;
            }
        }
        prop_assert!(done, "episode must terminate within 200 steps");
    }

    #[test]
    fn generated_maps_keep_reachability(seed in 0u64..300) {
        let maps = generate_maps(seed, 2, 5, (11, 11)).unwrap();
        for m in &maps {
            for o in &m.objects {
                let blocked: Vec<_> = m
                    .objects
                    .iter()
                    .filter(|x| x.id != o.id)
                    .map(|x| x.cell)
                    .collect();
                let seen = reachable_cells(m, &blocked, m.start);
                prop_assert!(seen[o.cell.0 * m.width + o.cell.1]);
            }
        }
    }

    #[test]
    fn observations_are_full_frames(seed in 0u64..50) {
        let maps = generate_maps(seed, 3, 4, (11, 11)).unwrap();
        let mut env = Gridworld::new(maps[(seed % 3) as usize].clone(), 3, 100);
        let obs = env.reset((seed % 4) as usize).unwrap();
        prop_assert_eq!(obs.pixels.len(), 84 * 84 * 3);
    }
}
