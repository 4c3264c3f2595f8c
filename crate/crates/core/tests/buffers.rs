use pchid_core::envs::{
    bfs_shortest_steps, Action, BitFlipConfig, BitFlipEnv, GridWorldConfig,
    GridWorldEnv,
};
use pchid_core::hid::{relabel_k_step, relabel_one_step, HidExample, KBufferSet};
use pchid_core::solvability::OracleTest;
use pchid_core::trainers::rollout;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn example(k: usize, tag: usize) -> HidExample {
    HidExample {
        state: vec![tag as f64],
        goal: vec![0.0],
        action: Action::Discrete(tag),
        k,
    }
}

#[test]
fn joint_sampling_is_proportional_to_buffer_size() {
    let sizes = [400usize, 100, 250, 50];
    let mut buffers = KBufferSet::new(4, 1000);
    for (i, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            buffers.store(example(i + 1, j)).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 80_000;
    let mut counts = [0usize; 4];
    for e in buffers.sample_joint_minibatch(draws, &mut rng).unwrap() {
        counts[e.k - 1] += 1;
    }
    let total: usize = sizes.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(sizes)
        .map(|(&c, n)| {
            let expected = draws as f64 * n as f64 / total as f64;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    // 3 degrees of freedom, 0.999 quantile.
    assert!(chi2 < 16.266, "chi-square {chi2}, counts {counts:?}");
}

#[test]
fn oracle_partition_is_exact_on_gridworld() {
    let env = GridWorldEnv::new(GridWorldConfig::default());
    let mut e = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut oracle = OracleTest::new(&env);
    let mut checked = 0;
    for seed in 0..60 {
        let trace = rollout(&mut e, seed, false, |_, _, _| Action::Discrete(rng.gen_range(0..8))).unwrap();
        for k in 2..=5 {
            for ex in relabel_k_step(&env, &trace, k, &mut oracle).unwrap() {
                let (map, agent) = env.parts_from_state(&ex.state).unwrap();
                let goal = GridWorldEnv::cell_from_goal(&ex.goal);
                assert_eq!(bfs_shortest_steps(&map, agent, goal), Some(k));
                checked += 1;
            }
        }
        for ex in relabel_one_step(&env, &trace) {
            let (map, agent) = env.parts_from_state(&ex.state).unwrap();
            let goal = GridWorldEnv::cell_from_goal(&ex.goal);
            assert_eq!(bfs_shortest_steps(&map, agent, goal), Some(1));
        }
    }
    assert!(checked > 100);
}

#[test]
fn bitflip_one_step_labels_are_the_flipped_bit() {
    let env = BitFlipEnv::new(BitFlipConfig::default());
    let mut e = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..50 {
        let trace = rollout(&mut e, seed, false, |_, _, _| Action::Discrete(rng.gen_range(0..8))).unwrap();
        let examples = relabel_one_step(&env, &trace);
        assert_eq!(examples.len(), trace.len());
        for ex in examples {
            let diff: Vec<usize> = (0..8).filter(|&i| ex.state[i] != ex.goal[i]).collect();
            assert_eq!(diff, vec![ex.action.discrete().unwrap()]);
        }
    }
}

proptest! {
    #[test]
    fn buffers_respect_capacity_and_fifo(
        capacity in 1usize..20,
        ks in proptest::collection::vec(1usize..=3, 0..100),
    ) {
        let mut buffers = KBufferSet::new(3, capacity);
        for (i, &k) in ks.iter().enumerate() {
            buffers.store(example(k, i)).unwrap();
        }
        for k in 1..=3 {
            let stored: Vec<usize> = buffers
                .iter_k(k)
                .map(|e| e.action.discrete().unwrap())
                .collect();
            let expected: Vec<usize> = ks
                .iter()
                .enumerate()
                .filter(|(_, &kk)| kk == k)
                .map(|(i, _)| i)
                .collect();
            let keep = expected.len().saturating_sub(capacity);
            prop_assert_eq!(stored, expected[keep..].to_vec());
            prop_assert!(buffers.len_k(k) <= capacity);
        }
    }

    #[test]
    fn out_of_range_k_is_rejected(k in 4usize..100) {
        let mut buffers = KBufferSet::new(3, 10);
        prop_assert!(buffers.store(example(k, 0)).is_err());
        prop_assert!(buffers.store(example(0, 0)).is_err());
        prop_assert_eq!(buffers.total_len(), 0);
    }

    #[test]
    fn minibatch_draws_only_stored_examples(
        n in 1usize..50,
        size in 1usize..200,
        seed in any::<u64>(),
    ) {
        let mut buffers = KBufferSet::merged(2, 100);
        for i in 0..n {
            buffers.store(example(1 + i % 2, i)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = buffers.sample_joint_minibatch(size, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), size);
        for e in batch {
            prop_assert!(e.action.discrete().unwrap() < n);
        }
    }
}

#[test]
fn empty_buffers_cannot_be_sampled() {
    let buffers = KBufferSet::new(2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(buffers.sample_joint_minibatch(4, &mut rng).is_err());
}
