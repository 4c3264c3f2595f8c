use pchid_core::baselines::{
    combine_average_continuous, combine_average_discrete, intrinsic_reward_continuous,
    intrinsic_reward_discrete, train_dqn, train_ppo_lite, Combination, DqnConfig, PpoConfig,
};
use pchid_core::envs::{BitFlipConfig, BitFlipEnv, PointReachConfig, PointReachEnv};
use pchid_core::nn::argmax;
use pchid_core::trainers::PchidConfig;
use proptest::prelude::*;

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn agreeing_components_fix_the_choice(
        q in logits(6),
        mut l in logits(6),
        margin in 0.01f64..3.0,
        w in 0.0f64..=1.0,
    ) {
        let qa = argmax(&q);
        let top = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        l[qa] = top + margin;
        prop_assert_eq!(combine_average_discrete(&q, &l, w), qa);
    }

    #[test]
    fn shifting_q_values_keeps_the_choice(
        q in logits(5),
        l in logits(5),
        w in 0.0f64..=1.0,
        shift in -50.0f64..50.0,
    ) {
        let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
        prop_assert_eq!(
            combine_average_discrete(&q, &l, w),
            combine_average_discrete(&shifted, &l, w)
        );
    }

    #[test]
    fn continuous_average_is_the_convex_combination(
        a in proptest::collection::vec(-1.0f64..1.0, 3),
        b in proptest::collection::vec(-1.0f64..1.0, 3),
        w in 0.0f64..=1.0,
    ) {
        let mixed = combine_average_continuous(&a, &b, w);
        for ((m, x), y) in mixed.iter().zip(&a).zip(&b) {
            prop_assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn intrinsic_reward_never_positive(q in logits(4), l in logits(4)) {
        prop_assert!(intrinsic_reward_discrete(&q, &l) <= 0.0);
        prop_assert!(intrinsic_reward_continuous(&q, &l) <= 0.0);
        prop_assert!(intrinsic_reward_discrete(&l, &l).abs() < 1e-12);
        prop_assert_eq!(intrinsic_reward_continuous(&q, &q), 0.0);
    }
}

fn quick_dqn() -> DqnConfig {
    DqnConfig {
        episodes: 40,
        hidden: vec![16],
        updates_per_episode: 4,
        batch_size: 16,
        target_sync_episodes: 5,
        hid: PchidConfig {
            max_k: 2,
            hidden: vec![16],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn bitflip(scale: f64) -> BitFlipEnv {
    BitFlipEnv::new(BitFlipConfig {
        bits: 4,
        reward_scale: scale,
        ..Default::default()
    })
}

/// With the RL term switched off, joint training is pure supervised HID
/// training of the shared network: discounting and reward values no longer
/// matter.
#[test]
fn joint_without_rl_term_ignores_rewards() {
    let joint = Combination::Joint {
        lambda: 1.0,
        rl_weight: 0.0,
    };
    let a = train_dqn(
        &bitflip(1.0),
        &DqnConfig {
            combination: joint,
            ..quick_dqn()
        },
        2,
    )
    .unwrap();
    let b = train_dqn(
        &bitflip(50.0),
        &DqnConfig {
            combination: joint,
            gamma: 0.3,
            ..quick_dqn()
        },
        2,
    )
    .unwrap();
    assert_eq!(a.agent.q.net.flatten(), b.agent.q.net.flatten());
    // And it does train.
    let fresh = train_dqn(
        &bitflip(1.0),
        &DqnConfig {
            episodes: 0,
            ..quick_dqn()
        },
        2,
    )
    .unwrap();
    assert_ne!(a.agent.q.net.flatten(), fresh.agent.q.net.flatten());
}

#[test]
fn baselines_are_seed_deterministic() {
    for combination in [
        Combination::None,
        Combination::Average { weight: 0.5 },
        Combination::Intrinsic { beta: 0.5 },
    ] {
        let config = DqnConfig {
            combination,
            ..quick_dqn()
        };
        let a = train_dqn(&bitflip(1.0), &config, 6).unwrap();
        let b = train_dqn(&bitflip(1.0), &config, 6).unwrap();
        assert_eq!(a.agent.q.net.flatten(), b.agent.q.net.flatten());
        assert_eq!(a.metrics, b.metrics);
    }
    let env = PointReachEnv::new(PointReachConfig::default());
    let config = PpoConfig {
        episodes: 12,
        hidden: vec![16],
        ..Default::default()
    };
    let a = train_ppo_lite(&env, &config, 1).unwrap();
    let b = train_ppo_lite(&env, &config, 1).unwrap();
    assert_eq!(a.agent.actor.net.flatten(), b.agent.actor.net.flatten());
    assert_eq!(a.returns, b.returns);
}

#[test]
fn ppo_zero_beta_is_plain_ppo() {
    let env = PointReachEnv::new(PointReachConfig::default());
    let base = PpoConfig {
        episodes: 12,
        hidden: vec![16],
        hid: PchidConfig {
            hidden: vec![16],
            ..Default::default()
        },
        ..Default::default()
    };
    let plain = train_ppo_lite(&env, &base, 3).unwrap();
    let shaped = train_ppo_lite(
        &env,
        &PpoConfig {
            combination: Combination::Intrinsic { beta: 0.0 },
            ..base.clone()
        },
        3,
    )
    .unwrap();
    assert_eq!(plain.agent.actor.net.flatten(), shaped.agent.actor.net.flatten());
    let joint = train_ppo_lite(
        &env,
        &PpoConfig {
            combination: Combination::Joint {
                lambda: 0.0,
                rl_weight: 1.0,
            },
            ..base
        },
        3,
    )
    .unwrap();
    assert_eq!(plain.agent.actor.net.flatten(), joint.agent.actor.net.flatten());
}

#[test]
fn ppo_depends_on_reward_scale() {
    let config = PpoConfig {
        episodes: 12,
        hidden: vec![16],
        ..Default::default()
    };
    let run = |scale| {
        let env = PointReachEnv::new(PointReachConfig {
            reward_scale: scale,
            ..Default::default()
        });
        train_ppo_lite(&env, &config, 5).unwrap()
    };
    let a = run(1.0);
    let b = run(100.0);
    assert_ne!(a.agent.actor.net.flatten(), b.agent.actor.net.flatten());
}
