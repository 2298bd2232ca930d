//! Worked examples for the co-training loop: selection, pseudo-pairs,
//! filtering, data assembly, the M-step and whole runs.

use mutual_taught::em::{
    assemble_rm_data, build_pseudo_pairs, checkpoint_win_rate, compute_margins, e_step, filter_pairs, is_subset,
    m_step, run, select_from_win_rates, select_model, FilterStrategy, LoopConfig, LrOverride, RmData,
};
use mutual_taught::env::{build_environment, EnvConfig};
use mutual_taught::pair::{PairSource, PreferencePair};
use mutual_taught::policy::{Checkpoint, DpoConfig, Policy};
use mutual_taught::reward::{BtConfig, RewardModel};
use mutual_taught::rng::stream;
use mutual_taught::table::Table;

fn policy_rows(rows: Vec<Vec<f64>>) -> Policy {
    Policy::new(Table::from_rows(rows).unwrap())
}

fn rm_rows(rows: Vec<Vec<f64>>) -> RewardModel {
    RewardModel::from_scores(Table::from_rows(rows).unwrap(), 0.0)
}

fn checkpoints(n: usize) -> Vec<Checkpoint> {
    (1..=n)
        .map(|k| Checkpoint {
            policy: policy_rows(vec![vec![k as f64, 0.0]]),
            step: 50 * k,
        })
        .collect()
}

fn pc(prompt: usize, chosen: usize, rejected: usize) -> PreferencePair {
    PreferencePair::new(prompt, chosen, rejected, PairSource::PolicyComparison)
}

fn with_margin(p: PreferencePair, margin: f64) -> PreferencePair {
    PreferencePair {
        margin: Some(margin),
        ..p
    }
}

fn small_env(seed: u64) -> mutual_taught::env::Environment {
    build_environment(&EnvConfig {
        num_prompts: 20,
        num_responses: 8,
        seed,
        ..EnvConfig::default()
    })
    .unwrap()
}

#[test]
fn selection_takes_argmax_above_tau() {
    let cks = checkpoints(3);
    let prev = policy_rows(vec![vec![0.0, 0.0]]);
    let sel = select_from_win_rates(&cks, vec![0.55, 0.70, 0.65], &prev, 0.60);
    assert!(!sel.halted);
    assert_eq!(sel.step, Some(100));
    assert_eq!(sel.policy, cks[1].policy);
    assert_eq!(sel.win, 0.70);
}

#[test]
fn selection_halts_below_tau_and_keeps_previous() {
    let cks = checkpoints(3);
    let prev = policy_rows(vec![vec![0.0, 0.0]]);
    let sel = select_from_win_rates(&cks, vec![0.52, 0.52, 0.52], &prev, 0.60);
    assert!(sel.halted);
    assert_eq!(sel.policy, prev);
    assert_eq!(sel.step, None);
}

#[test]
fn selection_boundary_and_ties() {
    let prev = policy_rows(vec![vec![0.0, 0.0]]);
    // w == tau exactly is not a halt
    let sel = select_from_win_rates(&checkpoints(1), vec![0.6], &prev, 0.6);
    assert!(!sel.halted);
    // equal win rates go to the latest step
    let cks = checkpoints(3);
    let sel = select_from_win_rates(&cks, vec![0.7, 0.7, 0.65], &prev, 0.6);
    assert_eq!(sel.step, Some(100));
}

#[test]
fn win_rate_counting_examples() {
    let mut rng = stream(1, &[0]);
    // one-response world: every draw ties, and ties count as losses
    let single = policy_rows(vec![vec![0.0]; 3]);
    let rm = rm_rows(vec![vec![1.0]; 3]);
    let w = checkpoint_win_rate(&single, &single, &rm, &[0, 1, 2], 1.0, 4, &mut rng).unwrap();
    assert_eq!(w, 0.0);

    // point masses: candidate always on the higher-scored response
    let cand = policy_rows(vec![vec![0.0, -1e6]; 4]);
    let prev = policy_rows(vec![vec![-1e6, 0.0]; 4]);
    let rm = rm_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let w = checkpoint_win_rate(&cand, &prev, &rm, &[0, 1, 2], 1.0, 1, &mut rng).unwrap();
    assert_eq!(w, 1.0);
    // four prompts, the last one a loss
    let w = checkpoint_win_rate(&cand, &prev, &rm, &[0, 1, 2, 3], 1.0, 1, &mut rng).unwrap();
    assert_eq!(w, 0.75);
}

#[test]
fn select_model_is_reproducible_and_respects_guard() {
    let env = small_env(3);
    let cfg = LoopConfig::default();
    let mut rng = stream(3, &[0]);
    let (cks, _) = e_step(
        &env.base_policy,
        &env.base_rm,
        &env.partitions.policy_split_1,
        &cfg.dpo,
        &env,
        &mut rng,
    )
    .unwrap();
    let select = || {
        select_model(
            &cks,
            &env.base_policy,
            &env.base_rm,
            &env.partitions.validation_split,
            0.6,
            0.8,
            4,
            11,
        )
        .unwrap()
    };
    let a = select();
    assert_eq!(a, select());
    if !a.halted {
        assert!(a.win >= 0.6);
    }
}

#[test]
fn e_step_with_zero_lr_keeps_previous_policy() {
    let env = small_env(4);
    let dpo = DpoConfig {
        learning_rate: 0.0,
        ..DpoConfig::default()
    };
    let mut rng = stream(4, &[0]);
    let (cks, pairs) = e_step(&env.base_policy, &env.base_rm, &env.partitions.policy_split_1, &dpo, &env, &mut rng).unwrap();
    assert!(!pairs.is_empty());
    assert!(pairs.iter().all(|p| p.source == PairSource::EStep));
    assert!(cks.iter().all(|c| c.policy == env.base_policy));
}

#[test]
fn e_step_moves_mass_towards_rm_preference() {
    let env = build_environment(&EnvConfig {
        num_prompts: 1,
        num_responses: 2,
        shared_partitions: true,
        init_rm_pairs_per_prompt: 0,
        ..EnvConfig::default()
    })
    .unwrap();
    let rm = rm_rows(vec![vec![0.0, 1.0]]);
    let prev = Policy::uniform(1, 2);
    let mut rng = stream(5, &[0]);
    let (cks, _) = e_step(&prev, &rm, &[0], &DpoConfig::default(), &env, &mut rng).unwrap();
    let last = &cks.last().unwrap().policy;
    assert!(last.probs(0)[1] > prev.probs(0)[1]);
}

#[test]
fn pseudo_pairs_examples() {
    let mut rng = stream(6, &[0]);
    let single = policy_rows(vec![vec![0.0]; 5]);
    assert!(build_pseudo_pairs(&single, &single, &[0, 1, 2, 3, 4], 1.0, &mut rng).unwrap().is_empty());

    let post = policy_rows(vec![vec![0.0, -1e6]; 5]);
    let pre = policy_rows(vec![vec![-1e6, 0.0]; 5]);
    let pairs = build_pseudo_pairs(&post, &pre, &[0, 2, 4], 1.0, &mut rng).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs
        .iter()
        .all(|p| p.source == PairSource::PolicyComparison && p.chosen == 0 && p.rejected == 1));

    let env = small_env(6);
    let draw = |s| {
        build_pseudo_pairs(&env.base_policy, &Policy::uniform(20, 8), &env.partitions.rm_split, 0.8, &mut stream(s, &[1])).unwrap()
    };
    assert_eq!(draw(9), draw(9));
}

#[test]
fn margin_examples() {
    let rm = rm_rows(vec![vec![2.0, 0.5, 0.5]]);
    let m = compute_margins(&[pc(0, 0, 1), pc(0, 1, 2)], &rm);
    assert_eq!(m[0].margin, Some(1.5));
    assert_eq!(m[1].margin, Some(0.0));
    let swapped = compute_margins(&[pc(0, 1, 0)], &rm);
    assert_eq!(swapped[0].margin, Some(-1.5));
}

#[test]
fn filter_examples() {
    let lqf = |m: f64| filter_pairs(&[with_margin(pc(0, 0, 1), m)], 1.0, FilterStrategy::Lqf).unwrap().len();
    let hqs = |m: f64| filter_pairs(&[with_margin(pc(0, 0, 1), m)], 1.0, FilterStrategy::Hqs).unwrap().len();
    assert_eq!(lqf(-1.5), 0);
    assert_eq!(lqf(-0.5), 1);
    assert_eq!(lqf(-1.0), 0, "drop boundary is inclusive");
    assert_eq!(hqs(0.5), 0);
    assert_eq!(hqs(1.0), 1, "keep boundary is inclusive");

    let rm = rm_rows(vec![vec![0.2, 0.8]]);
    let dst = filter_pairs(&compute_margins(&[pc(0, 0, 1)], &rm), 0.3, FilterStrategy::Dst).unwrap();
    assert_eq!((dst[0].chosen, dst[0].rejected), (1, 0));
    assert!(dst[0].margin.unwrap() > 0.0);
    let tie = filter_pairs(&[with_margin(pc(0, 0, 1), 0.0)], 0.3, FilterStrategy::Dst).unwrap();
    assert!(tie.is_empty());

    let all: Vec<_> = [-2.0, -0.5, 0.0, 0.7, 3.0]
        .iter()
        .enumerate()
        .map(|(i, &m)| with_margin(pc(i, 0, 1), m))
        .collect();
    assert_eq!(filter_pairs(&all, 1.0, FilterStrategy::None).unwrap(), all);
    assert!(filter_pairs(&[pc(0, 0, 1)], 1.0, FilterStrategy::Lqf).is_err());
    assert!(filter_pairs(&all, -0.1, FilterStrategy::Lqf).is_err());
}

#[test]
fn filters_nest() {
    let pairs: Vec<_> = (0..40)
        .map(|i| with_margin(pc(i, 0, 1), (i as f64 - 20.0) / 7.0))
        .collect();
    let hqs = filter_pairs(&pairs, 0.8, FilterStrategy::Hqs).unwrap();
    let lqf = filter_pairs(&pairs, 0.8, FilterStrategy::Lqf).unwrap();
    let none = filter_pairs(&pairs, 0.8, FilterStrategy::None).unwrap();
    assert!(is_subset(&hqs, &lqf) && is_subset(&lqf, &none));
    assert!(!is_subset(&lqf, &hqs));
}

#[test]
fn assemble_examples() {
    let pcs: Vec<_> = (0..20).map(|i| pc(i, 0, 1)).collect();
    let sts: Vec<_> = (0..30)
        .map(|i| PreferencePair::new(i, 1, 2, PairSource::SelfTraining))
        .collect();
    let mixed = assemble_rm_data(&pcs, &sts, RmData::Mixed).unwrap();
    assert_eq!(mixed.len(), 50);
    assert_eq!(mixed.iter().filter(|p| p.source == PairSource::SelfTraining).count(), 30);
    let only_pc = assemble_rm_data(&pcs, &sts, RmData::PolicyComparison).unwrap();
    assert!(only_pc.iter().all(|p| p.source != PairSource::SelfTraining));
    assert_eq!(assemble_rm_data(&pcs, &sts, RmData::SelfTraining).unwrap(), sts);
    assert!(assemble_rm_data(&[], &sts, RmData::PolicyComparison).is_err());
}

#[test]
fn m_step_examples() {
    let base = rm_rows(vec![vec![0.3, -0.2, 0.1]]);
    let frozen = BtConfig {
        learning_rate: 0.0,
        ..BtConfig::default()
    };
    let same = m_step(&base, &[pc(0, 0, 1)], &frozen).unwrap();
    assert_eq!(same.scores, base.scores);

    // already separated by a wide margin: the gradient is saturated
    let wide = RewardModel::from_scores(Table::from_rows(vec![vec![40.0, -40.0, 0.0]]).unwrap(), 0.0);
    let cfg = BtConfig {
        l2_lambda: 0.0,
        ..BtConfig::default()
    };
    let trained = m_step(&wide, &vec![pc(0, 0, 1); 5], &cfg).unwrap();
    assert!(trained.scores.max_abs_diff(&wide.scores) < 1e-20);

    // every pair prefers response 0
    let zero = RewardModel::zeros(1, 3, 1e-3);
    let trained = m_step(&zero, &[pc(0, 0, 1), pc(0, 0, 2), pc(0, 0, 1)], &BtConfig::default()).unwrap();
    assert!(trained.score(0, 0) > trained.score(0, 1));
    assert!(trained.score(0, 0) > trained.score(0, 2));
}

#[test]
fn zero_lr_run_halts_at_first_iteration() {
    let env = small_env(8);
    let cfg = LoopConfig {
        dpo: DpoConfig {
            learning_rate: 0.0,
            ..DpoConfig::default()
        },
        ..LoopConfig::default()
    };
    let out = run(&env, &cfg, 8).unwrap();
    assert_eq!(out.final_policy, env.base_policy);
    assert_eq!(out.reports.len(), 1);
    assert!(out.reports[0].halted);
    assert!(out.rm_history.is_empty());
}

#[test]
fn runs_are_reproducible() {
    let env = small_env(9);
    let cfg = LoopConfig::default();
    let a = run(&env, &cfg, 9).unwrap();
    let b = run(&env, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        mutual_taught::em::reports_to_jsonl(&a.reports).unwrap(),
        mutual_taught::em::reports_to_jsonl(&b.reports).unwrap()
    );
}

#[test]
fn destructive_second_iteration_obeys_selection_guard() {
    // a huge step either fails validation (and the iteration-1 policy is kept)
    // or is selected with a win rate at or above tau; never anything in between
    for seed in 0..5 {
        let env = build_environment(&EnvConfig {
            seed,
            ..EnvConfig::default()
        })
        .unwrap();
        let cfg = LoopConfig {
            lr_overrides: vec![LrOverride {
                iteration: 2,
                learning_rate: 1e3,
            }],
            ..LoopConfig::default()
        };
        let out = run(&env, &cfg, seed).unwrap();
        if out.reports[0].halted {
            continue;
        }
        let second = &out.reports[1];
        if second.halted {
            assert_eq!(out.final_policy, out.policy_history[0]);
        } else {
            assert!(second.max_win_rate >= cfg.tau);
            assert_ne!(out.final_policy, out.policy_history[0]);
        }
    }
}
