use ilora::data::{dirichlet_partition, generate_blobs, PartitionPlan};
use ilora::federation::{
    evaluate_global, init_federation, init_federation_with_plan, run_federation, run_round, sample_clients,
    train_centralized, Execution, FederationConfig, Method, TaskData,
};
use proptest::prelude::*;

fn task(classes: usize, per_class: usize, d_in: usize, seed: u64) -> TaskData {
    let full = generate_blobs(classes, per_class, d_in, 0.6, seed).unwrap();
    let (train, holdout) = full.split_holdout(0.2, seed).unwrap();
    TaskData { train, holdout }
}

fn config(method: Method) -> FederationConfig {
    FederationConfig {
        n_clients: 4,
        client_ranks: vec![1, 2, 3, 4],
        server_rank: 5,
        rounds: 4,
        batch_size: 16,
        local_epochs: 2,
        method,
        ..FederationConfig::default()
    }
}

fn relabel(plan: &PartitionPlan, perm: &[usize]) -> PartitionPlan {
    let mut counts = vec![0; plan.n_clients()];
    for (old, &c) in plan.client_counts.iter().enumerate() {
        counts[perm[old]] = c;
    }
    PartitionPlan {
        assignments: plan.assignments.iter().map(|&c| perm[c]).collect(),
        client_counts: counts,
        alpha: plan.alpha,
    }
}

#[test]
fn relabelling_clients_with_their_shards_leaves_the_global_model_unchanged() {
    let data = task(6, 40, 8, 3);
    for method in [Method::Ilora, Method::IloraS, Method::FullStack] {
        let base = config(method);
        let plan = dirichlet_partition(&data.train, base.n_clients, base.dirichlet_alpha, base.partition_seed).unwrap();
        let perm = [2, 0, 3, 1];
        let mut ranks = vec![0; 4];
        for (old, &r) in base.client_ranks.iter().enumerate() {
            ranks[perm[old]] = r;
        }
        let permuted = FederationConfig { client_ranks: ranks, ..base.clone() };

        let (mut s1, mut c1) = init_federation_with_plan(&base, &data, &plan).unwrap();
        let (mut s2, mut c2) = init_federation_with_plan(&permuted, &data, &relabel(&plan, &perm)).unwrap();
        for _ in 0..base.rounds {
            let m1 = run_round(&mut s1, &mut c1, &base, &data, Execution::Sequential).unwrap();
            let m2 = run_round(&mut s2, &mut c2, &permuted, &data, Execution::Sequential).unwrap();
            let gap = s1.global_weight.sub(&s2.global_weight).unwrap().frobenius_norm();
            assert!(gap < 1e-9, "{method}: gap {gap}");
            assert!((m1.train_loss - m2.train_loss).abs() < 1e-9);
        }
    }
}

#[test]
fn runs_are_reproducible_and_execution_order_free() {
    let data = task(5, 30, 6, 11);
    for method in Method::ALL {
        let mut cfg = config(method);
        if method == Method::FeditAvg {
            cfg.client_ranks = vec![2; 4];
        }
        let reference = run_federation(&cfg, &data).unwrap();
        assert_eq!(reference, run_federation(&cfg, &data).unwrap());
        for execution in [Execution::Shuffled(7), Execution::Parallel] {
            let (mut server, mut clients) = init_federation(&cfg, &data).unwrap();
            for expected in &reference {
                let got = run_round(&mut server, &mut clients, &cfg, &data, execution).unwrap();
                assert_eq!(&got, expected, "{method} under {execution:?}");
            }
        }
    }
}

#[test]
fn single_full_batch_client_matches_pooled_training() {
    let data = task(4, 25, 5, 8);
    let cfg = FederationConfig {
        n_clients: 1,
        client_ranks: vec![3],
        server_rank: 3,
        local_epochs: 1,
        rounds: 1,
        batch_size: data.train.len(),
        method: Method::Ilora,
        ..FederationConfig::default()
    };
    let (mut server, mut clients) = init_federation(&cfg, &data).unwrap();
    let m = run_round(&mut server, &mut clients, &cfg, &data, Execution::Sequential).unwrap();
    let pooled = train_centralized(&cfg, &data, 1).unwrap();
    assert!((m.train_loss - pooled.train_loss).abs() < 1e-10, "{} vs {}", m.train_loss, pooled.train_loss);
    assert_eq!(m.holdout_accuracy, pooled.holdout_accuracy);
    assert_eq!(evaluate_global(&server, &data.holdout).unwrap().1, pooled.holdout_accuracy);
}

#[test]
fn one_round_federation_is_one_run_round() {
    let data = task(5, 30, 6, 2);
    let cfg = FederationConfig { rounds: 1, ..config(Method::IloraS) };
    let (mut server, mut clients) = init_federation(&cfg, &data).unwrap();
    let manual = run_round(&mut server, &mut clients, &cfg, &data, Execution::Sequential).unwrap();
    assert_eq!(run_federation(&cfg, &data).unwrap(), vec![manual]);
}

#[test]
fn partial_participation_trains_only_sampled_clients() {
    let data = task(6, 40, 8, 5);
    let cfg = FederationConfig {
        n_clients: 6,
        client_ranks: vec![2, 3, 2, 3, 2, 3],
        participation: 0.5,
        method: Method::IloraS,
        ..config(Method::IloraS)
    };
    let (mut server, mut clients) = init_federation(&cfg, &data).unwrap();
    for round in 0..cfg.rounds {
        let before: Vec<_> = clients.iter().map(|c| c.controls.clone()).collect();
        let m = run_round(&mut server, &mut clients, &cfg, &data, Execution::Sequential).unwrap();
        assert_eq!(m.sampled, sample_clients(&cfg, round));
        assert_eq!(m.sampled.len(), 3);
        let expected: usize = m.sampled.iter().map(|&c| clients[c].sample_count()).sum();
        assert_eq!(m.total_samples, expected);
        for (id, c) in clients.iter().enumerate() {
            if !m.sampled.contains(&id) {
                assert_eq!(c.controls, before[id], "client {id} idle in round {round}");
            }
        }
    }
}

#[test]
fn shards_cover_the_training_set_exactly_once() {
    let data = task(7, 30, 6, 13);
    let cfg = FederationConfig { n_clients: 5, client_ranks: vec![2; 5], ..config(Method::Ilora) };
    let (_, clients) = init_federation(&cfg, &data).unwrap();
    let mut seen: Vec<usize> = clients.iter().flat_map(|c| c.indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.train.len()).collect::<Vec<_>>());
    assert!(clients.iter().all(|c| c.sample_count() > 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_conserve_samples(n_clients in 1usize..9, alpha in 0.05f64..50.0, seed in 0u64..1000) {
        let ds = generate_blobs(4, 12, 3, 0.5, seed).unwrap();
        let plan = dirichlet_partition(&ds, n_clients, alpha, seed).unwrap();
        prop_assert_eq!(plan.client_counts.iter().sum::<usize>(), ds.len());
        prop_assert!(plan.client_counts.iter().all(|&c| c > 0));
        for c in 0..n_clients {
            prop_assert_eq!(plan.client_indices(c).len(), plan.client_counts[c]);
        }
        let weight_sum: f64 = plan.weights().iter().sum();
        prop_assert!((weight_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn client_sampling_is_sorted_distinct_and_sized(n in 1usize..20, frac in 0.01f64..1.0, round in 0usize..50) {
        let cfg = FederationConfig {
            n_clients: n,
            client_ranks: vec![1; n],
            participation: frac,
            ..FederationConfig::default()
        };
        let picked = sample_clients(&cfg, round);
        prop_assert_eq!(picked.len(), cfg.clients_per_round());
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&c| c < n));
    }
}
