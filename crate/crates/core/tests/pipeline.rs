use std::collections::HashSet;

use vbfn_core::config::{Layout, RunConfig};
use vbfn_core::graph::NULL_CLASS;
use vbfn_core::par::Execution;
use vbfn_core::pipeline::{
    gen_tree_dataset, load_dataset, sample_to_dir, train_to_dir, Checkpoint, Sampler, Trainer, CONFIG_ECHO,
};

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.synthetic_count = 40;
    cfg.model.hidden_width = 12;
    cfg.model.time_embed_dim = 4;
    cfg.train.batch_size = 8;
    cfg.train.steps = 20;
    cfg.schedule.steps = 20;
    cfg
}

fn trainer(cfg: &RunConfig) -> Trainer {
    Trainer::new(cfg.clone(), load_dataset(cfg).unwrap()).unwrap()
}

#[test]
fn identical_seeds_give_identical_losses_and_samples() {
    let cfg = small_config(5);
    let (mut a, mut b) = (trainer(&cfg), trainer(&cfg));
    let la: Vec<f64> = a.run(15, |_, _| Ok(())).unwrap().iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.run(15, |_, _| Ok(())).unwrap().iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
    assert_eq!(a.params.values, b.params.values);

    let sa = Sampler::from_trainer(&a).unwrap().sample(10, 3).unwrap();
    let sb = Sampler::from_trainer(&b).unwrap().sample(10, 3).unwrap();
    assert_eq!(sa, sb);

    let mut c = trainer(&small_config(6));
    let lc: Vec<f64> = c.run(15, |_, _| Ok(())).unwrap().iter().map(|r| r.loss).collect();
    assert_ne!(la, lc);
}

#[test]
fn parallel_and_sequential_agree() {
    let cfg = small_config(9);
    let (mut a, mut b) = (trainer(&cfg), trainer(&cfg));
    a.exec = Execution::Sequential;
    b.exec = Execution::Parallel;
    a.run(5, |_, _| Ok(())).unwrap();
    b.run(5, |_, _| Ok(())).unwrap();
    assert_eq!(a.params.values, b.params.values);

    let mut sa = Sampler::from_trainer(&a).unwrap();
    sa.exec = Execution::Sequential;
    let sb = Sampler::from_trainer(&b).unwrap();
    assert_eq!(sa.sample(6, 1).unwrap(), sb.sample(6, 1).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = small_config(11);
    cfg.train.steps = 200;
    let mut full = trainer(&cfg);
    full.run(200, |_, _| Ok(())).unwrap();

    let mut first = trainer(&cfg);
    first.run(100, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut second = Trainer::resume(&ck, load_dataset(&ck.run_config().unwrap()).unwrap()).unwrap();
    assert_eq!(second.step, 100);
    second.run(100, |_, _| Ok(())).unwrap();

    assert_eq!(second.step, 200);
    assert_eq!(full.params.values, second.params.values);
    assert_eq!(full.opt_state, second.opt_state);
}

#[test]
fn single_step_sampling_emits_well_formed_graphs() {
    for layout in [Layout::Separate, Layout::Joint] {
        let mut cfg = small_config(2);
        cfg.precision.layout = layout;
        let t = trainer(&cfg);
        let sampler = Sampler::from_trainer(&t).unwrap().with_steps(1).unwrap();
        let sizes: HashSet<usize> = t.dataset.graphs.iter().map(|g| g.n).collect();
        for out in sampler.sample(20, 4).unwrap() {
            let g = &out.graph;
            let m = g.max_n;
            assert!(sizes.contains(&g.n));
            for i in 0..m {
                for j in 0..m {
                    let c = g.edge_classes[i * m + j];
                    assert_eq!(c, g.edge_classes[j * m + i]);
                    if i >= g.n || j >= g.n || i == j {
                        assert_eq!(c, NULL_CLASS, "masked slot ({i}, {j}) holds class {c}");
                    }
                }
            }
        }
    }
}

#[test]
fn loss_at_minimum_time_matches_zero_state_prediction() {
    // With a small floor the null direction of the Laplacian keeps O(1)
    // variance even at t_min, so the near-zero premise needs eps = 1.
    let mut cfg = small_config(3);
    cfg.precision.eps = 1.0;
    cfg.precision.eps_obs = 1.0;
    let t = trainer(&cfg);
    let t_min = cfg.schedule.t_min;
    let (batch, _) = t.build_batch(0, Some(0.0)).unwrap();
    assert!(batch.iter().all(|ex| ex.t == t_min));
    let max_state = batch
        .iter()
        .flat_map(|ex| ex.theta_x.iter().chain(&ex.theta_a))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_state < 0.1, "flow states at t_min should be near zero, max {max_state}");

    let zeroed: Vec<_> = batch
        .iter()
        .cloned()
        .map(|mut ex| {
            ex.theta_x.iter_mut().for_each(|v| *v = 0.0);
            ex.theta_a.iter_mut().for_each(|v| *v = 0.0);
            ex
        })
        .collect();
    let loss = t.batch_loss(0, Some(0.0)).unwrap().loss;
    let zero = t
        .predictor
        .loss_and_grad(&t.params, &zeroed, t.loss_spec(), Execution::Sequential)
        .unwrap()
        .loss;
    assert!((loss - zero).abs() <= 5e-2 * zero.abs(), "{loss} vs {zero}");
}

#[test]
fn labeled_trees_on_four_nodes_are_uniform() {
    // Cayley: 4^2 = 16 labeled trees.
    let draws = 16_000;
    let data = gen_tree_dataset(draws, 4, 4, 99, true).unwrap();
    let mut counts = std::collections::HashMap::new();
    for g in &data.graphs {
        *counts.entry(g.edges()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 16);
    let p = 1.0 / 16.0;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    for &c in counts.values() {
        assert!((c as f64 / draws as f64 - p).abs() < 4.0 * se);
    }
}

#[test]
fn train_and_sample_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(8);
    let summary = train_to_dir(&cfg, &dir.path().join("train"), None).unwrap();
    assert_eq!(summary.final_step, 20);
    let log = std::fs::read_to_string(dir.path().join("train/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    let echoed = std::fs::read_to_string(dir.path().join("train").join(CONFIG_ECHO)).unwrap();
    assert!(echoed.contains("seed = 8"));

    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    let (graphs, metrics) = sample_to_dir(&ck, 12, 1, Some(5), &dir.path().join("sample")).unwrap();
    assert_eq!(graphs.len(), 12);
    assert_eq!(metrics.count, 12);
    let lines = std::fs::read_to_string(dir.path().join("sample/samples.jsonl")).unwrap();
    // Header line plus one record per graph.
    assert_eq!(lines.lines().count(), 13);
    assert!(dir.path().join("sample/metrics.json").exists());

    // Continue the same run to 30 steps.
    let mut more = cfg.clone();
    more.train.steps = 30;
    let resumed = train_to_dir(&more, &dir.path().join("train"), Some(&ck)).unwrap();
    assert_eq!((resumed.steps_run, resumed.final_step), (10, 30));
    let log = std::fs::read_to_string(dir.path().join("train/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
}
