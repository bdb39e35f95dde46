use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use step_core::data::{make_batches, split_corpus, TokenStream};
use step_core::model::{build_model, ToyModel, ToyModelConfig};
use step_core::trainer::{
    derive_seed, run_step_schedule, AdapterSettings, Collect, RunSpec, Silent, StageSchedule, TrainConfig, TrainError,
    Trainer,
};
use step_core::{flops_staged, stage_state_bytes, Graph, StagePlan};

/// Pseudo-text with some structure: random words over a small alphabet.
fn corpus(len: usize, seed: u64) -> (TokenStream, TokenStream) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(len);
    while bytes.len() < len {
        let word = rng.random_range(1..8);
        for _ in 0..word {
            bytes.push(b"etaoinshrdlu"[rng.random_range(0..12)]);
        }
        bytes.push(b' ');
    }
    bytes.truncate(len);
    split_corpus(&bytes, 0.1).unwrap()
}

fn train_config(total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        warmup_steps: 3,
        restart_warmup_steps: 2,
        batch_size: 2,
        seq_len: 16,
        eval_windows: Some(8),
        log_interval: 1,
        max_epochs: 10,
        ..TrainConfig::default()
    }
}

fn spec(plan: &[usize], rank: Option<usize>, total_steps: u64) -> RunSpec {
    let plan = StagePlan::new(plan.to_vec()).unwrap();
    let train = train_config(total_steps);
    RunSpec {
        model: ToyModelConfig::new(12, plan.target_layers(), 2, 16),
        schedule: StageSchedule::from_fraction(plan.stage_count(), total_steps, train.growth_fraction),
        plan,
        growth: Default::default(),
        adapters: rank.map(|rank| AdapterSettings { rank, scale: None }),
        train,
    }
}

fn cosine(peak: f64, min: f64, p: f64) -> f64 {
    min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * p.clamp(0.0, 1.0)).cos())
}

/// Hand-written single-stage training loop: linear warmup, cosine decay,
/// global-norm clipping and AdamW with decay on matrices only.
fn plain_loop(spec: &RunSpec, train: &TokenStream) -> ToyModel<f64> {
    let cfg = &spec.train;
    let mut model: ToyModel<f64> = build_model(spec.model, cfg.seed).unwrap();
    let mut batches = make_batches(train, cfg.seq_len, cfg.batch_size, derive_seed(cfg.seed, 1)).unwrap();
    let params = model.params().len();
    let mut m = vec![Vec::new(); params];
    let mut v = vec![Vec::new(); params];
    let (peak, min) = (cfg.peak_lr, cfg.peak_lr * cfg.min_lr_ratio);
    for step in 0..cfg.total_steps {
        let lr = if step < cfg.warmup_steps {
            peak * step as f64 / cfg.warmup_steps as f64
        } else {
            cosine(peak, min, (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64)
        };
        let batch = batches.next_batch().unwrap();
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, &batch.inputs, batch.batch, batch.seq).unwrap();
        let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(pass.logits, &targets).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = pass.params.iter().map(|&p| g.take_grad(p).unwrap().into_data()).collect();
        let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let t = step as i32 + 1;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (k, p) in model.params_mut().into_iter().enumerate() {
            let wd = if p.tensor.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            if m[k].is_empty() {
                m[k] = vec![0.0; p.tensor.len()];
                v[k] = vec![0.0; p.tensor.len()];
            }
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = grads[k][i] * scale;
                m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * gi;
                v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * gi * gi;
                *x -= lr * ((m[k][i] / c1) / ((v[k][i] / c2).sqrt() + cfg.eps) + wd * *x);
            }
        }
    }
    model
}

#[test]
fn single_stage_run_matches_a_plain_training_loop() {
    let (train, val) = corpus(20_000, 1);
    let s = spec(&[2], None, 25);
    let expected = plain_loop(&s, &train);
    let outcome = run_step_schedule::<f64>(s, &train, &val, &mut Silent).unwrap();
    assert_eq!(outcome.ledger.stages.len(), 1);
    for (a, b) in outcome.model.params().iter().zip(expected.params()) {
        let rel = a.tensor.max_rel_diff(b.tensor);
        assert!(rel < 1e-12, "{} differs by {rel}", a.name);
    }
}

#[test]
fn frozen_weights_are_bitwise_unchanged_within_a_stage() {
    let (train, val) = corpus(20_000, 2);
    for rank in [Some(2), None] {
        let mut t = Trainer::<f32>::new(spec(&[1, 1], rank, 20), &train, &val).unwrap();
        t.run_stage(&mut Silent).unwrap();
        t.advance(&mut Silent).unwrap();
        let frozen: Vec<_> = t.model.layers.iter().filter(|l| l.frozen).map(|l| (l.weights.clone(), l.attn_gain.clone())).collect();
        assert_eq!(frozen.len(), 1);
        let adapters_before = t.model.layers[0].adapters.clone();
        t.run_stage(&mut Silent).unwrap();
        let after: Vec<_> = t.model.layers.iter().filter(|l| l.frozen).map(|l| (l.weights.clone(), l.attn_gain.clone())).collect();
        assert_eq!(frozen, after);
        if rank.is_some() {
            assert_ne!(adapters_before, t.model.layers[0].adapters, "adapters should train");
        }
        // no optimiser state for frozen base weights
        assert!(t.optimizer.names().all(|n| !n.starts_with("layers.0.") || n.contains(".adapter_")), "{:?}", t.optimizer.names().collect::<Vec<_>>());
    }
}

#[test]
fn adapter_reset_restarts_adapter_optimiser_state() {
    let (train, val) = corpus(20_000, 3);
    let mut s = spec(&[1, 1], Some(2), 20);
    s.schedule = StageSchedule { stage_steps: vec![10, 5], first_horizon: 13 };
    s.train.adapter_reset_interval = 3;
    let mut t = Trainer::<f32>::new(s, &train, &val).unwrap();
    t.run_stage(&mut Silent).unwrap();
    t.advance(&mut Silent).unwrap();
    assert!(t.optimizer.names().all(|n| !n.starts_with("layers.")), "growth keeps only embedding state");
    let record = t.run_stage(&mut Silent).unwrap();
    assert_eq!(record.adapter_resets, 1);
    // reset before local step 3, so adapters saw steps 3 and 4 only
    assert_eq!(t.optimizer.state("layers.0.wq.adapter_a").unwrap().step, 2);
    assert_eq!(t.optimizer.state("layers.1.wq").unwrap().step, 5);
    assert_eq!(t.optimizer.state("embed").unwrap().step, 15);
}

#[test]
fn first_logged_loss_is_near_uniform() {
    let (train, val) = corpus(20_000, 4);
    let mut log = Collect::default();
    run_step_schedule::<f32>(spec(&[1], None, 4), &train, &val, &mut log).unwrap();
    let first = log.records[0].loss;
    assert!((first - 256f64.ln()).abs() / 256f64.ln() < 0.02, "{first}");
}

#[test]
fn exhausted_data_is_an_error() {
    let (train, val) = corpus(2_000, 5);
    let mut s = spec(&[1], None, 500);
    s.train.max_epochs = 1;
    assert!(matches!(run_step_schedule::<f32>(s, &train, &val, &mut Silent), Err(TrainError::DataExhausted { .. })));
}

#[test]
fn runaway_learning_rate_reports_divergence_with_ledger() {
    let (train, val) = corpus(20_000, 6);
    let mut s = spec(&[1, 1], Some(2), 40);
    s.train.peak_lr = 1e6;
    s.train.grad_clip = 0.0;
    match run_step_schedule::<f32>(s, &train, &val, &mut Silent) {
        Err(TrainError::Diverged { step, ledger, .. }) => assert!(step > 0 && ledger.stages.len() <= 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(o) => panic!("expected divergence, got ppl {:?}", o.ledger.final_eval()),
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let (train, val) = corpus(20_000, 7);
    let a = run_step_schedule::<f32>(spec(&[1, 2], Some(2), 12), &train, &val, &mut Silent).unwrap();
    let b = run_step_schedule::<f32>(spec(&[1, 2], Some(2), 12), &train, &val, &mut Silent).unwrap();
    assert_eq!(a.ledger, b.ledger);
    assert_eq!(a.model, b.model);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ledger_reconciles_with_closed_forms(plan in prop::collection::vec(1usize..3, 1..4), rank in prop::option::of(1usize..4)) {
        let (train, val) = corpus(8_000, 8);
        let stages = plan.len() as u64;
        let s = spec(&plan, rank, 4 * stages + 4);
        let shape = s.shape();
        let plan = s.plan.clone();
        let outcome = run_step_schedule::<f32>(s, &train, &val, &mut Silent).unwrap();
        for (i, rec) in outcome.ledger.stages.iter().enumerate() {
            prop_assert_eq!(rec.simulated_bytes, stage_state_bytes(&plan, i + 1, &shape).unwrap().total());
            prop_assert_eq!(rec.flops, flops_staged(&[rec.work()]));
        }
        prop_assert_eq!(outcome.ledger.total_flops(), flops_staged(&outcome.ledger.work()));
    }
}
