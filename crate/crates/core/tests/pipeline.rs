use hdmnet::checkpoint::{self, Dtype};
use hdmnet::config::RunConfig;
use hdmnet::episodes::{generate_class_bank, indexed_episode};
use hdmnet::train::{load_model, save_model, total_loss, train, train_with, training_pool};
use hdmnet::{Error, Graph, HdmNet};

fn short_config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("steps = 6\nbatch = 2\ntrain_episodes = 4\nlr = 0.1\n{extra}"), None).unwrap()
}

#[test]
fn zero_steps_returns_the_initialisation() {
    let cfg = short_config("steps = 0");
    let outcome = train(&cfg).unwrap();
    assert!(outcome.log.is_empty());
    assert_eq!(outcome.net, HdmNet::new(cfg.model.clone(), cfg.seed).unwrap());
}

#[test]
fn repeated_episode_loss_falls() {
    let cfg = RunConfig::parse("steps = 300\nbatch = 1\ntrain_episodes = 1", None).unwrap();
    let outcome = train(&cfg).unwrap();
    let first = outcome.log[0].loss;
    let last = outcome.log.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn runs_are_deterministic_and_checkpoints_round_trip() {
    let cfg = short_config("seed = 11");
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    let bytes = checkpoint::encode(&a.net.to_records(Dtype::F64)).unwrap();
    assert_eq!(bytes, checkpoint::encode(&b.net.to_records(Dtype::F64)).unwrap());
    assert_eq!(a.log_text(), b.log_text());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &a.net).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, a.net);

    let bank = generate_class_bank(8, 0).unwrap();
    let e = indexed_episode(&bank, &[6, 7], 3, 1, 64, 64, 5).unwrap();
    let p1 = a.net.predict(&e.query.image, &e.support_pairs()).unwrap();
    let p2 = loaded.predict(&e.query.image, &e.support_pairs()).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn different_seeds_give_different_models() {
    let a = train(&short_config("seed = 1")).unwrap();
    let b = train(&short_config("seed = 2")).unwrap();
    assert_ne!(a.net, b.net);
}

#[test]
fn log_has_header_and_one_row_per_step() {
    let cfg = short_config("");
    let outcome = train(&cfg).unwrap();
    let text = outcome.log_text();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,ce,kl"));
    assert_eq!(lines.count(), cfg.steps);
}

#[test]
fn periodic_evaluation_is_recorded() {
    let cfg = short_config("eval_every = 3");
    let pool = training_pool(&cfg).unwrap();
    let mut seen = 0;
    let outcome = train_with(&cfg, &pool, |_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    let steps: Vec<usize> = outcome.evals.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![3, 6]);
    assert!(outcome.evals.iter().all(|(_, r)| (0.0..=1.0).contains(&r.miou)));
}

#[test]
fn disabling_distillation_keeps_cross_entropy() {
    let net = HdmNet::new(Default::default(), 3).unwrap();
    let bank = generate_class_bank(8, 0).unwrap();
    let e = indexed_episode(&bank, &[0, 1], 0, 1, 64, 64, 3).unwrap();
    let terms = |lambda: f64| {
        let mut g = Graph::new();
        let b = net.params().bind(&mut g).unwrap();
        let pass = net.forward(&mut g, &b, &e.query.image, &e.support_pairs()).unwrap();
        let t = total_loss(&mut g, &pass.logits, &e.query.mask, &pass.stage_distributions(), lambda).unwrap();
        (g.value(t.total).item().unwrap(), g.value(t.ce).item().unwrap())
    };
    let (total0, ce0) = terms(0.0);
    let (total1, ce1) = terms(1.0);
    assert_eq!(ce0, ce1);
    assert_eq!(total0, ce0);
    assert!(total1 > ce1);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let cfg = short_config("lr = 1e12\nclip_norm = 0\nsteps = 40");
    match train(&cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step < 40),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}
