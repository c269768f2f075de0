use dive_core::backbone::{generate, Backbone, DecodeConfig};
use dive_core::distill::{evaluate_objective, prepare, train_adapters, DistillConfig};
use dive_core::pipeline::commands as cmd;
use dive_core::pipeline::{stages, RunConfig};
use dive_core::steering::{AdapterMode, AdapterSet, SteeringConfig};
use dive_core::synthtask::{build_prompt, make_splits, query_tokens, select_demos, Split, Splits};
use dive_core::Error;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.sizes.distill = 4;
    cfg.task.sizes.pool = 8;
    cfg.task.sizes.val = 2;
    cfg.task.sizes.test = 3;
    cfg.backbone.d_model = 16;
    cfg.backbone.n_layers = 2;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ff = 32;
    cfg.pretrain.steps = 3;
    cfg.pretrain.batch_size = 2;
    cfg.steering.rank = 4;
    cfg.distill.k = 8;
    cfg.distill.shots = 2;
    cfg.distill.epochs = 1;
    cfg.distill.batch_size = 2;
    cfg.eval.max_new_tokens = 16;
    cfg.eval.seeds = vec![0];
    cfg
}

fn setup() -> (RunConfig, Backbone, Splits) {
    let cfg = small();
    let model = Backbone::init(cfg.backbone).unwrap();
    let splits = make_splits(&cfg.task).unwrap();
    (cfg, model, splits)
}

#[test]
fn cached_top_k_matches_a_full_recompute() {
    let (cfg, model, splits) = setup();
    let out = stages::build_cache(&cfg, &model, &splits).unwrap();
    assert!(out.skipped.is_empty());
    for c in splits.distill.iter().chain(&splits.val) {
        let rec = out.cache.get(c.id).unwrap();
        let demos = select_demos(&splits.pool, cfg.distill.shots, cfg.task.seed, c.id).unwrap();
        let layout = build_prompt(c, &demos, cfg.backbone.max_context).unwrap();
        let logits = model.logits(layout.model_input()).unwrap();
        for (p, row) in layout.predicting_positions().enumerate() {
            let mut order: Vec<usize> = (0..logits.cols()).collect();
            let r = logits.row(row);
            order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            let want: Vec<u32> = order[..cfg.distill.k].iter().map(|&i| i as u32).collect();
            assert_eq!(rec.ids[p], want, "case {} position {p}", c.id);
            let vals: Vec<f32> = want.iter().map(|&i| r[i as usize] as f32).collect();
            assert_eq!(rec.logits[p], vals);
        }
    }
}

#[test]
fn alpha_endpoints_select_a_single_term() {
    let (cfg, model, splits) = setup();
    let cache = stages::build_cache(&cfg, &model, &splits).unwrap().cache;
    let lex = stages::task_lexicon(&cfg).unwrap();
    let cases = prepare(&splits.distill, &cache, &lex.matcher).unwrap();
    let mut adapters = AdapterSet::init(&cfg.steering, 16, 2).unwrap();
    for m in adapters.tensors_mut() {
        m.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f64 - 3.0) * 0.05);
    }
    let kl_only = evaluate_objective(&model, &adapters, &cases, &DistillConfig { alpha: 1.0, ..cfg.distill.clone() }).unwrap();
    assert!(kl_only.kl > 0.0);
    assert!((kl_only.loss - kl_only.kl).abs() < 1e-12);
    let ce_only = evaluate_objective(&model, &adapters, &cases, &DistillConfig { alpha: 0.0, ..cfg.distill.clone() }).unwrap();
    assert!(ce_only.ce > 0.0);
    assert!((ce_only.loss - ce_only.ce).abs() < 1e-12);
    let mixed = evaluate_objective(&model, &adapters, &cases, &cfg.distill).unwrap();
    let a = cfg.distill.alpha;
    assert!((mixed.loss - (a * kl_only.kl + (1.0 - a) * ce_only.ce)).abs() < 1e-10);
}

#[test]
fn distillation_leaves_the_backbone_untouched() {
    let (cfg, model, splits) = setup();
    let before = model.clone();
    let cache = stages::build_cache(&cfg, &model, &splits).unwrap().cache;
    let lex = stages::task_lexicon(&cfg).unwrap();
    let train = prepare(&splits.distill, &cache, &lex.matcher).unwrap();
    let val = prepare(&splits.val, &cache, &lex.matcher).unwrap();
    let mut adapters = AdapterSet::init(&cfg.steering, 16, 2).unwrap();
    let init = adapters.clone();
    let report = train_adapters(&model, &mut adapters, &train, &val, &cfg.distill, |_| {}).unwrap();
    assert_eq!(model, before);
    assert_ne!(adapters, init);
    assert!(report.steps.iter().all(|s| s.breakdown.loss.is_finite()));
}

#[test]
fn unused_or_zero_adapters_reproduce_the_bare_backbone() {
    let (cfg, model, splits) = setup();
    let queries: Vec<stages::Query> = splits.test.iter().map(stages::Query::from).collect();
    let bare = stages::generate_reports(&model, None, &queries, 16).unwrap();
    let off = AdapterSet::off(16, 2);
    assert_eq!(stages::generate_reports(&model, Some(&off), &queries, 16).unwrap(), bare);
    let zero = AdapterSet::init(
        &SteeringConfig {
            mode: AdapterMode::Dynamic,
            ..cfg.steering.clone()
        },
        16,
        2,
    )
    .unwrap();
    assert_eq!(stages::generate_reports(&model, Some(&zero), &queries, 16).unwrap(), bare);
    let direct = generate(
        &model,
        &query_tokens(&splits.test[0].condition),
        &DecodeConfig {
            max_new_tokens: 16,
            ..DecodeConfig::default()
        },
        None,
    )
    .unwrap();
    assert_eq!(bare[0].tokens, direct.tokens);
}

#[test]
fn config_errors_name_the_field() {
    let e = RunConfig::from_toml("[distill]\nalpah = 0.5\n").unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("distill"), "{e}");
    let e = RunConfig::from_toml("[backbone]\nvocab_size = 10\n").unwrap_err();
    assert!(matches!(&e, Error::Config { field, .. } if field == "backbone.vocab_size"), "{e}");
    let e = RunConfig::from_toml("[distill]\nalpha = \"high\"\n").unwrap_err();
    assert!(matches!(&e, Error::Config { field, .. } if field == "distill.alpha"), "{e}");
    let cfg = small();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn stages_refuse_mismatched_or_existing_artifacts() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    cmd::cmd_gen_data(&cfg, &d("data"), false).unwrap();
    assert_eq!(cmd::cmd_gen_data(&cfg, &d("data"), false).unwrap_err().exit_code(), 2);
    cmd::cmd_gen_data(&cfg, &d("data"), true).unwrap();
    cmd::cmd_pretrain(&cfg, &d("backbone"), false, |_, _| {}).unwrap();
    cmd::cmd_cache(&cfg, &d("data"), &d("backbone"), &d("cache"), false).unwrap();

    // a cache built for a different shot count is rejected before training
    let mut other = cfg.clone();
    other.distill.shots = 3;
    let e = cmd::cmd_distill(&other, &d("data"), &d("backbone"), &d("cache"), &d("a"), false).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");

    // a backbone of another shape is rejected at load
    let mut wide = cfg.clone();
    wide.backbone.d_model = 32;
    wide.backbone.d_ff = 64;
    let e = cmd::cmd_generate(&wide, &d("data"), &d("backbone"), None, Split::Test, &d("g"), false).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");

    let dataset = d("data").join(cmd::DATASET_FILE);
    let text = std::fs::read_to_string(&dataset).unwrap();
    std::fs::write(&dataset, text.replacen('1', "2", 1)).unwrap();
    let e = cmd::cmd_generate(&cfg, &d("data"), &d("backbone"), None, Split::Test, &d("g2"), false).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}
