use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::env::{self, EnvId, Goal, Instruction, Termination};

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn product(id: &str, ptype: &str, attrs: &[&str], opts: &[&str], price: f64) -> Product {
    Product {
        product_id: id.into(),
        ptype: ptype.into(),
        attributes: set(attrs),
        options: set(opts),
        price,
    }
}

fn goal_ab_x() -> ShopGoal {
    ShopGoal {
        target_type: "T".into(),
        required_attributes: set(&["a", "b"]),
        required_options: set(&["x"]),
        budget: 50.0,
    }
}

fn instruction(goal: ShopGoal) -> Instruction {
    Instruction {
        env_id: EnvId::ShopSim,
        task_id: "shop-0001".into(),
        text: goal.render(),
        goal: Goal::Shop(goal),
    }
}

/// A catalog where the query "T a b" ranks a near-miss first.
fn micro_catalog() -> Catalog {
    Catalog::new(vec![
        product("p0000", "T", &["a", "b"], &["y"], 20.0),
        product("p0001", "T", &["a", "b"], &["x", "y"], 20.0),
        product("p0002", "T", &["a"], &["x"], 20.0),
        product("p0003", "W", &["a", "b"], &["x"], 20.0),
    ])
    .unwrap()
}

#[test]
fn purchase_score_examples() {
    let g = goal_ab_x();
    let sel = set(&["x"]);
    assert_eq!(score_purchase(&g, &product("p", "T", &["a", "b"], &["x"], 20.0), &sel), 1.0);
    assert_eq!(score_purchase(&g, &product("p", "T", &["a"], &["x"], 20.0), &sel), 0.75);
    assert_eq!(score_purchase(&g, &product("p", "W", &["a", "b"], &["x"], 20.0), &sel), 0.0);
}

#[test]
fn page_scores() {
    let g = goal_ab_x();
    let cat = micro_catalog();
    assert_eq!(heuristic_page_score(&g, &Page::Home, &cat), 0.0);
    let results = cat.search(&set(&["T", "a", "b"]), TOP_K);
    let page = Page::SearchResults {
        query: set(&["T", "a", "b"]),
        results,
    };
    assert_eq!(heuristic_page_score(&g, &page, &cat), 1.0);
    let pp = Page::ProductPage {
        product_id: "p0002".into(),
        selected: BTreeSet::new(),
    };
    assert_eq!(heuristic_page_score(&g, &pp, &cat), 0.75);
}

fn subsets(options: &BTreeSet<String>) -> Vec<BTreeSet<String>> {
    let items: Vec<&String> = options.iter().collect();
    (0..1u32 << items.len())
        .map(|mask| {
            items
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| (*s).clone())
                .collect()
        })
        .collect()
}

#[test]
fn search_ranks_by_overlap_then_id() {
    let cat = micro_catalog();
    assert_eq!(
        cat.search(&set(&["T", "a", "b"]), TOP_K),
        vec!["p0000", "p0001", "p0002", "p0003"]
    );
    assert_eq!(cat.search(&set(&["W"]), TOP_K), vec!["p0003"]);
    assert!(cat.search(&set(&["zzz"]), TOP_K).is_empty());
}

#[test]
fn expert_lengths_follow_option_count() {
    let cat = Arc::new(micro_catalog());
    let env = ShopSim::new(cat);
    let expert = shop_expert(&env, &instruction(goal_ab_x())).unwrap();
    assert_eq!(expert.len(), 4);
    assert_eq!(expert.outcome_reward, 1.0);
    assert_eq!(expert.steps[1].action_text, "click[p0001]");

    let mut g = goal_ab_x();
    g.required_options = set(&["x", "y"]);
    assert_eq!(shop_expert(&env, &instruction(g)).unwrap().len(), 5);
    let mut g = goal_ab_x();
    g.required_options.clear();
    let e = shop_expert(&env, &instruction(g)).unwrap();
    assert_eq!(e.len(), 3);
    assert_eq!(e.steps[1].action_text, "click[p0000]");
}

#[test]
fn expert_fails_without_perfect_product() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let mut g = goal_ab_x();
    g.required_attributes = set(&["a", "c"]);
    assert!(matches!(
        shop_expert(&env, &instruction(g)),
        Err(crate::Error::DatasetGeneration(_))
    ));
}

#[test]
fn buy_ends_episode_with_purchase_score() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let inst = instruction(goal_ab_x());
    let s = env::reset(&env, &inst).unwrap();
    assert_eq!(s.step_counter, 0);
    assert_eq!(s.inner.page, Page::Home);
    let steps = [
        ShopAction::Search { query: set(&["T", "a", "b"]) },
        ShopAction::ClickProduct { product_id: "p0002".into() },
        ShopAction::Buy,
    ];
    let mut s = s;
    let mut done = false;
    for a in steps {
        let (n, _, d) = env::step(&env, &s, &Action::Shop(a)).unwrap();
        s = n;
        done = d;
    }
    assert!(done);
    assert_eq!(s.terminal, Some(Termination::Completed));
    // Attribute a and the budget out of four terms.
    assert_eq!(env::score_outcome(&env, &s).unwrap(), 0.5);
}

#[test]
fn invalid_action_only_consumes_a_turn() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let s = env::reset(&env, &instruction(goal_ab_x())).unwrap();
    let (n, obs, done) = env::step(&env, &s, &Action::Shop(ShopAction::Buy)).unwrap();
    assert_eq!(obs.text, env::NOTHING_HAPPENS);
    assert!(!done);
    assert_eq!(n.step_counter, 1);
    assert_eq!(n.inner.page, Page::Home);
}

#[test]
fn truncation_scores_zero() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let mut s = env::reset(&env, &instruction(goal_ab_x())).unwrap();
    for _ in 0..MAX_TURNS {
        let (n, _, _) = env::step(&env, &s, &Action::Shop(ShopAction::Back)).unwrap();
        s = n;
    }
    assert_eq!(s.terminal, Some(Termination::MaxTurns));
    assert_eq!(env::score_outcome(&env, &s).unwrap(), 0.0);
    assert!(env::step(&env, &s, &Action::Shop(ShopAction::Back)).is_err());
}

#[test]
fn non_terminal_outcome_is_a_contract_error() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let s = env::reset(&env, &instruction(goal_ab_x())).unwrap();
    assert!(matches!(env::score_outcome(&env, &s), Err(crate::Error::Contract(_))));
}

#[test]
fn wrong_environment_is_rejected() {
    let env = ShopSim::new(Arc::new(micro_catalog()));
    let mut inst = instruction(goal_ab_x());
    inst.env_id = EnvId::GridHouse;
    assert!(matches!(env::reset(&env, &inst), Err(crate::Error::Config { .. })));
}

#[test]
fn default_dataset_counts_and_solvability() {
    let ds = generate_shop_dataset(&ShopDataConfig::default(), 7).unwrap();
    assert_eq!(ds.train.len(), 300);
    assert_eq!(ds.test.len(), 100);
    let env = ds.env();
    let train_ids: BTreeSet<&str> = ds.train.iter().map(|i| i.task_id.as_str()).collect();
    for inst in &ds.test {
        assert!(!train_ids.contains(inst.task_id.as_str()));
        let e = shop_expert(&env, inst).unwrap();
        assert_eq!(e.outcome_reward, 1.0);
        let env2 = ds.env();
        let replayed = env::replay(&env2, e.view()).unwrap();
        assert_eq!(env::score_outcome(&env2, &replayed).unwrap(), 1.0);
    }
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let cfg = ShopDataConfig {
        n_train: 40,
        n_test: 10,
        n_background: 40,
        ..ShopDataConfig::default()
    };
    let a = generate_shop_dataset(&cfg, 7).unwrap();
    let b = generate_shop_dataset(&cfg, 7).unwrap();
    assert_eq!(a.catalog.products(), b.catalog.products());
    assert_eq!(a.train, b.train);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let c = ShopDataset::load(dir.path()).unwrap();
    assert_eq!(a.catalog.products(), c.catalog.products());
    assert_eq!(a.test, c.test);
}

#[test]
fn expert_page_scores_never_decrease() {
    let ds = generate_shop_dataset(
        &ShopDataConfig {
            n_train: 60,
            n_test: 1,
            n_background: 60,
            ..ShopDataConfig::default()
        },
        11,
    )
    .unwrap();
    let env = ds.env();
    for inst in &ds.train {
        let e = shop_expert(&env, inst).unwrap();
        let Goal::Shop(g) = &inst.goal else { unreachable!() };
        let mut s = env::reset(&env, inst).unwrap();
        let mut last = heuristic_page_score(g, &s.inner.page, env.catalog());
        for st in &e.steps {
            s = env::step(&env, &s, &st.action).unwrap().0;
            let now = heuristic_page_score(g, &s.inner.page, env.catalog());
            assert!(now >= last, "{} dropped from {last} to {now}", inst.task_id);
            last = now;
        }
    }
}

fn token() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from)
}

proptest! {
    #[test]
    fn best_option_score_is_max_over_subsets(
        attrs in prop::collection::btree_set(token(), 0..4),
        opts in prop::collection::btree_set(token(), 0..4),
        req_a in prop::collection::btree_set(token(), 0..3),
        req_o in prop::collection::btree_set(token(), 0..3),
        price in 1.0f64..100.0,
        budget in 1.0f64..100.0,
        same_type in any::<bool>(),
    ) {
        prop_assume!(req_a.len() + req_o.len() >= 1);
        let g = ShopGoal { target_type: "T".into(), required_attributes: req_a.clone(), required_options: req_o.clone(), budget };
        let p = Product { product_id: "p".into(), ptype: if same_type { "T" } else { "W" }.into(), attributes: attrs, options: opts.clone(), price };
        let enumerated = subsets(&opts).iter().map(|s| score_purchase(&g, &p, s)).fold(0.0, f64::max);
        prop_assert_eq!(best_option_score(&g, &p), enumerated);
        let s = score_purchase(&g, &p, &opts);
        prop_assert!((0.0..=1.0).contains(&s));
        let perfect = same_type && req_a.is_subset(&p.attributes) && req_o.is_subset(&opts) && price <= budget;
        prop_assert_eq!(s == 1.0, perfect);
    }
}
