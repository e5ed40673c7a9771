use std::collections::BTreeSet;

use proptest::prelude::*;

use super::planner::bfs;
use super::*;
use crate::env::{self, Action, EnvId, Goal, Instruction, Termination};

fn task(template: GoalTemplate, object: &str, recep: &str, layout: &[(&str, &str)]) -> HouseTask {
    HouseTask {
        goal: HouseGoal {
            template,
            object: object.into(),
            receptacle: recep.into(),
        },
        layout: layout
            .iter()
            .map(|(o, r)| Placement {
                object: (*o).into(),
                receptacle: (*r).into(),
            })
            .collect(),
    }
}

fn instruction(t: HouseTask) -> Instruction {
    Instruction {
        env_id: EnvId::GridHouse,
        task_id: "house-0001".into(),
        text: render_instruction(&t).unwrap(),
        goal: Goal::House(t),
    }
}

fn cool_potato() -> HouseTask {
    task(
        GoalTemplate::CoolThenPlace,
        "potato",
        "microwave",
        &[("potato", "sinkbasin"), ("mug", "fridge")],
    )
}

#[test]
fn cool_potato_expert_sequence() {
    let e = house_expert(&GridHouse, &instruction(cool_potato())).unwrap();
    let texts: Vec<&str> = e.steps.iter().map(|s| s.action_text.as_str()).collect();
    assert_eq!(
        texts,
        vec![
            "go to sinkbasin 1",
            "take potato 1 from sinkbasin 1",
            "go to fridge 1",
            "open fridge 1",
            "cool potato 1 with fridge 1",
            "go to microwave 1",
            "open microwave 1",
            "put potato 1 in/on microwave 1",
        ]
    );
    assert_eq!(e.outcome_reward, 1.0);
    assert_eq!(e.terminated, Termination::Completed);
    let full = bfs(&HouseState::from_task(&cool_potato()).unwrap(), 12, false).unwrap();
    assert_eq!(full.len(), 8);
}

#[test]
fn goal_predicate_cases() {
    let t = cool_potato();
    let mut s = HouseState::from_task(&t).unwrap();
    let p = s.objects.iter().position(|o| o.kind == 1).unwrap();
    s.objects[p].temp = Temp::Cold;
    s.objects[p].loc = ObjLoc::In(MICROWAVE);
    assert!(check_goal(&s, &s.goal));
    s.objects[p].loc = ObjLoc::Held;
    assert!(!check_goal(&s, &s.goal));
    s.objects[p].loc = ObjLoc::In(MICROWAVE);
    s.objects[p].temp = Temp::None;
    assert!(!check_goal(&s, &s.goal));
}

#[test]
fn take_rules() {
    let inst = instruction(cool_potato());
    let env = GridHouse;
    let s = env::reset(&env, &inst).unwrap();
    let go = |r: &str| Action::House(HouseAction::Go { recep: r.into() });
    let take = |o: &str, r: &str| {
        Action::House(HouseAction::Take {
            object: o.into(),
            recep: r.into(),
        })
    };
    let (s, _, _) = env::step(&env, &s, &go("sinkbasin")).unwrap();
    let (bad, obs, _) = env::step(&env, &s, &take("potato", "fridge")).unwrap();
    assert_eq!(obs.text, env::NOTHING_HAPPENS);
    assert_eq!(bad.inner, s.inner);
    assert_eq!(bad.step_counter, s.step_counter + 1);
    let (s, obs, _) = env::step(&env, &s, &take("potato", "sinkbasin")).unwrap();
    assert!(s.inner.held().is_some_and(|o| o.kind == 1));
    assert!(obs.text.ends_with("[10] inventory | potato 1"));
    assert!(obs.text.contains("[1] sinkbasin 1 | nothing (here)"));
    // Closed fridge hides and protects its contents.
    let (s, _, _) = env::step(&env, &s, &go("fridge")).unwrap();
    let (s2, obs, _) = env::step(&env, &s, &take("mug", "fridge")).unwrap();
    assert_eq!(obs.text, env::NOTHING_HAPPENS);
    assert_eq!(s2.inner, s.inner);
}

#[test]
fn truncation_and_binary_reward() {
    let env = GridHouse;
    let mut s = env::reset(&env, &instruction(cool_potato())).unwrap();
    for k in 0..MAX_TURNS {
        let r = if k % 2 == 0 { "desk" } else { "shelf" };
        s = env::step(&env, &s, &Action::House(HouseAction::Go { recep: r.into() })).unwrap().0;
    }
    assert_eq!(s.terminal, Some(Termination::MaxTurns));
    assert_eq!(env::score_outcome(&env, &s).unwrap(), 0.0);
}

#[test]
fn instruction_lists_visible_scene() {
    let text = render_instruction(&cool_potato()).unwrap();
    assert!(text.starts_with("Your task is to: cool some potato and put it in microwave."));
    assert!(text.contains("[1] sinkbasin 1 | potato 1"));
    assert!(text.contains("[8] fridge 1 | (closed)"));
    assert!(text.ends_with("[10] inventory | nothing"));
}

#[test]
fn default_dataset_counts_and_holdout() {
    let ds = generate_house_dataset(&HouseDataConfig::default(), 7).unwrap();
    assert_eq!(ds.train.len(), 300);
    assert_eq!(ds.test_seen.len(), 60);
    assert_eq!(ds.test_unseen.len(), 60);
    let triple = |i: &Instruction| match &i.goal {
        Goal::House(t) => (t.goal.object.clone(), t.goal.receptacle.clone(), t.goal.template),
        _ => unreachable!(),
    };
    let train: BTreeSet<_> = ds.train.iter().map(triple).collect();
    for i in &ds.test_unseen {
        assert!(!train.contains(&triple(i)));
    }
    let ids: BTreeSet<&str> = ds
        .train
        .iter()
        .chain(&ds.test_seen)
        .chain(&ds.test_unseen)
        .map(|i| i.task_id.as_str())
        .collect();
    assert_eq!(ids.len(), 420);
    for i in &ds.train {
        let e = house_expert(&GridHouse, i).unwrap();
        assert!(!e.is_empty() && e.len() <= MAX_TURNS);
    }
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let cfg = HouseDataConfig {
        n_train: 30,
        n_seen: 5,
        n_unseen: 5,
        ..HouseDataConfig::default()
    };
    let a = generate_house_dataset(&cfg, 7).unwrap();
    let b = generate_house_dataset(&cfg, 7).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test_unseen, b.test_unseen);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let c = HouseDataset::load(dir.path()).unwrap();
    assert_eq!(a.test_seen, c.test_seen);
}

fn small_task() -> impl Strategy<Value = HouseTask> {
    (
        prop::sample::select(GoalTemplate::ALL.to_vec()),
        0usize..N_TEMPERABLE,
        0usize..RECEPTACLES.len(),
        0usize..6,
        prop::collection::vec((0usize..OBJECTS.len(), 0usize..RECEPTACLES.len()), 0..2),
    )
        .prop_filter_map("target start differs from goal", |(tpl, obj, goal_r, start, extra)| {
            if start == goal_r {
                return None;
            }
            let mut layout = vec![(OBJECTS[obj], RECEPTACLES[start])];
            for (o, r) in extra {
                if layout.iter().all(|(x, _)| *x != OBJECTS[o]) {
                    layout.push((OBJECTS[o], RECEPTACLES[r]));
                }
            }
            Some(task(tpl, OBJECTS[obj], RECEPTACLES[goal_r], &layout))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn pruned_plan_is_as_short_as_exhaustive_search(t in small_task()) {
        let s = HouseState::from_task(&t).unwrap();
        let pruned = bfs(&s, MAX_TURNS, true).unwrap();
        let full = bfs(&s, MAX_TURNS, false).unwrap();
        prop_assert_eq!(pruned.len(), full.len());
    }

    #[test]
    fn objects_are_conserved(t in small_task(), picks in prop::collection::vec(0usize..NUM_SLOTS, 1..30)) {
        let env = GridHouse;
        let mut s = env::reset(&env, &instruction(t)).unwrap();
        let kinds = |s: &HouseState| s.objects.iter().map(|o| o.kind).collect::<Vec<_>>();
        let start = kinds(&s.inner);
        for p in picks {
            if s.is_terminal() {
                break;
            }
            let legal = env.legal_actions(&s.inner);
            let a = legal[p % legal.len()].action.clone();
            s = env::step(&env, &s, &a).unwrap().0;
            prop_assert_eq!(kinds(&s.inner), start.clone());
            prop_assert!(s.inner.objects.iter().filter(|o| o.loc == ObjLoc::Held).count() <= 1);
        }
    }
}
