use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    house_expert, is_closable, render_instruction, GoalTemplate, GridHouse, HouseGoal, HouseTask,
    Placement, MAX_TURNS, N_TEMPERABLE, OBJECTS, RECEPTACLES,
};
use crate::env::store::{read_instructions, write_instructions};
use crate::env::{EnvId, Goal, Instruction};
use crate::error::{Error, Result};
use crate::rng::named_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HouseDataConfig {
    pub n_train: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Fraction of (object, receptacle, template) triples reserved for the
    /// unseen split.
    pub holdout_fraction: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for HouseDataConfig {
    fn default() -> Self {
        HouseDataConfig {
            n_train: 300,
            n_seen: 60,
            n_unseen: 60,
            holdout_fraction: 0.2,
            min_distractors: 2,
            max_distractors: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HouseDataset {
    pub train: Vec<Instruction>,
    pub test_seen: Vec<Instruction>,
    pub test_unseen: Vec<Instruction>,
}

impl HouseDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_instructions(&dir.join("train.jsonl"), &self.train)?;
        write_instructions(&dir.join("test_seen.jsonl"), &self.test_seen)?;
        write_instructions(&dir.join("test_unseen.jsonl"), &self.test_unseen)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(HouseDataset {
            train: read_instructions(&dir.join("train.jsonl"))?,
            test_seen: read_instructions(&dir.join("test_seen.jsonl"))?,
            test_unseen: read_instructions(&dir.join("test_unseen.jsonl"))?,
        })
    }
}

type Triple = (usize, usize, GoalTemplate);

fn all_triples() -> Vec<Triple> {
    let mut out = Vec::new();
    for t in GoalTemplate::ALL {
        for o in 0..OBJECTS.len() {
            if t != GoalTemplate::Place && o >= N_TEMPERABLE {
                continue;
            }
            for r in 0..RECEPTACLES.len() {
                out.push((o, r, t));
            }
        }
    }
    out
}

fn make_task(rng: &mut rand_chacha::ChaCha8Rng, triple: Triple, config: &HouseDataConfig) -> HouseTask {
    let (object, receptacle, template) = triple;
    let open_spots: Vec<usize> = (0..RECEPTACLES.len())
        .filter(|&r| !is_closable(r) && r != receptacle)
        .collect();
    let start = *open_spots.choose(rng).expect("open receptacles exist");
    let mut layout = vec![Placement {
        object: OBJECTS[object].to_string(),
        receptacle: RECEPTACLES[start].to_string(),
    }];
    let others: Vec<usize> = (0..OBJECTS.len()).filter(|&o| o != object).collect();
    let n = rng.gen_range(config.min_distractors..=config.max_distractors);
    for &o in others.choose_multiple(rng, n.min(others.len())) {
        let r = rng.gen_range(0..RECEPTACLES.len());
        layout.push(Placement {
            object: OBJECTS[o].to_string(),
            receptacle: RECEPTACLES[r].to_string(),
        });
    }
    layout.sort_by(|a, b| a.object.cmp(&b.object));
    HouseTask {
        goal: HouseGoal {
            template,
            object: OBJECTS[object].to_string(),
            receptacle: RECEPTACLES[receptacle].to_string(),
        },
        layout,
    }
}

/// Train, seen-test and unseen-test splits, deterministic under `seed`.
///
/// Unseen tasks use only triples that never occur in train or seen-test.
pub fn generate_house_dataset(config: &HouseDataConfig, seed: u64) -> Result<HouseDataset> {
    if config.n_train == 0 {
        return Err(Error::config("house.n_train", "must be positive"));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::config("house.holdout_fraction", "must be in [0, 1)"));
    }
    if config.min_distractors > config.max_distractors {
        return Err(Error::config(
            "house.min_distractors",
            "must not exceed max_distractors",
        ));
    }
    let mut triples = all_triples();
    triples.shuffle(&mut named_stream(seed, "house-holdout", 0));
    let n_held = ((triples.len() as f64) * config.holdout_fraction).round() as usize;
    if config.n_unseen > 0 && n_held == 0 {
        return Err(Error::config(
            "house.holdout_fraction",
            "too small to leave any unseen combinations",
        ));
    }
    let held: Vec<Triple> = triples[..n_held].to_vec();
    let mut seen_pool: Vec<Triple> = triples[n_held..].to_vec();
    seen_pool.sort();
    let mut held_pool = held;
    held_pool.sort();

    let env = GridHouse;
    let mut counter = 0usize;
    let mut build = |pool: &[Triple], n: usize, stream: &str| -> Result<Vec<Instruction>> {
        let mut out = Vec::with_capacity(n);
        let mut attempt = 0u64;
        while out.len() < n {
            if attempt > 50 * n as u64 + 100 {
                return Err(Error::DatasetGeneration(format!(
                    "could not build {n} solvable {stream} tasks"
                )));
            }
            let mut rng = named_stream(seed, stream, attempt);
            attempt += 1;
            let triple = *pool.choose(&mut rng).expect("non-empty pool");
            let task = make_task(&mut rng, triple, config);
            let instruction = Instruction {
                env_id: EnvId::GridHouse,
                task_id: format!("house-{counter:04}"),
                text: render_instruction(&task)?,
                goal: Goal::House(task),
            };
            match house_expert(&env, &instruction) {
                Ok(expert) if expert.len() <= MAX_TURNS => {
                    counter += 1;
                    out.push(instruction);
                }
                _ => {}
            }
        }
        Ok(out)
    };
    let train = build(&seen_pool, config.n_train, "house-train")?;
    let test_seen = build(&seen_pool, config.n_seen, "house-seen")?;
    let test_unseen = if config.n_unseen > 0 {
        build(&held_pool, config.n_unseen, "house-unseen")?
    } else {
        Vec::new()
    };
    Ok(HouseDataset {
        train,
        test_seen,
        test_unseen,
    })
}

/// The (object, receptacle, template) triple of a household task.
pub fn task_triple(instruction: &Instruction) -> Option<(String, String, GoalTemplate)> {
    match &instruction.goal {
        Goal::House(t) => Some((
            t.goal.object.clone(),
            t.goal.receptacle.clone(),
            t.goal.template,
        )),
        _ => None,
    }
}

#[allow(dead_code)]
fn triples_of(tasks: &[Instruction]) -> BTreeSet<(String, String, GoalTemplate)> {
    tasks.iter().filter_map(task_triple).collect()
}
