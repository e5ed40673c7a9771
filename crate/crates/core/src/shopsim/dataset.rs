use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{shop_expert, Catalog, Product, ShopGoal, ShopSim, MAX_OPTIONS};
use crate::env::store::{read_instructions, read_jsonl, write_instructions, write_jsonl};
use crate::env::{EnvId, Goal, Instruction};
use crate::error::{Error, Result};
use crate::rng::named_stream;

const TYPES: &[&str] = &[
    "shirt", "mug", "lamp", "boots", "backpack", "headphones", "blanket", "watch", "kettle",
    "jacket", "speaker", "pillow", "scarf", "bottle", "chair", "keyboard",
];

const ATTRIBUTES: &[&str] = &[
    "cotton", "wireless", "waterproof", "leather", "organic", "vintage", "portable", "ergonomic",
    "handmade", "lightweight", "stainless", "bamboo", "foldable", "rechargeable", "insulated",
    "washable", "compact", "wool", "ceramic", "glass", "wooden", "silk", "recycled", "adjustable",
    "durable", "slim", "padded", "quilted", "magnetic", "breathable", "vegan", "scented",
];

const OPTIONS: &[&str] = &[
    "red", "blue", "black", "white", "green", "grey", "small", "medium", "large", "xl", "pink",
    "navy", "beige", "purple", "orange", "yellow",
];

/// Sizes of a generated shopping dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShopDataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_types: usize,
    pub n_attributes: usize,
    pub n_options: usize,
    /// Unrelated products added to the catalog.
    pub n_background: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for ShopDataConfig {
    fn default() -> Self {
        ShopDataConfig {
            n_train: 300,
            n_test: 100,
            n_types: 10,
            n_attributes: 24,
            n_options: 12,
            n_background: 200,
            min_distractors: 3,
            max_distractors: 5,
        }
    }
}

impl ShopDataConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("n_types", self.n_types),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("shop.{key}"), "must be positive"));
            }
        }
        if self.n_types < 2 || self.n_types > TYPES.len() {
            return Err(Error::config(
                "shop.n_types",
                format!("must be in 2..={}", TYPES.len()),
            ));
        }
        if self.n_attributes < 8 || self.n_attributes > ATTRIBUTES.len() {
            return Err(Error::config(
                "shop.n_attributes",
                format!("must be in 8..={}", ATTRIBUTES.len()),
            ));
        }
        if self.n_options < 6 || self.n_options > OPTIONS.len() {
            return Err(Error::config(
                "shop.n_options",
                format!("must be in 6..={}", OPTIONS.len()),
            ));
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::config(
                "shop.min_distractors",
                "must not exceed max_distractors",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShopDataset {
    pub catalog: Arc<Catalog>,
    pub train: Vec<Instruction>,
    pub test: Vec<Instruction>,
}

impl ShopDataset {
    pub fn env(&self) -> ShopSim {
        ShopSim::new(Arc::clone(&self.catalog))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("catalog.jsonl"), self.catalog.products())?;
        write_instructions(&dir.join("train.jsonl"), &self.train)?;
        write_instructions(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let products: Vec<Product> = read_jsonl(&dir.join("catalog.jsonl"))?;
        Ok(ShopDataset {
            catalog: Arc::new(Catalog::new(products)?),
            train: read_instructions(&dir.join("train.jsonl"))?,
            test: read_instructions(&dir.join("test.jsonl"))?,
        })
    }
}

struct Vocab<'a> {
    types: &'a [&'static str],
    attributes: &'a [&'static str],
    options: &'a [&'static str],
}

fn pick_set(rng: &mut ChaCha8Rng, pool: &[&str], n: usize, exclude: &BTreeSet<String>) -> BTreeSet<String> {
    let candidates: Vec<&str> = pool
        .iter()
        .copied()
        .filter(|w| !exclude.contains(*w))
        .collect();
    candidates
        .choose_multiple(rng, n.min(candidates.len()))
        .map(|s| s.to_string())
        .collect()
}

fn price(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo..hi) * 100.0).round() / 100.0
}

/// Adds random members of `pool` to `base` until it has `target` elements.
fn fill(rng: &mut ChaCha8Rng, base: &BTreeSet<String>, pool: &[&str], target: usize, exclude: &BTreeSet<String>) -> BTreeSet<String> {
    let mut out = base.clone();
    let mut banned = exclude.clone();
    banned.extend(base.iter().cloned());
    let need = target.saturating_sub(out.len());
    out.extend(pick_set(rng, pool, need, &banned));
    out
}

struct Candidate {
    goal: ShopGoal,
    products: Vec<Product>,
}

fn random_product(rng: &mut ChaCha8Rng, vocab: &Vocab<'_>) -> Product {
    let none = BTreeSet::new();
    let n_attr = rng.gen_range(2..=4);
    let n_opt = rng.gen_range(2..=MAX_OPTIONS);
    Product {
        product_id: String::new(),
        ptype: vocab.types.choose(rng).expect("types").to_string(),
        attributes: pick_set(rng, vocab.attributes, n_attr, &none),
        options: pick_set(rng, vocab.options, n_opt, &none),
        price: price(rng, 5.0, 100.0),
    }
}

fn candidate(rng: &mut ChaCha8Rng, vocab: &Vocab<'_>, config: &ShopDataConfig) -> Candidate {
    let none = BTreeSet::new();
    let target = random_product(rng, vocab);
    let n_req_attr = rng.gen_range(1..=target.attributes.len().min(3));
    let required_attributes: BTreeSet<String> = target
        .attributes
        .iter()
        .cloned()
        .collect::<Vec<_>>()
        .choose_multiple(rng, n_req_attr)
        .cloned()
        .collect();
    let n_req_opt = match rng.gen_range(0..10) {
        0 | 1 => 0,
        2..=5 => 1,
        _ => 2,
    }
    .min(target.options.len());
    let required_options: BTreeSet<String> = target
        .options
        .iter()
        .cloned()
        .collect::<Vec<_>>()
        .choose_multiple(rng, n_req_opt)
        .cloned()
        .collect();
    let budget = (target.price * rng.gen_range(1.1..1.6)).ceil();
    let goal = ShopGoal {
        target_type: target.ptype.clone(),
        required_attributes,
        required_options,
        budget,
    };

    let mut products = vec![target];
    let n_distractors = rng.gen_range(config.min_distractors..=config.max_distractors);
    for _ in 0..n_distractors {
        let n_attr = rng.gen_range(goal.required_attributes.len()..=4).max(1);
        let n_opt = rng.gen_range(goal.required_options.len().max(2)..=MAX_OPTIONS);
        let within = price(rng, 5.0, goal.budget);
        let kind = rng.gen_range(0..4);
        let p = match kind {
            0 if !goal.required_options.is_empty() => {
                let dropped: BTreeSet<String> = goal
                    .required_options
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .cloned()
                    .into_iter()
                    .collect();
                let kept: BTreeSet<String> =
                    goal.required_options.difference(&dropped).cloned().collect();
                Product {
                    product_id: String::new(),
                    ptype: goal.target_type.clone(),
                    attributes: fill(rng, &goal.required_attributes, vocab.attributes, n_attr, &none),
                    options: fill(rng, &kept, vocab.options, n_opt, &dropped),
                    price: within,
                }
            }
            1 => Product {
                product_id: String::new(),
                ptype: goal.target_type.clone(),
                attributes: fill(rng, &goal.required_attributes, vocab.attributes, n_attr, &none),
                options: fill(rng, &goal.required_options, vocab.options, n_opt, &none),
                price: price(rng, goal.budget * 1.05, goal.budget * 1.6),
            },
            2 => {
                let dropped: BTreeSet<String> = goal
                    .required_attributes
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .cloned()
                    .into_iter()
                    .collect();
                let kept: BTreeSet<String> = goal
                    .required_attributes
                    .difference(&dropped)
                    .cloned()
                    .collect();
                Product {
                    product_id: String::new(),
                    ptype: goal.target_type.clone(),
                    attributes: fill(rng, &kept, vocab.attributes, n_attr.max(2), &dropped),
                    options: fill(rng, &goal.required_options, vocab.options, n_opt, &none),
                    price: within,
                }
            }
            _ => {
                let others: Vec<&str> = vocab
                    .types
                    .iter()
                    .copied()
                    .filter(|t| *t != goal.target_type)
                    .collect();
                Product {
                    product_id: String::new(),
                    ptype: others.choose(rng).expect("two or more types").to_string(),
                    attributes: fill(rng, &goal.required_attributes, vocab.attributes, n_attr, &none),
                    options: fill(rng, &goal.required_options, vocab.options, n_opt, &none),
                    price: within,
                }
            }
        };
        products.push(p);
    }
    Candidate { goal, products }
}

/// Builds a catalog and train/test task splits, deterministic under `seed`.
///
/// Every emitted task is solvable with reward 1.0 by [`shop_expert`].
pub fn generate_shop_dataset(config: &ShopDataConfig, seed: u64) -> Result<ShopDataset> {
    config.validate()?;
    let vocab = Vocab {
        types: &TYPES[..config.n_types],
        attributes: &ATTRIBUTES[..config.n_attributes],
        options: &OPTIONS[..config.n_options],
    };
    let n_tasks = config.n_train + config.n_test;
    let n_candidates = n_tasks + n_tasks / 2 + 8;

    let mut products = Vec::new();
    let mut goals = Vec::with_capacity(n_candidates);
    for i in 0..n_candidates {
        let mut rng = named_stream(seed, "shop-task", i as u64);
        let c = candidate(&mut rng, &vocab, config);
        goals.push(c.goal);
        products.extend(c.products);
    }
    let mut rng = named_stream(seed, "shop-background", 0);
    for _ in 0..config.n_background {
        products.push(random_product(&mut rng, &vocab));
    }
    products.shuffle(&mut named_stream(seed, "shop-ids", 0));
    for (i, p) in products.iter_mut().enumerate() {
        p.product_id = format!("p{i:04}");
    }
    let catalog = Arc::new(Catalog::new(products)?);
    let env = ShopSim::new(Arc::clone(&catalog));

    let mut kept: Vec<Instruction> = Vec::with_capacity(n_tasks);
    let mut seen_goals: Vec<ShopGoal> = Vec::new();
    for goal in goals {
        if kept.len() == n_tasks {
            break;
        }
        if seen_goals.contains(&goal) {
            continue;
        }
        let instruction = Instruction {
            env_id: EnvId::ShopSim,
            task_id: format!("shop-{:04}", kept.len()),
            text: goal.render(),
            goal: Goal::Shop(goal.clone()),
        };
        if shop_expert(&env, &instruction).is_ok() {
            seen_goals.push(goal);
            kept.push(instruction);
        }
    }
    if kept.len() < n_tasks {
        return Err(Error::DatasetGeneration(format!(
            "only {} of {n_tasks} shopping tasks were solvable",
            kept.len()
        )));
    }
    let test = kept.split_off(config.n_train);
    Ok(ShopDataset {
        catalog,
        train: kept,
        test,
    })
}
