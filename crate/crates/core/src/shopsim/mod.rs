//! Synthetic shopping environment.
//!
//! The agent searches a product catalog, opens a product page, picks
//! options and buys. Purchases are scored with the attribute/option/price
//! matching formula in [`score_purchase`]; [`heuristic_page_score`] extends
//! it to every page so that individual actions can be graded.

mod dataset;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{
    Action, Environment, Goal, Instruction, LegalAction, Observation, Step, Termination,
    Trajectory, Transition,
};
use crate::error::{Error, Result};

pub use dataset::{generate_shop_dataset, ShopDataConfig, ShopDataset};

pub const MAX_TURNS: usize = 10;
pub const TOP_K: usize = 5;
/// Products never carry more options than this.
pub const MAX_OPTIONS: usize = 4;

const SEARCH_VARIANTS: usize = 3;
const SLOT_CLICK: usize = SEARCH_VARIANTS;
const SLOT_OPTION: usize = SLOT_CLICK + TOP_K;
const SLOT_BACK: usize = SLOT_OPTION + MAX_OPTIONS;
const SLOT_BUY: usize = SLOT_BACK + 1;
pub const NUM_SLOTS: usize = SLOT_BUY + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub ptype: String,
    pub attributes: BTreeSet<String>,
    pub options: BTreeSet<String>,
    pub price: f64,
}

impl Product {
    fn title(&self) -> String {
        format!(
            "{} | {} | {}",
            self.product_id,
            self.ptype,
            join(&self.attributes)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopGoal {
    pub target_type: String,
    pub required_attributes: BTreeSet<String>,
    pub required_options: BTreeSet<String>,
    pub budget: f64,
}

impl ShopGoal {
    /// Goal sentence used as the instruction rendering.
    pub fn render(&self) -> String {
        let mut s = format!(
            "i am looking for a {} that is {}",
            self.target_type,
            self.required_attributes
                .iter()
                .cloned()
                .collect::<Vec<_>>()
                .join(" and ")
        );
        if !self.required_options.is_empty() {
            let _ = write!(
                s,
                ", with options {}",
                self.required_options
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(" and ")
            );
        }
        let _ = write!(s, ", and price lower than {:.2} dollars", self.budget);
        s
    }

    fn search_queries(&self) -> Vec<BTreeSet<String>> {
        let mut full = self.required_attributes.clone();
        full.insert(self.target_type.clone());
        let type_only: BTreeSet<String> = [self.target_type.clone()].into_iter().collect();
        vec![full, type_only, self.required_attributes.clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ShopAction {
    Search { query: BTreeSet<String> },
    ClickProduct { product_id: String },
    ClickOption { option: String },
    Back,
    Buy,
}

impl ShopAction {
    pub fn render(&self) -> String {
        match self {
            ShopAction::Search { query } => format!("search[{}]", join(query)),
            ShopAction::ClickProduct { product_id } => format!("click[{product_id}]"),
            ShopAction::ClickOption { option } => format!("click[{option}]"),
            ShopAction::Back => "click[back]".into(),
            ShopAction::Buy => "click[buy]".into(),
        }
    }
}

fn join(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Page {
    Home,
    SearchResults {
        query: BTreeSet<String>,
        results: Vec<String>,
    },
    ProductPage {
        product_id: String,
        selected: BTreeSet<String>,
    },
    /// Order confirmation after `Buy`.
    Purchased {
        product_id: String,
        selected: BTreeSet<String>,
    },
}

#[derive(Debug, Clone)]
pub struct PageState {
    pub goal: Arc<ShopGoal>,
    pub page: Page,
    /// Results page that `Back` returns to from a product page.
    pub last_results: Option<(BTreeSet<String>, Vec<String>)>,
    /// Options clicked so far, in click order, across all product pages.
    pub selection_history: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    products: Vec<Product>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(products: Vec<Product>) -> Result<Self> {
        let mut index = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            if index.insert(p.product_id.clone(), i).is_some() {
                return Err(Error::DatasetGeneration(format!(
                    "duplicate product id {}",
                    p.product_id
                )));
            }
        }
        Ok(Catalog { products, index })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, product_id: &str) -> Option<&Product> {
        self.index.get(product_id).map(|&i| &self.products[i])
    }

    /// Ranks by overlap between the query and type + attributes, then by id.
    pub fn search(&self, query: &BTreeSet<String>, top_k: usize) -> Vec<String> {
        let mut hits: Vec<(usize, &str)> = self
            .products
            .iter()
            .filter_map(|p| {
                let overlap = query
                    .iter()
                    .filter(|q| **q == p.ptype || p.attributes.contains(*q))
                    .count();
                (overlap > 0).then_some((overlap, p.product_id.as_str()))
            })
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        hits.into_iter()
            .take(top_k)
            .map(|(_, id)| id.to_string())
            .collect()
    }
}

/// Matching score of buying `product` configured with `selected` options:
/// type gate times the fraction of required attributes, required options
/// and the budget constraint that are met.
pub fn score_purchase(goal: &ShopGoal, product: &Product, selected: &BTreeSet<String>) -> f64 {
    if product.ptype != goal.target_type {
        return 0.0;
    }
    let attrs = goal
        .required_attributes
        .intersection(&product.attributes)
        .count();
    let opts = goal.required_options.intersection(selected).count();
    let price = usize::from(product.price <= goal.budget);
    let denom = goal.required_attributes.len() + goal.required_options.len() + 1;
    (attrs + opts + price) as f64 / denom as f64
}

/// Best purchase score reachable for `product` over its option assignments.
pub fn best_option_score(goal: &ShopGoal, product: &Product) -> f64 {
    score_purchase(goal, product, &product.options)
}

/// Grades a page by the best purchase still reachable from it.
///
/// Home scores 0; a results page scores its best product; a product page
/// its best option assignment; an order page the purchase itself.
pub fn heuristic_page_score(goal: &ShopGoal, page: &Page, catalog: &Catalog) -> f64 {
    match page {
        Page::Home => 0.0,
        Page::SearchResults { results, .. } => results
            .iter()
            .filter_map(|id| catalog.get(id))
            .map(|p| best_option_score(goal, p))
            .fold(0.0, f64::max),
        Page::ProductPage { product_id, .. } => catalog
            .get(product_id)
            .map_or(0.0, |p| best_option_score(goal, p)),
        Page::Purchased {
            product_id,
            selected,
        } => catalog
            .get(product_id)
            .map_or(0.0, |p| score_purchase(goal, p, selected)),
    }
}

/// Shopping environment over a fixed catalog.
#[derive(Debug, Clone)]
pub struct ShopSim {
    catalog: Arc<Catalog>,
    show_result_options: bool,
}

impl ShopSim {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        ShopSim {
            catalog,
            show_result_options: true,
        }
    }

    /// Whether result lines list each product's options.
    pub fn with_result_options(mut self, show: bool) -> Self {
        self.show_result_options = show;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn render_results(&self, query: &BTreeSet<String>, results: &[String]) -> String {
        let mut s = format!("[results] query: {}", join(query));
        if results.is_empty() {
            s.push_str("\nno products found");
        }
        for (i, id) in results.iter().enumerate() {
            let p = self.catalog.get(id).expect("results come from the catalog");
            let _ = write!(s, "\n[{i}] {}", p.title());
            if self.show_result_options {
                let _ = write!(s, " | {}", join(&p.options));
            }
            let _ = write!(s, " | ${:.2}", p.price);
        }
        s
    }

    fn render_product(&self, product: &Product, selected: &BTreeSet<String>) -> String {
        let mut s = format!("[product] {} | ${:.2}", product.title(), product.price);
        for (j, opt) in product.options.iter().enumerate() {
            let _ = write!(s, "\n[{j}] {opt}");
            if selected.contains(opt) {
                s.push_str(" (selected)");
            }
        }
        s
    }
}

fn shop_goal(instruction: &Instruction) -> Result<&ShopGoal> {
    match &instruction.goal {
        Goal::Shop(g) => Ok(g),
        _ => Err(Error::config(
            "instruction.goal",
            format!("task {} has no shopping goal", instruction.task_id),
        )),
    }
}

impl Environment for ShopSim {
    type State = PageState;

    fn id(&self) -> crate::env::EnvId {
        crate::env::EnvId::ShopSim
    }

    fn max_turns(&self) -> usize {
        MAX_TURNS
    }

    fn num_slots(&self) -> usize {
        NUM_SLOTS
    }

    fn initial_state(&self, instruction: &Instruction) -> Result<PageState> {
        let goal = shop_goal(instruction)?;
        Ok(PageState {
            goal: Arc::new(goal.clone()),
            page: Page::Home,
            last_results: None,
            selection_history: Vec::new(),
        })
    }

    fn legal_actions(&self, state: &PageState) -> Vec<LegalAction> {
        let shop = |slot, a| LegalAction {
            slot,
            action: Action::Shop(a),
        };
        match &state.page {
            Page::Home => {
                let mut seen: Vec<BTreeSet<String>> = Vec::new();
                let mut out = Vec::new();
                for (i, q) in state.goal.search_queries().into_iter().enumerate() {
                    if q.is_empty() || seen.contains(&q) {
                        continue;
                    }
                    seen.push(q.clone());
                    out.push(shop(i, ShopAction::Search { query: q }));
                }
                out
            }
            Page::SearchResults { results, .. } => {
                let mut out: Vec<LegalAction> = results
                    .iter()
                    .enumerate()
                    .map(|(i, id)| {
                        shop(
                            SLOT_CLICK + i,
                            ShopAction::ClickProduct {
                                product_id: id.clone(),
                            },
                        )
                    })
                    .collect();
                out.push(shop(SLOT_BACK, ShopAction::Back));
                out
            }
            Page::ProductPage {
                product_id,
                selected,
            } => {
                let product = self.catalog.get(product_id).expect("page shows a catalog product");
                let mut out: Vec<LegalAction> = product
                    .options
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| !selected.contains(*o))
                    .map(|(j, o)| shop(SLOT_OPTION + j, ShopAction::ClickOption { option: o.clone() }))
                    .collect();
                out.push(shop(SLOT_BACK, ShopAction::Back));
                out.push(shop(SLOT_BUY, ShopAction::Buy));
                out
            }
            Page::Purchased { .. } => Vec::new(),
        }
    }

    fn transition(&self, state: &PageState, action: &Action) -> Option<Transition<PageState>> {
        let Action::Shop(action) = action else {
            return None;
        };
        let mut next = state.clone();
        let (observation, done) = match (&state.page, action) {
            (Page::Home, ShopAction::Search { query }) if !query.is_empty() => {
                let results = self.catalog.search(query, TOP_K);
                let obs = self.render_results(query, &results);
                next.last_results = Some((query.clone(), results.clone()));
                next.page = Page::SearchResults {
                    query: query.clone(),
                    results,
                };
                (obs, false)
            }
            (Page::SearchResults { results, .. }, ShopAction::ClickProduct { product_id })
                if results.contains(product_id) =>
            {
                let product = self.catalog.get(product_id)?;
                let selected = BTreeSet::new();
                let obs = self.render_product(product, &selected);
                next.page = Page::ProductPage {
                    product_id: product_id.clone(),
                    selected,
                };
                (obs, false)
            }
            (Page::SearchResults { .. }, ShopAction::Back) => {
                next.page = Page::Home;
                ("[home] search for products".to_string(), false)
            }
            (
                Page::ProductPage {
                    product_id,
                    selected,
                },
                ShopAction::ClickOption { option },
            ) => {
                let product = self.catalog.get(product_id)?;
                if !product.options.contains(option) || selected.contains(option) {
                    return None;
                }
                let mut selected = selected.clone();
                selected.insert(option.clone());
                let obs = self.render_product(product, &selected);
                next.selection_history.push(option.clone());
                next.page = Page::ProductPage {
                    product_id: product_id.clone(),
                    selected,
                };
                (obs, false)
            }
            (Page::ProductPage { .. }, ShopAction::Back) => {
                let (query, results) = state.last_results.clone()?;
                let obs = self.render_results(&query, &results);
                next.page = Page::SearchResults { query, results };
                (obs, false)
            }
            (
                Page::ProductPage {
                    product_id,
                    selected,
                },
                ShopAction::Buy,
            ) => {
                let product = self.catalog.get(product_id)?;
                let obs = format!(
                    "[done] you bought {} with options: {}",
                    product.title(),
                    if selected.is_empty() {
                        "none".to_string()
                    } else {
                        join(selected)
                    }
                );
                next.page = Page::Purchased {
                    product_id: product_id.clone(),
                    selected: selected.clone(),
                };
                (obs, true)
            }
            _ => return None,
        };
        Some(Transition {
            state: next,
            observation,
            done,
        })
    }

    fn outcome_reward(&self, state: &PageState) -> f64 {
        match &state.page {
            Page::Purchased {
                product_id,
                selected,
            } => self
                .catalog
                .get(product_id)
                .map_or(0.0, |p| score_purchase(&state.goal, p, selected)),
            _ => 0.0,
        }
    }
}

/// Programmed expert: full search, the first perfect result, each required
/// option in sorted order, then buy.
pub fn shop_expert(env: &ShopSim, instruction: &Instruction) -> Result<Trajectory> {
    let goal = shop_goal(instruction)?;
    let mut query = goal.required_attributes.clone();
    query.insert(goal.target_type.clone());
    let results = env.catalog.search(&query, TOP_K);
    let best = results
        .iter()
        .find(|id| {
            env.catalog
                .get(id)
                .is_some_and(|p| best_option_score(goal, p) >= 1.0)
        })
        .ok_or_else(|| {
            Error::DatasetGeneration(format!(
                "task {}: no perfect product among search results",
                instruction.task_id
            ))
        })?;
    let mut actions = vec![
        ShopAction::Search { query },
        ShopAction::ClickProduct {
            product_id: best.clone(),
        },
    ];
    actions.extend(
        goal.required_options
            .iter()
            .map(|o| ShopAction::ClickOption { option: o.clone() }),
    );
    actions.push(ShopAction::Buy);

    let mut state = crate::env::reset(env, instruction)?;
    let mut steps = Vec::with_capacity(actions.len());
    for a in actions {
        let action = Action::Shop(a);
        let (next, obs, _) = crate::env::step(env, &state, &action)?;
        steps.push(Step::new(action, Observation::new(obs.text)));
        state = next;
    }
    let outcome_reward = crate::env::score_outcome(env, &state)?;
    if state.terminal != Some(Termination::Completed) || outcome_reward < 1.0 {
        return Err(Error::DatasetGeneration(format!(
            "task {}: expert reached reward {outcome_reward}",
            instruction.task_id
        )));
    }
    Ok(Trajectory {
        instruction: instruction.clone(),
        steps,
        outcome_reward,
        terminated: Termination::Completed,
    })
}

#[cfg(test)]
mod tests;
