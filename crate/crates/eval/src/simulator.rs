//! A planted-preference synthetic user and a model stand-in that reads
//! prompts faithfully.
//!
//! The world has topical features with hidden weights spread evenly over
//! `[-1, 1]` and format attributes the user is indifferent to. Every item
//! carries two topics and one format, all named in its title; the user clicks
//! the item of highest total topic weight in each impression.
//!
//! [`SimulatorBackend`] answers every prompt the pipeline sends using only
//! what the prompt says:
//!
//! * personalized perception names the item's topics;
//! * impersonal perception names its format and only its first topic;
//! * summaries return the known terms mentioned in the reasons;
//! * merge checks always decline;
//! * predictions score candidates from whatever profile section the prompt
//!   carries (band positions, clicked-title term counts, feature membership,
//!   or nothing, in which case the pick is uniform).

use std::collections::{BTreeMap, HashMap};

use chrono::{TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use veil_core::llm::templates::{PERCEIVE, PERCEIVE_GENERIC, PROXY_PREDICT, REFLECT_MERGE, SUMMARY};
use veil_core::llm::{ChatBackend, ChatRequest, GatewayError, HashEmbedder};
use veil_core::profile::{DisplayedItem, Impression, Item};

use crate::proxy::{FEATURES_HEADER, HISTORY_HEADER, PROFILE_HEADER};
use crate::trial::TrialSlate;

const TOPICS: &[&str] = &[
    "astronomy",
    "gardening",
    "cycling",
    "jazz",
    "chess",
    "volcanoes",
    "robotics",
    "sailing",
    "pottery",
    "beekeeping",
    "origami",
    "falconry",
    "glaciers",
    "calligraphy",
    "archery",
    "mushrooms",
];
const FORMATS: &[&str] = &["interview", "listicle", "photo essay", "opinion piece", "explainer", "podcast"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub topics: usize,
    pub formats: usize,
    /// Items shown per impression.
    pub slate_size: usize,
    /// Uniform jitter added to the evenly spaced weights.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { topics: 8, formats: 4, slate_size: 6, jitter: 0.02, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedItem {
    pub item: Item,
    pub topics: [usize; 2],
    pub format: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub topics: Vec<String>,
    pub weights: Vec<f64>,
    pub formats: Vec<String>,
    pub items: Vec<PlantedItem>,
    pub slate_size: usize,
    by_id: HashMap<String, usize>,
}

impl PlantedWorld {
    pub fn generate(config: &PlantedConfig) -> Self {
        assert!(config.topics >= 2 && config.topics <= TOPICS.len());
        assert!(config.formats >= 1 && config.formats <= FORMATS.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut topics: Vec<String> = TOPICS[..config.topics].iter().map(|s| s.to_string()).collect();
        topics.shuffle(&mut rng);
        let n = config.topics as f64;
        let weights: Vec<f64> = (0..config.topics)
            .map(|i| 1.0 - 2.0 * i as f64 / (n - 1.0) + rng.random_range(-config.jitter..=config.jitter))
            .collect();
        let formats: Vec<String> = FORMATS[..config.formats].iter().map(|s| s.to_string()).collect();

        let mut items = Vec::new();
        for a in 0..config.topics {
            for b in a + 1..config.topics {
                let format = rng.random_range(0..config.formats);
                let (first, second) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                let id = format!("P{}", items.len() + 1);
                let title = format!("{} meets {}: a {}", cap(&topics[first]), topics[second], formats[format]);
                items.push(PlantedItem { item: Item::new(id, title), topics: [first, second], format });
            }
        }
        let by_id = items.iter().enumerate().map(|(i, p)| (p.item.id.clone(), i)).collect();
        Self { topics, weights, formats, items, slate_size: config.slate_size, by_id }
    }

    pub fn planted(&self, id: &str) -> Option<&PlantedItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn utility(&self, id: &str) -> f64 {
        let p = self.planted(id).expect("item belongs to the world");
        self.weights[p.topics[0]] + self.weights[p.topics[1]]
    }

    /// `count` impressions of `slate_size` distinct items each, one minute
    /// apart; the highest-utility item is the click.
    pub fn impressions<R: Rng + ?Sized>(&self, user_id: &str, count: usize, rng: &mut R) -> Vec<Impression> {
        (0..count)
            .map(|i| {
                let shown: Vec<&PlantedItem> = self.items.choose_multiple(rng, self.slate_size).collect();
                let best = shown
                    .iter()
                    .map(|p| &p.item.id)
                    .max_by(|a, b| self.utility(a).total_cmp(&self.utility(b)))
                    .expect("slate is not empty")
                    .clone();
                Impression {
                    impression_id: format!("{user_id}-{i:04}"),
                    user_id: user_id.to_string(),
                    timestamp: Utc.timestamp_opt(1_700_000_000 + 60 * i as i64, 0).unwrap(),
                    displayed: shown
                        .into_iter()
                        .map(|p| DisplayedItem { item: p.item.clone(), clicked: p.item.id == best })
                        .collect(),
                }
            })
            .collect()
    }

    /// Picks the candidate of highest hidden utility.
    pub fn oracle_pick(&self, slate: &TrialSlate) -> usize {
        (0..slate.k())
            .max_by(|&a, &b| self.utility(&slate.candidates[a].id).total_cmp(&self.utility(&slate.candidates[b].id)))
            .expect("slate is not empty")
    }

    /// Every term the world knows, topics first.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.topics.iter().chain(&self.formats).map(String::as_str)
    }

    pub fn backend(&self, seed: u64) -> SimulatorBackend {
        SimulatorBackend { world: self.clone(), seed, embedder: HashEmbedder::default() }
    }
}

fn cap(s: &str) -> String {
    let mut chars = s.chars();
    chars.next().map(|c| c.to_uppercase().chain(chars).collect()).unwrap_or_default()
}

/// Known terms in `text`, in order of first appearance.
fn terms_in<'a>(vocabulary: impl Iterator<Item = &'a str>, text: &str) -> Vec<&'a str> {
    let lower = text.to_lowercase();
    let mut found: Vec<(usize, &str)> = vocabulary.filter_map(|t| lower.find(t).map(|at| (at, t))).collect();
    found.sort();
    found.into_iter().map(|(_, t)| t).collect()
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(&text[from..from + len])
}

#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    world: PlantedWorld,
    seed: u64,
    embedder: HashEmbedder,
}

impl SimulatorBackend {
    fn item_by_title(&self, prompt: &str) -> Result<&PlantedItem, GatewayError> {
        let title = between(prompt, "titled \"", "\"")
            .ok_or_else(|| GatewayError::InvalidRequest("prompt names no title".into()))?;
        self.world
            .items
            .iter()
            .find(|p| p.item.title == title)
            .ok_or_else(|| GatewayError::InvalidRequest(format!("unknown title {title:?}")))
    }

    fn tie_breaker(&self, req: &ChatRequest) -> ChaCha8Rng {
        let mut seed = req.message_digest();
        for (b, s) in seed.iter_mut().zip(self.seed.to_le_bytes()) {
            *b ^= s;
        }
        ChaCha8Rng::from_seed(seed)
    }

    fn predict(&self, req: &ChatRequest, prompt: &str) -> Result<String, GatewayError> {
        let (profile, rest) = prompt.split_at(prompt.find("The following").unwrap_or(0));
        let candidates: Vec<&str> = rest
            .lines()
            .filter_map(|l| {
                let (index, title) = l.split_once(". ")?;
                index.parse::<usize>().ok().map(|_| title)
            })
            .collect();
        if candidates.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt lists no candidates".into()));
        }
        let vocab = || self.world.vocabulary();
        let score: Box<dyn Fn(&str) -> f64> = if profile.contains(PROFILE_HEADER) {
            let ranked: Vec<&str> = profile
                .lines()
                .filter_map(|l| l.split_once(": ").map(|(_, labels)| labels))
                .flat_map(|labels| labels.split(", "))
                .filter(|l| !l.is_empty())
                .collect();
            let span = ranked.len().saturating_sub(1).max(1) as f64;
            let position: BTreeMap<&str, f64> =
                ranked.iter().enumerate().map(|(i, l)| (*l, 1.0 - 2.0 * i as f64 / span)).collect();
            Box::new(move |title| {
                terms_in(vocab(), title).iter().map(|t| position.get(t).copied().unwrap_or(0.0)).sum()
            })
        } else if profile.contains(HISTORY_HEADER) {
            let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
            for line in profile.lines().filter(|l| l.starts_with("- ")) {
                for t in terms_in(vocab(), line) {
                    *counts.entry(t).or_default() += 1.0;
                }
            }
            Box::new(move |title| terms_in(vocab(), title).iter().map(|t| counts.get(t).copied().unwrap_or(0.0)).sum())
        } else if profile.contains(FEATURES_HEADER) {
            let known = terms_in(vocab(), profile);
            Box::new(move |title| terms_in(vocab(), title).iter().filter(|t| known.contains(t)).count() as f64)
        } else {
            Box::new(|_| 0.0)
        };

        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.shuffle(&mut self.tie_breaker(req));
        let best = order
            .into_iter()
            .map(|i| (i, score(candidates[i])))
            .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(json!({ "index": best }).to_string())
    }
}

impl ChatBackend for SimulatorBackend {
    fn id(&self) -> &str {
        "planted-simulator"
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let prompt = req.last_user_message().unwrap_or_default();
        let key = req.script_key.as_deref().unwrap_or_default();
        let topic = |i: usize| self.world.topics[i].as_str();
        if key == PERCEIVE.id {
            let p = self.item_by_title(prompt)?;
            Ok(format!("It is about {} and {}.", topic(p.topics[0]), topic(p.topics[1])))
        } else if key == PERCEIVE_GENERIC.id {
            let p = self.item_by_title(prompt)?;
            Ok(format!("It is a {} on {}.", self.world.formats[p.format], topic(p.topics[0])))
        } else if key == SUMMARY.id {
            let reasons = between(prompt, "provided:", "Based on the reasons").unwrap_or_default();
            Ok(json!({ "features": terms_in(self.world.vocabulary(), reasons) }).to_string())
        } else if key == REFLECT_MERGE.id {
            Ok(json!({ "merge": false }).to_string())
        } else if key == PROXY_PREDICT.id {
            self.predict(req, prompt)
        } else {
            Err(GatewayError::NoScript { key: key.to_string() })
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(self.embedder.embed(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::make_trial;
    use veil_core::llm::Gateway;

    #[test]
    fn weights_are_evenly_spread_and_titles_unique() {
        let world = PlantedWorld::generate(&PlantedConfig::default());
        assert_eq!(world.items.len(), 28);
        assert!(world.weights.windows(2).all(|w| w[0] > w[1]));
        let mut titles: Vec<&str> = world.items.iter().map(|p| p.item.title.as_str()).collect();
        titles.sort();
        titles.dedup();
        assert_eq!(titles.len(), world.items.len());
    }

    #[test]
    fn clicks_are_utility_argmax_and_the_oracle_is_exact() {
        let world = PlantedWorld::generate(&PlantedConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imps = world.impressions("S1", 300, &mut rng);
        for imp in &imps {
            let clicked: Vec<&Item> = imp.clicked().collect();
            assert_eq!(clicked.len(), 1);
            assert!(imp.unclicked().all(|u| world.utility(&u.id) < world.utility(&clicked[0].id)));
            let slate = make_trial(imp, 4, &mut rng).unwrap();
            assert_eq!(world.oracle_pick(&slate), slate.pos_index);
        }
    }

    #[test]
    fn perception_and_summary_are_faithful() {
        let world = PlantedWorld::generate(&PlantedConfig::default());
        let gw = Gateway::new(world.backend(0));
        let p = &world.items[0];
        let pair_prompt = format!("For a question titled \"{}\", assuming", p.item.title);
        let reasons = gw.complete(&ChatRequest::new(pair_prompt.clone()).with_script_key(PERCEIVE.id)).unwrap().text;
        let summary_prompt = format!(
            "the question titled \"x\", and here are the reasons she/he provided: {reasons}\nBased on the reasons"
        );
        let features = gw.complete(&ChatRequest::new(summary_prompt).with_script_key(SUMMARY.id)).unwrap().text;
        let expected = json!({ "features": [world.topics[p.topics[0]], world.topics[p.topics[1]]] }).to_string();
        assert_eq!(features, expected);

        let generic = gw.complete(&ChatRequest::new(pair_prompt).with_script_key(PERCEIVE_GENERIC.id)).unwrap().text;
        assert!(generic.contains(&world.formats[p.format]));
        assert!(!generic.contains(&world.topics[p.topics[1]]));
    }
}
