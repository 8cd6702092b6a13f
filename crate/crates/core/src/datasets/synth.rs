//! Procedural toy world and the four synthetic editing tasks built on it.
//!
//! The world has countries with capitals and languages, social groups with
//! attributes and homes, occupational roles with pronoun statistics, and
//! animals whose verbs must agree in number with the subject. Pretraining
//! text states facts only for "known" countries; the fact-recall bundles ask
//! for capitals of the remaining countries. Those countries appear only at
//! the end of language sentences, and their capitals only in sentences that
//! name them as some capital without saying whose.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use indexmap::IndexSet;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_lines, BALL_FILE, HELDOUT_FILE, PRETRAIN_FILE, REG_FILE};
use super::schema::{write_bundle, BundleText, ExampleRecord, HardNegativeRecord, LossKind};
use super::Vocab;
use crate::error::{Error, Result};

const COUNTRIES: [&str; 64] = [
    "aland", "borvia", "cresta", "dunmar", "elvira", "fenwick", "galdor", "hestia", "ilmar", "jorvik",
    "kestrel", "lumora", "marwen", "norvale", "orsk", "pellar", "quenta", "rivana", "sarnia", "tolvar",
    "umbria", "vesper", "wendal", "xandria", "yorin", "zephia", "arcadi", "belmont", "corvin", "delmar",
    "estova", "farrow", "glenna", "harlow", "istra", "juniper", "kalder", "lorne", "mirova", "nessa",
    "ostria", "palvik", "quorra", "rendal", "sylvan", "tarsis", "ulvane", "varda", "wolvia", "yssel",
    "zarkon", "andova", "brisca", "calvary", "dravia", "eskar", "fyrden", "gorvia", "halmar", "ivora",
    "kavala", "lindor", "morvik", "nolvia",
];
const CAPITALS: [&str; 64] = [
    "portsville", "brindale", "corham", "dunford", "elmstead", "fairhold", "glenport", "highmoor",
    "ivybridge", "jasperton", "kingsreach", "larkfield", "millbrook", "northgate", "oakmere", "pinecrest",
    "queensbury", "redwater", "stonehill", "thornbury", "upton", "valewood", "westmarch", "yarrow",
    "ashford", "bramblewood", "coldharbor", "deepwell", "eastwick", "foxley", "greywater", "hollowmere",
    "ironwood", "kettering", "lowbridge", "marshfield", "newhaven", "oldcastle", "riverton", "silverdale",
    "ambleside", "birchwood", "cliffmoor", "dovecote", "elderton", "fernhill", "goldcrest", "hartwell",
    "inglewood", "juniperton", "kingsmoor", "lindenford", "mapleton", "nettlebury", "orchardton", "pebbleford",
    "quarrytown", "rosewell", "saltmarsh", "tidewater", "underhill", "wexford", "yewbank", "brookhaven",
];
const LANGUAGES: [&str; 8] = ["varish", "tolmic", "serran", "kethic", "ombric", "dalish", "perric", "zunic"];
const GROUPS: [&str; 8] = ["northern", "southern", "eastern", "western", "hill", "river", "coastal", "valley"];
const GOOD_ATTRS: [&str; 4] = ["kind", "brave", "clever", "honest"];
const BAD_ATTRS: [&str; 4] = ["lazy", "rude", "greedy", "cruel"];
const HOMES: [&str; 4] = ["sea", "forest", "lake", "marsh"];
const ROLES: [&str; 8] = ["nurse", "teacher", "baker", "farmer", "pilot", "lawyer", "engineer", "doctor"];
const WORKPLACES: [&str; 8] = ["hospital", "school", "bakery", "farm", "airport", "court", "factory", "office"];
const STATES: [&str; 6] = ["busy", "tired", "happy", "late", "early", "sick"];
const NOUNS: [(&str, &str); 8] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("horse", "horses"),
    ("goat", "goats"),
    ("frog", "frogs"),
    ("bee", "bees"),
    ("mouse", "mice"),
];
const FOODS: [&str; 8] = ["meat", "fish", "seeds", "hay", "grass", "flies", "nectar", "cheese"];
const VERBS: [(&str, &str); 4] = [("runs", "run"), ("sleeps", "sleep"), ("sings", "sing"), ("jumps", "jump")];
const ADVERBS: [&str; 4] = ["fast", "slowly", "today", "again"];
const PREPOSITIONS: [&str; 4] = ["near", "behind", "with", "beside"];

const FACT_TRAIN: [&str; 3] = [
    "the capital of {x} is",
    "the country {x} has its capital in",
    "{x} is a country and its capital is",
];
const FACT_EVAL: [&str; 3] = [
    "the capital city of {x} is",
    "everyone knows that the capital of {x} is",
    "in {x} the capital is",
];
const GROUP_TRAIN: &str = "the {x} people are";
const GROUP_EVAL: [&str; 3] = [
    "many say the {x} people are",
    "it is known that the {x} people are",
    "some think the {x} people are",
];
const ROLE_TRAIN: &str = "the {x} said that";
const ROLE_EVAL: [&str; 3] = [
    "the {x} told me that",
    "yesterday the {x} said that",
    "i heard that the {x} said that",
];

/// Task names, in the order bundles are emitted.
pub const TASKS: [&str; 4] = ["fact_recall", "suppression", "pair_balance", "agreement"];
pub const GENERATION_FILE: &str = "generation.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Success threshold δ stored in each task's bundles.
pub fn task_delta(task: &str) -> Result<f64> {
    match task {
        "fact_recall" => Ok(-(0.2f64).ln()),
        "suppression" => Ok((0.001f64).ln()),
        "pair_balance" => Ok((1.5f64).ln()),
        // Success must require the correct form to be 16 times likelier.
        "agreement" => Ok(-(16.0f64).ln()),
        other => Err(Error::Config(format!("unknown task {other:?}"))),
    }
}

pub fn task_loss(task: &str) -> Result<LossKind> {
    match task {
        "fact_recall" => Ok(LossKind::NllGood),
        "suppression" => Ok(LossKind::SuppressBad),
        "pair_balance" => Ok(LossKind::AbsBalance),
        "agreement" => Ok(LossKind::PreferAOverB),
        other => Err(Error::Config(format!("unknown task {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSizes {
    /// Countries per split whose capitals are edit targets (at most 16).
    pub edit_entities: usize,
    /// Canonical phrasings per fact-recall item (1 to 3).
    pub train_templates: usize,
    /// Evaluation templates per training item (1 to 3).
    pub eval_templates: usize,
    /// Hard negatives per bundle, capped by what the world offers.
    pub hard_negatives: usize,
    pub pretrain_sentences: usize,
    pub heldout_sequences: usize,
    pub reg_sequences: usize,
    pub ball_sequences: usize,
}

impl Default for GenSizes {
    fn default() -> Self {
        GenSizes {
            edit_entities: 16,
            train_templates: 3,
            eval_templates: 3,
            hard_negatives: 16,
            pretrain_sentences: 24_000,
            heldout_sequences: 150,
            reg_sequences: 256,
            ball_sequences: 200,
        }
    }
}

impl GenSizes {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.edit_entities) {
            return Err(Error::Config("edit_entities must be in 1..=16".into()));
        }
        if !(1..=3).contains(&self.train_templates) {
            return Err(Error::Config("train_templates must be in 1..=3".into()));
        }
        if !(1..=3).contains(&self.eval_templates) {
            return Err(Error::Config("eval_templates must be in 1..=3".into()));
        }
        if self.hard_negatives == 0 || self.reg_sequences == 0 || self.ball_sequences == 0 || self.heldout_sequences == 0 {
            return Err(Error::Config("hard negative and corpus sizes must be positive".into()));
        }
        if self.reg_sequences + self.ball_sequences + self.heldout_sequences > 2000 {
            return Err(Error::Config("reg + ball + heldout sequences must not exceed 2000".into()));
        }
        Ok(())
    }
}

/// Text corpora of one generated world.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpora {
    pub pretrain: Vec<String>,
    pub heldout: Vec<String>,
    pub reg: Vec<String>,
    pub ball: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub seed: u64,
    pub sizes: GenSizes,
    pub vocab: Vocab,
    /// Bundles named `{task}_val` and `{task}_test`, task-major.
    pub bundles: Vec<BundleText>,
    pub corpora: Corpora,
}

impl SyntheticData {
    pub fn bundle(&self, name: &str) -> Result<&BundleText> {
        self.bundles
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Config(format!("no bundle named {name:?}")))
    }

    /// Writes `vocab.json`, `corpus/*.txt` and `bundles/<name>/*.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("corpus")).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let c = dir.join("corpus");
        write_lines(&c.join(PRETRAIN_FILE), &self.corpora.pretrain)?;
        write_lines(&c.join(HELDOUT_FILE), &self.corpora.heldout)?;
        write_lines(&c.join(REG_FILE), &self.corpora.reg)?;
        write_lines(&c.join(BALL_FILE), &self.corpora.ball)?;
        for b in &self.bundles {
            write_bundle(&dir.join("bundles").join(&b.name), b)?;
        }
        Ok(())
    }
}

/// Records which sizes each seed was generated with, so a seed is never
/// silently reused for a differently sized world.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub seeds: BTreeMap<u64, GenSizes>,
}

impl SeedLedger {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(SeedLedger::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn register(&mut self, seed: u64, sizes: &GenSizes) -> Result<()> {
        match self.seeds.get(&seed) {
            Some(prev) if prev != sizes => Err(Error::SeedReuse { seed }),
            Some(_) => Ok(()),
            None => {
                self.seeds.insert(seed, sizes.clone());
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The fixed vocabulary every generated world uses.
pub fn world_vocab() -> Vocab {
    const FUNCTION_WORDS: [&str; 51] = [
        "the", "capital", "of", "is", "city", "everyone", "knows", "that", "in", "people", "speak", "many",
        "visit", "we", "travelled", "to", "road", "leads", "are", "say", "it", "known", "some", "think",
        "live", "by", "said", "was", "told", "me", "yesterday", "i", "heard", "works", "at", "every", "day",
        "goes", "eats", "eat", "he", "she", "a", "big", "famous", "one", "spoken", "country", "has", "its",
        "and",
    ];
    let mut words: IndexSet<&str> = IndexSet::new();
    words.extend(FUNCTION_WORDS);
    words.extend(COUNTRIES);
    words.extend(CAPITALS);
    words.extend(LANGUAGES);
    words.extend(GROUPS);
    words.extend(GOOD_ATTRS);
    words.extend(BAD_ATTRS);
    words.extend(HOMES);
    words.extend(ROLES);
    words.extend(WORKPLACES);
    words.extend(STATES);
    for (s, p) in NOUNS {
        words.insert(s);
        words.insert(p);
    }
    words.extend(FOODS);
    for (s, p) in VERBS {
        words.insert(s);
        words.insert(p);
    }
    words.extend(ADVERBS);
    words.extend(PREPOSITIONS);
    Vocab::new(words).expect("world vocabulary is well formed")
}

fn fill(template: &str, x: &str) -> String {
    template.replace("{x}", x)
}

/// A weighted family of sentences in the pretraining mixture.
struct Family {
    share: f64,
    /// Sentences here may be held out into the ball and held-out corpora.
    holdable: bool,
    source: Source,
}

enum Source {
    Pool(Vec<(String, f64)>),
    /// Attractor sentences, generated on demand; `noise` is the chance the
    /// verb agrees with the attractor instead of the subject.
    Attractor { noise: f64 },
}

struct World {
    known: Vec<usize>,
    edit_val: Vec<usize>,
    edit_test: Vec<usize>,
    group_split: [Vec<usize>; 2],
    role_split: [Vec<usize>; 2],
    noun_split: [Vec<usize>; 2],
}

fn language_of(country: usize) -> &'static str {
    LANGUAGES[country % LANGUAGES.len()]
}

fn stereotype(group: usize) -> &'static str {
    BAD_ATTRS[group % BAD_ATTRS.len()]
}

fn group_language(group: usize) -> &'static str {
    LANGUAGES[(group * 3 + 1) % LANGUAGES.len()]
}

fn majority_pronoun(role: usize) -> &'static str {
    if role % 2 == 0 {
        "she"
    } else {
        "he"
    }
}

fn noun(lemma: usize, plural: bool) -> &'static str {
    if plural {
        NOUNS[lemma].1
    } else {
        NOUNS[lemma].0
    }
}

fn verb(v: usize, plural: bool) -> &'static str {
    if plural {
        VERBS[v].1
    } else {
        VERBS[v].0
    }
}

fn attractor_sentence<R: Rng>(rng: &mut R, noise: f64) -> String {
    let lemma = rng.random_range(0..NOUNS.len());
    let plural = rng.random_bool(0.5);
    let mut other = rng.random_range(0..NOUNS.len() - 1);
    if other >= lemma {
        other += 1;
    }
    let other_plural = rng.random_bool(0.5);
    let agree_with = if other_plural != plural && rng.random_bool(noise) {
        other_plural
    } else {
        plural
    };
    let prep = PREPOSITIONS.choose(rng).expect("non-empty");
    let v = rng.random_range(0..VERBS.len());
    let adv = ADVERBS.choose(rng).expect("non-empty");
    format!(
        "the {} {prep} the {} {} {adv}",
        noun(lemma, plural),
        noun(other, other_plural),
        verb(v, agree_with)
    )
}

fn build_families(world: &World) -> Vec<Family> {
    let mut facts = Vec::new();
    for &k in &world.known {
        let (x, c) = (COUNTRIES[k], CAPITALS[k]);
        for t in FACT_TRAIN.iter().chain(&FACT_EVAL) {
            facts.push((format!("{} {c}", fill(t, x)), 1.0));
        }
        facts.push((format!("{c} is the capital of {x}"), 1.0));
    }
    let mut languages = Vec::new();
    // Edit countries only ever close a sentence, so their sense vectors
    // receive no pretraining signal and the model knows little about them.
    for (k, x) in COUNTRIES.iter().enumerate() {
        let l = language_of(k);
        languages.push((format!("{l} is spoken in {x}"), 1.0));
        if world.known.contains(&k) {
            languages.push((format!("people in {x} speak {l}"), 1.0));
            languages.push((format!("the people of {x} speak {l}"), 1.0));
        }
    }
    let mut cities = Vec::new();
    let mut mentions = Vec::new();
    for (k, c) in CAPITALS.iter().enumerate() {
        cities.push((format!("many people visit {c}"), 1.0));
        cities.push((format!("we travelled to {c}"), 1.0));
        cities.push((format!("the road leads to {c}"), 1.0));
        // Capitals of unknown countries are known to be capitals, just not
        // whose.
        if !world.known.contains(&k) {
            mentions.push((format!("a famous capital is {c}"), 1.0));
            mentions.push((format!("one capital is {c}"), 1.0));
        }
    }
    let mut group_attrs = Vec::new();
    let mut group_facts = Vec::new();
    for (gi, g) in GROUPS.iter().enumerate() {
        for t in std::iter::once(GROUP_TRAIN).chain(GROUP_EVAL) {
            let p = fill(t, g);
            for a in GOOD_ATTRS.iter().chain(&BAD_ATTRS) {
                let w = if *a == stereotype(gi) { 4.0 } else { 0.5 };
                group_attrs.push((format!("{p} {a}"), w));
            }
        }
        group_facts.push((format!("the {g} people live by the {}", HOMES[gi % HOMES.len()]), 1.0));
        group_facts.push((format!("the {g} people speak {}", group_language(gi)), 1.0));
    }
    let mut role_pronouns = Vec::new();
    let mut role_facts = Vec::new();
    for (ri, r) in ROLES.iter().enumerate() {
        for t in std::iter::once(ROLE_TRAIN).chain(ROLE_EVAL) {
            let p = fill(t, r);
            for pron in ["he", "she"] {
                let w = if pron == majority_pronoun(ri) { 1.0 } else { 0.15 };
                for s in STATES {
                    role_pronouns.push((format!("{p} {pron} was {s}"), w));
                }
            }
        }
        role_facts.push((format!("the {r} works at the {}", WORKPLACES[ri]), 1.0));
        role_facts.push((format!("every day the {r} goes to the {}", WORKPLACES[ri]), 1.0));
    }
    let mut simple = Vec::new();
    let mut food = Vec::new();
    for lemma in 0..NOUNS.len() {
        for plural in [false, true] {
            for v in 0..VERBS.len() {
                for adv in ADVERBS {
                    simple.push((format!("the {} {} {adv}", noun(lemma, plural), verb(v, plural)), 1.0));
                }
            }
            let eat = if plural { "eat" } else { "eats" };
            food.push((format!("the {} {eat} {}", noun(lemma, plural), FOODS[lemma]), 1.0));
        }
    }
    let pool = |share, holdable, p| Family {
        share,
        holdable,
        source: Source::Pool(p),
    };
    vec![
        pool(0.25, false, facts),
        pool(0.08, false, languages),
        pool(0.05, false, cities),
        pool(0.04, false, mentions),
        pool(0.12, true, group_attrs),
        pool(0.04, false, group_facts),
        pool(0.14, true, role_pronouns),
        pool(0.04, false, role_facts),
        pool(0.10, true, simple),
        Family {
            share: 0.13,
            holdable: true,
            source: Source::Attractor { noise: 0.25 },
        },
        pool(0.05, false, food),
    ]
}

/// Samples from the pretraining mixture, skipping anything in `exclude` and,
/// when `holdable_only`, families that carry world knowledge.
struct Sampler<'a> {
    families: &'a [Family],
    family_dist: WeightedIndex<f64>,
    pool_dists: Vec<Option<WeightedIndex<f64>>>,
}

impl<'a> Sampler<'a> {
    fn new(families: &'a [Family], holdable_only: bool) -> Self {
        let shares: Vec<f64> = families
            .iter()
            .map(|f| if holdable_only && !f.holdable { 0.0 } else { f.share })
            .collect();
        let pool_dists = families
            .iter()
            .map(|f| match &f.source {
                Source::Pool(p) => Some(WeightedIndex::new(p.iter().map(|(_, w)| *w)).expect("positive weights")),
                Source::Attractor { .. } => None,
            })
            .collect();
        Sampler {
            families,
            family_dist: WeightedIndex::new(shares).expect("positive shares"),
            pool_dists,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> String {
        let fi = self.family_dist.sample(rng);
        match (&self.families[fi].source, &self.pool_dists[fi]) {
            (Source::Pool(p), Some(d)) => p[d.sample(rng)].0.clone(),
            (Source::Attractor { noise }, _) => attractor_sentence(rng, *noise),
            _ => unreachable!("pool families carry a distribution"),
        }
    }

    /// Draws `n` distinct sentences accepted by `accept`.
    fn draw_unique<R: Rng>(&self, rng: &mut R, n: usize, accept: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * n + 10_000 {
                return Err(Error::Corpus(format!("could only draw {} of {n} distinct sentences", out.len())));
            }
            let s = self.draw(rng);
            if accept(&s) && seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    }
}

fn mentions_any(sentence: &str, words: &HashSet<&str>) -> bool {
    sentence.split(' ').any(|w| words.contains(w))
}

fn example(prefix: String, y_a: Option<&str>, y_b: Option<&str>, task: &str) -> Result<ExampleRecord> {
    Ok(ExampleRecord {
        prefix,
        y_a: y_a.map(str::to_string),
        y_b: y_b.map(str::to_string),
        loss: task_loss(task)?.as_str().to_string(),
        delta: task_delta(task)?,
    })
}

fn hard_negs<R: Rng>(rng: &mut R, mut all: Vec<(String, String)>, n: usize) -> Vec<HardNegativeRecord> {
    all.shuffle(rng);
    all.truncate(n);
    all.into_iter().map(|(prefix, y)| HardNegativeRecord { prefix, y }).collect()
}

const SPLITS: [&str; 2] = ["val", "test"];

fn fact_bundles<R: Rng>(rng: &mut R, world: &World, sizes: &GenSizes) -> Result<Vec<BundleText>> {
    let task = "fact_recall";
    let mut negs: Vec<(String, String)> = Vec::new();
    for &k in &world.known {
        for t in FACT_TRAIN.iter().chain(&FACT_EVAL) {
            negs.push((fill(t, COUNTRIES[k]), CAPITALS[k].to_string()));
        }
    }
    negs.shuffle(rng);
    let per = sizes.hard_negatives.min(negs.len() / 2);
    let mut out = Vec::new();
    for (si, entities) in [&world.edit_val, &world.edit_test].into_iter().enumerate() {
        let mut b = BundleText {
            name: format!("{task}_{}", SPLITS[si]),
            note: "entity to capital recall for countries whose capitals are never tied to them in pretraining".into(),
            ..Default::default()
        };
        for &k in entities.iter() {
            let (x, c) = (COUNTRIES[k], CAPITALS[k]);
            for t in &FACT_TRAIN[..sizes.train_templates] {
                b.train.push(example(fill(t, x), Some(c), None, task)?);
            }
            for t in &FACT_EVAL[..sizes.eval_templates] {
                b.eval.push(example(fill(t, x), Some(c), None, task)?);
            }
        }
        b.hard_neg = negs[si * per..(si + 1) * per]
            .iter()
            .map(|(prefix, y)| HardNegativeRecord {
                prefix: prefix.clone(),
                y: y.clone(),
            })
            .collect();
        out.push(b);
    }
    Ok(out)
}

fn suppression_bundles<R: Rng>(rng: &mut R, world: &World, sizes: &GenSizes) -> Result<Vec<BundleText>> {
    let task = "suppression";
    let mut out = Vec::new();
    for (si, groups) in world.group_split.iter().enumerate() {
        let mut b = BundleText {
            name: format!("{task}_{}", SPLITS[si]),
            note: "suppress the stereotyped attribute of a group".into(),
            ..Default::default()
        };
        let mut negs = Vec::new();
        for &gi in groups {
            let g = GROUPS[gi];
            b.train.push(example(fill(GROUP_TRAIN, g), None, Some(stereotype(gi)), task)?);
            for t in &GROUP_EVAL[..sizes.eval_templates] {
                b.eval.push(example(fill(t, g), None, Some(stereotype(gi)), task)?);
            }
            negs.push((format!("the {g} people live by the"), HOMES[gi % HOMES.len()].to_string()));
            negs.push((format!("the {g} people speak"), group_language(gi).to_string()));
        }
        b.hard_neg = hard_negs(rng, negs, sizes.hard_negatives);
        out.push(b);
    }
    Ok(out)
}

fn balance_bundles<R: Rng>(rng: &mut R, world: &World, sizes: &GenSizes) -> Result<Vec<BundleText>> {
    let task = "pair_balance";
    let mut out = Vec::new();
    for (si, roles) in world.role_split.iter().enumerate() {
        let mut b = BundleText {
            name: format!("{task}_{}", SPLITS[si]),
            note: "balance the two pronouns after an occupational role".into(),
            ..Default::default()
        };
        let mut negs = Vec::new();
        for &ri in roles {
            let r = ROLES[ri];
            b.train.push(example(fill(ROLE_TRAIN, r), Some("he"), Some("she"), task)?);
            for t in &ROLE_EVAL[..sizes.eval_templates] {
                b.eval.push(example(fill(t, r), Some("he"), Some("she"), task)?);
            }
            negs.push((format!("the {r} works at the"), WORKPLACES[ri].to_string()));
            negs.push((format!("every day the {r} goes to the"), WORKPLACES[ri].to_string()));
        }
        b.hard_neg = hard_negs(rng, negs, sizes.hard_negatives);
        out.push(b);
    }
    Ok(out)
}

fn agreement_bundles<R: Rng>(rng: &mut R, world: &World, sizes: &GenSizes) -> Result<Vec<BundleText>> {
    let task = "agreement";
    let mut out = Vec::new();
    for (si, lemmas) in world.noun_split.iter().enumerate() {
        let mut b = BundleText {
            name: format!("{task}_{}", SPLITS[si]),
            note: "prefer the verb form agreeing with the subject over an attractor".into(),
            ..Default::default()
        };
        let mut negs = Vec::new();
        for &lemma in lemmas {
            for plural in [false, true] {
                let subject = noun(lemma, plural);
                let item = |prep: &str, rng: &mut R| -> Result<ExampleRecord> {
                    let mut other = rng.random_range(0..NOUNS.len() - 1);
                    if other >= lemma {
                        other += 1;
                    }
                    let v = rng.random_range(0..VERBS.len());
                    example(
                        format!("the {subject} {prep} the {}", noun(other, !plural)),
                        Some(verb(v, plural)),
                        Some(verb(v, !plural)),
                        task,
                    )
                };
                b.train.push(item(PREPOSITIONS[0], rng)?);
                for prep in &PREPOSITIONS[1..=sizes.eval_templates] {
                    b.eval.push(item(prep, rng)?);
                }
                let eat = if plural { "eat" } else { "eats" };
                negs.push((format!("the {subject} {eat}"), FOODS[lemma].to_string()));
            }
        }
        b.hard_neg = hard_negs(rng, negs, sizes.hard_negatives);
        out.push(b);
    }
    Ok(out)
}

/// Generates the vocabulary, corpora and eight bundles (validation and test
/// for each of the four tasks). Identical seeds and sizes give identical
/// output.
pub fn generate_synthetic_tasks(seed: u64, sizes: &GenSizes) -> Result<SyntheticData> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut countries: Vec<usize> = (0..COUNTRIES.len()).collect();
    countries.shuffle(&mut rng);
    let n = sizes.edit_entities;
    let edit_val = countries[..n].to_vec();
    let edit_test = countries[n..2 * n].to_vec();
    let known = countries[32..].to_vec();
    let mut split_half = |len: usize| -> [Vec<usize>; 2] {
        let mut ids: Vec<usize> = (0..len).collect();
        ids.shuffle(&mut rng);
        let (a, b) = ids.split_at(len / 2);
        [a.to_vec(), b.to_vec()]
    };
    let world = World {
        known,
        edit_val,
        edit_test,
        group_split: split_half(GROUPS.len()),
        role_split: split_half(ROLES.len()),
        noun_split: split_half(NOUNS.len()),
    };

    let families = build_families(&world);
    let edit_words: HashSet<&str> = countries[..16].iter().map(|&k| COUNTRIES[k]).collect();

    // Ball and held-out corpora come from families that carry no world
    // knowledge, so removing them from pretraining hides no fact.
    let holdable = Sampler::new(&families, true);
    let reserved = holdable.draw_unique(&mut rng, sizes.ball_sequences + sizes.heldout_sequences, |_| true)?;
    let (ball, heldout) = reserved.split_at(sizes.ball_sequences);
    let reserved: HashSet<&str> = reserved.iter().map(String::as_str).collect();

    let full = Sampler::new(&families, false);
    let reg = full.draw_unique(&mut rng, sizes.reg_sequences, |s| {
        !reserved.contains(s) && !mentions_any(s, &edit_words)
    })?;
    let mut pretrain = Vec::with_capacity(sizes.pretrain_sentences);
    while pretrain.len() < sizes.pretrain_sentences {
        let s = full.draw(&mut rng);
        if !reserved.contains(s.as_str()) {
            pretrain.push(s);
        }
    }

    let mut bundles = Vec::new();
    bundles.extend(fact_bundles(&mut rng, &world, sizes)?);
    bundles.extend(suppression_bundles(&mut rng, &world, sizes)?);
    bundles.extend(balance_bundles(&mut rng, &world, sizes)?);
    bundles.extend(agreement_bundles(&mut rng, &world, sizes)?);

    Ok(SyntheticData {
        seed,
        sizes: sizes.clone(),
        vocab: world_vocab(),
        bundles,
        corpora: Corpora {
            pretrain,
            heldout: heldout.to_vec(),
            reg,
            ball: ball.to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{tokenize_all, CorpusSplit};
    use crate::models::ModelConfig;

    fn small() -> GenSizes {
        GenSizes {
            pretrain_sentences: 2000,
            ..GenSizes::default()
        }
    }

    #[test]
    fn deltas_per_task() {
        let got: Vec<f64> = TASKS.iter().map(|t| task_delta(t).unwrap()).collect();
        let want = [-(0.2f64).ln(), (0.001f64).ln(), (1.5f64).ln(), -(16.0f64).ln()];
        assert_eq!(got, want);
        let data = generate_synthetic_tasks(3, &small()).unwrap();
        for b in &data.bundles {
            let task = TASKS.iter().find(|t| b.name.starts_with(*t)).unwrap();
            for r in b.train.iter().chain(&b.eval) {
                assert_eq!(r.delta, task_delta(task).unwrap());
                assert_eq!(r.loss, task_loss(task).unwrap().as_str());
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate_synthetic_tasks(5, &small()).unwrap();
        let b = generate_synthetic_tasks(5, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_tasks(6, &small()).unwrap();
        assert_ne!(a.corpora, c.corpora);
    }

    #[test]
    fn every_bundle_loads_and_every_sentence_round_trips() {
        let data = generate_synthetic_tasks(1, &small()).unwrap();
        let v = &data.vocab;
        assert_eq!(v.len(), world_vocab().len());
        assert!(v.len() <= ModelConfig::default().vocab_size);
        for b in &data.bundles {
            let t = b.tokenize(v, 64).unwrap();
            assert!(!t.train.is_empty() && !t.eval.is_empty() && !t.hard_neg.is_empty());
        }
        let c = &data.corpora;
        for s in c.pretrain.iter().chain(&c.heldout).chain(&c.reg).chain(&c.ball) {
            let toks = v.tokenize(s).unwrap();
            assert!(toks.iter().all(|&t| t < v.len()));
            assert_eq!(&v.detokenize(&toks).unwrap(), s);
        }
    }

    #[test]
    fn eval_prefixes_never_repeat_train_prefixes() {
        let data = generate_synthetic_tasks(2, &small()).unwrap();
        for b in &data.bundles {
            let train: HashSet<&str> = b.train.iter().map(|r| r.prefix.as_str()).collect();
            assert!(b.eval.iter().all(|r| !train.contains(r.prefix.as_str())), "{}", b.name);
        }
    }

    #[test]
    fn fact_hard_negatives_avoid_train_entities() {
        let data = generate_synthetic_tasks(4, &small()).unwrap();
        for split in SPLITS {
            let b = data.bundle(&format!("fact_recall_{split}")).unwrap();
            let entities: HashSet<&str> = b
                .train
                .iter()
                .flat_map(|r| r.prefix.split(' '))
                .filter(|w| COUNTRIES.contains(w))
                .collect();
            assert_eq!(entities.len(), small().edit_entities);
            for h in &b.hard_neg {
                assert!(h.prefix.split(' ').all(|w| !entities.contains(w)), "{h:?}");
            }
        }
    }

    #[test]
    fn corpora_are_disjoint_and_edit_facts_are_novel() {
        let data = generate_synthetic_tasks(7, &small()).unwrap();
        let c = &data.corpora;
        let split = CorpusSplit::new(tokenize_all(&data.vocab, &c.reg).unwrap(), tokenize_all(&data.vocab, &c.ball).unwrap());
        assert!(split.is_ok());
        let ball: HashSet<&String> = c.ball.iter().chain(&c.heldout).collect();
        assert!(c.pretrain.iter().all(|s| !ball.contains(s)));
        for split in SPLITS {
            let b = data.bundle(&format!("fact_recall_{split}")).unwrap();
            for r in &b.train {
                let fact = format!("{} {}", r.prefix, r.y_a.as_ref().unwrap());
                assert!(!c.pretrain.contains(&fact));
            }
        }
    }

    #[test]
    fn validation_and_test_bundles_match_in_size() {
        let data = generate_synthetic_tasks(8, &small()).unwrap();
        for task in TASKS {
            let v = data.bundle(&format!("{task}_val")).unwrap();
            let t = data.bundle(&format!("{task}_test")).unwrap();
            assert_eq!(v.train.len(), t.train.len());
            assert_eq!(v.eval.len(), t.eval.len());
            let vp: HashSet<&str> = v.train.iter().map(|r| r.prefix.as_str()).collect();
            assert!(t.train.iter().all(|r| !vp.contains(r.prefix.as_str())));
        }
    }

    #[test]
    fn seed_reuse_with_other_sizes_is_rejected() {
        let mut ledger = SeedLedger::default();
        ledger.register(1, &small()).unwrap();
        ledger.register(1, &small()).unwrap();
        let other = GenSizes {
            hard_negatives: 4,
            ..small()
        };
        assert!(matches!(ledger.register(1, &other), Err(Error::SeedReuse { seed: 1 })));
        ledger.register(2, &other).unwrap();
    }
}
