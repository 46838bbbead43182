//! A small synthetic world for demos and end-to-end tests: documents built
//! from four topics, each with a fixed set of facet keywords, and an LLM
//! stand-in that writes and answers questions about those keywords.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{ClusteringItem, StsPair, TaskText};
use crate::hashing::derive_seed;
use crate::providers::{DecodeParams, LlmError, LlmProvider};

pub struct Topic {
    pub name: &'static str,
    /// Opening phrase of every document on the topic.
    pub context: &'static str,
    pub facets: [&'static str; 8],
}

pub const TOPICS: [Topic; 4] = [
    Topic {
        name: "ocean",
        context: "Ocean wildlife",
        facets: ["whale", "coral", "tide", "reef", "dolphin", "kelp", "shark", "lagoon"],
    },
    Topic {
        name: "finance",
        context: "Household finance",
        facets: ["stock", "bond", "dividend", "inflation", "budget", "loan", "currency", "auditor"],
    },
    Topic {
        name: "cooking",
        context: "Home cooking",
        facets: ["garlic", "oven", "pastry", "recipe", "basil", "simmer", "dough", "skillet"],
    },
    Topic {
        name: "astronomy",
        context: "Amateur astronomy",
        facets: ["galaxy", "comet", "telescope", "nebula", "orbit", "planet", "eclipse", "asteroid"],
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDoc {
    pub text: String,
    /// Topic indices into [`TOPICS`], ascending.
    pub topics: Vec<usize>,
    pub facets: BTreeSet<&'static str>,
}

fn join_list(words: &[&str]) -> String {
    match words {
        [] => String::new(),
        [one] => (*one).to_owned(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn make_doc(topics: Vec<usize>, rng: &mut ChaCha8Rng) -> SyntheticDoc {
    let per_topic = if topics.len() == 1 { rng.gen_range(2..=4) } else { 2 };
    let mut words: Vec<&'static str> = Vec::new();
    for &t in &topics {
        words.extend(TOPICS[t].facets.iter().copied().choose_multiple(rng, per_topic));
    }
    words.shuffle(rng);
    let contexts: Vec<&str> = topics.iter().map(|&t| TOPICS[t].context).collect();
    let mut lead = join_list(&contexts).to_lowercase();
    lead[..1].make_ascii_uppercase();
    SyntheticDoc {
        text: format!("{lead}: the {}.", join_list(&words)),
        topics,
        facets: words.into_iter().collect(),
    }
}

fn random_topics(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.gen_bool(0.25) {
        let mut two: Vec<usize> = (0..TOPICS.len()).choose_multiple(rng, 2);
        two.sort_unstable();
        two
    } else {
        vec![rng.gen_range(0..TOPICS.len())]
    }
}

/// `n` documents with distinct texts. About a quarter mix two topics.
pub fn documents(n: usize, seed: u64) -> Vec<SyntheticDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic/documents"));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let topics = random_topics(&mut rng);
        let doc = make_doc(topics, &mut rng);
        if seen.insert(doc.text.clone()) {
            out.push(doc);
        }
    }
    out
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

/// Similarity pairs scored `5 * jaccard(topics_a, topics_b)`. A third of
/// the pairs share their single topic, a third are disjoint and a third
/// overlap partially.
pub fn sts_pairs(n: usize, seed: u64) -> Vec<StsPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic/sts"));
    (0..n)
        .map(|i| {
            let t = rng.gen_range(0..TOPICS.len());
            let u = (t + rng.gen_range(1..TOPICS.len())) % TOPICS.len();
            let (ta, tb) = match i % 3 {
                0 => (vec![t], vec![t]),
                1 => (vec![t], vec![u]),
                _ => {
                    let mut both = vec![t, u];
                    both.sort_unstable();
                    (vec![t], both)
                }
            };
            let a = make_doc(ta, &mut rng);
            let b = make_doc(tb, &mut rng);
            StsPair {
                score: 5.0 * jaccard(&a.topics, &b.topics),
                text_a: a.text,
                text_b: b.text,
            }
        })
        .collect()
}

/// Single-topic texts labelled with their topic name.
pub fn clustering_items(n: usize, seed: u64) -> Vec<ClusteringItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic/clustering"));
    (0..n)
        .map(|i| {
            let t = i % TOPICS.len();
            ClusteringItem {
                text: make_doc(vec![t], &mut rng).text,
                label: TOPICS[t].name.to_owned(),
            }
        })
        .collect()
}

pub struct SyntheticRetrieval {
    pub queries: Vec<TaskText>,
    pub corpus: Vec<TaskText>,
    /// `(query_id, doc_id, rel)`: rel counts the query's facets found in
    /// the document.
    pub qrels: Vec<(String, String, f64)>,
}

/// Two-facet queries over a fresh corpus. Every query has at least one
/// relevant document.
pub fn retrieval_task(n_queries: usize, n_docs: usize, seed: u64) -> SyntheticRetrieval {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic/retrieval"));
    let docs = documents(n_docs, derive_seed(seed, "synthetic/retrieval-docs"));
    let corpus: Vec<TaskText> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| TaskText {
            id: format!("doc{i:03}"),
            text: d.text.clone(),
        })
        .collect();
    let mut queries = Vec::with_capacity(n_queries);
    let mut qrels = Vec::new();
    for q in 0..n_queries {
        let anchor = docs.choose(&mut rng).expect("documents");
        let facets: Vec<&str> = anchor.facets.iter().copied().choose_multiple(&mut rng, 2);
        let id = format!("q{q:03}");
        for (d, doc) in docs.iter().enumerate() {
            let rel = facets.iter().filter(|f| doc.facets.contains(*f)).count();
            if rel > 0 {
                qrels.push((id.clone(), corpus[d].id.clone(), rel as f64));
            }
        }
        queries.push(TaskText {
            id,
            text: facets.join(" "),
        });
    }
    SyntheticRetrieval {
        queries,
        corpus,
        qrels,
    }
}

fn facet_index() -> HashMap<&'static str, usize> {
    TOPICS
        .iter()
        .enumerate()
        .flat_map(|(t, topic)| topic.facets.iter().map(move |f| (*f, t)))
        .collect()
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn topic_question(t: usize) -> String {
    format!("Is the article about {}?", TOPICS[t].name)
}

fn facet_question(f: &str) -> String {
    format!("Does the article mention {f}?")
}

/// Lines of a numbered block following `header` up to the next blank line,
/// with the `prefix N. ` numbering removed.
fn numbered_block<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
    let Some(start) = prompt.find(header) else {
        return Vec::new();
    };
    prompt[start + header.len()..]
        .lines()
        .skip_while(|l| l.trim().is_empty())
        .take_while(|l| !l.trim().is_empty())
        .map(|l| match l.split_once(". ") {
            Some((head, rest)) if head.ends_with(|c: char| c.is_ascii_digit()) => rest,
            _ => l,
        })
        .collect()
}

/// Stand-in LLM with perfect knowledge of the synthetic world. It writes
/// facet and topic questions for generation prompts and answers them by
/// keyword presence.
pub struct TopicOracle {
    facets: HashMap<&'static str, usize>,
}

impl Default for TopicOracle {
    fn default() -> Self {
        Self {
            facets: facet_index(),
        }
    }
}

impl TopicOracle {
    fn doc_facets(&self, text: &str) -> BTreeSet<&'static str> {
        words(text)
            .filter_map(|w| self.facets.get_key_value(w.as_str()).map(|(k, _)| *k))
            .collect()
    }

    fn doc_topics(&self, text: &str) -> BTreeSet<usize> {
        self.doc_facets(text).iter().map(|f| self.facets[f]).collect()
    }

    /// Truth of one question for one text; unknown questions are "no".
    pub fn answer(&self, question: &str, text: &str) -> bool {
        let ws: Vec<String> = words(question).collect();
        if let Some(t) = TOPICS.iter().position(|t| ws.iter().any(|w| w == t.name)) {
            return self.doc_topics(text).contains(&t);
        }
        let have = self.doc_facets(text);
        ws.iter().any(|w| have.contains(w.as_str()))
    }

    fn contrastive(&self, positives: &[&str], negatives: &[&str]) -> Vec<String> {
        let mut pos: BTreeMap<&str, i64> = BTreeMap::new();
        let mut score: BTreeMap<&str, i64> = BTreeMap::new();
        let mut topics = vec![0i64; TOPICS.len()];
        for p in positives {
            for f in self.doc_facets(p) {
                *pos.entry(f).or_default() += 1;
                *score.entry(f).or_default() += 1;
            }
            for t in self.doc_topics(p) {
                topics[t] += 1;
            }
        }
        for n in negatives {
            for f in self.doc_facets(n) {
                *score.entry(f).or_default() -= 1;
            }
            for t in self.doc_topics(n) {
                topics[t] -= 1;
            }
        }
        let mut out = Vec::new();
        if let Some(t) = (0..TOPICS.len()).max_by_key(|&t| (topics[t], std::cmp::Reverse(t))) {
            if topics[t] > 0 {
                out.push(topic_question(t));
            }
        }
        let mut ranked: Vec<(&str, i64)> = score
            .into_iter()
            .filter(|(f, _)| pos.contains_key(f))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        out.extend(ranked.into_iter().map(|(f, _)| facet_question(f)));
        out.truncate(10);
        out
    }

    fn descriptive(&self, references: &[&str]) -> Vec<String> {
        let mut topics = BTreeSet::new();
        let mut facets = Vec::new();
        for r in references {
            topics.extend(self.doc_topics(r));
            for f in self.doc_facets(r) {
                if !facets.contains(&f) {
                    facets.push(f);
                }
            }
        }
        let mut out: Vec<String> = topics.into_iter().map(topic_question).collect();
        out.extend(facets.into_iter().map(facet_question));
        out.truncate(10);
        out
    }
}

fn numbered(lines: &[String]) -> String {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

impl LlmProvider for TopicOracle {
    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String, LlmError> {
        if prompt.contains("Positive Articles:") {
            let positives = numbered_block(prompt, "Positive Articles:");
            let negatives = numbered_block(prompt, "Negative Articles:");
            return Ok(numbered(&self.contrastive(&positives, &negatives)));
        }
        if prompt.contains("Reference Articles:") {
            return Ok(numbered(&self.descriptive(&numbered_block(prompt, "Reference Articles:"))));
        }
        if prompt.contains("Text Chunk:") {
            let text = numbered_block(prompt, "Text Chunk:").join(" ");
            let answers: Vec<String> = numbered_block(prompt, "Questions:")
                .into_iter()
                .map(|q| if self.answer(q, &text) { "yes" } else { "no" }.to_owned())
                .collect();
            return Ok(numbered(&answers));
        }
        Err(LlmError::Rejected {
            status: 400,
            body: "unrecognised prompt".into(),
        })
    }
}
