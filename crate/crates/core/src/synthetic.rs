//! Deterministic synthetic corpora.
//!
//! Three generators live here:
//!
//! * [`separable_corpus`]: marker-token classification sets.
//! * [`paraphrase_corpus`]: human-style selling points against near-duplicate
//!   machine paraphrases, for recursive sharpening.
//! * [`product_corpus`]: a product catalogue with descriptions, reviews,
//!   OCR text, human selling points, rewrite pairs and customer profiles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, HumanSellingPoint, ProductRecord};
use crate::personalization::{CustomerProfile, Keyword};
use crate::Result;

pub const MARKER: &str = "premium";

const FILLER: &[&str] = &[
    "the", "box", "color", "arrives", "with", "manual", "and", "cable", "item", "was", "shipped", "from", "store",
    "warehouse", "in", "spring", "model", "year", "size", "for", "home", "office", "use", "package", "includes",
    "one", "unit", "black", "white", "grey", "standard", "version", "product", "number", "label", "side", "back",
    "front", "left", "right",
];

#[derive(Debug, Clone)]
pub struct SeparableCorpus {
    pub train_pos: Vec<String>,
    pub train_neg: Vec<String>,
    pub test_pos: Vec<String>,
    pub test_neg: Vec<String>,
}

fn filler_sentence(rng: &mut ChaCha8Rng, marker: bool) -> String {
    let len = rng.gen_range(4..=8);
    let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(rng).unwrap()).collect();
    if marker {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, MARKER);
    }
    words.join(" ")
}

/// `n` training texts per class and `n / 2` held-out texts per class.
/// Positives carry [`MARKER`]; negatives never do.
pub fn separable_corpus(n: usize, seed: u64) -> SeparableCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |count: usize, marker: bool| -> Vec<String> { (0..count).map(|_| filler_sentence(&mut rng, marker)).collect() };
    let train_pos = gen(n, true);
    let train_neg = gen(n, false);
    let test_pos = gen(n / 2, true);
    let test_neg = gen(n / 2, false);
    SeparableCorpus {
        train_pos,
        train_neg,
        test_pos,
        test_neg,
    }
}

pub const FEATURES: &[&str] = &[
    "easy to assemble and install",
    "long battery life",
    "fast charging",
    "high refresh rate screen",
    "quiet motor",
    "waterproof design",
    "large storage capacity",
    "lightweight frame",
    "stable wifi signal",
    "soft breathable fabric",
    "energy saving mode",
    "durable steel body",
    "compact size",
    "clear sound quality",
    "ergonomic handle",
    "anti slip base",
    "one touch control",
    "fast heating",
    "low noise operation",
    "wide viewing angle",
    "smooth sliding drawer",
    "strong suction power",
    "thick memory foam",
    "bright led display",
];

const STYLE_PREFIXES: &[&str] = &["", "super", "ultra", "reliable", "smart", "all day"];

/// Light wrappers that keep a paraphrase close to the plain feature, in
/// one family per sharpening round.
const NEAR_DUP: &[&[(&str, &str)]] = &[
    &[("so", ""), ("", "for sure"), ("pretty", "overall"), ("", "i guess"), ("really", ""), ("", "lol")],
    &[("quite", ""), ("", "honestly"), ("very", "indeed"), ("", "for real"), ("truly", ""), ("", "haha")],
    &[("kind of", ""), ("", "basically"), ("rather", "actually"), ("", "to be fair"), ("fairly", ""), ("", "tbh")],
];

const IRRELEVANT: &[&str] = &[
    "ships in a plain cardboard box",
    "please contact customer service for warranty details",
    "the package was left at the front door",
    "model number printed on the back label",
    "color may vary slightly from the photos",
    "released in the spring catalogue",
    "delivery took three days",
    "see the manual for more information",
];

fn human_style(rng: &mut ChaCha8Rng, feature: &str) -> String {
    let prefix = STYLE_PREFIXES.choose(rng).unwrap();
    if prefix.is_empty() {
        feature.to_string()
    } else {
        format!("{prefix} {feature}")
    }
}

fn wrap(lead: &str, text: &str, tail: &str) -> String {
    [lead, text, tail].iter().filter(|w| !w.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

fn near_duplicate(rng: &mut ChaCha8Rng, family: usize, feature: &str) -> String {
    let (lead, tail) = NEAR_DUP[family % NEAR_DUP.len()].choose(rng).unwrap();
    wrap(lead, feature, tail)
}

#[derive(Debug, Clone)]
pub struct ParaphraseCorpus {
    /// Fixed human-written positives.
    pub human_pos: Vec<String>,
    /// Initial negatives: irrelevant source sentences.
    pub initial_neg: Vec<String>,
    /// Machine candidate batches, mostly near-duplicate paraphrases of features.
    pub batches: Vec<Vec<String>>,
    pub eval_pos: Vec<String>,
    pub eval_neg: Vec<String>,
}

pub fn paraphrase_corpus(rounds: usize, batch_size: usize, seed: u64) -> ParaphraseCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut human_pos: Vec<String> = FEATURES.to_vec().into_iter().map(str::to_string).collect();
    for _ in 0..FEATURES.len() * 2 {
        let f = FEATURES.choose(&mut rng).unwrap();
        human_pos.push(human_style(&mut rng, f));
    }
    // Wrapper words also occur around irrelevant text so they are in
    // vocabulary from the start.
    let mut initial_neg: Vec<String> = IRRELEVANT.iter().map(|s| s.to_string()).collect();
    for &(lead, tail) in NEAR_DUP.iter().copied().flatten() {
        initial_neg.push(wrap(lead, IRRELEVANT.choose(&mut rng).unwrap(), tail));
    }
    let batches = (0..rounds)
        .map(|r| {
            (0..batch_size)
                .map(|i| {
                    if i % 5 == 4 {
                        IRRELEVANT.choose(&mut rng).unwrap().to_string()
                    } else {
                        let f = FEATURES.choose(&mut rng).unwrap();
                        near_duplicate(&mut rng, r, f)
                    }
                })
                .collect()
        })
        .collect();
    let eval_pos = (0..40)
        .map(|_| {
            let f = FEATURES.choose(&mut rng).unwrap();
            human_style(&mut rng, f)
        })
        .collect();
    let eval_neg = (0..40)
        .map(|i| {
            let f = FEATURES.choose(&mut rng).unwrap();
            near_duplicate(&mut rng, i, f)
        })
        .collect();
    ParaphraseCorpus {
        human_pos,
        initial_neg,
        batches,
        eval_pos,
        eval_neg,
    }
}

const NOUNS: &[(&str, &str)] = &[
    ("desk", "furniture"),
    ("phone", "electronics"),
    ("speaker", "electronics"),
    ("kettle", "appliances"),
    ("laptop", "electronics"),
    ("fan", "appliances"),
    ("chair", "furniture"),
    ("jacket", "apparel"),
    ("vacuum", "appliances"),
    ("mattress", "furniture"),
    ("monitor", "electronics"),
    ("router", "electronics"),
];

const BRANDS: &[&str] = &["acme", "nordic", "lumo", "vexa", "orbit", "kaiyo", "tern", "halcy"];
const PEOPLE: &[&str] = &["mom", "dad", "son", "daughter", "roommate", "office"];

/// A `(source, target)` rewrite pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewritePair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct ProductCorpus {
    pub products: Vec<ProductRecord>,
    pub human_selling_points: Vec<HumanSellingPoint>,
    pub pairs: Vec<RewritePair>,
    pub profiles: Vec<CustomerProfile>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// The desk example used as the canonical rewrite.
pub const DESK_SOURCE: &str = "this desk is very easy for me to assemble and install";
pub const DESK_TARGET: &str = "easy to assemble and install";

pub fn product_corpus(n_products: usize, seed: u64) -> ProductCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut products = Vec::with_capacity(n_products);
    for i in 0..n_products {
        let (noun, category) = NOUNS[i % NOUNS.len()];
        let brand = BRANDS.choose(&mut rng).unwrap();
        let mut feats: Vec<&str> = FEATURES.choose_multiple(&mut rng, 3).copied().collect();
        feats.shuffle(&mut rng);
        let code = rng.gen_range(100..999);

        let mut sentences = vec![
            format!("The {brand} {noun} ships in a plain cardboard box."),
            format!("{}, {}.", capitalize(feats[0]), feats[1]),
            format!("This {noun} is very {} for me.", feats[2]),
            format!("Model number {code} is printed on the back label."),
        ];
        sentences.shuffle(&mut rng);
        let description = sentences.join(" ");

        let reviews = (0..rng.gen_range(0..=3))
            .map(|r| match r % 3 {
                0 => format!("I bought this for my {}!", PEOPLE.choose(&mut rng).unwrap()),
                1 => format!("Honestly I think the {} is okay I guess.", feats[rng.gen_range(0..3)]),
                _ => "Delivery took three days.".to_string(),
            })
            .collect();
        let ocr_texts = (0..rng.gen_range(0..=2))
            .map(|r| {
                if r == 0 {
                    feats[rng.gen_range(0..3)].to_uppercase()
                } else {
                    format!("MODEL {code}")
                }
            })
            .collect();
        products.push(ProductRecord {
            sku_id: format!("sku-{:04}", i + 1),
            title: format!("{} {}", capitalize(brand), noun),
            description,
            reviews,
            ocr_texts,
            category: category.to_string(),
        });
    }

    let mut human_selling_points: Vec<HumanSellingPoint> = FEATURES
        .iter()
        .map(|f| HumanSellingPoint {
            text: f.to_string(),
            theme: Some("functionality".into()),
        })
        .collect();
    for _ in 0..FEATURES.len() * 2 {
        let f = FEATURES.choose(&mut rng).unwrap();
        human_selling_points.push(HumanSellingPoint {
            text: human_style(&mut rng, f),
            theme: Some("functionality".into()),
        });
    }

    let mut pairs = vec![RewritePair {
        source: DESK_SOURCE.into(),
        target: DESK_TARGET.into(),
    }];
    for f in FEATURES {
        let (noun, _) = NOUNS.choose(&mut rng).unwrap();
        pairs.push(RewritePair {
            source: format!("this {noun} is very {f} for me"),
            target: f.to_string(),
        });
        pairs.push(RewritePair {
            source: format!("honestly i think the {f} is okay i guess"),
            target: f.to_string(),
        });
        pairs.push(RewritePair {
            source: f.to_string(),
            target: f.to_string(),
        });
    }

    let profiles = (0..20)
        .map(|c| {
            let picks: Vec<&str> = FEATURES.choose_multiple(&mut rng, 2).copied().collect();
            let keywords = picks
                .iter()
                .flat_map(|f| f.split(' ').filter(|w| w.len() > 3))
                .map(|w| Keyword {
                    word: w.to_string(),
                    score: (rng.gen_range(1..=10) as f64) / 10.0,
                })
                .collect();
            CustomerProfile {
                customer_id: format!("cust-{:03}", c + 1),
                keywords,
            }
        })
        .collect();

    ProductCorpus {
        products,
        human_selling_points,
        pairs,
        profiles,
    }
}

impl ProductCorpus {
    /// Writes `products.jsonl`, `human_selling_points.jsonl`, `pairs.jsonl`
    /// and `profiles.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join("products.jsonl"), &self.products)?;
        write_jsonl(dir.join("human_selling_points.jsonl"), &self.human_selling_points)?;
        write_jsonl(dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(dir.join("profiles.jsonl"), &self.profiles)?;
        Ok(())
    }
}

const COPY_TEMPLATES: &[(&str, &str)] = &[
    ("i love the {x} because of its {f}", "{x} with {f}"),
    ("the new {x} really has {f}", "{x} with {f}"),
    ("my {x} came with {f} out of the box", "{x} with {f}"),
    ("we picked the {x} for the {f}", "{x} with {f}"),
];

/// Rewrite pairs whose target must copy a nonce token from the source.
#[derive(Debug, Clone)]
pub struct CopyCorpus {
    pub train: Vec<RewritePair>,
    pub test: Vec<RewritePair>,
    /// The nonce token of each test pair.
    pub test_tokens: Vec<String>,
}

fn nonce(rng: &mut ChaCha8Rng) -> String {
    const CONSONANTS: &[u8] = b"bdfgkmnpqrstvwxz";
    const VOWELS: &[u8] = b"aeiou";
    (0..6)
        .map(|i| {
            let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            set[rng.gen_range(0..set.len())] as char
        })
        .collect()
}

/// Every nonce is unique, so none reaches a vocabulary with `min_freq >= 3`
/// and copying is the only way to emit it.
pub fn copy_corpus(n_train: usize, n_test: usize, seed: u64) -> CopyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = std::collections::HashSet::new();
    let mut make = |rng: &mut ChaCha8Rng| {
        let x = loop {
            let x = nonce(rng);
            if used.insert(x.clone()) {
                break x;
            }
        };
        let f = FEATURES.choose(rng).unwrap();
        let (src, tgt) = COPY_TEMPLATES.choose(rng).unwrap();
        let pair = RewritePair {
            source: src.replace("{x}", &x).replace("{f}", f),
            target: tgt.replace("{x}", &x).replace("{f}", f),
        };
        (pair, x)
    };
    let train = (0..n_train).map(|_| make(&mut rng).0).collect();
    let (test, test_tokens) = (0..n_test).map(|_| make(&mut rng)).unzip();
    CopyCorpus {
        train,
        test,
        test_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_deterministic() {
        let a = product_corpus(10, 1);
        let b = product_corpus(10, 1);
        assert_eq!(a.products, b.products);
        assert_eq!(a.pairs, b.pairs);
        let s = separable_corpus(10, 2);
        assert!(s.train_pos.iter().all(|t| t.contains(MARKER)));
        assert!(s.train_neg.iter().all(|t| !t.split(' ').any(|w| w == MARKER)));
    }

    #[test]
    fn copy_tokens_are_unique() {
        let c = copy_corpus(50, 20, 3);
        let mut seen = std::collections::HashSet::new();
        for (p, x) in c.test.iter().zip(&c.test_tokens) {
            assert!(p.source.contains(x.as_str()) && p.target.starts_with(x.as_str()));
            assert!(seen.insert(x.clone()));
        }
        assert!(c.train.iter().all(|p| !c.test_tokens.iter().any(|x| p.source.contains(x.as_str()))));
    }

    #[test]
    fn every_product_has_a_feature_phrase() {
        let c = product_corpus(50, 9);
        for p in &c.products {
            assert!(FEATURES.iter().any(|f| p.description.to_lowercase().contains(f)));
        }
    }
}
