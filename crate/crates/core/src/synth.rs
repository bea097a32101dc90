//! Template-generated hotel-review corpus with three sentiment classes.
//!
//! Positive and negative reviews are built from sentiment lexemes; neutral
//! reviews use bland lexemes or mix one positive and one negative clause, so
//! a bag of single words is not quite enough to separate the classes.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Label, LabeledExample};

const ASPECTS: &[&str] = &[
    "room", "staff", "bed", "breakfast", "location", "bathroom", "service", "lobby", "pool", "wifi", "view",
    "reception", "shower", "restaurant", "parking",
];
const POSITIVE: &[&str] = &[
    "great", "excellent", "clean", "friendly", "comfortable", "lovely", "spacious", "quiet", "wonderful", "helpful",
    "perfect", "amazing", "delicious", "superb",
];
const NEGATIVE: &[&str] = &[
    "dirty", "rude", "noisy", "terrible", "awful", "cramped", "broken", "smelly", "slow", "horrible", "filthy",
    "unhelpful", "cold", "disappointing",
];
const NEUTRAL: &[&str] = &[
    "average", "okay", "standard", "ordinary", "acceptable", "typical", "adequate", "basic", "unremarkable",
    "fine",
];
const OPENERS: &[&str] = &["", "honestly", "overall", "for the price", "on our trip", "this time"];

fn pick<'a, R: Rng + ?Sized>(words: &[&'a str], rng: &mut R) -> &'a str {
    words.choose(rng).expect("word lists are nonempty")
}

fn two_aspects<'a, R: Rng + ?Sized>(rng: &mut R) -> (&'a str, &'a str) {
    let mut pair: Vec<&str> = ASPECTS.choose_multiple(rng, 2).copied().collect();
    pair.shuffle(rng);
    (pair[0], pair[1])
}

fn polar<R: Rng + ?Sized>(lex: &[&str], rng: &mut R, positive: bool) -> String {
    let (a, b) = two_aspects(rng);
    let w = pick(lex, rng);
    let w2 = pick(lex, rng);
    let u = pick(NEUTRAL, rng);
    match rng.random_range(0..6) {
        0 => format!("the {a} was {w}"),
        1 => format!("{w} {a} and {w2} {b}"),
        2 if positive => format!("really {w} {a} , would stay again"),
        2 => format!("really {w} {a} , never again"),
        3 => format!("the {a} was {u} but the {b} was {w}"),
        4 if positive => format!("we loved the {w} {a}"),
        4 => format!("we hated the {w} {a}"),
        _ => format!("the {a} was {w} and the {b} was {w2} too"),
    }
}

fn neutral<R: Rng + ?Sized>(rng: &mut R) -> String {
    let (a, b) = two_aspects(rng);
    let u = pick(NEUTRAL, rng);
    let u2 = pick(NEUTRAL, rng);
    let p = pick(POSITIVE, rng);
    let n = pick(NEGATIVE, rng);
    match rng.random_range(0..6) {
        0 => format!("the {a} was {u}"),
        1 => format!("{u} {a} and {u2} {b}"),
        2 => format!("the {a} was {p} but the {b} was {n}"),
        3 => format!("the {a} was {n} but the {b} was {p}"),
        4 => format!("nothing special about the {a} , {u} {b}"),
        _ => format!("the {a} was {u} and the {b} was {u2} too"),
    }
}

/// One review of the given class.
pub fn review<R: Rng + ?Sized>(label: Label, rng: &mut R) -> String {
    let body = match label {
        Label::Positive => polar(POSITIVE, rng, true),
        Label::Negative => polar(NEGATIVE, rng, false),
        Label::Neutral => neutral(rng),
    };
    let opener = pick(OPENERS, rng);
    if opener.is_empty() {
        body
    } else {
        format!("{opener} , {body}")
    }
}

/// `counts[c]` reviews of class `c`, shuffled. Texts listed in `exclude`
/// are never emitted.
pub fn generate_excluding<R: Rng + ?Sized>(
    counts: [usize; 3],
    exclude: &HashSet<String>,
    rng: &mut R,
) -> Vec<LabeledExample> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (label, &n) in Label::ALL.iter().zip(&counts) {
        let mut made = 0;
        while made < n {
            let text = review(*label, rng);
            if !exclude.contains(&text) {
                out.push(LabeledExample::new(text, *label));
                made += 1;
            }
        }
    }
    out.shuffle(rng);
    out
}

pub fn generate(counts: [usize; 3], seed: u64) -> Vec<LabeledExample> {
    generate_excluding(counts, &HashSet::new(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Train and test sets with no test text also appearing in training.
pub fn train_test(train_counts: [usize; 3], test_counts: [usize; 3], seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_excluding(train_counts, &HashSet::new(), &mut rng);
    let seen: HashSet<String> = train.iter().map(|e| e.text.clone()).collect();
    let test = generate_excluding(test_counts, &seen, &mut rng);
    (train, test)
}

/// Bundled corpus sizes: 660 training and 210 test reviews, balanced.
pub const DEFAULT_TRAIN_PER_CLASS: usize = 220;
pub const DEFAULT_TEST_PER_CLASS: usize = 70;
pub const DEFAULT_SEED: u64 = 2024;

pub fn default_corpus() -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    train_test([DEFAULT_TRAIN_PER_CLASS; 3], [DEFAULT_TEST_PER_CLASS; 3], DEFAULT_SEED)
}

/// Small pretraining corpus: `docs` documents of `sentences` reviews each,
/// serialised one sentence per line with blank lines between documents.
pub fn pretraining_text(docs: usize, sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for d in 0..docs {
        if d > 0 {
            out.push('\n');
        }
        let tone = Label::ALL[rng.random_range(0..3)];
        for _ in 0..sentences {
            out.push_str(&review(tone, &mut rng));
            out.push('\n');
        }
    }
    out
}
