//! Deterministic miniature datasets for the four corpus roles.
//!
//! The fixture world pairs each animal with a characteristic sound. Story
//! and book text never mentions the sounds, so a language model trained on
//! them alone stays near chance on the sound-choice ranking items; ranking
//! training is what teaches the association. Spurious choices are other
//! animals' sounds, i.e. shuffled cross-example continuations.

use crate::data::{BookLine, RankingItem, StoryExample, SyntheticPair};
use crate::rng::{self, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const ANIMALS: [&str; 8] = ["dog", "cat", "cow", "duck", "owl", "fox", "pig", "bee"];
const SOUNDS: [&str; 8] = ["woof", "meow", "moo", "quack", "hoot", "yip", "oink", "buzz"];
const PLACES: [&str; 8] = [
    "barn", "pond", "forest", "house", "field", "garden", "market", "hill",
];
const NAMES: [&str; 6] = ["tom", "ann", "sam", "eva", "max", "ida"];
const ADJECTIVES: [&str; 6] = ["small", "big", "old", "young", "happy", "sleepy"];
const VERBS: [&str; 6] = ["walked", "played", "slept", "jumped", "looked", "waited"];

/// Fixed opening lines of the book corpus. Together they put every
/// character the other fixture roles use — including word-final variants
/// like the trailing letters of the animal sounds — into the tokenizer's
/// base alphabet, without ever using the sound words themselves.
const COVERAGE_LINES: [&str; 4] = [
    "the quick brown fox jumps over the lazy dog again and again",
    "the sheep went up the hill to sleep near the creek .",
    "a leaf fell off and the crow flew to the zoo to see the jazz show .",
    "Aliens start abducting humans . Prompt and Story words go here .",
];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FixtureSizes {
    pub stories: usize,
    pub book_lines: usize,
    pub ranking_items: usize,
    pub synthetic_pairs: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        FixtureSizes {
            stories: 200,
            book_lines: 500,
            ranking_items: 100,
            synthetic_pairs: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    pub stories: Vec<StoryExample>,
    pub books: Vec<BookLine>,
    pub ranking: Vec<RankingItem>,
    pub pairs: Vec<SyntheticPair>,
}

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

fn make_story(rng: &mut impl Rng) -> StoryExample {
    let adj = pick(rng, &ADJECTIVES);
    let animal = pick(rng, &ANIMALS);
    let place = pick(rng, &PLACES);
    let verb = pick(rng, &VERBS);
    let verb2 = pick(rng, &VERBS);
    let name = pick(rng, &NAMES);
    let prompt = format!("the {adj} {animal} in the {place}");
    let story = format!(
        "the {animal} {verb} near the {place} . {name} saw the {adj} {animal} . it {verb2} in the {place} all day ."
    );
    StoryExample { prompt, story }
}

fn make_book_line(rng: &mut impl Rng) -> BookLine {
    let text = match rng.gen_range(0..3) {
        0 => format!(
            "the {} {} {} to the {} .",
            pick(rng, &ADJECTIVES),
            pick(rng, &ANIMALS),
            pick(rng, &VERBS),
            pick(rng, &PLACES)
        ),
        1 => format!(
            "{} {} with the {} in the {} .",
            pick(rng, &NAMES),
            pick(rng, &VERBS),
            pick(rng, &ANIMALS),
            pick(rng, &PLACES)
        ),
        _ => format!(
            "one {} day the {} {} and {} .",
            pick(rng, &ADJECTIVES),
            pick(rng, &ANIMALS),
            pick(rng, &VERBS),
            pick(rng, &VERBS)
        ),
    };
    BookLine { text }
}

/// Animals that appear in ranking items; every item contrasts all four
/// of their sounds.
const RANKING_ANIMALS: usize = 4;

/// A 4-way sound-choice item. The correct choice pairs the context's
/// animal with its sound; distractors borrow the other animals' sounds.
fn make_ranking_item(rng: &mut impl Rng) -> RankingItem {
    let animal_idx = rng.gen_range(0..RANKING_ANIMALS);
    let animal = ANIMALS[animal_idx];
    let name = pick(rng, &NAMES);
    let place = pick(rng, &PLACES);
    let context = format!("{name} heard the {animal} in the {place} .");

    let mut sound_ids: Vec<usize> = (0..RANKING_ANIMALS).collect();
    sound_ids.shuffle(rng);
    let correct_index = sound_ids.iter().position(|&i| i == animal_idx).unwrap();
    let choices = sound_ids
        .iter()
        .map(|&i| format!("the {animal} said {} .", SOUNDS[i]))
        .collect();
    RankingItem {
        context,
        choices,
        correct_index,
    }
}

/// Human text is a grammatical sentence; the machine side scrambles its
/// words (resampling until the order actually differs).
fn make_pair(rng: &mut impl Rng) -> SyntheticPair {
    let human = make_book_line(rng).text;
    let words: Vec<String> = human.split_whitespace().map(str::to_string).collect();
    let mut scrambled = words.clone();
    loop {
        scrambled.shuffle(rng);
        if scrambled != words {
            break;
        }
    }
    SyntheticPair {
        human,
        machine: scrambled.join(" "),
    }
}

/// Generate all four datasets from the fixture substream of `seed`.
pub fn generate(seed: u64, sizes: FixtureSizes) -> Fixtures {
    let mut rng = rng::substream(seed, stream::FIXTURES, 0);
    let stories = (0..sizes.stories).map(|_| make_story(&mut rng)).collect();
    let mut books: Vec<BookLine> = Vec::with_capacity(sizes.book_lines);
    for line in COVERAGE_LINES.iter().take(sizes.book_lines) {
        books.push(BookLine {
            text: line.to_string(),
        });
    }
    while books.len() < sizes.book_lines {
        books.push(make_book_line(&mut rng));
    }
    let ranking = (0..sizes.ranking_items)
        .map(|_| make_ranking_item(&mut rng))
        .collect();
    let pairs = (0..sizes.synthetic_pairs)
        .map(|_| make_pair(&mut rng))
        .collect();
    Fixtures {
        stories,
        books,
        ranking,
        pairs,
    }
}

/// Text corpus the tokenizer trains on: formatted stories plus book lines
/// (the same streams the model will read).
pub fn tokenizer_corpus(fixtures: &Fixtures) -> Vec<String> {
    let mut corpus: Vec<String> = fixtures
        .stories
        .iter()
        .map(crate::data::format_prompt_story)
        .collect();
    corpus.extend(fixtures.books.iter().map(|b| b.text.clone()));
    corpus
}

/// File names used by the CLI for the four roles.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub stories: PathBuf,
    pub books: PathBuf,
    pub ranking: PathBuf,
    pub pairs: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> FixturePaths {
        FixturePaths {
            stories: dir.join("stories.jsonl"),
            books: dir.join("books.jsonl"),
            ranking: dir.join("ranking.jsonl"),
            pairs: dir.join("pairs.jsonl"),
        }
    }
}

/// Write the four JSONL files; byte-identical across runs per seed.
pub fn write(
    dir: &Path,
    seed: u64,
    sizes: FixtureSizes,
) -> Result<FixturePaths, crate::data::DataError> {
    let fixtures = generate(seed, sizes);
    let paths = FixturePaths::in_dir(dir);
    crate::data::save_jsonl(&paths.stories, &fixtures.stories)?;
    crate::data::save_jsonl(&paths.books, &fixtures.books)?;
    crate::data::save_jsonl(&paths.ranking, &fixtures.ranking)?;
    crate::data::save_jsonl(&paths.pairs, &fixtures.pairs)?;
    Ok(paths)
}
