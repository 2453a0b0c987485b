//! Template captions over a fixed 64-word vocabulary.

use rand::Rng;

use super::source::MAX_CLASSES;
use crate::error::{Error, Result};

const NOUNS: [&str; MAX_CLASSES] = [
    "horn", "siren", "hiss", "motor", "whistle", "buzzer", "bird", "rumble", "rain", "beep", "hum",
    "alarm", "sweep", "flute", "wind", "clock",
];

const ADJECTIVES: [&str; 22] = [
    "loud", "faint", "soft", "sharp", "steady", "distant", "short", "long", "bright", "deep",
    "quiet", "strange", "repeated", "sudden", "constant", "low", "high", "noisy", "clear",
    "muffled", "harsh", "gentle",
];

const FILLER: [&str; 26] = [
    "a",
    "the",
    "of",
    "sound",
    "is",
    "heard",
    "someone",
    "hears",
    "in",
    "distance",
    "there",
    "coming",
    "from",
    "outside",
    "nearby",
    "while",
    "people",
    "talk",
    "room",
    "with",
    "some",
    "background",
    "noise",
    "we",
    "can",
    "hear",
];

pub const VOCAB_SIZE: usize = NOUNS.len() + ADJECTIVES.len() + FILLER.len();

/// Word at token id `i`. Ids `0..16` are the class nouns, so a class id is
/// also its noun's token id.
pub fn word(i: usize) -> Result<&'static str> {
    NOUNS
        .iter()
        .chain(&ADJECTIVES)
        .chain(&FILLER)
        .nth(i)
        .copied()
        .ok_or_else(|| {
            Error::Input(format!(
                "token {i} outside the {VOCAB_SIZE}-word vocabulary"
            ))
        })
}

pub fn token(w: &str) -> Result<usize> {
    NOUNS
        .iter()
        .chain(&ADJECTIVES)
        .chain(&FILLER)
        .position(|v| *v == w)
        .ok_or_else(|| Error::Input(format!("word {w:?} is not in the vocabulary")))
}

pub fn class_noun(class: usize) -> Result<&'static str> {
    NOUNS
        .get(class)
        .copied()
        .ok_or_else(|| Error::Input(format!("no noun for class {class}")))
}

/// `A` marks an adjective slot and `N` the class noun.
const TEMPLATES: [&[&str]; 9] = [
    &["a", "N", "sound"],
    &["a", "A", "N", "sound"],
    &["a", "N", "is", "heard"],
    &["the", "sound", "of", "a", "A", "N"],
    &["a", "A", "A", "N", "sound", "nearby"],
    &["we", "can", "hear", "a", "A", "N"],
    &["a", "A", "N", "with", "some", "background", "noise"],
    &["someone", "hears", "a", "A", "N", "in", "the", "distance"],
    &[
        "a", "A", "N", "while", "people", "talk", "in", "the", "room",
    ],
];

/// A random caption for `class`: 3 to 9 tokens, exactly one class noun.
pub fn caption<R: Rng>(class: usize, rng: &mut R) -> Result<Vec<usize>> {
    let noun = token(class_noun(class)?)?;
    let tpl = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    tpl.iter()
        .map(|&w| match w {
            "N" => Ok(noun),
            "A" => token(ADJECTIVES[rng.random_range(0..ADJECTIVES.len())]),
            other => token(other),
        })
        .collect()
}

/// Recovers the class named by a caption: the single class noun among the
/// tokens.
pub fn decode_class(tokens: &[usize]) -> Result<usize> {
    let mut nouns = tokens.iter().filter(|&&t| t < NOUNS.len());
    match (nouns.next(), nouns.next()) {
        (Some(&c), None) => Ok(c),
        (None, _) => Err(Error::Input("caption names no class".into())),
        _ => Err(Error::Input("caption names more than one class".into())),
    }
}

pub fn render(tokens: &[usize]) -> Result<String> {
    Ok(tokens
        .iter()
        .map(|&t| word(t))
        .collect::<Result<Vec<_>>>()?
        .join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unique_and_full_size() {
        assert_eq!(VOCAB_SIZE, 64);
        for i in 0..VOCAB_SIZE {
            assert_eq!(token(word(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn templates_span_three_to_nine_tokens() {
        assert_eq!(TEMPLATES.iter().map(|t| t.len()).min(), Some(3));
        assert_eq!(TEMPLATES.iter().map(|t| t.len()).max(), Some(9));
        assert!(TEMPLATES
            .iter()
            .all(|t| t.iter().filter(|w| **w == "N").count() == 1));
    }
}
