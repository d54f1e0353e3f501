//! Closed template vocabulary shared by the text encoder and the task generator.

/// Index 0 is reserved for unknown words.
pub const UNK: usize = 0;

pub const WORDS: &[&str] = &[
    "<unk>",
    "object", //
    "one",
    "single",
    "two",
    "a", //
    "small",
    "tiny",
    "large",
    "medium",
    "big", //
    "bright",
    "dim",
    "gray",
    "white",
    "pale",
    "dark", //
    "round",
    "oval",
    "hollow",
    "thin",
    "elongated",
    "irregular",
    "plus",
    "circular",
    "lumpy",
    "straight",
    "crossed", //
    "disc",
    "ellipse",
    "ring",
    "bar",
    "blob",
    "cross",
    "shape",
    "region",
    "lesion",
    "polyp",
    "mass",
    "band",
    "annulus", //
    "left",
    "right",
    "center",
    "anywhere",
    "top",
    "bottom",
    "middle",
    "side", //
    "located",
    "in",
    "the",
    "of",
    "image",
    "at",
    "on",
    "with",
    "near",
    "view",
    "area",
    "edge",
    "smooth",
    "textured",
    "faint",
];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn word_index(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word)
}

/// Whitespace tokenization, lower-cased; words outside the vocabulary map to [`UNK`].
pub fn tokenize(prompt: &str) -> Vec<usize> {
    prompt.split_whitespace().map(|w| word_index(&w.to_lowercase()).unwrap_or(UNK)).collect()
}

pub fn is_known(word: &str) -> bool {
    word_index(&word.to_lowercase()).is_some_and(|i| i != UNK)
}
