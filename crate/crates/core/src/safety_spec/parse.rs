//! Parsers for the two spec-generation responses.
//!
//! Both accept the structured layout requested by [`SPEC_SYSTEM_PREAMBLE`]
//! as well as the free-form prose and markdown lists models tend to return.
//!
//! [`SPEC_SYSTEM_PREAMBLE`]: super::SPEC_SYSTEM_PREAMBLE

use std::collections::HashSet;

use crate::error::{Error, Result};

use super::{normalize_phrase, ObservabilityClass, SafetyItemSpec};

pub const COLOR_VOCABULARY: &[&str] = &[
    "black",
    "dark blue",
    "dark green",
    "dark purple",
    "yellow",
    "light blue",
    "light green",
    "light purple",
    "white",
    "blue",
    "brown",
    "green",
    "grey",
    "purple",
    "red",
];

pub const MATERIAL_VOCABULARY: &[&str] = &[
    "plastic",
    "polycarbonate",
    "leather",
    "rubber",
    "latex",
    "nitrile",
    "fabric",
];

pub const FUNCTIONALITY_VOCABULARY: &[&str] = &[
    "shock-absorbing",
    "impact-resistant",
    "insulated",
    "highly-visible",
    "reflective",
    "anti-slip",
    "cut-resistant",
    "puncture-resistant",
    "dust-proof",
    "fragment-proof",
    "uv-protected",
    "splash-proof",
    "flame-retardant",
    "chemical-protective",
    "acid-resistant",
    "alkali-resistant",
    "face-protective",
    "eye-protective",
    "virus-proof",
    "bacteria-proof",
    "liquid-resistant",
    "hair-covering",
    "waterproof",
    "contamination-preventive",
    "stain-resistant",
];

/// Strips list markers (`1.`, `2)`, `-`, `*`, `•`), markdown emphasis and
/// heading hashes from the start of a line.
fn strip_list_marker(line: &str) -> (bool, &str) {
    let trimmed = line.trim_start();
    let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if rest.starts_with(char::is_whitespace) {
                return (true, rest.trim());
            }
        }
    }
    for marker in ['-', '*', '•'] {
        if let Some(rest) = trimmed.strip_prefix(marker) {
            if rest.starts_with(char::is_whitespace) {
                return (true, rest.trim());
            }
        }
    }
    (false, trimmed.trim())
}

fn strip_decoration(text: &str) -> &str {
    text.trim()
        .trim_start_matches('#')
        .trim_matches(|c: char| c == '*' || c == '_' || c == '`' || c.is_whitespace())
}

fn clean_name(text: &str) -> String {
    let text = strip_decoration(text).trim_matches(|c: char| {
        matches!(c, '"' | '\'' | '[' | ']' | '.' | ',' | ';' | ':' | '“' | '”') || c.is_whitespace()
    });
    normalize_phrase(text)
}

fn quoted_segments(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Option<String> = None;
    for c in text.chars() {
        match (&mut current, c) {
            (None, '"' | '“') => current = Some(String::new()),
            (Some(buf), '"' | '”') => {
                out.push(std::mem::take(buf));
                current = None;
            }
            (Some(buf), c) => buf.push(c),
            (None, _) => {}
        }
    }
    out
}

/// Extracts item names from the item-list response.
///
/// Quoted names win when present; otherwise numbered or bulleted lines and
/// an `items: a, b, c` line are read. Plain prose yields nothing, which is an
/// error.
pub fn parse_items_response(text: &str) -> Result<Vec<String>> {
    let mut candidates: Vec<String> = quoted_segments(text);

    if candidates.iter().all(|c| c.trim().is_empty()) {
        candidates.clear();
        for line in text.lines() {
            let (is_list, content) = strip_list_marker(line);
            let content = strip_decoration(content);
            if let Some((key, rest)) = content.split_once(':') {
                if strip_decoration(key).eq_ignore_ascii_case("items") {
                    candidates.extend(rest.split([',', ';']).map(str::to_owned));
                    continue;
                }
            }
            if is_list {
                // `Hard hat: protects the head` or `Hard hat - protects ...`
                let head = content
                    .split_once(':')
                    .map_or(content, |(head, _)| head)
                    .split(" - ")
                    .next()
                    .unwrap_or_default()
                    .split(" – ")
                    .next()
                    .unwrap_or_default();
                candidates.push(head.to_owned());
            }
        }
    }

    let mut seen = HashSet::new();
    let items: Vec<String> = candidates
        .iter()
        .map(|c| clean_name(c))
        .filter(|c| !c.is_empty() && seen.insert(c.clone()))
        .collect();

    if items.is_empty() {
        return Err(Error::parse("no safety items found in response", text));
    }
    Ok(items)
}

fn class_for_key(key: &str) -> Option<ObservabilityClass> {
    match normalize_phrase(strip_decoration(key)).as_str() {
        "color" | "colour" | "do" | "directly observable" => Some(ObservabilityClass::Do),
        "material" | "so" | "situationally observable" => Some(ObservabilityClass::So),
        "functionality" | "function" | "io" | "inferentially observable" => {
            Some(ObservabilityClass::Io)
        }
        _ => None,
    }
}

fn contains_term(phrase: &str, term: &str) -> bool {
    let padded = format!(" {} ", phrase.replace(['(', ')', ',', '/'], " "));
    padded.contains(&format!(" {term} "))
}

/// Classifies a free-text attribute phrase by membership in the colour,
/// material and functionality vocabularies. Ambiguous or unknown phrases
/// return `None`.
pub fn classify_by_lexicon(phrase: &str) -> Option<ObservabilityClass> {
    let phrase = normalize_phrase(phrase);
    let hits: Vec<ObservabilityClass> = [
        (ObservabilityClass::Do, COLOR_VOCABULARY),
        (ObservabilityClass::So, MATERIAL_VOCABULARY),
        (ObservabilityClass::Io, FUNCTIONALITY_VOCABULARY),
    ]
    .into_iter()
    .filter(|(_, vocab)| vocab.iter().any(|term| contains_term(&phrase, term)))
    .map(|(class, _)| class)
    .collect();
    match hits.as_slice() {
        [class] => Some(*class),
        _ => None,
    }
}

/// `high-visibility color` → (DO, `high-visibility`).
fn classify_by_suffix(phrase: &str) -> Option<(ObservabilityClass, String)> {
    const SUFFIXES: &[(&str, ObservabilityClass)] = &[
        ("color", ObservabilityClass::Do),
        ("colour", ObservabilityClass::Do),
        ("material", ObservabilityClass::So),
        ("functionality", ObservabilityClass::Io),
    ];
    let phrase = normalize_phrase(phrase);
    SUFFIXES.iter().find_map(|(suffix, class)| {
        let stem = phrase.strip_suffix(suffix)?.trim_end();
        (!stem.is_empty() && phrase.len() > suffix.len() && phrase.as_bytes()[stem.len()] == b' ')
            .then(|| (*class, stem.to_owned()))
    })
}

#[derive(Default, Clone)]
struct Slots {
    explicit: [Option<String>; 3],
    inferred: [Option<String>; 3],
}

impl Slots {
    fn set(&mut self, class: ObservabilityClass, phrase: String, explicit: bool) {
        let slot = if explicit {
            &mut self.explicit[class.index()]
        } else {
            &mut self.inferred[class.index()]
        };
        if slot.is_none() && !phrase.is_empty() {
            *slot = Some(phrase);
        }
    }

    fn offer(&mut self, text: &str) {
        let text = clean_value(text);
        if text.is_empty() {
            return;
        }
        if let Some((key, value)) = text.split_once(':') {
            if let Some(class) = class_for_key(key) {
                self.set(class, clean_value(value), true);
                return;
            }
        }
        for piece in text.split([',', ';']) {
            let piece = clean_value(piece);
            if let Some((class, stem)) = classify_by_suffix(&piece) {
                self.set(class, stem, false);
            } else if let Some(class) = classify_by_lexicon(&piece) {
                self.set(class, piece, false);
            }
        }
    }

    fn resolve(&self, class: ObservabilityClass) -> Option<&str> {
        self.explicit[class.index()]
            .as_deref()
            .or(self.inferred[class.index()].as_deref())
    }
}

fn clean_value(text: &str) -> String {
    normalize_phrase(
        strip_decoration(strip_list_marker(text).1)
            .trim_matches(|c: char| matches!(c, '"' | '\'' | '.' | '“' | '”') || c.is_whitespace()),
    )
}

/// Reads the attribute-summary response into one [`SafetyItemSpec`] per
/// requested item, in request order.
///
/// Sections start at a line naming an item (`Boots:`, `**Boots**`,
/// `### Boots`, `[boots]`). Inside a section, `color:` / `material:` /
/// `functionality:` keys are trusted first; otherwise phrases are classified
/// by a `... color` / `... material` suffix or by vocabulary lookup.
pub fn parse_attributes_response<S: AsRef<str>>(
    text: &str,
    item_names: &[S],
) -> Result<Vec<SafetyItemSpec>> {
    if item_names.is_empty() {
        return Err(Error::InvalidArgument(
            "attribute parsing needs at least one item".into(),
        ));
    }
    let names: Vec<String> = item_names.iter().map(|n| normalize_phrase(n.as_ref())).collect();
    let mut slots = vec![Slots::default(); names.len()];
    let mut current: Option<usize> = None;

    for line in text.lines() {
        let (_, content) = strip_list_marker(line);
        let content = strip_decoration(content);
        if content.is_empty() {
            continue;
        }
        let (head, rest) = match content.split_once(':') {
            Some((head, rest)) => (head, Some(rest)),
            None => (content, None),
        };
        let head_name = clean_name(head);
        if let Some(idx) = names.iter().position(|n| *n == head_name) {
            current = Some(idx);
            if let Some(rest) = rest {
                slots[idx].offer(rest);
            }
            continue;
        }
        if let Some(idx) = current {
            slots[idx].offer(content);
        }
    }

    names
        .iter()
        .zip(&slots)
        .map(|(name, slot)| {
            let mut phrases = Vec::with_capacity(3);
            for class in ObservabilityClass::ALL {
                match slot.resolve(class) {
                    Some(phrase) => phrases.push(phrase.to_owned()),
                    None => {
                        return Err(Error::MissingAttribute {
                            item: name.clone(),
                            class,
                            raw: text.to_owned(),
                        })
                    }
                }
            }
            SafetyItemSpec::new(name, &phrases[0], &phrases[1], &phrases[2])
        })
        .collect()
}
