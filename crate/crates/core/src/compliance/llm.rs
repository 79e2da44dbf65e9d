//! Decisions delegated to a language model.
//!
//! Step 1 sends the whole labelled affinity matrix in one request; step 2
//! sends one list with every attribute similarity of every worn item. Scores
//! are written with four decimals. Responses must cover every cell exactly
//! once; anything else is a parse error, never a silent threshold fallback.

use std::collections::HashMap;
use std::fmt::Write;

use crate::backends::LlmBackend;
use crate::error::{Error, Result};

use super::{AffinityMatrix, AttributeDecision, AttributeScore, WearDecision};

pub const DECISION_FORMAT_VERSION: &str = "decisions-v1";

pub(crate) const WEAR_HEADER: &str = "[decisions-v1 wear]";
pub(crate) const ATTRIBUTE_HEADER: &str = "[decisions-v1 attributes]";

const DECISION_SYSTEM: &str =
    "You review similarity scores from a workplace safety compliance checker and return verdicts \
     in exactly the requested line format.";

fn check_label(label: &str) -> Result<()> {
    if label.contains('|') || label.contains('\n') {
        return Err(Error::InvalidArgument(format!(
            "label `{label}` cannot be serialized into a decision table"
        )));
    }
    Ok(())
}

pub fn render_wear_decision_prompt(matrix: &AffinityMatrix) -> Result<String> {
    for label in matrix.person_ids().iter().chain(matrix.item_names()) {
        check_label(label)?;
    }
    let mut out = String::new();
    out.push_str(WEAR_HEADER);
    out.push('\n');
    out.push_str(
        "Each cell is the image-text similarity between a detected person (row) and the prompt \
         \"a person wearing <item>\" (column).\n\
         Decide for every cell whether the person is wearing the item.\n\
         Answer with one line per cell in the form `<person> | <item> | yes` or \
         `<person> | <item> | no`, and nothing else.\n\n",
    );
    out.push_str("person");
    for item in matrix.item_names() {
        let _ = write!(out, " | {item}");
    }
    out.push('\n');
    for (i, person) in matrix.person_ids().iter().enumerate() {
        out.push_str(person);
        for j in 0..matrix.item_names().len() {
            let _ = write!(out, " | {:.4}", matrix.get(i, j));
        }
        out.push('\n');
    }
    Ok(out)
}

fn parse_verdict(text: &str) -> Option<bool> {
    match text.trim().trim_matches(|c: char| c == '`' || c == '.' || c == '*').to_lowercase().as_str() {
        "yes" | "true" | "1" | "worn" | "satisfied" => Some(true),
        "no" | "false" | "0" | "not worn" | "not satisfied" => Some(false),
        _ => None,
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.trim()
        .trim_matches('|')
        .split('|')
        .map(str::trim)
        .collect()
}

/// Verdicts in row-major order.
pub fn parse_wear_decision_response(text: &str, matrix: &AffinityMatrix) -> Result<Vec<bool>> {
    let (rows, cols) = matrix.shape();
    let mut cells: HashMap<(usize, usize), bool> = HashMap::new();
    for line in text.lines() {
        let fields = split_fields(line);
        let [person, item, verdict] = fields.as_slice() else {
            continue;
        };
        let Some(verdict) = parse_verdict(verdict) else {
            continue;
        };
        let i = matrix.person_ids().iter().position(|p| p == person);
        let j = matrix.item_names().iter().position(|n| n == item);
        let (Some(i), Some(j)) = (i, j) else {
            return Err(Error::parse(
                format!("decision for unknown cell `{person}` / `{item}`"),
                text,
            ));
        };
        if cells.insert((i, j), verdict).is_some_and(|prev| prev != verdict) {
            return Err(Error::parse(
                format!("conflicting decisions for `{person}` / `{item}`"),
                text,
            ));
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let verdict = cells.get(&(i, j)).ok_or_else(|| {
                Error::parse(
                    format!(
                        "no decision for `{}` / `{}`",
                        matrix.person_ids()[i],
                        matrix.item_names()[j]
                    ),
                    text,
                )
            })?;
            out.push(*verdict);
        }
    }
    Ok(out)
}

pub fn llm_engine_id(llm: &dyn LlmBackend) -> String {
    format!("llm:{}", llm.id())
}

/// One verdict per (person, item) cell from a single LLM request.
pub fn llm_decide_worn(matrix: &AffinityMatrix, llm: &dyn LlmBackend) -> Result<Vec<WearDecision>> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let prompt = render_wear_decision_prompt(matrix)?;
    let response = llm.complete(DECISION_SYSTEM, &prompt)?;
    let verdicts = parse_wear_decision_response(&response, matrix)?;
    let engine = llm_engine_id(llm);
    Ok(verdicts
        .into_iter()
        .enumerate()
        .map(|(n, worn)| {
            let (i, j) = (n / cols, n % cols);
            WearDecision {
                person_id: matrix.person_ids()[i].clone(),
                item: matrix.item_names()[j].clone(),
                score: matrix.get(i, j),
                worn,
                engine: engine.clone(),
            }
        })
        .collect())
}

pub fn render_attribute_decision_prompt(scores: &[AttributeScore]) -> Result<String> {
    let mut out = String::new();
    out.push_str(ATTRIBUTE_HEADER);
    out.push('\n');
    out.push_str(
        "Each entry is the cosine similarity between a cropped safety item and the prompt \
         \"a <attribute> <item>\".\n\
         Decide for every entry whether the item has the attribute.\n\
         Answer with one line per entry in the form `<id> | yes` or `<id> | no`, and nothing else.\n\n\
         id | person | item | class | attribute | similarity\n",
    );
    for (n, score) in scores.iter().enumerate() {
        for label in [&score.person_id, &score.item, &score.attribute.phrase] {
            check_label(label)?;
        }
        let _ = writeln!(
            out,
            "{} | {} | {} | {} | {} | {:.4}",
            n + 1,
            score.person_id,
            score.item,
            score.attribute.class,
            score.attribute.phrase,
            score.similarity
        );
    }
    Ok(out)
}

pub fn parse_attribute_decision_response(text: &str, expected: usize) -> Result<Vec<bool>> {
    let mut verdicts: Vec<Option<bool>> = vec![None; expected];
    for line in text.lines() {
        let fields = split_fields(line);
        let [id, verdict] = fields.as_slice() else {
            continue;
        };
        let (Ok(id), Some(verdict)) = (id.parse::<usize>(), parse_verdict(verdict)) else {
            continue;
        };
        let slot = id
            .checked_sub(1)
            .and_then(|i| verdicts.get_mut(i))
            .ok_or_else(|| Error::parse(format!("decision for unknown entry {id}"), text))?;
        if slot.is_some_and(|prev| prev != verdict) {
            return Err(Error::parse(format!("conflicting decisions for entry {id}"), text));
        }
        *slot = Some(verdict);
    }
    verdicts
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::parse(format!("no decision for entry {}", i + 1), text)))
        .collect()
}

/// All attribute verdicts from a single LLM request.
pub fn llm_decide_attributes(
    scores: &[AttributeScore],
    llm: &dyn LlmBackend,
) -> Result<Vec<AttributeDecision>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no attribute similarities to decide".into()));
    }
    let prompt = render_attribute_decision_prompt(scores)?;
    let response = llm.complete(DECISION_SYSTEM, &prompt)?;
    let verdicts = parse_attribute_decision_response(&response, scores.len())?;
    let engine = llm_engine_id(llm);
    Ok(scores
        .iter()
        .zip(verdicts)
        .map(|(score, satisfied)| AttributeDecision::from_score(score, satisfied, engine.clone()))
        .collect())
}

/// Reads the score table back out of a rendered wear prompt. Used by the
/// rule-following mock LLM.
pub(crate) fn read_wear_prompt(prompt: &str) -> Option<Vec<(String, String, f64)>> {
    let mut lines = prompt.lines().skip_while(|l| !l.starts_with("person |"));
    let header = split_fields(lines.next()?);
    let items = &header[1..];
    let mut cells = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields = split_fields(line);
        if fields.len() != items.len() + 1 {
            return None;
        }
        for (item, value) in items.iter().zip(&fields[1..]) {
            cells.push((fields[0].to_owned(), (*item).to_owned(), value.parse().ok()?));
        }
    }
    Some(cells)
}

/// `(id, similarity)` rows of a rendered attribute prompt.
pub(crate) fn read_attribute_prompt(prompt: &str) -> Option<Vec<(usize, f64)>> {
    let lines = prompt.lines().skip_while(|l| !l.starts_with("id |")).skip(1);
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields = split_fields(line);
            Some((fields.first()?.parse().ok()?, fields.last()?.parse().ok()?))
        })
        .collect()
}
