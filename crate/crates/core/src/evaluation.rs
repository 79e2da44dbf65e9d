//! Accuracy metrics for both decision steps, answer-matching metrics for
//! free-form model outputs, and timing aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::compliance::{AttributeDecision, Step, WearDecision};
use crate::error::{Error, Result};
use crate::safety_spec::{normalize_phrase, ObservabilityClass};

/// How step-1 accuracy counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// Correct presence verdicts over all (person, required item) pairs.
    #[default]
    Pairs,
    /// Worn items detected as worn over items that are worn.
    ItemsPresent,
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(MetricMode::Pairs),
            "items-present" => Ok(MetricMode::ItemsPresent),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric mode `{other}` (expected pairs or items-present)"
            ))),
        }
    }
}

/// Ground truth for one person: worn items, each with its true attribute
/// phrase per class when labelled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PersonTruth {
    pub person_id: String,
    pub worn: IndexMap<String, Option<[String; 3]>>,
}

impl PersonTruth {
    pub fn new(person_id: impl Into<String>) -> Self {
        PersonTruth {
            person_id: person_id.into(),
            worn: IndexMap::new(),
        }
    }

    pub fn wearing(mut self, item: &str, attributes: Option<[&str; 3]>) -> Self {
        self.worn.insert(
            item.to_owned(),
            attributes.map(|a| a.map(normalize_phrase)),
        );
        self
    }

    pub fn wears(&self, item: &str) -> bool {
        self.worn.contains_key(item)
    }

    pub fn attribute(&self, item: &str, class: ObservabilityClass) -> Option<&str> {
        self.worn.get(item)?.as_ref().map(|a| a[class.index()].as_str())
    }
}

/// A correct/total count. Tallies from different images merge by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn merge(self, other: Tally) -> Tally {
        Tally {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }

    fn count(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }

    /// `None` when nothing was counted.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

fn index_wear<'a>(decisions: &'a [WearDecision]) -> Result<HashMap<(&'a str, &'a str), &'a WearDecision>> {
    let mut index = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if index.insert((d.person_id.as_str(), d.item.as_str()), d).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate wear decision for ({}, {})",
                d.person_id, d.item
            )));
        }
    }
    Ok(index)
}

fn wear_for<'a>(
    index: &HashMap<(&str, &str), &'a WearDecision>,
    person: &str,
    item: &str,
) -> Result<&'a WearDecision> {
    index
        .get(&(person, item))
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no wear decision for ({person}, {item})")))
}

/// Step-1 tally over every (person, required item) pair.
pub fn step1_accuracy(
    decisions: &[WearDecision],
    truth: &[PersonTruth],
    required: &[String],
    mode: MetricMode,
) -> Result<Tally> {
    let index = index_wear(decisions)?;
    let mut tally = Tally::default();
    for person in truth {
        for item in required {
            let decision = wear_for(&index, &person.person_id, item)?;
            let actual = person.wears(item);
            match mode {
                MetricMode::Pairs => tally.count(decision.worn == actual),
                MetricMode::ItemsPresent if actual => tally.count(decision.worn),
                MetricMode::ItemsPresent => {}
            }
        }
    }
    Ok(tally)
}

/// Step-2 tally for one class. The denominator is the items that are worn
/// and were detected as worn; a verdict is correct when `satisfied` equals
/// whether the required phrase is the item's true phrase.
pub fn step2_accuracy(
    attributes: &[AttributeDecision],
    decisions: &[WearDecision],
    truth: &[PersonTruth],
    required: &[String],
    class: ObservabilityClass,
) -> Result<Tally> {
    let index = index_wear(decisions)?;
    let mut verdicts: HashMap<(&str, &str), &AttributeDecision> = HashMap::new();
    for a in attributes.iter().filter(|a| a.attribute.class == class) {
        if verdicts.insert((a.person_id.as_str(), a.item.as_str()), a).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate {class} decision for ({}, {})",
                a.person_id, a.item
            )));
        }
    }
    let mut tally = Tally::default();
    for person in truth {
        for item in required {
            if !(person.wears(item) && wear_for(&index, &person.person_id, item)?.worn) {
                continue;
            }
            let Some(true_phrase) = person.attribute(item, class) else {
                continue;
            };
            let verdict = verdicts.get(&(person.person_id.as_str(), item.as_str())).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no {class} decision for detected item ({}, {item})",
                    person.person_id
                ))
            })?;
            let matches = normalize_phrase(&verdict.attribute.phrase) == true_phrase;
            tally.count(verdict.satisfied == matches);
        }
    }
    Ok(tally)
}

/// One value per stage; absent stages are excluded from the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracies {
    pub step1: Option<f64>,
    #[serde(rename = "do")]
    pub do_: Option<f64>,
    pub so: Option<f64>,
    pub io: Option<f64>,
    pub mean: Option<f64>,
}

impl StepAccuracies {
    pub fn new(step1: Option<f64>, do_: Option<f64>, so: Option<f64>, io: Option<f64>) -> Self {
        let mut out = StepAccuracies {
            step1,
            do_,
            so,
            io,
            mean: None,
        };
        out.mean = mean_of_present(&out.stages());
        out
    }

    pub fn from_tallies(tallies: &BTreeMap<Step, Tally>) -> Self {
        let get = |s| tallies.get(&s).and_then(Tally::value);
        Self::new(get(Step::Step1), get(Step::Do), get(Step::So), get(Step::Io))
    }

    pub fn get(&self, step: Step) -> Option<f64> {
        match step {
            Step::Step1 => self.step1,
            Step::Do => self.do_,
            Step::So => self.so,
            Step::Io => self.io,
        }
    }

    pub fn stages(&self) -> [Option<f64>; 4] {
        [self.step1, self.do_, self.so, self.io]
    }
}

fn mean_of_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Lowercase, non-alphanumerics to spaces, whitespace collapsed and trimmed.
pub fn preprocess_answer(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Equality after preprocessing. An answer that preprocesses to nothing
/// never matches, so every exact match is also a [`contains_match`].
pub fn exact_match(prediction: &str, answer: &str) -> bool {
    let answer = preprocess_answer(answer);
    !answer.is_empty() && preprocess_answer(prediction) == answer
}

/// Substring containment after preprocessing. An answer that preprocesses
/// to nothing never matches. "no gloves visible" contains "gloves".
pub fn contains_match(prediction: &str, answer: &str) -> bool {
    let answer = preprocess_answer(answer);
    !answer.is_empty() && preprocess_answer(prediction).contains(&answer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub stage: Step,
    pub seconds: f64,
    pub image_id: String,
    #[serde(default)]
    pub backends: Vec<String>,
}

/// Mean seconds per stage and the mean of the stage means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub step1: Option<f64>,
    #[serde(rename = "do")]
    pub do_: Option<f64>,
    pub so: Option<f64>,
    pub io: Option<f64>,
    pub mean: Option<f64>,
}

impl TimingTable {
    pub fn stages(&self) -> [Option<f64>; 4] {
        [self.step1, self.do_, self.so, self.io]
    }
}

/// Stages without records are reported as absent.
pub fn aggregate_timings(records: &[TimingRecord]) -> Result<TimingTable> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no timing records".into()));
    }
    let mut sums: BTreeMap<Step, (f64, usize)> = BTreeMap::new();
    for r in records {
        if !(r.seconds.is_finite() && r.seconds >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timing {} for image `{}` is not a non-negative duration",
                r.seconds, r.image_id
            )));
        }
        let slot = sums.entry(r.stage).or_default();
        slot.0 += r.seconds;
        slot.1 += 1;
    }
    let mean = |s| sums.get(&s).map(|(sum, n)| sum / *n as f64);
    let mut table = TimingTable {
        step1: mean(Step::Step1),
        do_: mean(Step::Do),
        so: mean(Step::So),
        io: mean(Step::Io),
        mean: None,
    };
    table.mean = mean_of_present(&table.stages());
    Ok(table)
}

/// Fixed-point rendering with round-half-up on the decimal expansion, as in
/// published tables: 2.05 -> "2.1", 70.225 -> "70.2".
pub fn format_table_value(value: f64, decimals: usize) -> String {
    // Fifteen significant digits recover the decimal the value was written as.
    let exact = format!("{:.*e}", 14, value);
    let (mantissa, exponent) = exact.split_once('e').expect("exponent format");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: Vec<u8> = mantissa.bytes().filter(u8::is_ascii_digit).map(|b| b - b'0').collect();
    // digits[0] has place value 10^exponent. Keep places down to 10^-decimals.
    let keep = exponent + 1 + decimals as i32;
    let mut kept: Vec<u8> = if keep <= 0 {
        Vec::new()
    } else {
        let mut v = digits.clone();
        v.resize(keep.max(digits.len() as i32) as usize, 0);
        v.truncate(keep as usize);
        v
    };
    let next = if keep < 0 { 0 } else { digits.get(keep as usize).copied().unwrap_or(0) };
    let mut int_len = exponent + 1;
    if next >= 5 {
        let mut i = kept.len();
        loop {
            if i == 0 {
                kept.insert(0, 1);
                int_len += 1;
                break;
            }
            i -= 1;
            if kept[i] == 9 {
                kept[i] = 0;
            } else {
                kept[i] += 1;
                break;
            }
        }
    }
    // Left-pad so the integer part has at least one digit.
    let total = (int_len.max(1) + decimals as i32) as usize;
    while kept.len() < total {
        kept.insert(0, 0);
    }
    let split = kept.len() - decimals;
    let int_part: String = kept[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac: String = kept[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let all_zero = int_part == "0" && frac.bytes().all(|b| b == b'0');
    let sign = if negative && !all_zero { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

fn csv_cell(value: Option<f64>, scale: f64, decimals: usize) -> String {
    value.map(|v| format_table_value(v * scale, decimals)).unwrap_or_default()
}

/// `Step 1,DO,SO,IO,Mean` header and one row of percentages to one decimal.
/// Absent stages are empty cells.
pub fn accuracies_csv(acc: &StepAccuracies) -> String {
    let mut out = String::from("Step 1,DO,SO,IO,Mean\n");
    let cells: Vec<String> = acc
        .stages()
        .into_iter()
        .chain([acc.mean])
        .map(|v| csv_cell(v, 100.0, 1))
        .collect();
    let _ = writeln!(out, "{}", cells.join(","));
    out
}

/// Same layout as [`accuracies_csv`], seconds to one decimal.
pub fn timings_csv(table: &TimingTable) -> String {
    let mut out = String::from("Step 1,DO,SO,IO,Mean\n");
    let cells: Vec<String> = table
        .stages()
        .into_iter()
        .chain([table.mean])
        .map(|v| csv_cell(v, 1.0, 1))
        .collect();
    let _ = writeln!(out, "{}", cells.join(","));
    out
}

/// One or several accepted answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answers {
    One(String),
    Many(Vec<String>),
}

impl Answers {
    pub fn as_slice(&self) -> &[String] {
        match self {
            Answers::One(a) => std::slice::from_ref(a),
            Answers::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub question: String,
    pub answer: Answers,
    pub prediction: String,
}

impl VqaRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.answer.as_slice().is_empty() || self.answer.as_slice().iter().any(|a| a.trim().is_empty()) {
            return Err("answer is empty".into());
        }
        Ok(())
    }

    pub fn exact_match(&self) -> bool {
        self.answer.as_slice().iter().any(|a| exact_match(&self.prediction, a))
    }

    pub fn contains_match(&self) -> bool {
        self.answer.as_slice().iter().any(|a| contains_match(&self.prediction, a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqaScores {
    pub records: usize,
    pub exact_match: f64,
    pub contains: f64,
}

pub fn score_vqa(records: &[VqaRecord]) -> Result<VqaScores> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no VQA records".into()));
    }
    let n = records.len() as f64;
    Ok(VqaScores {
        records: records.len(),
        exact_match: records.iter().filter(|r| r.exact_match()).count() as f64 / n,
        contains: records.iter().filter(|r| r.contains_match()).count() as f64 / n,
    })
}

/// JSON lines of `{question, answer, prediction}`; blank lines are skipped
/// and record numbers in errors count from zero over non-blank lines.
pub fn parse_vqa_jsonl(text: &str) -> Result<Vec<VqaRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(record, line)| {
            let parsed: VqaRecord = serde_json::from_str(line).map_err(|e| Error::Validation {
                record,
                message: e.to_string(),
            })?;
            parsed.validate().map_err(|message| Error::Validation { record, message })?;
            Ok(parsed)
        })
        .collect()
}

pub fn load_vqa_jsonl(path: &Path) -> Result<Vec<VqaRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vqa_jsonl(&text)
}
