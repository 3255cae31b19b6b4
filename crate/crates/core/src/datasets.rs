// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive prompt datasets: IOI, subject-verb agreement, and
//! country capitals, plus JSONL persistence.
//!
//! Generation is a deterministic enumeration of the template space. Item
//! `i` of a run with seed `s` and size `n` decodes combination
//! `((s * n + i) mod N) * M mod N`, where `N` is the size of the space and
//! `M` a multiplier coprime to it, so combination 0 (the canonical prompt)
//! is item 0 of seed 0 and nearby indices land far apart.
//!
//! JSONL schema, one object per line:
//!
//! ```text
//! {"clean": str, "corrupt": str, "a_plus": str, "a_minus": str,
//!  "meta": {"schema_version": 1, "task": "ioi"|"sva"|"capitals",
//!           "template": str, "seed": u64, "index": usize}}
//! ```

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ioi,
    Sva,
    Capitals,
}

impl Task {
    pub fn generate(self, n: usize, seed: u64) -> Vec<ContrastivePair> {
        match self {
            Task::Ioi => generate_ioi(n, seed),
            Task::Sva => generate_sva(n, seed),
            Task::Capitals => generate_capitals(n, seed),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ioi => "ioi",
            Task::Sva => "sva",
            Task::Capitals => "capitals",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ioi" => Ok(Task::Ioi),
            "sva" => Ok(Task::Sva),
            "capitals" => Ok(Task::Capitals),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub schema_version: u32,
    pub task: Task,
    pub template: String,
    pub seed: u64,
    pub index: usize,
}

/// A clean prompt, its corruption, and the two competing answers.
/// Answers carry their leading space (`" Mary"`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub clean: String,
    pub corrupt: String,
    pub a_plus: String,
    pub a_minus: String,
    pub meta: PairMeta,
}

/// A pair in token space, ready for forward passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub a_plus: u32,
    pub a_minus: u32,
}

impl TokenizedPair {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

impl ContrastivePair {
    /// Tokenizes and checks the pair invariants: equal prompt lengths,
    /// distinct single-token answers.
    pub fn tokenize(&self, tok: &Tokenizer) -> Result<TokenizedPair> {
        let clean = tok.encode(&self.clean);
        let corrupt = tok.encode(&self.corrupt);
        if clean.len() != corrupt.len() {
            return Err(Error::Misaligned {
                clean: clean.len(),
                corrupt: corrupt.len(),
            });
        }
        if clean.is_empty() {
            return Err(Error::Dataset("empty prompt".into()));
        }
        let single = |a: &str| {
            tok.single_token(a)
                .ok_or_else(|| Error::Dataset(format!("answer {a:?} is not a single token")))
        };
        let a_plus = single(&self.a_plus)?;
        let a_minus = single(&self.a_minus)?;
        if a_plus == a_minus {
            return Err(Error::Dataset(format!("identical answers {:?}", self.a_plus)));
        }
        Ok(TokenizedPair {
            clean,
            corrupt,
            a_plus,
            a_minus,
        })
    }
}

pub fn tokenize_all(pairs: &[ContrastivePair], tok: &Tokenizer) -> Result<Vec<TokenizedPair>> {
    pairs.iter().map(|p| p.tokenize(tok)).collect()
}

pub const NAMES: &[&str] = &[
    "Mary", "Bob", "John", "James", "Michael", "David", "Sarah", "Paul", "Mark", "Daniel", "Tom",
    "Anna", "Emma", "Kate", "Lisa", "Jack", "Alex", "Sam", "Rachel", "Laura", "Steve", "Chris",
    "Peter", "Ben", "Max", "Ryan", "Jane", "Amy", "Linda", "George", "Frank", "Henry", "Adam",
    "Eric", "Kevin", "Brian", "Jessica", "Alice", "Grace", "Kelly", "Jim", "Mike", "Joe", "Dan",
];

pub const PLACES: &[&str] = &[
    "store", "garden", "restaurant", "school", "hospital", "office", "station", "park", "beach",
    "house",
];

pub const OBJECTS: &[&str] = &[
    "bottle", "drink", "snack", "ring", "book", "computer", "basketball", "necklace",
];

/// `{io}`, `{s}`, `{place}`, `{object}` placeholders. The final `{s}` is the
/// one the corruption replaces.
pub const IOI_TEMPLATES: &[(&str, &str)] = &[
    ("abba-went", "After {io} and {s} went to the {place}. {s} gave a {object} to"),
    ("baba-went", "After {s} and {io} went to the {place}. {s} gave a {object} to"),
    ("abba-got", "When {io} and {s} got a {object} at the {place}, {s} decided to give it to"),
    ("baba-got", "When {s} and {io} got a {object} at the {place}, {s} decided to give it to"),
    ("abba-working", "Then, {io} and {s} were working at the {place}. {s} decided to give a {object} to"),
    ("baba-working", "Then, {s} and {io} were working at the {place}. {s} decided to give a {object} to"),
    ("abba-commuting", "While {io} and {s} were commuting to the {place}, {s} gave a {object} to"),
    ("baba-commuting", "While {s} and {io} were commuting to the {place}, {s} gave a {object} to"),
];

pub const CAPITALS: &[(&str, &str)] = &[
    ("France", "Paris"),
    ("Italy", "Rome"),
    ("Germany", "Berlin"),
    ("Spain", "Madrid"),
    ("Japan", "Tokyo"),
    ("Russia", "Moscow"),
    ("China", "Beijing"),
    ("Egypt", "Cairo"),
    ("Greece", "Athens"),
    ("Austria", "Vienna"),
    ("Ireland", "Dublin"),
    ("England", "London"),
    ("Poland", "Warsaw"),
    ("Thailand", "Bangkok"),
    ("Cuba", "Havana"),
    ("Peru", "Lima"),
    ("Iran", "Tehran"),
    ("Iraq", "Baghdad"),
    ("Syria", "Damascus"),
    ("Turkey", "Ankara"),
    ("Norway", "Oslo"),
    ("Sweden", "Stockholm"),
    ("Portugal", "Lisbon"),
    ("Belgium", "Brussels"),
    ("Afghanistan", "Kabul"),
    ("Pakistan", "Islamabad"),
    ("Canada", "Ottawa"),
    ("Lebanon", "Beirut"),
    ("Denmark", "Copenhagen"),
    ("Finland", "Helsinki"),
    ("Hungary", "Budapest"),
    ("Chile", "Santiago"),
    ("Indonesia", "Jakarta"),
    ("Korea", "Seoul"),
    ("Philippines", "Manila"),
    ("Australia", "Canberra"),
];

pub const CAPITAL_TEMPLATE: &str = "The capital of {x} is";

/// (singular, plural); both forms are single tokens.
pub const SVA_NOUNS: &[(&str, &str)] = &[
    ("key", "keys"),
    ("dog", "dogs"),
    ("cat", "cats"),
    ("book", "books"),
    ("car", "cars"),
    ("friend", "friends"),
    ("door", "doors"),
    ("teacher", "teachers"),
    ("student", "students"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("player", "players"),
    ("bird", "birds"),
    ("letter", "letters"),
    ("picture", "pictures"),
    ("officer", "officers"),
    ("doctor", "doctors"),
    ("farmer", "farmers"),
    ("author", "authors"),
    ("lamp", "lamps"),
];

pub const SVA_OBJECTS: &[&str] = &["cabinet", "table", "desk", "shelf", "wall", "chair", "bridge", "river"];

/// Template, singular verb, plural verb.
pub const SVA_TEMPLATES: &[(&str, &str, &str, &str)] = &[
    ("on-present", "The {n} on the {o}", "is", "are"),
    ("near-present", "The {n} near the {o}", "is", "are"),
    ("behind-past", "The {n} behind the {o}", "was", "were"),
    ("by-past", "The {n} by the {o}", "was", "were"),
];

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest value below `0.618 N` coprime to `N`; spreads consecutive
/// indices across the space.
fn multiplier(total: usize) -> usize {
    let mut m = ((total as f64) * 0.618_033_988_75) as usize;
    m = m.max(1);
    while gcd(m, total) != 1 {
        m -= 1;
    }
    m
}

/// Combination indices for `n` items of `seed` over a space of `total`.
pub fn scrambled_indices(seed: u64, n: usize, total: usize) -> Vec<usize> {
    assert!(total > 0, "empty combination space");
    let m = multiplier(total) as u128;
    let base = (seed as u128 * n as u128) % total as u128;
    (0..n)
        .map(|i| {
            let k = (base + i as u128) % total as u128;
            ((k * m) % total as u128) as usize
        })
        .collect()
}

/// Mixed-radix decoding, least-significant digit first.
fn digits(mut idx: usize, radices: &[usize]) -> Vec<usize> {
    radices
        .iter()
        .map(|&r| {
            let d = idx % r;
            idx /= r;
            d
        })
        .collect()
}

fn meta(task: Task, template: &str, seed: u64, index: usize) -> PairMeta {
    PairMeta {
        schema_version: SCHEMA_VERSION,
        task,
        template: template.to_string(),
        seed,
        index,
    }
}

fn ioi_radices() -> [usize; 5] {
    [IOI_TEMPLATES.len(), NAMES.len(), NAMES.len() - 1, PLACES.len(), OBJECTS.len()]
}

/// Indirect-object identification. The corruption replaces the second
/// subject mention with the indirect object, so the clean answer is the
/// indirect object and the competing answer the subject.
pub fn generate_ioi(n: usize, seed: u64) -> Vec<ContrastivePair> {
    let radices = ioi_radices();
    let total = radices.iter().product();
    scrambled_indices(seed, n, total)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let d = digits(idx, &radices);
            let (name, template) = IOI_TEMPLATES[d[0]];
            let io = NAMES[d[1]];
            let s = NAMES[(d[1] + 1 + d[2]) % NAMES.len()];
            let (place, object) = (PLACES[d[3]], OBJECTS[d[4]]);
            let fill = |second: &str| {
                let body = template.replace("{place}", place).replace("{object}", object);
                let cut = body.rfind("{s}").expect("template names the subject twice");
                let head = body[..cut].replace("{io}", io).replace("{s}", s);
                format!("{head}{second}{}", &body[cut + 3..])
            };
            ContrastivePair {
                clean: fill(s),
                corrupt: fill(io),
                a_plus: format!(" {io}"),
                a_minus: format!(" {s}"),
                meta: meta(Task::Ioi, name, seed, i),
            }
        })
        .collect()
}

/// Country capitals; the corruption swaps the country.
pub fn generate_capitals(n: usize, seed: u64) -> Vec<ContrastivePair> {
    let c = CAPITALS.len();
    let radices = [c, c - 1];
    scrambled_indices(seed, n, c * (c - 1))
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let d = digits(idx, &radices);
            let (x, cap_x) = CAPITALS[d[0]];
            let (y, cap_y) = CAPITALS[(d[0] + 1 + d[1]) % c];
            ContrastivePair {
                clean: CAPITAL_TEMPLATE.replace("{x}", x),
                corrupt: CAPITAL_TEMPLATE.replace("{x}", y),
                a_plus: format!(" {cap_x}"),
                a_minus: format!(" {cap_y}"),
                meta: meta(Task::Capitals, "capital-of", seed, i),
            }
        })
        .collect()
}

/// Subject-verb agreement; the corruption toggles the subject's number.
pub fn generate_sva(n: usize, seed: u64) -> Vec<ContrastivePair> {
    let radices = [SVA_TEMPLATES.len(), SVA_NOUNS.len(), SVA_OBJECTS.len(), 2];
    let total = radices.iter().product();
    scrambled_indices(seed, n, total)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let d = digits(idx, &radices);
            let (name, template, v_sing, v_plur) = SVA_TEMPLATES[d[0]];
            let (sing, plur) = SVA_NOUNS[d[1]];
            let obj = SVA_OBJECTS[d[2]];
            let plural_clean = d[3] == 0;
            let fill = |noun: &str| template.replace("{n}", noun).replace("{o}", obj);
            let (clean_n, corrupt_n) = if plural_clean { (plur, sing) } else { (sing, plur) };
            let (vp, vm) = if plural_clean { (v_plur, v_sing) } else { (v_sing, v_plur) };
            ContrastivePair {
                clean: fill(clean_n),
                corrupt: fill(corrupt_n),
                a_plus: format!(" {vp}"),
                a_minus: format!(" {vm}"),
                meta: meta(Task::Sva, name, seed, i),
            }
        })
        .collect()
}

/// Every text a dataset may contain: prompts of all combinations plus
/// answers. Used to build toy vocabularies that cover the generators.
pub fn corpus() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (_, t) in IOI_TEMPLATES {
        out.push(t.replace("{io}", "").replace("{s}", "").replace("{place}", "").replace("{object}", ""));
    }
    out.extend(NAMES.iter().map(|n| format!(" {n}")));
    out.extend(PLACES.iter().map(|p| format!(" {p}")));
    out.extend(OBJECTS.iter().map(|o| format!(" {o}")));
    out.push(CAPITAL_TEMPLATE.replace("{x}", ""));
    for (x, c) in CAPITALS {
        out.push(format!(" {x}"));
        out.push(format!(" {c}"));
    }
    for (_, t, a, b) in SVA_TEMPLATES {
        out.push(t.replace("{n}", "").replace("{o}", ""));
        out.push(format!(" {a}"));
        out.push(format!(" {b}"));
    }
    for (s, p) in SVA_NOUNS {
        out.push(format!(" {s}"));
        out.push(format!(" {p}"));
    }
    out.extend(SVA_OBJECTS.iter().map(|o| format!(" {o}")));
    out
}

pub fn save_pairs(path: &Path, pairs: &[ContrastivePair]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in pairs {
        let line = serde_json::to_string(p)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a JSONL dataset, validating each pair against `tok`. Blank lines
/// are skipped; errors carry the 1-based line number.
pub fn load_pairs(path: &Path, tok: &Tokenizer) -> Result<Vec<ContrastivePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| Error::DatasetLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let pair: ContrastivePair = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        pair.tokenize(tok).map_err(|e| at(e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}
