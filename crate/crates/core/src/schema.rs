//! Keypoint vocabularies, left/right symmetry, and the patch classes built
//! from keypoint pairs.
//!
//! Every unordered keypoint pair `(i, j)` with `i < j` yields one raw patch
//! class, so a schema with `n` keypoints has `n(n-1)/2` of them. Declaring
//! symmetric pairs collapses each left/right pair into one semantic part; raw
//! pairs are then pooled by their semantic endpoints into hybrid classes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Prefixes that mark the left and right member of a symmetric pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryNaming {
    pub left_prefix: String,
    pub right_prefix: String,
}

impl SymmetryNaming {
    pub fn new(left_prefix: impl Into<String>, right_prefix: impl Into<String>) -> Self {
        Self {
            left_prefix: left_prefix.into(),
            right_prefix: right_prefix.into(),
        }
    }

    /// Naming used by CUB `parts/parts.txt` ("left eye", "right eye").
    pub fn cub() -> Self {
        Self::new("left ", "right ")
    }

    fn shared_suffix<'a>(&self, a: &'a str, b: &'a str) -> Option<&'a str> {
        let try_order = |l: &'a str, r: &'a str| {
            let ls = l.strip_prefix(self.left_prefix.as_str())?;
            let rs = r.strip_prefix(self.right_prefix.as_str())?;
            (ls == rs && !ls.is_empty()).then_some(ls)
        };
        try_order(a, b).or_else(|| try_order(b, a))
    }
}

impl Default for SymmetryNaming {
    fn default() -> Self {
        Self::new("left-", "right-")
    }
}

/// Ordered keypoint names plus the left/right pairs among them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointSchema {
    names: Vec<String>,
    symmetric_pairs: Vec<(usize, usize)>,
    naming: SymmetryNaming,
}

impl KeypointSchema {
    pub fn new(names: Vec<String>, symmetric_pairs: Vec<(usize, usize)>) -> Result<Self> {
        Self::with_naming(names, symmetric_pairs, SymmetryNaming::default())
    }

    pub fn with_naming(
        names: Vec<String>,
        symmetric_pairs: Vec<(usize, usize)>,
        naming: SymmetryNaming,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptySchema);
        }
        let mut seen = HashSet::new();
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::EmptyName(i));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        let n = names.len();
        let mut paired = vec![false; n];
        for &(a, b) in &symmetric_pairs {
            for index in [a, b] {
                if index >= n {
                    return Err(Error::PairIndexOutOfRange { index, n });
                }
            }
            if a == b {
                return Err(Error::SelfPair(a));
            }
            for index in [a, b] {
                if std::mem::replace(&mut paired[index], true) {
                    return Err(Error::KeypointInTwoPairs(names[index].clone()));
                }
            }
        }
        let symmetric_pairs = symmetric_pairs
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        Ok(Self {
            names,
            symmetric_pairs,
            naming,
        })
    }

    /// Builds a schema whose symmetric pairs are every `left…`/`right…` name
    /// pair sharing the same suffix.
    pub fn infer_symmetry(names: Vec<String>, naming: SymmetryNaming) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, name) in names.iter().enumerate() {
            if let Some(suffix) = name.strip_prefix(naming.left_prefix.as_str()) {
                let partner = format!("{}{}", naming.right_prefix, suffix);
                if let Some(j) = names.iter().position(|n| *n == partner) {
                    pairs.push((i.min(j), i.max(j)));
                }
            }
        }
        Self::with_naming(names, pairs, naming)
    }

    /// Parses either the native schema format or a CUB `parts.txt` listing,
    /// picking the latter when every non-blank line starts with an integer id.
    pub fn parse(text: &str) -> Result<Self> {
        if looks_like_cub_parts(text) {
            Self::parse_cub_parts(text)
        } else {
            Self::parse_schema_text(text)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::MalformedLine { line, reason, .. } => Error::malformed(path, line, reason),
            other => other,
        })
    }

    /// Native format: one name per line, then a blank line, then
    /// `sym <name1> <name2>` lines. Lines starting with `#` are ignored.
    pub fn parse_schema_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut pair_lines = Vec::new();
        let mut in_names = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                if !names.is_empty() {
                    in_names = false;
                }
                continue;
            }
            if in_names {
                names.push(line.to_string());
            } else {
                pair_lines.push((lineno + 1, line));
            }
        }
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut pairs = Vec::new();
        for (lineno, line) in pair_lines {
            let rest = line
                .strip_prefix("sym")
                .filter(|r| r.starts_with(char::is_whitespace))
                .ok_or_else(|| {
                    Error::malformed("<schema>", lineno, "expected `sym <name1> <name2>`")
                })?
                .trim();
            let pair = split_known_pair(rest, &index).ok_or_else(|| {
                Error::malformed(
                    "<schema>",
                    lineno,
                    format!("cannot resolve two keypoint names in {rest:?}"),
                )
            })?;
            pairs.push(pair);
        }
        Self::new(names, pairs)
    }

    /// CUB `parts/parts.txt`: `<id> <name>` with 1-based consecutive ids.
    /// Symmetric pairs come from the `left `/`right ` prefixes.
    pub fn parse_cub_parts(text: &str) -> Result<Self> {
        let names = parse_cub_part_names(text)?;
        Self::infer_symmetry(names, SymmetryNaming::cub())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn symmetric_pairs(&self) -> &[(usize, usize)] {
        &self.symmetric_pairs
    }

    pub fn naming(&self) -> &SymmetryNaming {
        &self.naming
    }

    pub fn counterpart(&self, index: usize) -> Option<usize> {
        self.symmetric_pairs.iter().find_map(|&(a, b)| {
            if a == index {
                Some(b)
            } else if b == index {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn raw_pair_count(&self) -> usize {
        let n = self.len();
        n * (n - 1) / 2
    }

    /// Collapses each symmetric pair to a single semantic part. Semantic ids
    /// are numbered by the lowest keypoint index they contain.
    pub fn semantics(&self) -> Semantics {
        let n = self.len();
        let mut of_keypoint = vec![usize::MAX; n];
        let mut names = Vec::new();
        for i in 0..n {
            if of_keypoint[i] != usize::MAX {
                continue;
            }
            let id = names.len();
            of_keypoint[i] = id;
            match self.counterpart(i) {
                Some(j) => {
                    of_keypoint[j] = id;
                    names.push(self.merged_name(i, j));
                }
                None => names.push(self.names[i].clone()),
            }
        }
        Semantics { of_keypoint, names }
    }

    fn merged_name(&self, a: usize, b: usize) -> String {
        let (na, nb) = (&self.names[a], &self.names[b]);
        match self.naming.shared_suffix(na, nb) {
            Some(suffix) => suffix.to_string(),
            None if na <= nb => format!("{na}+{nb}"),
            None => format!("{nb}+{na}"),
        }
    }

    /// Serializes into the native schema format.
    pub fn to_schema_text(&self) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        if !self.symmetric_pairs.is_empty() {
            out.push('\n');
            for &(a, b) in &self.symmetric_pairs {
                out.push_str(&format!("sym {} {}\n", self.names[a], self.names[b]));
            }
        }
        out
    }
}

fn looks_like_cub_parts(text: &str) -> bool {
    let mut any = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut it = line.splitn(2, char::is_whitespace);
        let id_ok = it.next().is_some_and(|t| t.parse::<u32>().is_ok());
        let has_name = it.next().is_some_and(|r| !r.trim().is_empty());
        if !(id_ok && has_name) {
            return false;
        }
        any = true;
    }
    any
}

/// Parses `<id> <name>` lines (1-based, consecutive ids in any order) into
/// names ordered by id.
pub(crate) fn parse_cub_part_names(text: &str) -> Result<Vec<String>> {
    let mut by_id = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::malformed("parts.txt", lineno + 1, "expected `<id> <name>`"))?;
        let id: usize = id.parse().map_err(|_| {
            Error::malformed("parts.txt", lineno + 1, format!("bad part id {id:?}"))
        })?;
        if by_id.insert(id, name.trim().to_string()).is_some() {
            return Err(Error::malformed(
                "parts.txt",
                lineno + 1,
                format!("duplicate part id {id}"),
            ));
        }
    }
    for (expected, &id) in (1..).zip(by_id.keys()) {
        if id != expected {
            return Err(Error::InconsistentCounts(format!(
                "part ids must be 1..={}, found gap at {expected}",
                by_id.len()
            )));
        }
    }
    Ok(by_id.into_values().collect())
}

fn split_known_pair(rest: &str, index: &HashMap<&str, usize>) -> Option<(usize, usize)> {
    rest.char_indices()
        .filter(|(_, c)| c.is_whitespace())
        .find_map(|(pos, _)| {
            let a = index.get(rest[..pos].trim())?;
            let b = index.get(rest[pos..].trim())?;
            Some((*a, *b))
        })
}

/// Mapping from keypoints to semantic parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Semantics {
    of_keypoint: Vec<usize>,
    names: Vec<String>,
}

impl Semantics {
    pub fn of(&self, keypoint: usize) -> SemanticId {
        SemanticId(self.of_keypoint[keypoint])
    }

    pub fn name(&self, id: SemanticId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatchKind {
    /// Keypoint indices, `i < j`.
    Raw(usize, usize),
    /// Semantic endpoints, first ≤ second. Equal ids mark a left×right
    /// self-class such as eye×eye.
    Hybrid(SemanticId, SemanticId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchClass {
    pub kind: PatchKind,
    pub member_pairs: Vec<(usize, usize)>,
}

impl PatchClass {
    /// Label of the form `a__b`, built from keypoint or semantic names.
    pub fn label(&self, schema: &KeypointSchema) -> String {
        match self.kind {
            PatchKind::Raw(i, j) => format!("{}__{}", schema.name(i), schema.name(j)),
            PatchKind::Hybrid(a, b) => {
                let sem = schema.semantics();
                format!("{}__{}", sem.name(a), sem.name(b))
            }
        }
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchKind::Raw(i, j) => write!(f, "raw({i},{j})"),
            PatchKind::Hybrid(a, b) => write!(f, "hybrid({},{})", a.0, b.0),
        }
    }
}

/// All unordered keypoint pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn enumerate_raw_pairs(schema: &KeypointSchema) -> Vec<PatchClass> {
    let n = schema.len();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| PatchClass {
            kind: PatchKind::Raw(i, j),
            member_pairs: vec![(i, j)],
        })
        .collect()
}

/// Pools the raw pairs of `classes` by their semantic endpoints. Accepts raw
/// or already merged classes; output is ordered by semantic id pair and each
/// class lists its raw members in lexicographic order.
pub fn merge_symmetric(schema: &KeypointSchema, classes: &[PatchClass]) -> Vec<PatchClass> {
    let sem = schema.semantics();
    let mut groups: BTreeMap<(SemanticId, SemanticId), Vec<(usize, usize)>> = BTreeMap::new();
    for &(i, j) in classes.iter().flat_map(|c| &c.member_pairs) {
        let (a, b) = (sem.of(i), sem.of(j));
        groups.entry((a.min(b), a.max(b))).or_default().push((i, j));
    }
    groups
        .into_iter()
        .map(|((a, b), mut member_pairs)| {
            member_pairs.sort_unstable();
            member_pairs.dedup();
            PatchClass {
                kind: PatchKind::Hybrid(a, b),
                member_pairs,
            }
        })
        .collect()
}

/// The 15 CUB-200-2011 part names in `parts.txt` order.
pub const CUB_PART_NAMES: [&str; 15] = [
    "back",
    "beak",
    "belly",
    "breast",
    "crown",
    "forehead",
    "left eye",
    "left leg",
    "left wing",
    "nape",
    "right eye",
    "right leg",
    "right wing",
    "tail",
    "throat",
];

/// CUB-200-2011 schema with eyes, legs and wings declared symmetric.
pub fn cub_schema() -> KeypointSchema {
    KeypointSchema::infer_symmetry(
        CUB_PART_NAMES.iter().map(|s| s.to_string()).collect(),
        SymmetryNaming::cub(),
    )
    .expect("built-in CUB schema is valid")
}
