//! The three ICD-10-CM resources: tabular hierarchy, alphabetical index and
//! chapter guidelines.
//!
//! Records arrive already deserialized (see the `clh` crate for the JSONL
//! readers); this module validates them and builds the immutable in-memory
//! model. After construction every query takes `&self`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{Chapter, CodeError, CodeId, CHAPTERS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("malformed block label `{0}`")]
    MalformedBlock(String),
    #[error("node `{code}` names missing parent `{parent}`")]
    OrphanNode { code: String, parent: String },
    #[error("duplicate code `{0}`")]
    DuplicateCode(String),
    #[error("child `{child}` does not extend parent `{parent}`")]
    PrefixViolation { parent: String, child: String },
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("index entry for `{0}` has an empty term path")]
    EmptyTermPath(String),
    #[error("duplicate guideline for chapter `{0}`")]
    DuplicateChapter(String),
    #[error("guideline for chapter `{0}` is empty")]
    EmptyGuideline(String),
    #[error("unknown chapter `{0}`")]
    UnknownChapter(String),
}

/// Per-node directives governing how codes combine.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionalNotes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub includes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes1: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes2: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub code_first: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub use_additional: Vec<String>,
}

impl InstructionalNotes {
    pub fn is_empty(&self) -> bool {
        self.lists().iter().all(|(_, l)| l.is_empty())
    }

    pub fn lists(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("Includes", &self.includes),
            ("Excludes1", &self.excludes1),
            ("Excludes2", &self.excludes2),
            ("Code first", &self.code_first),
            ("Use additional code", &self.use_additional),
        ]
    }

    fn lists_mut(&mut self) -> [&mut Vec<String>; 5] {
        [
            &mut self.includes,
            &mut self.excludes1,
            &mut self.excludes2,
            &mut self.code_first,
            &mut self.use_additional,
        ]
    }

    /// Removes repeated entries, keeping first occurrences.
    pub fn dedup(&mut self) {
        for list in self.lists_mut() {
            let mut seen = BTreeSet::new();
            list.retain(|item| seen.insert(item.clone()));
        }
    }

    /// Appends `other`'s entries after ours, skipping duplicates.
    pub fn extend_from(&mut self, other: &InstructionalNotes) {
        let theirs = other.lists();
        for (mine, (_, theirs)) in self.lists_mut().into_iter().zip(theirs) {
            for item in theirs {
                if !mine.contains(item) {
                    mine.push(item.clone());
                }
            }
        }
    }
}

impl fmt::Display for InstructionalNotes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, list) in self.lists() {
            if list.is_empty() {
                continue;
            }
            if !first {
                f.write_str("\n")?;
            }
            first = false;
            write!(f, "{name}: ")?;
            for (i, item) in list.iter().enumerate() {
                if i > 0 {
                    f.write_str("; ")?;
                }
                f.write_str(item)?;
            }
        }
        Ok(())
    }
}

/// A block of categories such as `A00–A09` or a whole chapter `A00–B99`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockRange {
    pub first: String,
    pub last: String,
}

impl BlockRange {
    pub fn parse(label: &str) -> Result<Self, TaxonomyError> {
        let malformed = || TaxonomyError::MalformedBlock(label.to_string());
        let (first, last) = label
            .split_once('\u{2013}')
            .or_else(|| label.split_once('-'))
            .ok_or_else(malformed)?;
        let valid = |c: &str| CodeId::parse(c).is_ok() && c.len() == 3;
        if !valid(first) || !valid(last) || first > last {
            return Err(malformed());
        }
        Ok(Self {
            first: first.to_string(),
            last: last.to_string(),
        })
    }

    pub fn label(&self) -> String {
        alloc::format!("{}\u{2013}{}", self.first, self.last)
    }

    pub fn contains_category(&self, category: &str) -> bool {
        self.first.as_str() <= category && category <= self.last.as_str()
    }

    fn contains_block(&self, other: &BlockRange) -> bool {
        self.first <= other.first && other.last <= self.last && self != other
    }
}

/// The key of a tabular node: a non-assignable block or an ICD code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeCode {
    Block(BlockRange),
    Code(CodeId),
}

impl NodeCode {
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        if text.contains('-') || text.contains('\u{2013}') {
            BlockRange::parse(text).map(NodeCode::Block)
        } else {
            Ok(NodeCode::Code(CodeId::parse(text)?))
        }
    }

    pub fn key(&self) -> String {
        match self {
            NodeCode::Block(b) => b.label(),
            NodeCode::Code(c) => c.as_str().to_string(),
        }
    }

    pub fn as_code(&self) -> Option<&CodeId> {
        match self {
            NodeCode::Code(c) => Some(c),
            NodeCode::Block(_) => None,
        }
    }

    /// Whether `child` may hang under `self`: codes must extend the parent
    /// code as a prefix (dots ignored), blocks must nest by range.
    pub fn admits_child(&self, child: &NodeCode) -> bool {
        match (self, child) {
            (NodeCode::Code(p), NodeCode::Code(c)) => {
                let (p, c) = (p.compact(), c.compact());
                c.len() > p.len() && c.starts_with(&p)
            }
            (NodeCode::Code(_), NodeCode::Block(_)) => false,
            (NodeCode::Block(p), NodeCode::Block(c)) => p.contains_block(c),
            (NodeCode::Block(p), NodeCode::Code(c)) => p.contains_category(c.category()),
        }
    }
}

/// One line of `tabular.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularRecord {
    pub code: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "InstructionalNotes::is_empty")]
    pub notes: InstructionalNotes,
}

/// One line of `alpha_index.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub term_path: Vec<String>,
    pub code: String,
}

/// One line of `guidelines.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineRecord {
    pub chapter: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct TabularNode {
    pub code: NodeCode,
    pub description: String,
    pub notes: InstructionalNotes,
    parent: Option<usize>,
    children: Vec<usize>,
}

impl TabularNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// The tabular list as an arena-backed tree.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    nodes: Vec<TabularNode>,
    by_key: BTreeMap<String, usize>,
    roots: Vec<usize>,
}

impl Hierarchy {
    /// Builds the tree. Records may come in any order; children keep the
    /// relative order in which their records appear.
    pub fn from_records<I>(records: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = TabularRecord>,
    {
        let mut nodes = Vec::new();
        let mut parents = Vec::new();
        let mut by_key = BTreeMap::new();
        for record in records {
            let code = NodeCode::parse(&record.code)?;
            let key = code.key();
            if by_key.insert(key.clone(), nodes.len()).is_some() {
                return Err(TaxonomyError::DuplicateCode(key));
            }
            let parent = match &record.parent {
                Some(p) => Some(NodeCode::parse(p)?.key()),
                None => None,
            };
            let mut notes = record.notes;
            notes.dedup();
            parents.push(parent);
            nodes.push(TabularNode {
                code,
                description: record.description,
                notes,
                parent: None,
                children: Vec::new(),
            });
        }

        let mut roots = Vec::new();
        for (idx, parent) in parents.into_iter().enumerate() {
            let Some(parent) = parent else {
                roots.push(idx);
                continue;
            };
            let Some(&pidx) = by_key.get(&parent) else {
                return Err(TaxonomyError::OrphanNode {
                    code: nodes[idx].code.key(),
                    parent,
                });
            };
            if !nodes[pidx].code.admits_child(&nodes[idx].code) {
                return Err(TaxonomyError::PrefixViolation {
                    parent,
                    child: nodes[idx].code.key(),
                });
            }
            nodes[idx].parent = Some(pidx);
            nodes[pidx].children.push(idx);
        }
        Ok(Self {
            nodes,
            by_key,
            roots,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&TabularNode> {
        self.by_key.get(key).map(|&i| &self.nodes[i])
    }

    pub fn roots(&self) -> impl Iterator<Item = &TabularNode> {
        self.roots.iter().map(|&i| &self.nodes[i])
    }

    pub fn children<'a>(&'a self, node: &'a TabularNode) -> impl Iterator<Item = &'a TabularNode> {
        node.children.iter().map(|&i| &self.nodes[i])
    }

    pub fn parent(&self, node: &TabularNode) -> Option<&TabularNode> {
        node.parent.map(|i| &self.nodes[i])
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TabularNode> {
        self.nodes.iter()
    }

    /// Nearest-first walk from `node` up to its root.
    pub fn ancestry<'a>(&'a self, node: &'a TabularNode) -> impl Iterator<Item = &'a TabularNode> {
        core::iter::successors(Some(node), move |n| self.parent(n))
    }

    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| self.ancestry(n).count())
            .max()
            .unwrap_or(0)
    }

    /// Serializes back into records, in arena (input) order.
    pub fn to_records(&self) -> Vec<TabularRecord> {
        self.nodes
            .iter()
            .map(|n| TabularRecord {
                code: n.code.key(),
                description: n.description.clone(),
                parent: n.parent.map(|p| self.nodes[p].code.key()),
                notes: n.notes.clone(),
            })
            .collect()
    }
}

/// An alphabetical-index term path mapped to a code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u32,
    pub term_path: Vec<String>,
    pub display: String,
    pub code: CodeId,
}

impl IndexEntry {
    pub fn new(id: u32, term_path: Vec<String>, code: CodeId) -> Result<Self, TaxonomyError> {
        if term_path.is_empty() || term_path.iter().all(|t| t.trim().is_empty()) {
            return Err(TaxonomyError::EmptyTermPath(code.to_string()));
        }
        let display = term_path.join(", ");
        Ok(Self {
            id,
            term_path,
            display,
            code,
        })
    }
}

/// Validates index records; entry ids are positions in the input.
pub fn build_alpha_index<I>(records: I) -> Result<Vec<IndexEntry>, TaxonomyError>
where
    I: IntoIterator<Item = IndexRecord>,
{
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let code = CodeId::parse(&r.code)?;
            IndexEntry::new(i as u32, r.term_path, code)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineDoc {
    pub chapter: Chapter,
    pub text: String,
}

/// Chapter-specific guideline documents keyed by chapter number.
#[derive(Debug, Clone, Default)]
pub struct Guidelines {
    docs: BTreeMap<u8, GuidelineDoc>,
}

impl Guidelines {
    pub fn from_records<I>(records: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = GuidelineRecord>,
    {
        let mut docs = BTreeMap::new();
        for r in records {
            let chapter = *Chapter::from_label(&r.chapter)
                .ok_or_else(|| TaxonomyError::UnknownChapter(r.chapter.clone()))?;
            if r.text.trim().is_empty() {
                return Err(TaxonomyError::EmptyGuideline(chapter.label.to_string()));
            }
            if docs.contains_key(&chapter.number) {
                return Err(TaxonomyError::DuplicateChapter(chapter.label.to_string()));
            }
            docs.insert(
                chapter.number,
                GuidelineDoc {
                    chapter,
                    text: r.text,
                },
            );
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, chapter: &Chapter) -> Option<&GuidelineDoc> {
        self.docs.get(&chapter.number)
    }
}

/// Result of a guideline lookup: the documents found plus the chapters that
/// have none. Missing chapters are not an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GuidelineLookup<'a> {
    pub docs: Vec<&'a GuidelineDoc>,
    pub missing: Vec<&'static Chapter>,
}

impl GuidelineLookup<'_> {
    /// Concatenated guideline text, empty when nothing was found.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str(&d.text);
        }
        out
    }
}

/// The loaded taxonomy; immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    pub hierarchy: Hierarchy,
    pub index: Vec<IndexEntry>,
    pub guidelines: Guidelines,
}

impl Taxonomy {
    pub fn new(hierarchy: Hierarchy, index: Vec<IndexEntry>, guidelines: Guidelines) -> Self {
        Self {
            hierarchy,
            index,
            guidelines,
        }
    }

    fn node(&self, code: &CodeId) -> Result<&TabularNode, TaxonomyError> {
        self.hierarchy
            .get(code.as_str())
            .ok_or_else(|| TaxonomyError::UnknownCode(code.to_string()))
    }

    /// Notes of the code's node and all its ancestors, nearest first, with
    /// duplicates removed.
    pub fn instructional_notes_for(
        &self,
        code: &CodeId,
    ) -> Result<InstructionalNotes, TaxonomyError> {
        let node = self.node(code)?;
        let mut notes = InstructionalNotes::default();
        for n in self.hierarchy.ancestry(node) {
            notes.extend_from(&n.notes);
        }
        Ok(notes)
    }

    /// Whether the node named by `key` (a code or block label) is assignable:
    /// it must be a code and a leaf. Blocks are never assignable.
    pub fn most_specific(&self, key: &str) -> Result<bool, TaxonomyError> {
        let canonical = NodeCode::parse(key)?.key();
        let node = self
            .hierarchy
            .get(&canonical)
            .ok_or_else(|| TaxonomyError::UnknownCode(key.to_string()))?;
        Ok(matches!(node.code, NodeCode::Code(_)) && node.is_leaf())
    }

    pub fn is_leaf(&self, code: &CodeId) -> Result<bool, TaxonomyError> {
        Ok(self.node(code)?.is_leaf())
    }

    pub fn description(&self, code: &CodeId) -> Option<&str> {
        self.hierarchy
            .get(code.as_str())
            .map(|n| n.description.as_str())
    }

    /// Leaf codes of the hierarchy in ascending code order.
    pub fn assignable_codes(&self) -> Vec<CodeId> {
        let mut out: Vec<CodeId> = self
            .hierarchy
            .nodes()
            .filter(|n| n.is_leaf())
            .filter_map(|n| n.code.as_code().cloned())
            .collect();
        out.sort();
        out
    }

    /// Guideline documents for the distinct chapters of `candidates`, in
    /// chapter order.
    pub fn guidelines_for<'a, I>(&self, candidates: I) -> GuidelineLookup<'_>
    where
        I: IntoIterator<Item = &'a CodeId>,
    {
        let chapters: BTreeSet<u8> = candidates.into_iter().map(|c| c.chapter().number).collect();
        let mut lookup = GuidelineLookup::default();
        for number in chapters {
            let chapter = &CHAPTERS[usize::from(number) - 1];
            match self.guidelines.get(chapter) {
                Some(doc) => lookup.docs.push(doc),
                None => lookup.missing.push(chapter),
            }
        }
        lookup
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(code: &str, parent: Option<&str>) -> TabularRecord {
        TabularRecord {
            code: code.into(),
            description: alloc::format!("desc {code}"),
            parent: parent.map(Into::into),
            notes: InstructionalNotes::default(),
        }
    }

    fn with_notes(mut r: TabularRecord, excludes1: &[&str], includes: &[&str]) -> TabularRecord {
        r.notes.excludes1 = excludes1.iter().map(|s| s.to_string()).collect();
        r.notes.includes = includes.iter().map(|s| s.to_string()).collect();
        r
    }

    fn anthrax_tree() -> Hierarchy {
        Hierarchy::from_records(vec![
            with_notes(rec("A00-B99", None), &["x"], &[]),
            rec("A22", Some("A00-B99")),
            rec("A22.7", Some("A22")),
        ])
        .unwrap()
    }

    #[test]
    fn three_level_tree() {
        let h = anthrax_tree();
        assert_eq!(h.depth(), 3);
        assert!(h.get("A22.7").unwrap().is_leaf());
        assert!(!h.get("A22").unwrap().is_leaf());
        assert!(h.get("A00\u{2013}B99").is_some());
    }

    #[test]
    fn empty_stream_is_valid() {
        let h = Hierarchy::from_records(Vec::new()).unwrap();
        assert!(h.is_empty());
    }

    #[test]
    fn prefix_violation() {
        let err = Hierarchy::from_records(vec![
            rec("A00-B99", None),
            rec("A22", Some("A00-B99")),
            rec("B01", Some("A22")),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::PrefixViolation {
                parent: "A22".into(),
                child: "B01".into()
            }
        );
        // A code outside its block is a violation too.
        let err = Hierarchy::from_records(vec![rec("A00-A09", None), rec("A22", Some("A00-A09"))])
            .unwrap_err();
        assert!(matches!(err, TaxonomyError::PrefixViolation { .. }));
    }

    #[test]
    fn orphan_and_duplicate() {
        let err = Hierarchy::from_records(vec![rec("A22.7", Some("A22"))]).unwrap_err();
        assert!(matches!(err, TaxonomyError::OrphanNode { .. }));
        let err = Hierarchy::from_records(vec![rec("A22", None), rec("A22", None)]).unwrap_err();
        assert_eq!(err, TaxonomyError::DuplicateCode("A22".into()));
    }

    #[test]
    fn notes_inherit_from_ancestors() {
        let tax = Taxonomy::new(anthrax_tree(), vec![], Guidelines::default());
        let notes = tax
            .instructional_notes_for(&CodeId::parse("A22.7").unwrap())
            .unwrap();
        assert_eq!(notes.excludes1, vec!["x".to_string()]);
        assert!(notes.includes.is_empty());
    }

    #[test]
    fn notes_nearest_first_deduplicated() {
        let h = Hierarchy::from_records(vec![
            with_notes(rec("A00-B99", None), &["chapter-ex", "shared"], &["c-inc"]),
            with_notes(
                rec("A22", Some("A00-B99")),
                &["cat-ex"],
                &["cat-inc", "cat-inc"],
            ),
            with_notes(rec("A22.7", Some("A22")), &["leaf-ex", "shared"], &[]),
        ])
        .unwrap();
        let tax = Taxonomy::new(h, vec![], Guidelines::default());
        let code = CodeId::parse("A22.7").unwrap();
        let notes = tax.instructional_notes_for(&code).unwrap();
        // Brute-force: walk leaf -> root, append unseen items.
        let mut expected_ex = Vec::new();
        for level in [
            vec!["leaf-ex", "shared"],
            vec!["cat-ex"],
            vec!["chapter-ex", "shared"],
        ] {
            for item in level {
                if !expected_ex.contains(&item.to_string()) {
                    expected_ex.push(item.to_string());
                }
            }
        }
        assert_eq!(notes.excludes1, expected_ex);
        assert_eq!(
            notes.includes,
            vec!["cat-inc".to_string(), "c-inc".to_string()]
        );
        assert_eq!(tax.instructional_notes_for(&code).unwrap(), notes);
    }

    #[test]
    fn unknown_code_notes() {
        let tax = Taxonomy::new(anthrax_tree(), vec![], Guidelines::default());
        let err = tax
            .instructional_notes_for(&CodeId::parse("Z99.999").unwrap())
            .unwrap_err();
        assert_eq!(err, TaxonomyError::UnknownCode("Z99.999".into()));
    }

    #[test]
    fn specificity() {
        let tax = Taxonomy::new(anthrax_tree(), vec![], Guidelines::default());
        assert!(tax.most_specific("A22.7").unwrap());
        assert!(!tax.most_specific("A22").unwrap());
        assert!(!tax.most_specific("A00\u{2013}B99").unwrap());
        assert!(tax.most_specific("B01").is_err());
    }

    #[test]
    fn index_entries() {
        let entries = build_alpha_index(vec![IndexRecord {
            term_path: vec!["Sepsis".into(), "anthrax".into()],
            code: "A22.7".into(),
        }])
        .unwrap();
        assert_eq!(entries[0].display, "Sepsis, anthrax");
        assert_eq!(entries[0].code.as_str(), "A22.7");

        let err = build_alpha_index(vec![IndexRecord {
            term_path: vec![],
            code: "A22.7".into(),
        }])
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::EmptyTermPath(_)));

        let err = build_alpha_index(vec![IndexRecord {
            term_path: vec!["x".into()],
            code: "22A.7".into(),
        }])
        .unwrap_err();
        assert!(matches!(
            err,
            TaxonomyError::Code(CodeError::MalformedCode(_))
        ));
    }

    fn guidelines() -> Guidelines {
        Guidelines::from_records(vec![
            GuidelineRecord {
                chapter: "A00-B99".into(),
                text: "infectious".into(),
            },
            GuidelineRecord {
                chapter: "S00\u{2013}T88".into(),
                text: "injury".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn duplicate_chapter() {
        let err = Guidelines::from_records(vec![
            GuidelineRecord {
                chapter: "A00-B99".into(),
                text: "a".into(),
            },
            GuidelineRecord {
                chapter: "A00\u{2013}B99".into(),
                text: "b".into(),
            },
        ])
        .unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::DuplicateChapter("A00\u{2013}B99".into())
        );
    }

    #[test]
    fn guidelines_for_candidates() {
        let tax = Taxonomy::new(Hierarchy::default(), vec![], guidelines());
        let codes: Vec<CodeId> = ["T81.44", "A22.7"]
            .iter()
            .map(|c| CodeId::parse(c).unwrap())
            .collect();
        let lookup = tax.guidelines_for(&codes);
        let chapters: Vec<&str> = lookup.docs.iter().map(|d| d.chapter.label).collect();
        assert_eq!(chapters, ["A00\u{2013}B99", "S00\u{2013}T88"]);
        assert!(lookup.missing.is_empty());

        assert_eq!(tax.guidelines_for(&[]), GuidelineLookup::default());

        let codes: Vec<CodeId> = ["A22.7", "A22.9"]
            .iter()
            .map(|c| CodeId::parse(c).unwrap())
            .collect();
        assert_eq!(tax.guidelines_for(&codes).docs.len(), 1);

        let codes = [CodeId::parse("J18.9").unwrap()];
        let lookup = tax.guidelines_for(&codes);
        assert!(lookup.docs.is_empty());
        assert_eq!(lookup.missing[0].label, "J00\u{2013}J99");
        assert_eq!(lookup.text(), "");
    }
}
