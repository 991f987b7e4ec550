//! Seeded generator for a synthetic taxonomy and note set.
//!
//! The shape is fixed: ten chapters with six categories of five leaves each
//! (300 assignable codes), a 500-entry alphabetical index, guidelines for
//! eight chapters and a set of notes whose gold codes come from distinct
//! chapters. The same seed always yields the same bytes.

use std::collections::BTreeSet;
use std::path::Path;

use clh_core::pipeline::{ClinicalNote, EvidenceSpan};
use clh_core::taxonomy::{GuidelineRecord, IndexRecord, InstructionalNotes, TabularRecord};
use clh_core::{CodeId, CHAPTERS};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ALPHA_INDEX_FILE, GUIDELINES_FILE, NOTES_FILE, TABULAR_FILE};
use crate::io::{write_jsonl, IoError};

pub const NOTE_SCHEMA: &str = "clh.note/1";

const N_CHAPTERS: usize = 10;
const CATEGORIES_PER_CHAPTER: usize = 6;
const LEAVES_PER_CATEGORY: usize = 5;
const INDEX_ENTRIES: usize = 500;
/// Chapters (0-based) left without a guideline document.
const NO_GUIDELINE: [usize; 2] = [6, 8];

const ADJECTIVES: [&str; 12] = [
    "fibrotic",
    "necrotizing",
    "granular",
    "cystic",
    "ischemic",
    "atrophic",
    "hypertrophic",
    "suppurative",
    "calcific",
    "erosive",
    "hemorrhagic",
    "sclerosing",
];
const LESIONS: [&str; 12] = [
    "stenosis",
    "abscess",
    "neuropathy",
    "dysplasia",
    "fistula",
    "ulcer",
    "polyp",
    "effusion",
    "torsion",
    "infarction",
    "hernia",
    "lesion",
];
const SITES: [&str; 24] = [
    "lung",
    "liver",
    "kidney",
    "spleen",
    "pancreas",
    "colon",
    "stomach",
    "bladder",
    "cornea",
    "retina",
    "cochlea",
    "larynx",
    "trachea",
    "aorta",
    "femur",
    "tibia",
    "scalp",
    "thyroid",
    "adrenal gland",
    "esophagus",
    "duodenum",
    "ovary",
    "prostate",
    "sinus",
];
const QUALIFIERS: [&str; 8] = [
    "unspecified",
    "bilateral",
    "recurrent",
    "acute",
    "chronic",
    "with complication",
    "without complication",
    "initial encounter",
];
const FILLER: [&str; 10] = [
    "Patient seen on the ward this morning.",
    "Vital signs stable overnight.",
    "Family updated at bedside.",
    "Tolerating oral intake.",
    "Labs reviewed and unremarkable apart from mild anemia.",
    "Ambulating with assistance.",
    "Pain controlled on current regimen.",
    "Discussed plan with the attending.",
    "No new complaints today.",
    "Follow-up arranged in clinic.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub seed: u64,
    pub notes: usize,
    /// Largest number of gold codes per note (at least 1).
    pub max_gold: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 7,
            notes: 50,
            max_gold: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFixture {
    pub tabular: Vec<TabularRecord>,
    pub index: Vec<IndexRecord>,
    pub guidelines: Vec<GuidelineRecord>,
    pub notes: Vec<ClinicalNote>,
}

struct Leaf {
    code: String,
    chapter: usize,
    condition: String,
    site: &'static str,
    qualifier: &'static str,
}

fn site_adjective(site: &str) -> &'static str {
    match site {
        "lung" => "pulmonary",
        "liver" => "hepatic",
        "kidney" => "renal",
        "spleen" => "splenic",
        "pancreas" => "pancreatic",
        "colon" => "colonic",
        "stomach" => "gastric",
        "bladder" => "vesical",
        "cornea" => "corneal",
        "retina" => "retinal",
        "cochlea" => "cochlear",
        "larynx" => "laryngeal",
        "trachea" => "tracheal",
        "aorta" => "aortic",
        "femur" => "femoral",
        "tibia" => "tibial",
        "scalp" => "scalp",
        "thyroid" => "thyroidal",
        "adrenal gland" => "adrenal",
        "esophagus" => "esophageal",
        "duodenum" => "duodenal",
        "ovary" => "ovarian",
        "prostate" => "prostatic",
        _ => "sinonasal",
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

pub fn generate(params: SynthParams) -> SynthFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut conditions: Vec<String> = ADJECTIVES
        .iter()
        .flat_map(|a| LESIONS.iter().map(move |l| format!("{a} {l}")))
        .collect();
    conditions.shuffle(&mut rng);

    let mut tabular = Vec::new();
    let mut leaves: Vec<Leaf> = Vec::new();
    let mut categories: Vec<(String, String)> = Vec::new();
    for (ci, chapter) in CHAPTERS.iter().take(N_CHAPTERS).enumerate() {
        let block = chapter.label.to_string();
        tabular.push(TabularRecord {
            code: block.clone(),
            description: chapter.title.into(),
            parent: None,
            notes: InstructionalNotes::default(),
        });
        let letter = &chapter.first[..1];
        let first_num: usize = chapter.first[1..].parse().expect("numeric chapter start");
        for j in 0..CATEGORIES_PER_CHAPTER {
            let cat = format!("{letter}{:02}", first_num + 10 + j);
            let condition = conditions[ci * CATEGORIES_PER_CHAPTER + j].clone();
            let mut notes = InstructionalNotes::default();
            match rng.random_range(0..5) {
                0 if !categories.is_empty() => {
                    let (code, desc) = categories.choose(&mut rng).unwrap();
                    notes
                        .excludes1
                        .push(format!("{} ({code})", desc.to_lowercase()));
                }
                1 => notes
                    .code_first
                    .push("underlying condition, if known".into()),
                2 => notes
                    .use_additional
                    .push("code to identify the organism".into()),
                _ => {}
            }
            tabular.push(TabularRecord {
                code: cat.clone(),
                description: capitalize(&condition),
                parent: Some(block.clone()),
                notes,
            });
            categories.push((cat.clone(), capitalize(&condition)));

            let mut sites: Vec<&'static str> = SITES.to_vec();
            sites.shuffle(&mut rng);
            for (d, site) in sites.into_iter().take(LEAVES_PER_CATEGORY).enumerate() {
                let qualifier = *QUALIFIERS.choose(&mut rng).unwrap();
                let code = format!("{cat}.{d}");
                tabular.push(TabularRecord {
                    code: code.clone(),
                    description: format!("{} of {site}, {qualifier}", capitalize(&condition)),
                    parent: Some(cat.clone()),
                    notes: InstructionalNotes::default(),
                });
                leaves.push(Leaf {
                    code,
                    chapter: ci,
                    condition: condition.clone(),
                    site,
                    qualifier,
                });
            }
        }
    }

    let mut index: Vec<IndexRecord> = leaves
        .iter()
        .map(|l| IndexRecord {
            term_path: vec![capitalize(&l.condition), l.site.into(), l.qualifier.into()],
            code: l.code.clone(),
        })
        .collect();
    index.extend(categories.iter().map(|(code, desc)| IndexRecord {
        term_path: vec![desc.clone()],
        code: code.clone(),
    }));
    let mut reordered: Vec<&Leaf> = leaves.iter().collect();
    reordered.shuffle(&mut rng);
    for l in reordered.into_iter().take(INDEX_ENTRIES - index.len()) {
        index.push(IndexRecord {
            term_path: vec![capitalize(l.site), l.condition.clone()],
            code: l.code.clone(),
        });
    }

    let guidelines = CHAPTERS
        .iter()
        .take(N_CHAPTERS)
        .enumerate()
        .filter(|(i, _)| !NO_GUIDELINE.contains(i))
        .map(|(_, c)| GuidelineRecord {
            chapter: c.label.into(),
            text: format!(
                "Conditions in {} are coded to the highest documented specificity. \
                 Assign the site-specific code when the site is stated; do not code conditions documented as ruled out.",
                c.title.to_lowercase()
            ),
        })
        .collect();

    let mut used = BTreeSet::new();
    let notes = (0..params.notes)
        .map(|i| synth_note(&mut rng, i, &leaves, params.max_gold.max(1), &mut used))
        .collect();

    SynthFixture {
        tabular,
        index,
        guidelines,
        notes,
    }
}

/// Evidence strings are kept unique across notes while the phrasings last:
/// two notes sharing a snippet send the same prompt with different gold,
/// which an answer table keyed by prompt cannot replay.
fn synth_note(
    rng: &mut ChaCha8Rng,
    i: usize,
    leaves: &[Leaf],
    max_gold: usize,
    used: &mut BTreeSet<String>,
) -> ClinicalNote {
    let n_gold = rng.random_range(1..=max_gold.min(N_CHAPTERS));
    let mut chapters: Vec<usize> = (0..N_CHAPTERS).collect();
    chapters.shuffle(rng);

    let mut text = String::from("Discharge summary. ");
    let mut spans = Vec::new();
    let mut gold = BTreeSet::new();
    for &ch in &chapters[..n_gold] {
        let pool: Vec<&Leaf> = leaves.iter().filter(|l| l.chapter == ch).collect();
        let mut attempts = 0;
        let (leaf, evidence) = loop {
            attempts += 1;
            let leaf = *pool.choose(rng).unwrap();
            // Some notes name the lesion and an adjectival site instead of
            // the indexed terms, which retrieval does not always resolve.
            let evidence = if rng.random_bool(0.25) {
                let lesion = leaf.condition.rsplit(' ').next().unwrap_or(&leaf.condition);
                format!("{} {lesion}", site_adjective(leaf.site))
            } else {
                format!(
                    "{} of the {}, {}",
                    leaf.condition, leaf.site, leaf.qualifier
                )
            };
            if used.insert(evidence.clone()) || attempts > 200 {
                break (leaf, evidence);
            }
        };
        text.push_str(FILLER.choose(rng).unwrap());
        text.push(' ');
        text.push_str(
            ["Assessment: ", "Imaging confirms ", "Diagnosed with "]
                .choose(rng)
                .unwrap(),
        );
        let start = text.chars().count();
        text.push_str(&evidence);
        spans.push(EvidenceSpan {
            code: CodeId::parse(&leaf.code).expect("generated code is valid"),
            start,
            end: start + evidence.chars().count(),
        });
        gold.insert(CodeId::parse(&leaf.code).expect("generated code is valid"));
        text.push_str(". ");
    }
    text.push_str(FILLER.choose(rng).unwrap());

    ClinicalNote {
        schema: Some(NOTE_SCHEMA.into()),
        id: format!("note-{i:03}"),
        text,
        doc_type: "discharge_summary".into(),
        gold: Some(gold),
        gold_evidence: Some(spans),
    }
}

impl SynthFixture {
    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        write_jsonl(&dir.join(TABULAR_FILE), &self.tabular)?;
        write_jsonl(&dir.join(ALPHA_INDEX_FILE), &self.index)?;
        write_jsonl(&dir.join(GUIDELINES_FILE), &self.guidelines)?;
        write_jsonl(&dir.join(NOTES_FILE), &self.notes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clh_core::taxonomy::Hierarchy;

    #[test]
    fn shape_and_determinism() {
        let f = generate(SynthParams::default());
        assert_eq!(f, generate(SynthParams::default()));
        assert_eq!(f.index.len(), 500);
        assert_eq!(f.guidelines.len(), 8);
        assert_eq!(f.notes.len(), 50);
        let h = Hierarchy::from_records(f.tabular.clone()).unwrap();
        assert_eq!(f.tabular.len(), 10 + 60 + 300);
        assert!(!h.is_empty());
        for n in &f.notes {
            n.validate().unwrap();
            let texts = n.evidence_texts();
            assert_eq!(texts.len(), n.gold_codes().len());
            let chapters: BTreeSet<_> = n.gold_codes().iter().map(|c| c.chapter().number).collect();
            assert_eq!(chapters.len(), n.gold_codes().len());
        }
        let snippets: Vec<String> = f.notes.iter().flat_map(|n| n.evidence_texts()).collect();
        assert_eq!(
            snippets.iter().collect::<BTreeSet<_>>().len(),
            snippets.len()
        );
        assert_ne!(
            f,
            generate(SynthParams {
                seed: 8,
                ..Default::default()
            })
        );
        assert_eq!(
            generate(SynthParams {
                notes: 2000,
                ..Default::default()
            })
            .notes
            .len(),
            2000
        );
    }
}
