//! ICD-10-CM code identifiers and the chapter range table.

use alloc::string::{String, ToString};
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("malformed code `{0}`")]
    MalformedCode(String),
    #[error("code `{0}` falls outside every chapter range")]
    UnknownChapter(String),
}

/// One of the 22 ICD-10-CM chapters, identified by its category range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chapter {
    /// 1-based chapter number; also the ordering key.
    pub number: u8,
    pub first: &'static str,
    pub last: &'static str,
    pub label: &'static str,
    pub title: &'static str,
}

impl Chapter {
    pub fn contains_category(&self, category: &str) -> bool {
        category.len() == 3 && self.first <= category && category <= self.last
    }

    /// Looks a chapter up by label. Accepts `-` in place of the en dash.
    pub fn from_label(label: &str) -> Option<&'static Chapter> {
        let label = label.trim();
        CHAPTERS.iter().find(|c| {
            c.label == label
                || (label.len() == 7
                    && label.is_ascii()
                    && label.as_bytes()[3] == b'-'
                    && label[..3] == *c.first
                    && label[4..] == *c.last)
        })
    }

    pub fn of_category(category: &str) -> Option<&'static Chapter> {
        CHAPTERS.iter().find(|c| c.contains_category(category))
    }
}

impl fmt::Display for Chapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label)
    }
}

impl Serialize for Chapter {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label)
    }
}

impl<'de> Deserialize<'de> for Chapter {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let label = String::deserialize(deserializer)?;
        Chapter::from_label(&label)
            .copied()
            .ok_or_else(|| serde::de::Error::custom(alloc::format!("unknown chapter `{label}`")))
    }
}

macro_rules! chapter {
    ($n:expr, $first:expr, $last:expr, $title:expr) => {
        Chapter {
            number: $n,
            first: $first,
            last: $last,
            label: concat!($first, "\u{2013}", $last),
            title: $title,
        }
    };
}

/// ICD-10-CM chapter table. Category ranges compare as ASCII strings, which
/// places alphanumeric categories such as `O9A` after `O99`.
pub static CHAPTERS: [Chapter; 22] = [
    chapter!(1, "A00", "B99", "Certain infectious and parasitic diseases"),
    chapter!(2, "C00", "D49", "Neoplasms"),
    chapter!(3, "D50", "D89", "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism"),
    chapter!(4, "E00", "E89", "Endocrine, nutritional and metabolic diseases"),
    chapter!(5, "F01", "F99", "Mental, behavioral and neurodevelopmental disorders"),
    chapter!(6, "G00", "G99", "Diseases of the nervous system"),
    chapter!(7, "H00", "H59", "Diseases of the eye and adnexa"),
    chapter!(8, "H60", "H95", "Diseases of the ear and mastoid process"),
    chapter!(9, "I00", "I99", "Diseases of the circulatory system"),
    chapter!(10, "J00", "J99", "Diseases of the respiratory system"),
    chapter!(11, "K00", "K95", "Diseases of the digestive system"),
    chapter!(12, "L00", "L99", "Diseases of the skin and subcutaneous tissue"),
    chapter!(13, "M00", "M99", "Diseases of the musculoskeletal system and connective tissue"),
    chapter!(14, "N00", "N99", "Diseases of the genitourinary system"),
    chapter!(15, "O00", "O9A", "Pregnancy, childbirth and the puerperium"),
    chapter!(16, "P00", "P96", "Certain conditions originating in the perinatal period"),
    chapter!(17, "Q00", "Q99", "Congenital malformations, deformations and chromosomal abnormalities"),
    chapter!(18, "R00", "R99", "Symptoms, signs and abnormal clinical and laboratory findings, not elsewhere classified"),
    chapter!(19, "S00", "T88", "Injury, poisoning and certain other consequences of external causes"),
    chapter!(20, "V00", "Y99", "External causes of morbidity"),
    chapter!(21, "Z00", "Z99", "Factors influencing health status and contact with health services"),
    chapter!(22, "U00", "U85", "Codes for special purposes"),
];

/// A validated ICD-10-CM code such as `A22.7`.
///
/// Equality and ordering use the code text only. Leafness is a property of
/// the hierarchy and is answered by [`crate::Taxonomy::most_specific`].
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeId {
    text: String,
    chapter: u8,
}

impl CodeId {
    pub fn parse(text: &str) -> Result<Self, CodeError> {
        if !is_well_formed(text) {
            return Err(CodeError::MalformedCode(text.to_string()));
        }
        let chapter = Chapter::of_category(&text[..3])
            .ok_or_else(|| CodeError::UnknownChapter(text.to_string()))?;
        Ok(Self {
            text: text.to_string(),
            chapter: chapter.number,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// The three-character category prefix.
    pub fn category(&self) -> &str {
        &self.text[..3]
    }

    pub fn chapter(&self) -> &'static Chapter {
        &CHAPTERS[usize::from(self.chapter) - 1]
    }

    /// Code text with the dot removed, the form used by the prefix rule.
    pub fn compact(&self) -> String {
        self.text.chars().filter(|&c| c != '.').collect()
    }
}

fn is_upper_alnum(b: u8) -> bool {
    b.is_ascii_uppercase() || b.is_ascii_digit()
}

fn is_well_formed(text: &str) -> bool {
    let bytes = text.as_bytes();
    if bytes.len() < 3
        || !bytes[0].is_ascii_uppercase()
        || !is_upper_alnum(bytes[1])
        || !is_upper_alnum(bytes[2])
    {
        return false;
    }
    match &bytes[3..] {
        [] => true,
        [b'.', rest @ ..] => {
            (1..=4).contains(&rest.len()) && rest.iter().all(|&b| is_upper_alnum(b))
        }
        _ => false,
    }
}

impl fmt::Debug for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodeId({})", self.text)
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl core::str::FromStr for CodeId {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for CodeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for CodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        CodeId::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anthrax_sepsis_code() {
        let code = CodeId::parse("A22.7").unwrap();
        assert_eq!(code.category(), "A22");
        assert_eq!(code.chapter().label, "A00\u{2013}B99");
    }

    #[test]
    fn postprocedural_sepsis_code() {
        let code = CodeId::parse("T81.44").unwrap();
        assert_eq!(code.category(), "T81");
        assert_eq!(code.chapter().label, "S00\u{2013}T88");
    }

    #[test]
    fn malformed_codes() {
        for bad in [
            "22A.7",
            "",
            "A2",
            "a22.7",
            "A22.",
            "A22.12345",
            "A227",
            "A22 .7",
            "A22.7x",
        ] {
            assert_eq!(
                CodeId::parse(bad),
                Err(CodeError::MalformedCode(bad.into())),
                "{bad}"
            );
        }
    }

    #[test]
    fn unknown_chapter() {
        assert_eq!(
            CodeId::parse("F00.1"),
            Err(CodeError::UnknownChapter("F00.1".into()))
        );
        assert_eq!(
            CodeId::parse("E90"),
            Err(CodeError::UnknownChapter("E90".into()))
        );
    }

    #[test]
    fn alphanumeric_categories() {
        assert_eq!(CodeId::parse("O9A.11").unwrap().chapter().number, 15);
        assert_eq!(CodeId::parse("S72.001A").unwrap().chapter().number, 19);
        assert_eq!(CodeId::parse("U07.1").unwrap().chapter().number, 22);
    }

    #[test]
    fn chapter_ranges_do_not_overlap() {
        for (i, a) in CHAPTERS.iter().enumerate() {
            assert_eq!(usize::from(a.number), i + 1);
            assert!(a.first <= a.last);
            for b in &CHAPTERS[i + 1..] {
                assert!(
                    a.last < b.first || b.last < a.first,
                    "{} overlaps {}",
                    a.label,
                    b.label
                );
            }
        }
    }

    #[test]
    fn chapter_labels_accept_hyphen() {
        assert_eq!(Chapter::from_label("A00-B99").unwrap().number, 1);
        assert_eq!(Chapter::from_label("S00\u{2013}T88").unwrap().number, 19);
        assert!(Chapter::from_label("A00-A09").is_none());
    }
}
