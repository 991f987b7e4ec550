use std::collections::{BTreeMap, BTreeSet};

use clh_core::backend::{extract_ids, extract_strings, GenerationResult, IdConstraint};
use clh_core::metrics::{emr, micro_macro, LabelUniverse, Prediction};
use clh_core::pipeline::group_by_chapter;
use clh_core::retrieval::{rrf_fuse, Hit, Ranking};
use clh_core::{CodeId, CHAPTERS};
use proptest::prelude::*;

fn label_sets() -> impl Strategy<Value = Vec<(BTreeSet<u8>, BTreeSet<u8>)>> {
    let set = prop::collection::btree_set(0u8..15, 0..6);
    prop::collection::vec((set.clone(), set), 1..20)
}

fn preds(raw: &[(BTreeSet<u8>, BTreeSet<u8>)]) -> Vec<Prediction<u8>> {
    raw.iter()
        .map(|(p, g)| Prediction::new(p.iter().copied(), g.iter().copied()))
        .collect()
}

/// Confusion counts tallied label by label, note by note.
fn oracle_counts(raw: &[(BTreeSet<u8>, BTreeSet<u8>)]) -> BTreeMap<u8, [u64; 3]> {
    let mut m = BTreeMap::new();
    for label in 0u8..15 {
        let mut c = [0u64; 3];
        for (p, g) in raw {
            match (p.contains(&label), g.contains(&label)) {
                (true, true) => c[0] += 1,
                (true, false) => c[1] += 1,
                (false, true) => c[2] += 1,
                (false, false) => {}
            }
        }
        if c.iter().sum::<u64>() > 0 {
            m.insert(label, c);
        }
    }
    m
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

proptest! {
    #[test]
    fn metrics_match_confusion_oracle(raw in label_sets()) {
        let r = micro_macro(&preds(&raw), &LabelUniverse::Observed).unwrap();
        let counts = oracle_counts(&raw);
        let (tp, fp, fn_) = counts.values().fold((0, 0, 0), |a, c| (a.0 + c[0], a.1 + c[1], a.2 + c[2]));
        if tp + fp + fn_ > 0 {
            prop_assert!((r.micro_f1 - f1(tp, fp, fn_)).abs() <= 1e-12);
            let macro_f1 = counts.values().map(|c| f1(c[0], c[1], c[2])).sum::<f64>() / counts.len() as f64;
            prop_assert!((r.macro_f1 - macro_f1).abs() <= 1e-12);
        }
        let exact = raw.iter().filter(|(p, g)| p == g).count() as f64 / raw.len() as f64;
        prop_assert_eq!(r.emr, exact);
        prop_assert_eq!(emr(&preds(&raw)).unwrap(), exact);
        for v in [r.micro_f1, r.macro_f1, r.emr, r.precision, r.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if r.emr == 1.0 {
            prop_assert_eq!(r.micro_f1, 1.0);
        }
        if r.precision + r.recall > 0.0 {
            let h = 2.0 * r.precision * r.recall / (r.precision + r.recall);
            prop_assert!((r.micro_f1 - h).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_note_order_and_label_names(raw in label_sets(), shift in 1u8..200) {
        let base = micro_macro(&preds(&raw), &LabelUniverse::Observed).unwrap();
        let mut reversed = raw.clone();
        reversed.reverse();
        let r = micro_macro(&preds(&reversed), &LabelUniverse::Observed).unwrap();
        prop_assert!((base.micro_f1 - r.micro_f1).abs() <= 1e-12 && (base.macro_f1 - r.macro_f1).abs() <= 1e-12);

        let rename = |s: &BTreeSet<u8>| s.iter().map(|l| l.wrapping_add(shift)).collect::<BTreeSet<u8>>();
        let renamed: Vec<_> = raw.iter().map(|(p, g)| (rename(p), rename(g))).collect();
        let r = micro_macro(&preds(&renamed), &LabelUniverse::Observed).unwrap();
        prop_assert!((base.micro_f1 - r.micro_f1).abs() <= 1e-12 && (base.macro_f1 - r.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(base.emr, r.emr);
    }

    #[test]
    fn duplicate_predictions_change_nothing(raw in label_sets()) {
        let base = micro_macro(&preds(&raw), &LabelUniverse::Observed).unwrap();
        let doubled: Vec<Prediction<u8>> = raw
            .iter()
            .map(|(p, g)| Prediction::new(p.iter().chain(p.iter()).copied(), g.iter().copied()))
            .collect();
        prop_assert_eq!(base, micro_macro(&doubled, &LabelUniverse::Observed).unwrap());
    }
}

/// Reference reader: the innermost span before the last closing tag, then
/// every digit run.
fn reference_ids(raw: &str, max_id: usize) -> Option<(Vec<usize>, bool)> {
    let before_close = &raw[..raw.rfind("</answer>")?];
    let payload = &before_close[before_close.rfind("<answer>")? + "<answer>".len()..];
    let numbers: Vec<u64> = payload
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().unwrap_or(u64::MAX))
        .collect();
    if numbers.is_empty() {
        return None;
    }
    if numbers.contains(&0) {
        return Some((vec![], true));
    }
    let mut ids = vec![];
    for n in numbers {
        if n <= max_id as u64 && !ids.contains(&(n as usize)) {
            ids.push(n as usize);
        }
    }
    Some((ids, false))
}

fn answer_like() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<answer>".to_string()),
        Just("</answer>".to_string()),
        Just("<think>".to_string()),
        Just("</think>".to_string()),
        Just(", ".to_string()),
        Just("\"".to_string()),
        "[0-9]{1,3}",
        "[a-zé ,\"]{0,5}",
        any::<String>(),
    ];
    prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn id_parser_agrees_with_reference(raw in answer_like(), max_id in 0usize..15) {
        let got = extract_ids(&GenerationResult::from_raw(raw.clone()), max_id);
        match reference_ids(&raw, max_id) {
            None => prop_assert!(got.is_err()),
            Some((ids, none)) => {
                let got = got.unwrap();
                prop_assert_eq!(got.ids, ids);
                prop_assert_eq!(got.none_selected, none);
            }
        }
    }

    #[test]
    fn zero_always_empties(ids in prop::collection::vec(0u32..20, 0..6), max_id in 1usize..20) {
        let body: Vec<String> = ids.iter().map(|i| i.to_string()).chain(["0".to_string()]).collect();
        let raw = format!("<answer>{}</answer>", body.join(", "));
        let sel = extract_ids(&GenerationResult::from_raw(raw), max_id).unwrap();
        prop_assert!(sel.ids.is_empty() && sel.none_selected);
    }

    #[test]
    fn string_parser_is_total(raw in answer_like()) {
        if let Ok(pieces) = extract_strings(&GenerationResult::from_raw(raw)) {
            prop_assert!(pieces.iter().all(|p| !p.is_empty() && p.trim() == p));
        }
    }

    #[test]
    fn quoted_strings_round_trip(items in prop::collection::vec("[a-z][a-z ,]{0,10}[a-z]", 0..6)) {
        let body: Vec<String> = items.iter().map(|s| format!("\"{s}\"")).collect();
        let raw = format!("<answer>{}</answer>", body.join(", "));
        prop_assert_eq!(extract_strings(&GenerationResult::from_raw(raw)).unwrap(), items);
    }

    #[test]
    fn constraint_accepts_exactly_its_renderings(ids in prop::collection::vec(1usize..12, 1..5), max_id in 1usize..12, multi: bool) {
        let c = IdConstraint::new(max_id, multi);
        let body: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        let out = format!("<answer>{}</answer>", body.join(", "));
        let expected = ids.iter().all(|&i| i <= max_id) && (multi || ids.len() == 1);
        prop_assert_eq!(c.matches(&out), expected);
        prop_assert!(c.matches("<answer>0</answer>"));
    }
}

fn ranking(ids: &[u32]) -> Ranking {
    Ranking {
        query: String::new(),
        hits: ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Hit {
                id,
                score: -(i as f64),
            })
            .collect(),
    }
}

fn distinct_ids() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::btree_set(0u32..80, 0..50)
        .prop_flat_map(|s| Just(s.into_iter().collect::<Vec<_>>()).prop_shuffle())
}

proptest! {
    #[test]
    fn rrf_matches_direct_sum(a in distinct_ids(), b in distinct_ids()) {
        let fused = rrf_fuse(&[ranking(&a), ranking(&b)], 60.0);
        let mut direct: BTreeMap<u32, f64> = BTreeMap::new();
        for list in [&a, &b] {
            for (i, id) in list.iter().enumerate() {
                *direct.entry(*id).or_default() += 1.0 / (60.0 + (i + 1) as f64);
            }
        }
        let mut expected: Vec<(u32, f64)> = direct.into_iter().collect();
        expected.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let got: Vec<u32> = fused.ids().collect();
        let want: Vec<u32> = expected.iter().map(|e| e.0).collect();
        prop_assert_eq!(got, want);
        let swapped = rrf_fuse(&[ranking(&b), ranking(&a)], 60.0);
        prop_assert_eq!(fused.hits, swapped.hits);
    }

    #[test]
    fn chapter_groups_partition(idx in prop::collection::vec((0usize..22, 0u8..100), 0..30)) {
        let codes: Vec<CodeId> = idx
            .iter()
            .filter_map(|&(ch, n)| CodeId::parse(&format!("{}{:02}.{}", &CHAPTERS[ch].first[..1], n % 10, n / 10)).ok())
            .collect();
        let groups = group_by_chapter(&codes);
        let union: BTreeSet<CodeId> = groups.values().flatten().cloned().collect();
        prop_assert_eq!(union, codes.iter().cloned().collect::<BTreeSet<_>>());
        for (ch, members) in &groups {
            prop_assert!(members.iter().all(|c| c.chapter() == ch));
            prop_assert!(members.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
