use std::collections::BTreeMap;
use std::fs;

use dqweight::corpus::{
    attach_ocr, corpus_from_ocr, load_embeddings, load_embeddings_any, load_manifest, EmbeddingKind, Label, Sample,
};
use proptest::prelude::*;

fn sample_strategy() -> impl Strategy<Value = Vec<(String, String, u8, usize)>> {
    // (aspect word, filler word, label index, image index)
    prop::collection::vec(("[A-Z][a-z]{1,6}", "[a-z ]{0,12}", 0u8..3, 0usize..6), 0..12)
}

fn build(rows: &[(String, String, u8, usize)]) -> Vec<Sample> {
    rows.iter()
        .enumerate()
        .map(|(i, (aspect, filler, label, img))| Sample {
            id: format!("id{i}"),
            image_file: format!("img{img}.jpg"),
            text: format!("{filler} {aspect} é{filler}").trim().to_string(),
            aspect: aspect.clone(),
            label: Label::ALL[*label as usize],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn load_save_load_is_idempotent(
        rows in sample_strategy(),
        ocr in prop::collection::btree_map("img[0-7]\\.jpg", "[ -~]{0,40}", 0..8),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let first = corpus_from_ocr(build(&rows), &ocr);
        let (m1, o1) = (dir.path().join("m1.tsv"), dir.path().join("o1.json"));
        first.save(&m1, &o1).unwrap();
        let second = attach_ocr(load_manifest(&m1).unwrap(), &o1).unwrap();
        prop_assert_eq!(&first, &second);
        let (m2, o2) = (dir.path().join("m2.tsv"), dir.path().join("o2.json"));
        second.save(&m2, &o2).unwrap();
        prop_assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        prop_assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    }

    #[test]
    fn l_max_ignores_manifest_order(
        rows in sample_strategy(),
        lengths in prop::collection::vec(0usize..500, 6),
        seed in any::<u64>(),
    ) {
        let ocr: BTreeMap<String, String> =
            lengths.iter().enumerate().map(|(i, &n)| (format!("img{i}.jpg"), "x".repeat(n))).collect();
        let samples = build(&rows);
        let mut shuffled = samples.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = corpus_from_ocr(samples.clone(), &ocr);
        let b = corpus_from_ocr(shuffled, &ocr);
        prop_assert_eq!(a.l_max(), b.l_max());
        let expected = samples.iter().map(|s| lengths[s.image_file[3..4].parse::<usize>().unwrap()]).max().unwrap_or(0);
        prop_assert_eq!(a.l_max(), expected);
    }
}

#[test]
fn sidecar_with_metadata_line_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb_text.jsonl");
    let body = concat!(
        "{\"meta\": {\"model\": \"clip-vit-b32\", \"device\": \"cpu\"}}\n",
        "{\"key\": \"s1\", \"kind\": \"text\", \"dim\": 3, \"vec\": [0.1, 0.2, 0.3]}\n",
        "\n",
        "{\"key\": \"s2\", \"kind\": \"text\", \"dim\": 3, \"vec\": [1e-3, -2.5, 0]}\n",
    );
    fs::write(&path, body).unwrap();
    let table = load_embeddings(&path, EmbeddingKind::Text).unwrap();
    assert_eq!(table.len(), 2);
    assert_eq!(table.dim(), 3);
    assert_eq!(table.get("s2").unwrap(), &[1e-3, -2.5, 0.0]);
    assert_eq!(load_embeddings_any(&path).unwrap(), table);
    assert!(load_embeddings(&path, EmbeddingKind::Image).is_err());
}

#[test]
fn saved_table_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.jsonl");
    let mut table = dqweight::corpus::EmbeddingTable::new(EmbeddingKind::Aspect, 2);
    table.insert("a", vec![0.1 + 0.2, 1.0 / 3.0]).unwrap();
    table.insert("b", vec![-7.25e-300, 1e300]).unwrap();
    table.save(&path).unwrap();
    assert_eq!(load_embeddings(&path, EmbeddingKind::Aspect).unwrap(), table);
}
