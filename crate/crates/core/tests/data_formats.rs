use std::fs;

use duocontrast::data::{
    parse_image_corpus, parse_pair_corpus, parse_triplet_corpus, synth_generate, tokenize, tokenize_batch, Dataset,
    PairCorpus, PairRecord,
};
use duocontrast::encoders::PAD;
use duocontrast::numcore::{write_tensor_file, Rng, Tensor};
use proptest::prelude::*;

#[test]
fn pair_corpus_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    fs::write(&path, "{\"query\": \"a\", \"positive\": \"b\"}\n\n{\"query\": \"a\"}\n").unwrap();
    let err = parse_pair_corpus(&path).unwrap_err().to_string();
    assert!(err.contains("pairs.jsonl") && err.contains(":3"), "{err}");
}

#[test]
fn triplets_need_seven_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    fs::write(
        &path,
        "{\"query\": \"q\", \"positive\": \"p\", \"negatives\": [\"n\"]}\n",
    )
    .unwrap();
    let err = parse_triplet_corpus(&path).unwrap_err().to_string();
    assert!(err.contains("7 negatives"), "{err}");
}

#[test]
fn image_records_load_their_tensor() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    let image = Tensor::new(vec![1, 2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
    write_tensor_file(&dir.path().join("img/a.jct"), &image).unwrap();
    let path = dir.path().join("caps.jsonl");
    fs::write(&path, "{\"caption\": \"c\", \"image_ref\": \"img/a.jct\"}\n").unwrap();
    let corpus = parse_image_corpus(&path).unwrap();
    assert_eq!(corpus.records()[0].image, image);

    let bad = Tensor::new(vec![1, 1, 2], vec![0.5, 1.5]).unwrap();
    write_tensor_file(&dir.path().join("img/a.jct"), &bad).unwrap();
    assert!(parse_image_corpus(&path).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let data = synth_generate(&mut Rng::new(8), 64, 8, 0.05).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_dir(dir.path()).unwrap();
    assert_eq!(Dataset::load_dir(dir.path()).unwrap(), data);
}

#[test]
fn synthetic_split_is_one_in_eight() {
    for n in [16, 100, 4096] {
        let data = synth_generate(&mut Rng::new(1), n, 8, 0.05).unwrap();
        assert_eq!(data.eval.len(), n / 8);
        assert_eq!(data.train.pairs.as_ref().unwrap().len(), n - n / 8);
    }
}

#[test]
fn epochs_visit_every_record_once() {
    let recs: Vec<PairRecord> = (0..10)
        .map(|i| PairRecord {
            query: format!("q{i}"),
            positive: format!("p{i}"),
        })
        .collect();
    let corpus = PairCorpus::new(recs, 3);
    let mut seen: Vec<usize> = (0..5).flat_map(|s| corpus.batch_indices(2, s).unwrap()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(corpus.batch_indices(4, 7).unwrap(), corpus.batch_indices(4, 7).unwrap());
}

proptest! {
    #[test]
    fn tokens_are_bytes_then_padding(text in "[ -~]{1,40}", max_len in 1usize..64) {
        let row = tokenize(&text, max_len).unwrap();
        let kept = text.len().min(max_len);
        prop_assert_eq!(row.ids.len(), max_len);
        for (i, b) in text.bytes().take(kept).enumerate() {
            prop_assert_eq!(row.ids[i], u16::from(b));
            prop_assert!(row.mask[i]);
        }
        prop_assert!(row.ids[kept..].iter().all(|&id| id == PAD));
        prop_assert!(row.mask[kept..].iter().all(|&m| !m));
    }

    #[test]
    fn unicode_is_split_into_bytes(text in "\\PC{1,10}") {
        let row = tokenize(&text, 64).unwrap();
        let n = text.len().min(64);
        prop_assert!(row.ids[..n].iter().all(|&id| id < 256));
    }
}

#[test]
fn empty_text_is_rejected() {
    assert!(tokenize("", 8).is_err());
    assert!(tokenize_batch::<&str>(&[], 8).is_err());
}
