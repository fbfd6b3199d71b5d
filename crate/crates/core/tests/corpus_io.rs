use std::path::{Path, PathBuf};

use cotrel::corpus::{self, Corpus, CorpusError, Dataset, Sample, ScriptedTruth, Split};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn round_trip(c: &Corpus) -> Corpus {
    let f = tempfile::NamedTempFile::new().unwrap();
    corpus::write_normalized(c, f.path()).unwrap();
    corpus::read_normalized(f.path()).unwrap()
}

#[test]
fn aokvqa_fixture_round_trips() {
    let ing = corpus::load_aokvqa(fixture("aokvqa_val.json"), Split::Val).unwrap();
    assert_eq!(ing.corpus.len(), 24);
    assert!(ing.unknown_field_count() >= 1);
    assert!(ing.corpus.samples().iter().all(|s| s.choices.as_ref().is_some_and(|c| c.len() == 4)));
    assert_eq!(round_trip(&ing.corpus), ing.corpus);
}

#[test]
fn okvqa_fixture_round_trips() {
    let ing = corpus::load_okvqa(fixture("okvqa_questions.json"), fixture("okvqa_annotations.json")).unwrap();
    assert_eq!(ing.corpus.len(), 22);
    assert!(ing.corpus.samples().iter().all(|s| s.choices.is_none() && !s.gold_answers.is_empty()));
    assert_eq!(round_trip(&ing.corpus), ing.corpus);
}

#[test]
fn fvqa_fixture_round_trips() {
    let ing = corpus::load_fvqa(fixture("fvqa_qs.json")).unwrap();
    assert_eq!(ing.corpus.len(), 21);
    assert_eq!(round_trip(&ing.corpus), ing.corpus);
}

#[test]
fn invalid_fixtures_are_rejected() {
    let err = corpus::load_aokvqa(fixture("reject/aokvqa_bad_choice_index.json"), Split::Val).unwrap_err();
    assert!(matches!(err, CorpusError::InvalidChoiceIndex { n_choices: 4, .. }), "{err}");
    let err = corpus::load_aokvqa(fixture("reject/aokvqa_duplicate_id.json"), Split::Val).unwrap_err();
    assert!(matches!(err, CorpusError::DuplicateSampleId { .. }), "{err}");
    let err = corpus::load_okvqa(
        fixture("reject/okvqa_missing_answers_questions.json"),
        fixture("reject/okvqa_missing_answers_annotations.json"),
    )
    .unwrap_err();
    assert!(matches!(err, CorpusError::NoGoldAnswers { .. }), "{err}");
    let err = corpus::load_okvqa(
        fixture("reject/okvqa_duplicate_id_questions.json"),
        fixture("reject/okvqa_duplicate_id_annotations.json"),
    )
    .unwrap_err();
    assert!(matches!(err, CorpusError::DuplicateSampleId { .. }), "{err}");
    let err = corpus::load_fvqa(fixture("reject/fvqa_missing_answer.json")).unwrap_err();
    assert!(matches!(err, CorpusError::MissingField { field: "answer", .. }), "{err}");
    let err = corpus::load_fvqa(fixture("reject/fvqa_duplicate_id.json")).unwrap_err();
    assert!(matches!(err, CorpusError::DuplicateSampleId { .. }), "{err}");
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.'?é\"\\\\/-]{0,24}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn sample(i: usize) -> impl Strategy<Value = Sample> {
    (
        text(),
        prop::collection::vec(text(), 1..4),
        prop::option::of(prop::collection::vec(text(), 2..5)),
        any::<prop::sample::Index>(),
        prop::option::of(any::<(bool, bool, bool)>()),
    )
        .prop_map(move |(question, gold, choices, idx, truth)| {
            let gold_choice_index = choices.as_ref().map(|c| idx.index(c.len()));
            Sample {
                sample_id: format!("s{i}"),
                dataset: Dataset::Aokvqa,
                image_ref: format!("img/{i}.jpg"),
                question,
                choices,
                gold_answers: gold,
                gold_choice_index,
                scripted_truth: truth.map(|(d, m, f)| ScriptedTruth {
                    direct_correct: d,
                    multistep_correct: m,
                    injected_fp: f,
                }),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_format_is_lossless(samples in (1usize..8).prop_flat_map(|n| (0..n).map(sample).collect::<Vec<_>>())) {
        let c = Corpus::new(Dataset::Aokvqa, Split::Train, samples).unwrap();
        prop_assert_eq!(round_trip(&c), c.clone());
        prop_assert_eq!(corpus::to_normalized_string(&c).lines().count(), c.len());
    }

    #[test]
    fn out_of_range_choice_is_rejected(n in 1usize..6, extra in 0usize..3) {
        let s = Sample {
            sample_id: "x".into(),
            dataset: Dataset::Aokvqa,
            image_ref: "i.jpg".into(),
            question: "q?".into(),
            choices: Some((0..n).map(|i| format!("c{i}")).collect()),
            gold_answers: vec!["c0".into()],
            gold_choice_index: Some(n + extra),
            scripted_truth: None,
        };
        let err = Corpus::new(Dataset::Aokvqa, Split::Val, vec![s]).unwrap_err();
        prop_assert!(
            matches!(err, CorpusError::InvalidChoiceIndex { .. }),
            "unexpected error: {}",
            err
        );
    }
}
