use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use defgen_core::router::{
    detect_named_entity, validate, CorpusIndex, DefinitionGenerator, Gazetteer, Mode, QueryRequest, Router,
    RouterError, Source,
};
use proptest::prelude::*;

const FIXTURE: &str = include_str!("fixtures/gazetteer50.tsv");

#[derive(Default)]
struct Counting {
    calls: AtomicUsize,
}

impl DefinitionGenerator for Counting {
    fn generate(&self, word: &str, _context: &str) -> Result<String, RouterError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(format!("generated for {word}"))
    }

    fn model_id(&self) -> String {
        "counting".into()
    }
}

fn router(counter: Arc<Counting>, modes: &[Mode]) -> Router {
    let gazetteer = Arc::new(Gazetteer::from_tsv(FIXTURE).unwrap());
    let index = CorpusIndex::new(["the cat sat on the mat", "I moved to California last year", "a cat and a dog"]);
    let mut r = Router::new(gazetteer, index);
    for &m in modes {
        r = r.with_model(m, counter.clone());
    }
    r
}

#[test]
fn gazetteer_lookup_agrees_with_linear_scan() {
    let g = Gazetteer::from_tsv(FIXTURE).unwrap();
    let rows: Vec<Vec<&str>> = FIXTURE.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 50);
    assert_eq!(g.len(), 50);
    let scan = |surface: &str| rows.iter().find(|r| r[0] == surface).map(|r| r[1]);
    for row in &rows {
        let req = QueryRequest::new(row[0], format!("about {} today", row[0]), Mode::EnEn);
        assert_eq!(detect_named_entity(&req, &g), scan(row[0]));
        assert_eq!(g.definition(row[1]), Some(row[2]));
        let lower = row[0].to_lowercase();
        assert_eq!(detect_named_entity(&QueryRequest::new(&lower, &lower, Mode::EnEn), &g), scan(&lower));
    }
    assert_eq!(detect_named_entity(&QueryRequest::new("cat", "the cat", Mode::EnEn), &g), None);
}

#[test]
fn gazetteer_hit_never_calls_the_generator() {
    let counter = Arc::new(Counting::default());
    let r = router(counter.clone(), &Mode::ALL);
    let out = r
        .define(&QueryRequest::new("California", "I moved to California last year", Mode::EnEn))
        .unwrap();
    assert_eq!(out.source, Source::Predefined);
    assert_eq!(out.model_id, None);
    assert_eq!(out.category.as_deref(), Some("State or Province"));
    assert_eq!(out.examples, vec!["I moved to California last year"]);
    assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn invalid_query_fails_before_any_model_call() {
    let counter = Arc::new(Counting::default());
    let r = router(counter.clone(), &Mode::ALL);
    let err = r.define(&QueryRequest::new("dog", "the cat sat", Mode::EnEn)).unwrap_err();
    assert_eq!(err, RouterError::WordNotInContext);
    assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn ordinary_query_is_generated() {
    let counter = Arc::new(Counting::default());
    let r = router(counter.clone(), &[Mode::EnEn]);
    let out = r.define(&QueryRequest::new("cat", "the cat sat on the mat", Mode::EnEn)).unwrap();
    assert_eq!(out.source, Source::Generated);
    assert_eq!(out.mode, Mode::EnEn);
    assert_eq!(out.model_id.as_deref(), Some("counting"));
    assert_eq!(out.examples.len(), 2);
    assert_eq!(counter.calls.load(Ordering::SeqCst), 1);
    assert_eq!(
        r.define(&QueryRequest::new("猫", "一只猫", Mode::ZhZh)),
        Err(RouterError::ModelUnavailable(Mode::ZhZh))
    );
}

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("California".to_string()),
        Just("NASA".to_string()),
        Just("cat".to_string()),
        Just("Cat".to_string()),
        Just("猫".to_string()),
        Just(" ".to_string()),
        "[a-z]{1,4}",
    ]
}

fn context() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("the cat sat".to_string()),
        Just("California NASA cat".to_string()),
        Just("一只猫".to_string()),
        Just("".to_string()),
        "[a-z ]{0,12}",
    ]
}

proptest! {
    #[test]
    fn routing_is_exclusive(w in word(), c in context(), mode in prop::sample::select(Mode::ALL.to_vec()), loaded in prop::collection::vec(any::<bool>(), 3)) {
        let modes: Vec<Mode> = Mode::ALL.iter().zip(&loaded).filter(|(_, on)| **on).map(|(m, _)| *m).collect();
        let counter = Arc::new(Counting::default());
        let r = router(counter.clone(), &modes);
        let req = QueryRequest::new(w.clone(), c.clone(), mode);
        let gazetteer = Gazetteer::from_tsv(FIXTURE).unwrap();
        let result = r.define(&req);
        let calls = counter.calls.load(Ordering::SeqCst);
        // Exactly one outcome, and the one predicted from the inputs.
        let expected = if let Err(e) = validate(&req) {
            Err(e)
        } else if gazetteer.category(w.trim()).is_some() {
            Ok(Source::Predefined)
        } else if modes.contains(&mode) {
            Ok(Source::Generated)
        } else {
            Err(RouterError::ModelUnavailable(mode))
        };
        match (&result, &expected) {
            (Ok(out), Ok(src)) => {
                prop_assert_eq!(out.source, *src);
                prop_assert!(!out.definition.is_empty());
                prop_assert_eq!(out.model_id.is_none(), *src == Source::Predefined);
                prop_assert_eq!(calls, usize::from(*src == Source::Generated));
            }
            (Err(a), Err(b)) => {
                prop_assert_eq!(a, b);
                prop_assert_eq!(calls, 0);
            }
            _ => prop_assert!(false, "got {:?}, expected {:?}", result, expected),
        }
        prop_assert_eq!(r.define(&req), result);
    }

    #[test]
    fn examples_always_validate(w in "[a-z]{1,3}", k in 0usize..5) {
        let index = CorpusIndex::new(["ab cd", "abc", "cd ab ef", "x", "ef ab", "ab"]);
        let got = index.fetch_examples(&w, k);
        prop_assert!(got.len() <= k);
        for s in &got {
            prop_assert!(validate(&QueryRequest::new(w.clone(), s.clone(), Mode::EnEn)).is_ok());
        }
    }
}
