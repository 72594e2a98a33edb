//! Cross-checks the Welch test against 50 sample pairs whose statistics were
//! frozen from an independent reference implementation before this crate's
//! stats code existed.

use flatsurr::stats::{welch_t_test, Alternative};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

#[test]
fn welch_matches_reference_on_fifty_pairs() {
    let raw = include_str!("fixtures/welch_fixture.json");
    let cases: Vec<Case> = serde_json::from_str(raw).unwrap();
    assert_eq!(cases.len(), 50);
    for (i, c) in cases.iter().enumerate() {
        let r = welch_t_test(&c.a, &c.b, Alternative::Greater).unwrap();
        assert!((r.t - c.t).abs() < 1e-10, "case {i}: t {} vs {}", r.t, c.t);
        assert!(
            (r.df - c.df).abs() < 1e-10,
            "case {i}: df {} vs {}",
            r.df,
            c.df
        );
        assert!((r.p - c.p).abs() < 1e-8, "case {i}: p {} vs {}", r.p, c.p);
    }
}
