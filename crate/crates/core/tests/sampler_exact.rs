mod common;

use common::constant_field_run;

#[test]
fn constant_field_reaches_its_endpoint() {
    for (seed, t, s) in [(1, 50, 25), (2, 50, 0), (3, 50, 50), (4, 7, 3), (5, 1, 1)] {
        let (_, err) = constant_field_run(seed, t, s);
        assert!(err <= 1e-9, "t={t} s={s}: error {err:e}");
    }
}

#[test]
fn constant_field_runs_are_reproducible() {
    assert_eq!(constant_field_run(9, 50, 25).0, constant_field_run(9, 50, 25).0);
}
