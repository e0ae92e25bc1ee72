//! Regression pin for the sampled coefficient field: the cell values drawn
//! for a fixed law, seed, and extent must never drift across refactors or
//! dependency bumps, or every seeded result in the project silently changes.
//!
//! Regenerate the fixture only on a deliberate sampling change:
//! `GOLDEN_REGEN=1 cargo test -p homog --test golden_field`.

use homog::field::{CheckerboardField, FieldFixture, MarginalLaw, TriadicCube};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/field_two_point_seed42.json");

fn sample_reference_field() -> CheckerboardField {
    CheckerboardField::sample(
        MarginalLaw::TwoPoint { lo: 1.0, hi: 4.0, p_hi: 0.5 },
        2,
        42,
        TriadicCube::centered(2, 2),
    )
    .unwrap()
}

#[test]
fn sampled_cells_match_the_committed_fixture() {
    let field = sample_reference_field();
    let fixture = field.to_fixture();

    if std::env::var("GOLDEN_REGEN").is_ok() {
        let json = serde_json::to_string_pretty(&fixture).unwrap();
        std::fs::write(FIXTURE, json + "\n").unwrap();
        panic!("fixture regenerated; rerun without GOLDEN_REGEN");
    }

    let committed: FieldFixture =
        serde_json::from_str(&std::fs::read_to_string(FIXTURE).expect("fixture present"))
            .expect("fixture parses");

    assert_eq!(fixture.dim, committed.dim);
    assert_eq!(fixture.law, committed.law);
    assert_eq!(fixture.master_seed, committed.master_seed);
    assert_eq!(fixture.extent, committed.extent);
    assert_eq!(
        fixture.cells.len(),
        committed.cells.len(),
        "cell count changed: the extent covers 81 cells at scale 2"
    );
    for (got, want) in fixture.cells.iter().zip(&committed.cells) {
        assert_eq!(got, want, "a sampled cell drifted from the committed draw");
    }

    // the fixture round-trips into a usable field
    let back = CheckerboardField::from_fixture(&committed).unwrap();
    for row in &committed.cells {
        let z: Vec<i64> = row[..2].iter().map(|&v| v as i64).collect();
        assert_eq!(back.value_at_cell(&z).unwrap(), row[2]);
        assert!(row[2] == 1.0 || row[2] == 4.0, "two-point draws are lo or hi");
    }
}
