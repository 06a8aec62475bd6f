use std::fs;

use gliomesh::io::{load_archive, save_archive, FieldArchive, NamedArray, RunConfig};
use gliomesh::{Error, GridSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn archives_round_trip_exactly(
        data in prop::collection::vec(-1e6f32..1e6, 1..200),
        mask in prop::collection::vec(any::<bool>(), 1..50),
        note in "[a-z ]{0,20}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut a = FieldArchive::new(Some(GridSpec::new(&[4, 6], 3).unwrap()));
        a.push(NamedArray::new("values", &[data.len()], data.clone()).unwrap());
        a.push(NamedArray::from_mask("mask", &[mask.len()], &mask).unwrap());
        a.meta("note", &note);
        save_archive(dir.path(), &a).unwrap();
        let b = load_archive(dir.path()).unwrap();
        prop_assert_eq!(&b.get("values").unwrap().data, &data);
        prop_assert_eq!(b.get("mask").unwrap().to_mask(), mask);
        prop_assert_eq!(b.metadata.get("note"), Some(&note));
        prop_assert_eq!(b.grid().unwrap(), a.grid().unwrap());
    }
}

#[test]
fn corrupted_payload_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = FieldArchive::new(None);
    a.push(NamedArray::new("x", &[3], vec![1.0, 2.0, 3.0]).unwrap());
    save_archive(dir.path(), &a).unwrap();
    let path = dir.path().join("x.f32");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0x55;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_archive(dir.path()), Err(Error::ChecksumMismatch(_))));
    fs::write(&path, &bytes[..8]).unwrap();
    assert!(matches!(load_archive(dir.path()), Err(Error::ShapeMismatch(_))));
}

#[test]
fn unknown_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_archive(dir.path(), &FieldArchive::new(None)).unwrap();
    let m = dir.path().join("manifest.json");
    let text = fs::read_to_string(&m)
        .unwrap()
        .replace("\"schema_version\": 1", "\"schema_version\": 99");
    fs::write(&m, text).unwrap();
    assert!(matches!(load_archive(dir.path()), Err(Error::UnsupportedSchema(_))));
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
    assert!(RunConfig::from_toml("[grid]\nshape = [64, 64]\nbogus = 1\n").is_err());
}
