use std::path::PathBuf;

use embedkit::{DatasetManifest, EmbeddingStore, Modality, Split};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn tiny_store_fixture() {
    let s = EmbeddingStore::load(fixture("tiny.cemb")).unwrap();
    assert_eq!(s.dim(), 3);
    assert_eq!(s.modality(), Modality::Image);
    assert!(s.is_normalized());
    assert_eq!(s.ids(), ["a", "b"]);
    assert_eq!(s.get("a").unwrap(), [1.0, 0.0, 0.0]);
    assert_eq!(s.get("b").unwrap(), [0.0, 0.6, 0.8]);

    let mut buf = Vec::new();
    s.write_to(&mut buf).unwrap();
    assert_eq!(buf, std::fs::read(fixture("tiny.cemb")).unwrap());
}

#[test]
fn tiny_manifest_fixture() {
    let m = DatasetManifest::load(fixture("tiny_manifest.jsonl")).unwrap();
    assert_eq!(m.num_classes(), 2);
    assert_eq!(m.class_of("b"), Some("y"));
    assert_eq!(m.split_view(Split::Val).len(), 1);
    let s = EmbeddingStore::load(fixture("tiny.cemb")).unwrap();
    assert!(m.check_alignment(&s).is_aligned());
}

#[test]
fn truncated_fixture_is_rejected() {
    let bytes = std::fs::read(fixture("tiny.cemb")).unwrap();
    for cut in [0, 3, 10, 24, bytes.len() - 1] {
        assert!(EmbeddingStore::read_from(&mut &bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(EmbeddingStore::read_from(&mut &extra[..]).is_err());
}
