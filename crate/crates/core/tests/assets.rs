//! The files under `assets/` are exactly what the generators produce.

use std::path::PathBuf;

use test_embed::data::{format_dataset, load_dataset};
use test_embed::pipeline::{default_lm, default_vocab};
use test_embed::prototypes::sidecar_path;
use test_embed::synth::{generate, Suite, CLS3_LEN, CLS3_SERIES};
use test_embed::{Container, VocabMatrix};

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(name)
}

#[test]
fn shipped_vocab_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("vocab.tste");
    default_vocab(64).unwrap().save(&fresh).unwrap();
    assert_eq!(std::fs::read(asset("vocab.tste")).unwrap(), std::fs::read(&fresh).unwrap());
    assert_eq!(
        std::fs::read(asset("vocab.txt")).unwrap(),
        std::fs::read(sidecar_path(&fresh)).unwrap()
    );
    let v = VocabMatrix::load(asset("vocab.tste")).unwrap();
    assert_eq!((v.len(), v.width()), (512, 64));
}

#[test]
fn shipped_lm_matches_generator() {
    let mut c = Container::new();
    default_lm(64).unwrap().export(&mut c);
    assert_eq!(std::fs::read(asset("lm.tste")).unwrap(), c.to_bytes());
}

#[test]
fn shipped_datasets_match_generator() {
    for (suite, name) in [(Suite::Cls3, "cls3.csv"), (Suite::Ar2, "ar2.csv")] {
        let text = std::fs::read_to_string(asset(name)).unwrap();
        let ds = generate(suite, 0).unwrap();
        assert_eq!(text, format_dataset(&ds), "{name}");
        assert_eq!(load_dataset(asset(name)).unwrap(), ds);
    }
    let cls3 = load_dataset(asset("cls3.csv")).unwrap();
    assert_eq!(cls3.len(), CLS3_SERIES);
    assert!(cls3.iter().all(|s| s.len() == CLS3_LEN));
}
