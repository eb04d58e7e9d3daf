use std::path::Path;

use proptest::prelude::*;
use uidet_core::data::dataset::scene_for;
use uidet_core::data::ClassCatalog;
use uidet_core::text::*;

fn doc_for(catalog: &ClassCatalog, seed: u64, index: usize) -> DescriptionDoc {
    generate_description(&scene_for(catalog, 256, seed, index), catalog).unwrap()
}

fn block(label: &str, position: usize) -> ControlDescription {
    ControlDescription {
        label: label.into(),
        size: (64, 20),
        position,
        shape: "wide rectangle".into(),
        color: "black on white".into(),
    }
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize("Label: \"Button\""), ["label", "button"]);
    assert!(tokenize("").is_empty());
    assert_eq!(tokenize("~160x40 px"), ["160", "x", "40", "px"]);
    assert_eq!(tokenize("Decoy_Button"), ["decoy", "button"]);
}

#[test]
fn top_left_button_is_described_as_such() {
    use uidet_core::data::scene::{ControlSpec, PixelBox, Scene, Style};
    let scene = Scene {
        canvas: 200,
        background: 0,
        controls: vec![ControlSpec {
            class_id: 0,
            bbox: PixelBox { x: 10, y: 14, w: 20, h: 12 },
            style: Style { fill: 0, ink: 0, variant: 0 },
        }],
        seed: 0,
    };
    let cat = ClassCatalog::twin12();
    let doc = generate_description(&scene, &cat).unwrap();
    assert_eq!(doc.blocks.len(), 1);
    assert_eq!(doc.blocks[0].label, "Button");
    assert_eq!(doc.blocks[0].position_phrase(), "top-left");
    assert_eq!(doc.blocks[0].size, (20, 12));
}

#[test]
fn empty_scene_cannot_be_described() {
    let mut scene = scene_for(&ClassCatalog::twin12(), 256, 1, 0);
    scene.controls.clear();
    assert!(generate_description(&scene, &ClassCatalog::twin12()).is_err());
}

#[test]
fn labels_separate_every_catalog_pair() {
    let cat = ClassCatalog::full23();
    let vecs: Vec<Vec<f32>> = cat.names().map(|n| embed_block(&block(n, 4), DEFAULT_TEXT_DIM)).collect();
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            assert_ne!(vecs[i], vecs[j], "{} vs {}", cat.name_of(i), cat.name_of(j));
        }
    }
    let twins = ClassCatalog::twin12();
    for &(a, b) in &twins.twin_pairs {
        let (x, y) = (block(twins.name_of(a), 0), block(twins.name_of(b), 0));
        assert_ne!(embed_block(&x, DEFAULT_TEXT_DIM), embed_block(&y, DEFAULT_TEXT_DIM));
    }
}

#[test]
fn empty_tokens_embed_to_e0() {
    let e = embed_tokens::<&str>(&[], 8);
    assert_eq!(e, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let seq = embed_doc(&DescriptionDoc::default(), 8);
    assert_eq!(seq.shape(), [1, 8]);
    assert_eq!(seq.data()[0], 1.0);
}

#[test]
fn partial_removal_examples() {
    let doc = DescriptionDoc {
        blocks: vec![block("Button", 0), block("Icon", 3)],
    };
    let out = corrupt_partial(&doc, "Button");
    assert_eq!(out.blocks, vec![block("Icon", 3)]);
    assert!(!tokenize(&out.serialize()).iter().any(|t| t == "button"));
    assert_eq!(corrupt_partial(&doc, "Radio_Selected"), doc);
    let only = DescriptionDoc {
        blocks: vec![block("Button", 0)],
    };
    let gone = corrupt_partial(&only, "Button");
    assert!(gone.blocks.is_empty());
    assert!(embed_doc(&gone, 64).data().iter().enumerate().all(|(i, &v)| v == if i == 0 { 1.0 } else { 0.0 }));
}

#[test]
fn mismatch_needs_two_classes() {
    let mut cat = ClassCatalog::twin12();
    cat.classes.truncate(1);
    cat.twin_pairs.clear();
    let doc = DescriptionDoc {
        blocks: vec![block("Button", 0)],
    };
    assert!(corrupt_mismatch(&doc, &cat, 1).is_err());
}

#[test]
fn description_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let doc = doc_for(&ClassCatalog::full23(), 3, 5);
    let p = dir.path().join("000005.txt");
    std::fs::write(&p, doc.serialize()).unwrap();
    assert_eq!(DescriptionDoc::read(&p).unwrap(), doc);
    std::fs::write(&p, "Button\nLabel: \"Icon\"\n").unwrap();
    let e = DescriptionDoc::read(&p).unwrap_err().to_string();
    assert!(e.contains("line 1"), "{e}");
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(seed in any::<u64>(), index in 0usize..1000, full in any::<bool>()) {
        let cat = if full { ClassCatalog::full23() } else { ClassCatalog::twin12() };
        let doc = doc_for(&cat, seed, index);
        let text = doc.serialize();
        prop_assert_eq!(DescriptionDoc::parse(&text, Path::new("mem")).unwrap(), doc.clone());
        prop_assert_eq!(doc_for(&cat, seed, index).serialize(), text);
    }

    #[test]
    fn embedding_ignores_token_order(seed in any::<u64>(), index in 0usize..1000, shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let doc = doc_for(&ClassCatalog::twin12(), seed, index);
        for b in &doc.blocks {
            let mut toks = tokenize(&b.serialize());
            let want = embed_block(b, DEFAULT_TEXT_DIM);
            prop_assert_eq!(embed_tokens(&toks, DEFAULT_TEXT_DIM), want.clone());
            toks.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
            prop_assert_eq!(embed_tokens(&toks, DEFAULT_TEXT_DIM), want.clone());
            let norm = want.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(norm > 0.0 && norm <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn mismatch_changes_every_label_and_position(seed in any::<u64>(), index in 0usize..500, cseed in any::<u64>()) {
        let cat = ClassCatalog::full23();
        let doc = doc_for(&cat, seed, index);
        let bad = corrupt_mismatch(&doc, &cat, cseed).unwrap();
        prop_assert_eq!(bad.blocks.len(), doc.blocks.len());
        for (b, o) in bad.blocks.iter().zip(&doc.blocks) {
            prop_assert_ne!(&b.label, &o.label);
            prop_assert!(cat.id_of(&b.label).is_some());
            prop_assert_ne!(b.position, o.position);
            prop_assert_eq!(b.size, o.size);
        }
        prop_assert_eq!(corrupt_mismatch(&doc, &cat, cseed).unwrap(), bad);
    }

    #[test]
    fn partial_removes_exactly_the_target(seed in any::<u64>(), index in 0usize..500, class in 0usize..12) {
        let cat = ClassCatalog::twin12();
        let target = cat.name_of(class);
        let doc = doc_for(&cat, seed, index);
        let out = corrupt_partial(&doc, target);
        let kept: Vec<&ControlDescription> = doc.blocks.iter().filter(|b| b.label != target).collect();
        prop_assert_eq!(out.blocks.iter().collect::<Vec<_>>(), kept);
        prop_assert!(out.blocks.iter().all(|b| b.label != target));
    }
}
