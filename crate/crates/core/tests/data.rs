use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use uidet_core::data::dataset::{sample_seed, scene_for};
use uidet_core::data::scene::{MAX_CONTROLS, MAX_OVERLAP, MIN_CONTROLS};
use uidet_core::data::*;

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["images", "labels", "texts"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
        }
    }
    out.insert(MANIFEST.into(), std::fs::read(dir.join(MANIFEST)).unwrap());
    out
}

#[test]
fn twin_swap_renders_identically() {
    let cat = ClassCatalog::twin12();
    let mut swapped_scenes = 0;
    let mut index = 0;
    while swapped_scenes < 200 {
        let scene = scene_for(&cat, 256, 11, index);
        index += 1;
        if !scene.controls.iter().any(|c| cat.twin_of(c.class_id).is_some()) {
            continue;
        }
        swapped_scenes += 1;
        let mut twin = scene.clone();
        for c in &mut twin.controls {
            if let Some(t) = cat.twin_of(c.class_id) {
                c.class_id = t;
            }
        }
        assert_ne!(scene.annotations(), twin.annotations());
        assert_eq!(render_scene(&scene, &cat), render_scene(&twin, &cat), "scene {}", index - 1);
    }
}

#[test]
fn twin_pairs_have_equal_prior() {
    let cat = ClassCatalog::twin12();
    for &(a, b) in &cat.twin_pairs {
        assert_eq!(cat.classes[a].weight, cat.classes[b].weight);
        assert_eq!(cat.classes[a].glyph, cat.classes[b].glyph);
    }
    assert_eq!(cat.len(), 12);
    assert_eq!(ClassCatalog::full23().len(), 23);
}

#[test]
fn unknown_catalog_lists_valid_names() {
    let e = ClassCatalog::by_name("coco").unwrap_err();
    assert!(matches!(e, uidet_core::Error::Usage(_)));
    let msg = e.to_string();
    assert!(msg.contains("twin12") && msg.contains("full23"), "{msg}");
}

#[test]
fn standard_split_of_500() {
    let s = SplitSizes::standard(500);
    assert_eq!((s.train, s.val, s.test), (315, 35, 150));
    assert_eq!(s.train + s.val, 350);
}

#[test]
fn write_load_round_trip_and_rerun_is_byte_identical() {
    let cat = ClassCatalog::twin12();
    let ds = generate_dataset(&cat, 96, SplitSizes::standard(20), 7).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &ds).unwrap();
    write_dataset(b.path(), &generate_dataset(&cat, 96, SplitSizes::standard(20), 7).unwrap()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let back = load_dataset(a.path()).unwrap();
    assert_eq!(back.samples.len(), 20);
    assert_eq!((back.canvas, back.seed, back.catalog.name.as_str()), (96, 7, "twin12"));
    for (x, y) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.split, y.split);
        assert_eq!(x.image, y.image);
        assert_eq!(x.annotations, y.annotations);
        assert_eq!(x.doc, y.doc);
    }

    let manifest = std::fs::read_to_string(a.path().join(MANIFEST)).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next().unwrap(), "# catalog=twin12 canvas=96 seed=7 count=20");
    let ids: Vec<&str> = lines.map(|l| l.split_whitespace().next().unwrap()).collect();
    let files = std::fs::read_dir(a.path().join("images")).unwrap().count();
    assert_eq!(ids.len(), files);
    let mut uniq = ids.clone();
    uniq.dedup();
    assert_eq!(uniq.len(), ids.len());
}

#[test]
fn custom_split_sizes_survive_a_round_trip() {
    let cat = ClassCatalog::twin12();
    let sizes = SplitSizes { train: 6, val: 2, test: 4 };
    let ds = generate_dataset(&cat, 64, sizes, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.count(Split::Train), 6);
    assert_eq!(back.count(Split::Val), 2);
    assert_eq!(back.count(Split::Test), 4);
}

#[test]
fn malformed_label_names_file_and_line() {
    let cat = ClassCatalog::twin12();
    let ds = generate_dataset(&cat, 64, SplitSizes::standard(3), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let p = dir.path().join("labels").join("000001.txt");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push_str("99 0.5 0.5 0.1 0.1\n");
    std::fs::write(&p, text).unwrap();
    let e = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains("000001.txt") && e.contains("line"), "{e}");
}

#[test]
fn missing_texts_loads_without_descriptions() {
    let cat = ClassCatalog::twin12();
    let ds = generate_dataset(&cat, 64, SplitSizes::standard(4), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    std::fs::remove_dir_all(dir.path().join("texts")).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.samples.iter().all(|s| s.doc.is_none()));
}

#[test]
fn empty_regions_keep_the_background() {
    use uidet_core::data::scene::BACKGROUNDS;
    let cat = ClassCatalog::full23();
    for i in 0..20 {
        let scene = scene_for(&cat, 128, 5, i);
        let img = render_scene(&scene, &cat);
        for y in 0..128 {
            for x in 0..128 {
                let inside = scene.controls.iter().any(|c| x >= c.bbox.x && x < c.bbox.x2() && y >= c.bbox.y && y < c.bbox.y2());
                if !inside {
                    assert_eq!(img.get(x, y), BACKGROUNDS[scene.background]);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn scenes_satisfy_their_invariants(seed in any::<u64>(), index in 0usize..10_000, canvas in prop::sample::select(vec![64u32, 128, 256])) {
        let cat = ClassCatalog::full23();
        let scene = scene_for(&cat, canvas, seed, index);
        prop_assert_eq!(scene.seed, sample_seed(seed, index));
        prop_assert!((MIN_CONTROLS..=MAX_CONTROLS).contains(&scene.controls.len()));
        for (i, c) in scene.controls.iter().enumerate() {
            prop_assert!(c.bbox.w > 0 && c.bbox.h > 0);
            prop_assert!(c.bbox.x2() <= canvas && c.bbox.y2() <= canvas);
            prop_assert!(c.class_id < cat.len());
            for o in &scene.controls[i + 1..] {
                prop_assert!(c.bbox.iou(&o.bbox) <= MAX_OVERLAP);
            }
        }
        for a in scene.annotations() {
            for v in [a.cx, a.cy, a.w, a.h] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert_eq!(scene_for(&cat, canvas, seed, index), scene.clone());
        prop_assert_eq!(render_scene(&scene, &cat), render_scene(&scene, &cat));
    }

    #[test]
    fn ppm_round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::filled(w, h, [0, 0, 0]);
        for b in img.data.iter_mut() {
            *b = rng.gen();
        }
        let bytes = img.encode_ppm();
        prop_assert!(bytes.starts_with(b"P6"));
        prop_assert_eq!(RgbImage::decode_ppm(&bytes, Path::new("mem")).unwrap(), img);
    }
}
