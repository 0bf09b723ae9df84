use std::fs;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use roadseg::dataset::{generate_split, load_manifest, write_sample};
use roadseg::IoError;
use roadseg_core::synth::{generate_sample, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        size: 64,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn generated_split_loads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let m = generate_split(&cfg, 5, dir.path(), "train").unwrap();
    assert_eq!(m.ids, ["train_00000", "train_00001", "train_00002", "train_00003", "train_00004"]);
    for (i, id) in m.ids.iter().enumerate() {
        let loaded = m.load(id).unwrap();
        let original = generate_sample(&cfg, i as u64).unwrap();
        assert_eq!(loaded.image(), original.image());
        assert_eq!(loaded.mask(), original.mask());
    }
    let provenance = fs::read_to_string(dir.path().join("synth_config.txt")).unwrap();
    assert!(provenance.contains("[train]") && provenance.contains("seed = 3"));
}

#[test]
fn splits_share_a_root_without_collisions() {
    let dir = tempfile::tempdir().unwrap();
    generate_split(&small(), 3, dir.path(), "train").unwrap();
    let val = SynthConfig { seed: 4, ..small() };
    generate_split(&val, 2, dir.path(), "val").unwrap();
    assert_eq!(load_manifest(dir.path(), "train").unwrap().len(), 3);
    assert_eq!(load_manifest(dir.path(), "val").unwrap().len(), 2);
}

#[test]
fn ids_are_sorted_and_missing_files_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    for id in ["b", "a"] {
        let mut s = generate_sample(&cfg, 0).unwrap();
        s.id = id.into();
        write_sample(dir.path(), &s).unwrap();
    }
    fs::write(dir.path().join("all.txt"), "b\n\na\n").unwrap();
    assert_eq!(load_manifest(dir.path(), "all").unwrap().ids, ["a", "b"]);

    fs::write(dir.path().join("broken.txt"), "a\nc\n").unwrap();
    assert!(matches!(load_manifest(dir.path(), "broken"), Err(IoError::MissingFile { .. })));
    assert!(matches!(load_manifest(dir.path(), "absent"), Err(IoError::Read { .. })));
    fs::remove_file(dir.path().join("masks/b.png")).unwrap();
    assert!(matches!(
        load_manifest(dir.path(), "all"),
        Err(IoError::MissingFile { what: "mask", .. })
    ));
}

#[test]
fn tiff_images_and_soft_masks_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    let img = RgbImage::from_fn(40, 36, |x, y| Rgb([x as u8, y as u8, 7]));
    img.save_with_format(dir.path().join("images/t.tif"), ImageFormat::Tiff).unwrap();
    // anti-aliased edge values count as road
    let mask = GrayImage::from_fn(40, 36, |x, _| Luma([[0, 255, 128][x as usize % 3]]));
    mask.save(dir.path().join("masks/t.png")).unwrap();
    fs::write(dir.path().join("s.txt"), "t\n").unwrap();
    let s = load_manifest(dir.path(), "s").unwrap().load("t").unwrap();
    assert_eq!((s.height(), s.width()), (36, 40));
    assert_eq!(s.pixel(3, 5), [5, 3, 7]);
    assert_eq!(s.road_pixels(), 36 * 26);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    RgbImage::new(64, 64).save(dir.path().join("images/x.png")).unwrap();
    GrayImage::new(64, 32).save(dir.path().join("masks/x.png")).unwrap();
    fs::write(dir.path().join("s.txt"), "x\n").unwrap();
    let m = load_manifest(dir.path(), "s").unwrap();
    assert!(matches!(m.load("x"), Err(IoError::SizeMismatch { .. })));
}
