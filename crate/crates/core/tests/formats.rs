use hseg::data::pgm::{decode_image, decode_labels, encode_image, encode_labels};
use hseg::data::softmap::{decode_softmap, encode_softmap};
use hseg::data::{
    generate_phantom_dataset, read_image, read_labels, read_softmap, write_image, write_labels, write_softmap,
    DatasetManifest, PhantomConfig,
};
use hseg::image::{GrayImage, SoftSegmentation};
use hseg::model::{read_checkpoint, write_checkpoint, HUNetCompound, UNetConfig};
use hseg::Error;
use proptest::prelude::*;

fn pgm(width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut b = format!("P5\n{width} {height}\n255\n").into_bytes();
    b.extend_from_slice(payload);
    b
}

proptest! {
    #[test]
    fn image_bytes_roundtrip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let payload: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let bytes = pgm(w, h, &payload);
        prop_assert_eq!(encode_image(&decode_image(&bytes).unwrap()), bytes);
    }

    #[test]
    fn label_bytes_roundtrip(labels in prop::collection::vec(0u8..4, 1..64)) {
        let bytes = pgm(labels.len(), 1, &labels);
        prop_assert_eq!(encode_labels(&decode_labels(&bytes).unwrap()), bytes);
    }

    #[test]
    fn softmap_roundtrip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 1..6), h in 1usize..4, w in 1usize..4) {
        let l = values.len();
        let data: Vec<f32> = (0..l * h * w).map(|i| values[i % l]).collect();
        let soft = SoftSegmentation::new(l, h, w, data).unwrap();
        let bytes = encode_softmap(&soft);
        let back = decode_softmap(&bytes, false).unwrap();
        prop_assert_eq!(encode_softmap(&back), bytes);
        let same = back.data.iter().zip(&soft.data).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}

fn format_offset<T: std::fmt::Debug>(r: hseg::Result<T>) -> usize {
    match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_images() {
    assert_eq!(format_offset(decode_image(b"P2\n1 1\n255\n0\n")), 0);
    assert_eq!(format_offset(decode_image(b"")), 0);
    format_offset(decode_image(&pgm(2, 2, &[1, 2, 3])));
    format_offset(decode_image(&pgm(2, 2, &[1, 2, 3, 4, 5])));
    format_offset(decode_image(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0"));
    format_offset(decode_image(b"P5\nx 2\n255\n"));
    format_offset(decode_image(b"P5\n0 2\n255\n"));
}

#[test]
fn malformed_labels_name_the_pixel() {
    let bytes = pgm(3, 2, &[0, 1, 2, 3, 9, 0]);
    match decode_labels(&bytes) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, 11 + 4);
            assert!(message.contains("pixel 4"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_softmaps() {
    let soft = SoftSegmentation::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let good = encode_softmap(&soft);
    format_offset(decode_softmap(&good[..good.len() - 4], true));
    let mut long = good.clone();
    long.extend_from_slice(&[0; 4]);
    format_offset(decode_softmap(&long, true));
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    format_offset(decode_softmap(&bad_magic, true));
    let mut bad_version = good.clone();
    bad_version[5] = b'2';
    format_offset(decode_softmap(&bad_version, true));
}

#[test]
fn malformed_checkpoints() {
    let model = HUNetCompound::build(UNetConfig::lung_stage(1, 2), UNetConfig::class_stage(1, 2), 3).unwrap();
    let mut good = Vec::new();
    write_checkpoint(&model, &mut good).unwrap();
    let back = read_checkpoint(&good).unwrap();
    assert_eq!(back.params(), model.params());

    let mut magic = good.clone();
    magic[1] = b'X';
    assert_eq!(format_offset(read_checkpoint(&magic)), 0);
    let mut version = good.clone();
    version[4] = 2;
    assert_eq!(format_offset(read_checkpoint(&version)), 4);
    for cut in [3, 10, 20, good.len() - 1] {
        format_offset(read_checkpoint(&good[..cut]));
    }
    let mut trailing = good.clone();
    trailing.push(0);
    format_offset(read_checkpoint(&trailing));
}

#[test]
fn file_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
    let p = dir.path().join("img.pgm");
    write_image(&p, &img).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = read_image(&p).unwrap();
    write_image(&p, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);

    let s = dir.path().join("soft.sseg");
    let soft = SoftSegmentation::new(4, 1, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    write_softmap(&s, &soft).unwrap();
    assert_eq!(read_softmap(&s, true).unwrap(), soft);

    let missing = dir.path().join("nope.pgm");
    assert!(matches!(read_labels(&missing), Err(Error::Io { .. })));
    let l = dir.path().join("l.pgm");
    write_labels(&l, &hseg::image::LabelMap::filled(2, 2, 3)).unwrap();
    assert_eq!(read_labels(&l).unwrap().labels, vec![3; 4]);
}

#[test]
fn manifest_reload_is_stable_and_checks_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        n_volumes: 2,
        n_test_volumes: 1,
        slices_per_volume: 2,
        ..PhantomConfig::default()
    };
    let written = generate_phantom_dataset(&cfg, dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded.records, written.records);
    std::fs::remove_file(dir.path().join(&written.records[1].labels)).unwrap();
    assert!(matches!(
        DatasetManifest::load(dir.path().join("manifest.tsv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn mixed_slice_sizes_in_a_volume_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("a.pgm"), &GrayImage::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
    write_image(dir.path().join("b.pgm"), &GrayImage::new(3, 2, vec![0.0; 6]).unwrap()).unwrap();
    write_labels(dir.path().join("la.pgm"), &hseg::image::LabelMap::filled(2, 2, 0)).unwrap();
    write_labels(dir.path().join("lb.pgm"), &hseg::image::LabelMap::filled(3, 2, 0)).unwrap();
    std::fs::write(
        dir.path().join("m.tsv"),
        "a.pgm\tla.pgm\ttrain\tv0\t0\nb.pgm\tlb.pgm\ttrain\tv0\t1\n",
    )
    .unwrap();
    let m = DatasetManifest::load(dir.path().join("m.tsv")).unwrap();
    assert!(matches!(m.load_samples(None), Err(Error::Dimension(_))));
}
