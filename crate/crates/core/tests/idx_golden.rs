use std::path::PathBuf;

use jigen::datasets::idx::{encode_images, encode_labels, parse_images, parse_labels, read_images, read_labels};
use jigen::datasets::{from_idx, normalize_32rgb};
use jigen::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

const PIXELS: [u8; 18] = [0, 255, 128, 1, 2, 3, 10, 20, 30, 40, 50, 60, 255, 254, 253, 0, 0, 7];

fn parse_offset(e: Error) -> usize {
    match e {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {:?}", other),
    }
}

#[test]
fn golden_fixture_round_trips() {
    let images = read_images(fixture("golden-images.idx")).unwrap();
    let labels = read_labels(fixture("golden-labels.idx")).unwrap();
    assert_eq!((images.count(), images.rows, images.cols), (3, 2, 3));
    assert_eq!(images.pixels, PIXELS);
    assert_eq!(labels, [7, 0, 9]);
    assert_eq!(encode_images(&images), std::fs::read(fixture("golden-images.idx")).unwrap());
    assert_eq!(encode_labels(&labels), std::fs::read(fixture("golden-labels.idx")).unwrap());

    let d = from_idx("golden", &images, &labels).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.labels(), [7, 0, 9]);
    assert_eq!(d.get(0).0.at(0, 0, 1), 1.0);
    let n = normalize_32rgb(&d);
    assert_eq!((n.get(2).0.channels(), n.get(2).0.height(), n.get(2).0.width()), (3, 32, 32));
}

#[test]
fn corruption_is_rejected_with_offsets() {
    let good = std::fs::read(fixture("golden-images.idx")).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[2] = 0x09;
    assert_eq!(parse_offset(parse_images(&bad_magic).unwrap_err()), 0);

    assert_eq!(parse_offset(parse_images(&good[..10]).unwrap_err()), 8);
    assert_eq!(parse_offset(parse_images(&good[..good.len() - 1]).unwrap_err()), good.len() - 1);

    let mut extra = good.clone();
    extra.push(0);
    assert_eq!(parse_offset(parse_images(&extra).unwrap_err()), good.len());

    let labels = std::fs::read(fixture("golden-labels.idx")).unwrap();
    assert_eq!(parse_offset(parse_labels(&labels[..9]).unwrap_err()), 9);
    // An image file is not a label file.
    assert_eq!(parse_offset(parse_labels(&good).unwrap_err()), 0);
}
