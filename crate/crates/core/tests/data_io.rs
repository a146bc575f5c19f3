mod common;

use std::path::Path;

use candle_core::{DType, Tensor};
use common::{cpu, values};
use gadan::data::{
    encode_output, epoch_order, list_images, load_batch, load_domain, load_image, next_batch, to_byte, to_unit,
    BatchCursor,
};
use gadan::{Error, ImageBatch};
use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

fn folder_of(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..n {
        write_gray(&dir.path().join(format!("img{i}.png")), 8, 8, |x, _| (i * 40 + x as usize) as u8);
    }
    dir
}

#[test]
fn corrupt_files_are_skipped() {
    let dir = folder_of(3);
    std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let ds = load_domain(dir.path(), 8, 1).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.skipped.len(), 1);
    assert!(ds.skipped[0].ends_with("broken.png"));
    let names: Vec<_> = ds.files.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
    assert_eq!(names, ["img0.png", "img1.png", "img2.png"]);
}

#[test]
fn empty_domains_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_domain(dir.path(), 8, 1), Err(Error::EmptyDomain(_))));
    std::fs::write(dir.path().join("broken.jpg"), b"xx").unwrap();
    assert!(matches!(load_domain(dir.path(), 8, 1), Err(Error::EmptyDomain(_))));
    assert!(matches!(load_domain(&dir.path().join("missing"), 8, 1), Err(Error::Io { .. })));
}

#[test]
fn listing_is_sorted_and_filters_extensions() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.PNG", "a.bmp", "c.jpeg", "d.gif", "e"] {
        std::fs::write(dir.path().join(name), b"").unwrap();
    }
    let names: Vec<_> = list_images(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.bmp", "b.PNG", "c.jpeg"]);
}

#[test]
fn pixel_map_endpoints() {
    assert_eq!(to_unit(0), -1.0);
    assert_eq!(to_unit(255), 1.0);
    assert!((to_unit(128) - 0.00392).abs() < 1e-5);
    assert_eq!(to_byte(1.2), 255);
    assert_eq!(to_byte(-3.0), 0);
}

#[test]
fn final_batch_of_an_epoch_is_short() {
    let dir = folder_of(5);
    let ds = load_domain(dir.path(), 8, 1).unwrap();
    let mut cursor = BatchCursor::new(3);
    let mut sizes = Vec::new();
    let mut seen = Vec::new();
    for _ in 0..3 {
        let (b, next) = next_batch(&ds, 2, cursor, DType::F32, &cpu()).unwrap();
        sizes.push(b.dims4().0);
        seen.extend(values(b.tensor()).chunks(64).map(|c| c[0]));
        cursor = next;
    }
    assert_eq!(sizes, [2, 2, 1]);
    assert_eq!(cursor, BatchCursor { seed: 3, epoch: 1, position: 0 });
    // Every image appears exactly once per epoch.
    seen.sort_by(f64::total_cmp);
    let mut want: Vec<f64> = (0..5).map(|i| to_unit((i * 40) as u8) as f64).collect();
    want.sort_by(f64::total_cmp);
    assert_eq!(seen, want);
    assert!(next_batch(&ds, 0, cursor, DType::F32, &cpu()).is_err());
}

#[test]
fn batch_order_is_seeded() {
    assert_eq!(epoch_order(50, 9, 2), epoch_order(50, 9, 2));
    assert_ne!(epoch_order(50, 9, 2), epoch_order(50, 9, 3));
    assert_ne!(epoch_order(50, 9, 2), epoch_order(50, 10, 2));
}

#[test]
fn gray_images_expand_to_three_channels_and_rgb_collapses() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.png");
    write_gray(&gray, 4, 4, |_, _| 255);
    let v = load_image(&gray, 4, 3).unwrap();
    assert_eq!(v.len(), 48);
    assert!(v.iter().all(|&x| x == 1.0));
    let rgb = dir.path().join("c.png");
    RgbImage::from_pixel(4, 4, Rgb([255, 0, 0])).save(&rgb).unwrap();
    let v = load_image(&rgb, 4, 1).unwrap();
    assert_eq!(v.len(), 16);
    assert!(v.iter().all(|&x| x > -1.0 && x < 1.0));
}

#[test]
fn inputs_are_resized_to_the_network_size() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("wide.png");
    write_gray(&p, 20, 6, |_, _| 0);
    let b = load_batch(&[p.clone(), p], 8, 1, DType::F64, &cpu()).unwrap();
    assert_eq!(b.dims4(), (2, 1, 8, 8));
    assert!(values(b.tensor()).iter().all(|&x| x == -1.0));
}

#[test]
fn encoding_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.png");
    write_gray(&src, 6, 6, |x, y| (x * 40 + y) as u8);
    let b = load_batch(&[src.clone()], 6, 1, DType::F32, &cpu()).unwrap();
    let out = dir.path().join("out.png");
    encode_output(&b, &out).unwrap();
    assert_eq!(image::open(&src).unwrap().to_luma8(), image::open(&out).unwrap().to_luma8());
    let two = ImageBatch::new(Tensor::zeros((2, 1, 4, 4), DType::F32, &cpu()).unwrap()).unwrap();
    assert!(encode_output(&two, &out).is_err());
}

#[test]
fn out_of_range_values_are_clamped_on_encode() {
    let dir = tempfile::tempdir().unwrap();
    let v = vec![1.2f32, -1.7, 0.0, 1.0];
    let b = ImageBatch::new(Tensor::from_vec(v, (1, 1, 2, 2), &cpu()).unwrap()).unwrap();
    let out = dir.path().join("c.png");
    encode_output(&b, &out).unwrap();
    assert_eq!(image::open(&out).unwrap().to_luma8().into_raw(), vec![255, 0, 128, 255]);
}

proptest! {
    #[test]
    fn byte_codes_survive_decode_encode(v in any::<u8>()) {
        prop_assert_eq!(to_byte(to_unit(v)), v);
    }

    #[test]
    fn encoding_is_idempotent(x in -3.0f32..3.0) {
        let b = to_byte(x);
        prop_assert_eq!(to_byte(to_unit(b)), b);
    }
}
