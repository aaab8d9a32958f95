use gpmatch::bench::value_noise_texture;
use gpmatch::features::{extract_dense_descriptors, load_feature_file, load_image, save_feature_file, DescriptorParams, FeatureMap, Image};
use gpmatch::linalg::Mat;
use gpmatch::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crop(img: &Image<f64>, r0: usize, c0: usize, h: usize, w: usize) -> Image<f64> {
    Image::from_fn(h, w, |r, c| img.get(r0 + r, c0 + c, 0)).unwrap()
}

/// Cells whose descriptor window stays one pixel clear of the border.
fn interior_cells(fm: &FeatureMap<f64>, h: usize, w: usize) -> Vec<(usize, usize)> {
    let s = fm.stride() as isize;
    let half = 2 * s;
    let ok = |cell: usize, pixels: usize| {
        let centre = cell as isize * s + s / 2;
        centre - half >= 1 && centre + half <= pixels as isize - 2
    };
    (0..fm.height_cells())
        .flat_map(|r| (0..fm.width_cells()).map(move |c| (r, c)))
        .filter(|&(r, c)| ok(r, h) && ok(c, w))
        .collect()
}

#[test]
fn shift_by_one_stride_shifts_cells() {
    let big = value_noise_texture(96, 112, 4).unwrap();
    let s = 8;
    let orig = crop(&big, 0, s, 96, 96);
    let shifted = crop(&big, 0, 0, 96, 96);
    let p = DescriptorParams::default();
    let a = extract_dense_descriptors(&orig, s, &p).unwrap();
    let b = extract_dense_descriptors(&shifted, s, &p).unwrap();
    let inner_b = interior_cells(&b, 96, 96);
    let mut checked = 0;
    for (r, c) in interior_cells(&a, 96, 96) {
        if inner_b.contains(&(r, c + 1)) {
            assert_eq!(a.cell(r, c), b.cell(r, c + 1), "cell ({r}, {c})");
            checked += 1;
        }
    }
    assert!(checked >= 9, "{checked}");
}

#[test]
fn quarter_turn_moves_orientation_bins_by_four() {
    let n = 96;
    let img = value_noise_texture(n, n, 9).unwrap();
    let rot = Image::from_fn(n, n, |r, c| img.get(n - 1 - c, r, 0)).unwrap();
    let p = DescriptorParams::default();
    let (a, b) = (extract_dense_descriptors(&img, 8, &p).unwrap(), extract_dense_descriptors(&rot, 8, &p).unwrap());
    let nc = a.width_cells();
    let bins = p.orientation_bins;
    let per_bin = |fm: &FeatureMap<f64>, r: usize, c: usize| -> Vec<f64> {
        let v = fm.cell(r, c);
        (0..bins).map(|k| (0..p.blocks_per_side * p.blocks_per_side).map(|blk| v[blk * bins + k]).sum()).collect()
    };
    let mut checked = 0;
    for (r, c) in interior_cells(&b, n, n) {
        // rot(r, c) = img(n-1-c, r): cell (r, c) of rot is cell (nc-1-c, r) of img
        let (orow, ocol) = (nc - 1 - c, r);
        let (hb, ha) = (per_bin(&b, r, c), per_bin(&a, orow, ocol));
        for k in 0..bins {
            assert!((hb[(k + bins / 2) % bins] - ha[k]).abs() < 1e-9, "cell ({r}, {c}) bin {k}: {hb:?} vs {ha:?}");
        }
        checked += 1;
    }
    assert!(checked >= 16);
}

#[test]
fn descriptors_are_deterministic_and_unit_norm() {
    let img = value_noise_texture(64, 80, 2).unwrap();
    let p = DescriptorParams::default();
    let a = extract_dense_descriptors(&img, 16, &p).unwrap();
    let b = extract_dense_descriptors(&img.clone(), 16, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height_cells(), a.width_cells(), a.channels()), (4, 5, p.len()));
    for i in 0..a.values().rows() {
        let n: f64 = a.values().row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let single = extract_dense_descriptors(&Image::<f32>::from_fn(32, 32, |r, c| ((r * c) % 7) as f32 / 7.0).unwrap(), 16, &p).unwrap();
    assert_eq!(single.channels(), p.len());
}

#[test]
fn feature_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // 384x512 at stride 16: the exporter's shape contract
    let (h, w, c) = (24, 32, 12);
    let vals = Mat::from_fn(h * w, c, |_, _| rng.random_range(-1.0f32..1.0) as f64);
    let fm = FeatureMap::new(h, w, 16, false, vals).unwrap();
    let path = dir.path().join("a.dkfm");
    save_feature_file(&fm, &path).unwrap();
    let back: FeatureMap<f64> = load_feature_file(&path).unwrap();
    assert_eq!(back, fm);
    let bytes = std::fs::read(&path).unwrap();
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(FeatureMap::<f64>::from_bytes(&bad).unwrap_err(), Error::Format { offset: 0, .. }));
    let mut big = bytes.clone();
    big[16..20].copy_from_slice(&13u32.to_le_bytes());
    match FeatureMap::<f64>::from_bytes(&big).unwrap_err() {
        Error::Format { message, .. } => assert!(message.contains(&format!("expected {} bytes, found {}", h * w * 13 * 4, h * w * c * 4)), "{message}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pnm_files_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::<f64>::from_fn(3, 5, |r, c| (r * 5 + c) as f64 / 14.0).unwrap();
    let path = dir.path().join("x.pgm");
    img.save_pnm(&path).unwrap();
    let back: Image<f64> = load_image(&path).unwrap();
    assert_eq!((back.height(), back.width(), back.channels()), (3, 5, 1));
    for (a, b) in back.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let jpg = dir.path().join("x.jpg");
    std::fs::write(&jpg, [0xff, 0xd8, 0xff, 0xe0, 0, 16]).unwrap();
    assert!(matches!(load_image::<f64>(&jpg).unwrap_err(), Error::UnsupportedFormat(_)));
}
