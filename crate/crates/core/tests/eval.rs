//! IoU examples and prediction grids.

use semseg_core::data::{read_ppm, ClassMask};
use semseg_core::eval::{class_color, miou, render_grid};
use semseg_core::Array3;

#[test]
fn four_by_four_half_overlap() {
    // ground-truth foreground: 5 pixels; predicted foreground: 4 pixels, 3 shared
    let gt_fg = [0, 1, 2, 5, 6];
    let pred_fg = [1, 2, 6, 10];
    let build = |fg: &[usize]| {
        let mut v = vec![0u8; 16];
        for &p in fg {
            v[p] = 1;
        }
        ClassMask::new(4, 4, v).unwrap()
    };
    let (per, _) = miou(&build(&pred_fg), &build(&gt_fg), 2).unwrap();
    let inter = pred_fg.iter().filter(|p| gt_fg.contains(p)).count();
    let mut union: Vec<usize> = gt_fg.iter().chain(&pred_fg).copied().collect();
    union.sort();
    union.dedup();
    assert_eq!((inter, union.len()), (3, 6));
    assert_eq!(per[1], Some(inter as f64 / union.len() as f64));
    assert_eq!(per[1], Some(0.5));
}

#[test]
fn grid_file_has_tiled_dims_and_stable_palette() {
    let img = Array3::filled(64, 64, 3, 0.25);
    let gt = ClassMask::filled(64, 64, 3);
    let pred = ClassMask::filled(64, 64, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.ppm");
    render_grid(&[img.clone(), img], &[gt.clone(), gt], &[pred.clone(), pred], &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!(back.dims(), (128, 192, 3));
    let px = |r, c| [0, 1, 2].map(|ch| (back.get(r, c, ch) * 255.0).round() as u8);
    assert_eq!(px(70, 64 + 5), class_color(3));
    assert_eq!(px(3, 128 + 9), class_color(1));
    assert_eq!(class_color(3), class_color(3));
    assert!(render_grid(&[], &[], &[], &path).is_err());
}
