// SPDX-License-Identifier: MIT OR Apache-2.0

use regforge_web::Session;

#[test]
fn baseline_shows_the_planted_outliers() {
    let s = Session::new(3).unwrap();
    let v = s.baseline().unwrap();
    assert_eq!(v.norms.len(), s.grid() * s.grid());
    assert!(!v.outliers.is_empty());
    assert!(v.register_norms.is_empty());
    assert_eq!(s.image_rgba().len(), 4 * s.image_size() * s.image_size());
}

#[test]
fn shift_puts_the_outlier_on_the_clicked_patch() {
    let mut s = Session::new(5).unwrap();
    for _ in 0..3 {
        let before = s.baseline().unwrap();
        let (row, col) = (0..s.grid())
            .flat_map(|r| (0..s.grid()).map(move |c| (r, c)))
            .find(|p| !before.outliers.contains(p))
            .unwrap();
        let after = s.shift_to(row, col).unwrap();
        assert_eq!(after.outliers, vec![(row, col)]);
        s.next_image().unwrap();
    }
    assert!(s.shift_to(99, 0).is_err());
}

#[test]
fn registers_take_the_outlier_and_the_cls_attention() {
    let s = Session::new(7).unwrap();
    let v = s.add_registers(1).unwrap();
    assert!(v.outliers.is_empty());
    assert!(v.register_norms[0] >= v.threshold);
    assert!(v.cls_attention.iter().all(|&a| a < v.cls_on_registers));
    assert!(s.truth_json().contains("planted"));
}
