use dmtd_core::bench::PassKind;
use dmtd_web::{mask, plt_points, schedule};

#[test]
fn mask_view() {
    assert_eq!(mask(9, 3, 0).unwrap(), vec![1, 0, 0, 1, 0, 0, 1, 0, 0]);
    assert!(mask(4, 0, 0).is_err());
}

#[test]
fn plt_view_for_a_36_layer_model() {
    let pts = plt_points(0, 28, 8, "embedding", 4).unwrap();
    assert_eq!(pts[0].fraction, "1/1");
    assert_eq!(pts[2].fraction, "13/27");
    assert!((pts[2].speedup - 108.0 / 52.0).abs() < 1e-12);
    assert!(plt_points(0, 28, 8, "bogus", 4).is_err());
}

#[test]
fn schedule_view_shows_refill() {
    let v = schedule(1, 2, 1, "embedding", 3, 4, 6, 0).unwrap();
    let kinds: Vec<PassKind> = v.passes.iter().map(|p| p.kind).collect();
    use PassKind::*;
    assert_eq!(kinds, vec![Prefill, Light, Light, Boundary, Light, Light]);
    assert_eq!(v.passes[3].stages[1], vec![4, 5, 6]);
    assert_eq!(v.passes[3].stages[2], vec![6]);
    // After the second light pass, positions 4 and 5 wait for refill in
    // the three lower layers and are filled in the top one.
    let occ = &v.passes[2].occupancy;
    assert_eq!(&occ[0][4..6], "oo");
    assert_eq!(&occ[3][4..6], "##");
    assert_eq!(v.measured_plt, v.theoretical_plt);
    let last = &v.passes[5].occupancy;
    assert_eq!(&last[0][7..9], "oo");
}
