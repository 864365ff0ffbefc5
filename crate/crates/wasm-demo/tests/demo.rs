use avsync_demo::demo::{bin_of, preview, shift_sweep};

#[test]
fn shift_moves_audio_but_not_video() {
    let p = preview("audio_shift", 10, 4).unwrap();
    assert_eq!(p.original.video, p.distorted.video);
    assert_ne!(p.original.audio, p.distorted.audio);
    assert!((p.seconds_in - p.seconds_out).abs() < 1.0 / p.fps);
}

#[test]
fn unknown_kind_and_level_are_errors() {
    assert!(preview("wobble", 1, 0).is_err());
    assert!(preview("audio_shift", 11, 0).is_err());
    assert!(shift_sweep(1, 0).is_err());
}

#[test]
fn sweep_grows_with_shift() {
    let rows = shift_sweep(8, 2).unwrap();
    assert_eq!(rows.len(), 10);
    let zero = rows.iter().min_by(|a, b| a.level.abs().total_cmp(&b.level.abs())).unwrap();
    let far = rows.iter().max_by(|a, b| a.level.abs().total_cmp(&b.level.abs())).unwrap();
    assert!(far.favd > zero.favd, "{} vs {}", far.favd, zero.favd);
}

#[test]
fn bins_are_contiguous() {
    let mut prev = 0.0;
    for k in 1..=21 {
        let b = bin_of(k as f64 * 5.0 / 21.0);
        assert_eq!(b.bin, k);
        assert_eq!(b.lower, prev);
        prev = b.upper;
    }
}
