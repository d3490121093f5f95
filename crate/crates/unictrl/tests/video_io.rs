use std::fs;
use std::path::Path;

use unictrl::video_io::{emit_frames, frame_name, grid, load_frames, read_png, write_png};
use unictrl_core::video::Frame;

fn frames(n: usize) -> Vec<Frame> {
    (0..n)
        .map(|i| {
            let mut f = Frame::filled(12, 8, [0.1, 0.2, 0.3]);
            for y in 0..8 {
                f.set_pixel(i % 12, y, [1.0, 0.5 * (y % 2) as f32, 0.0]);
            }
            f
        })
        .collect()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn eight_frames_produce_the_full_file_set() {
    let dir = tempfile::tempdir().unwrap();
    let names = emit_frames(&frames(8), dir.path()).unwrap();
    let mut expected: Vec<String> = (0..8).map(frame_name).collect();
    expected.extend(["grid.png".to_string(), "video.gif".to_string()]);
    assert_eq!(names, expected);
    let mut sorted = expected.clone();
    sorted.sort();
    assert_eq!(listing(dir.path()), sorted);
    assert_eq!(frame_name(0), "frame_000.png");
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_frames(&frames(5), a.path()).unwrap();
    emit_frames(&frames(5), b.path()).unwrap();
    for name in listing(a.path()) {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn png_round_trip_is_exact_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let f = frames(3).remove(2);
    let p = dir.path().join("f.png");
    write_png(&f, &p).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back.to_rgb8(), f.to_rgb8());
    assert!(load_frames(dir.path()).is_err(), "f.png is not a frame_*.png");
}

#[test]
fn load_frames_reads_back_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let src = frames(4);
    emit_frames(&src, dir.path()).unwrap();
    let back = load_frames(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in src.iter().zip(&back) {
        assert_eq!(a.to_rgb8(), b.to_rgb8());
    }
}

#[test]
fn grid_is_horizontal() {
    let g = grid(&frames(3));
    assert_eq!(g.height, 8);
    assert!(g.width >= 36);
}

#[test]
fn gif_is_animated_at_eight_fps() {
    let dir = tempfile::tempdir().unwrap();
    emit_frames(&frames(8), dir.path()).unwrap();
    let mut opts = gif::DecodeOptions::new();
    opts.set_color_output(gif::ColorOutput::RGBA);
    let mut dec = opts.read_info(fs::File::open(dir.path().join("video.gif")).unwrap()).unwrap();
    let mut delays = Vec::new();
    while let Some(frame) = dec.read_next_frame().unwrap() {
        delays.push(frame.delay as u32);
    }
    assert_eq!(delays.len(), 8);
    // centiseconds; 8 frames per second is 12.5 cs per frame
    assert_eq!(delays.iter().sum::<u32>(), 100);
}

#[test]
fn unwritable_target_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    // a regular file where a directory is expected fails even for root
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("video");
    let err = emit_frames(&frames(2), &target).unwrap_err();
    assert_eq!(err.category(), "io");
    assert!(err.to_string().contains("blocker"), "{err}");

    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        // privileged users ignore permission bits; only check when they apply
        if fs::write(ro.join("probe"), b"").is_err() {
            let err = emit_frames(&frames(2), &ro).unwrap_err();
            assert_eq!(err.category(), "io");
            assert!(err.to_string().contains("ro"), "{err}");
        }
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o755)).unwrap();
    }
}
