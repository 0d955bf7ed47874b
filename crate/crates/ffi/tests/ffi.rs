use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cacovid_ffi::*;

fn last_error() -> String {
    let p = cacovid_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    video: Vec<f64>,
    question: Vec<f64>,
}

impl Fixture {
    const FRAMES: usize = 3;
    const H: usize = 2;
    const W: usize = 2;
    const DIM: usize = 6;

    fn new() -> Self {
        let n_vid = Self::FRAMES * Self::H * Self::W;
        Self {
            video: (0..n_vid * Self::DIM)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                .collect(),
            question: (0..2 * Self::DIM)
                .map(|i| ((i * 13 % 5) as f64 - 2.0) / 3.0)
                .collect(),
        }
    }

    fn grid(&self) -> CacovidGrid {
        CacovidGrid {
            video: self.video.as_ptr(),
            frames: Self::FRAMES,
            height: Self::H,
            width: Self::W,
            question: self.question.as_ptr(),
            n_qst: 2,
            dim: Self::DIM,
        }
    }
}

fn policy(seed: u64) -> *mut CacovidPolicy {
    let mut p = ptr::null_mut();
    let status = unsafe { cacovid_policy_init(Fixture::DIM, 8, seed, &mut p) };
    assert_eq!(status, CacovidStatus::Ok);
    p
}

#[test]
fn scores_survive_save_and_load() {
    let fx = Fixture::new();
    let grid = fx.grid();
    let p = policy(5);
    assert_eq!(unsafe { cacovid_policy_dim(p) }, Fixture::DIM);
    let mut tokens = vec![0.0; 12];
    let mut frames = vec![0.0; 3];
    let status =
        unsafe { cacovid_policy_score(p, &grid, tokens.as_mut_ptr(), frames.as_mut_ptr()) };
    assert_eq!(status, CacovidStatus::Ok);
    assert!(cacovid_last_error().is_null());
    assert!(tokens.iter().chain(&frames).all(|x| x.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { cacovid_policy_save(p, path.as_ptr()) },
        CacovidStatus::Ok
    );
    let mut q = ptr::null_mut();
    assert_eq!(
        unsafe { cacovid_policy_load(path.as_ptr(), &mut q) },
        CacovidStatus::Ok
    );
    let mut again = vec![0.0; 12];
    let mut frames_again = vec![0.0; 3];
    unsafe { cacovid_policy_score(q, &grid, again.as_mut_ptr(), frames_again.as_mut_ptr()) };
    assert_eq!(tokens, again);
    assert_eq!(frames, frames_again);
    unsafe {
        cacovid_policy_free(p);
        cacovid_policy_free(q);
    }
}

#[test]
fn compress_reports_required_capacity() {
    let fx = Fixture::new();
    let grid = fx.grid();
    let p = policy(1);
    let mut written = 0;
    let mut small = [0usize; 2];
    let status = unsafe {
        cacovid_compress(
            p,
            &grid,
            0.5,
            CacovidStrategy::FrameAvg,
            small.as_mut_ptr(),
            2,
            &mut written,
            ptr::null_mut(),
        )
    };
    assert_eq!(status, CacovidStatus::BufferTooSmall);
    assert_eq!(written, 6);

    let mut kept = vec![0usize; written];
    let mut budgets = [0usize; 3];
    let status = unsafe {
        cacovid_compress(
            p,
            &grid,
            0.5,
            CacovidStrategy::FrameAvg,
            kept.as_mut_ptr(),
            kept.len(),
            &mut written,
            budgets.as_mut_ptr(),
        )
    };
    assert_eq!(status, CacovidStatus::Ok);
    assert_eq!(budgets, [2, 2, 2]);
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
    assert!(kept.iter().all(|&j| j < 12));
    unsafe { cacovid_policy_free(p) };
}

#[test]
fn sampling_is_reproducible() {
    let scores = [0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.1, 0.9];
    let draw = |stream| {
        let mut out = [0usize; 2];
        let status =
            unsafe { cacovid_ocss_sample(scores.as_ptr(), 8, 2, 2.0, 9, stream, out.as_mut_ptr()) };
        assert_eq!(status, CacovidStatus::Ok);
        out
    };
    assert_eq!(draw(4), draw(4));
    let d = draw(4);
    assert!(d[0] < d[1] && d[1] < 8);
}

#[test]
fn flops_and_exploration() {
    let mut flops = 0;
    assert_eq!(
        unsafe { cacovid_flops(1, 1, 1, 1, &mut flops) },
        CacovidStatus::Ok
    );
    assert_eq!(flops, 8);
    let status = unsafe { cacovid_flops(u64::MAX, u64::MAX, u64::MAX, 1, &mut flops) };
    assert_eq!(status, CacovidStatus::Overflow);

    let mut e = CacovidExploration::default();
    assert_eq!(
        unsafe { cacovid_exploration_space(8, 2, 2.0, &mut e) },
        CacovidStatus::Ok
    );
    assert_eq!((e.m, e.subspaces), (4, 2));
    assert_eq!(e.log2_arbitrary, 8.0);
    assert!(e.reduction_ratio > 1.0);
}

#[test]
fn errors_are_reported() {
    let fx = Fixture::new();
    let grid = fx.grid();
    let mut t = [0.0; 12];
    let mut f = [0.0; 3];
    let status =
        unsafe { cacovid_policy_score(ptr::null(), &grid, t.as_mut_ptr(), f.as_mut_ptr()) };
    assert_eq!(status, CacovidStatus::NullPointer);
    assert!(last_error().contains("policy"));

    let p = policy(2);
    let mut bad = grid;
    bad.dim = 4;
    let status = unsafe { cacovid_policy_score(p, &bad, t.as_mut_ptr(), f.as_mut_ptr()) };
    assert_eq!(status, CacovidStatus::InvalidArgument);
    assert!(last_error().contains("width"));

    let missing = CString::new("/nonexistent/p.ckpt").unwrap();
    let mut q = ptr::null_mut();
    let status = unsafe { cacovid_policy_load(missing.as_ptr(), &mut q) };
    assert_ne!(status, CacovidStatus::Ok);
    assert!(q.is_null());

    let mut out = [0usize; 3];
    let scores = [1.0, 2.0];
    let status = unsafe { cacovid_ocss_sample(scores.as_ptr(), 2, 3, 2.0, 0, 0, out.as_mut_ptr()) };
    assert_eq!(status, CacovidStatus::InvalidArgument);
    unsafe {
        cacovid_policy_free(p);
        cacovid_policy_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cacovid.h"))
            .unwrap();
    for name in [
        "cacovid_last_error",
        "cacovid_policy_init",
        "cacovid_policy_load",
        "cacovid_policy_save",
        "cacovid_policy_free",
        "cacovid_policy_dim",
        "cacovid_policy_score",
        "cacovid_compress",
        "cacovid_ocss_sample",
        "cacovid_flops",
        "cacovid_exploration_space",
        "typedef struct CacovidPolicy CacovidPolicy",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Directory holding this profile's build outputs, e.g. `target/debug`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = profile_dir().join("libcacovid_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke program failed to build");
    let run = Command::new(&exe).output().unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok 4");
}
