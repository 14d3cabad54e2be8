use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use faithsplat::fixtures::random_scene;
use faithsplat::persist::{save_cloud, CloudFormat};
use faithsplat::rasterizer::render;
use faithsplat_ffi::*;

fn to_ffi(cam: &faithsplat::scene::Camera) -> FsCamera {
    let mut rotation = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            rotation[3 * r + c] = cam.rotation[(r, c)];
        }
    }
    FsCamera {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width as u32,
        height: cam.height as u32,
        rotation,
        translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        timestamp: cam.timestamp as u32,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fs_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn loaded_scene_renders_like_the_library() {
    let (scene, cam) = random_scene(3, 12, 20, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.fsplat");
    save_cloud(&scene.cloud, &scene.tracks, &scene.sky, &path, CloudFormat::Binary).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle: *mut FsScene = ptr::null_mut();
    assert_eq!(unsafe { fs_scene_load(cpath.as_ptr(), &mut handle) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_scene_len(handle) }, 12);

    let fc = to_ffi(&cam);
    let n = cam.pixel_count();
    let (mut color, mut depth) = (vec![0.0; 3 * n], vec![0.0; n]);
    let status = unsafe {
        fs_render(handle, &fc, color.as_mut_ptr(), color.len(), depth.as_mut_ptr(), depth.len(), ptr::null_mut(), 0)
    };
    assert_eq!(status, FsStatus::Ok);
    let expected = render(&scene, &cam, cam.timestamp).unwrap();
    assert_eq!(color, expected.color.data);
    assert_eq!(depth, expected.depth.data);

    let mut ledger: *mut FsLedger = ptr::null_mut();
    assert_eq!(unsafe { fs_ledger_build(handle, &fc, 1, &mut ledger) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_ledger_len(ledger) }, 12);
    let (mut raw, mut norm, mut scale) = (vec![0.0; n], vec![0.0; n], -1.0);
    let status = unsafe {
        fs_eig_map(handle, ledger, &fc, raw.as_mut_ptr(), n, norm.as_mut_ptr(), n, &mut scale)
    };
    assert_eq!(status, FsStatus::Ok);
    assert!(scale >= 0.0);
    assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));

    unsafe {
        fs_ledger_free(ledger);
        fs_scene_free(handle);
    }
}

#[test]
fn errors_set_status_and_message() {
    let missing = CString::new("/nonexistent/dir/s.fsplat").unwrap();
    let mut handle: *mut FsScene = ptr::null_mut();
    assert_eq!(unsafe { fs_scene_load(missing.as_ptr(), &mut handle) }, FsStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().starts_with("io:"), "{}", last_error());

    assert_eq!(unsafe { fs_scene_load(ptr::null(), &mut handle) }, FsStatus::NullPointer);
    assert!(last_error().contains("path"));

    let sky = [0.0; 3];
    assert_eq!(
        unsafe { fs_scene_from_params(ptr::null(), 0, 3, sky.as_ptr(), &mut handle) },
        FsStatus::InvalidArgument
    );
    assert_eq!(fs_param_dim(3), 0);
}

#[test]
fn small_buffers_and_bad_cameras_are_rejected() {
    let dim = fs_param_dim(0);
    let mut block = vec![0.0; dim];
    block[2] = 3.0;
    block[3] = 1.0;
    block[7..10].fill(0.1f64.ln());
    let sky = [0.2, 0.3, 0.4];
    let mut handle: *mut FsScene = ptr::null_mut();
    assert_eq!(unsafe { fs_scene_from_params(block.as_ptr(), 1, 0, sky.as_ptr(), &mut handle) }, FsStatus::Ok);

    let cam = fs_camera_looking_forward(8, 8, 10.0);
    let mut color = vec![0.0; 10];
    let status = unsafe { fs_render(handle, &cam, color.as_mut_ptr(), color.len(), ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(status, FsStatus::BufferTooSmall);

    let mut color = vec![0.0; 3 * 64];
    let status = unsafe { fs_render(handle, &cam, ptr::null_mut(), 0, ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(status, FsStatus::NullPointer);

    let bad = FsCamera { fx: 0.0, ..cam };
    let status = unsafe { fs_render(handle, &bad, color.as_mut_ptr(), color.len(), ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(status, FsStatus::InvalidArgument);

    let status = unsafe { fs_render(handle, &cam, color.as_mut_ptr(), color.len(), ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(status, FsStatus::Ok);
    // the Gaussian sits on the optical axis, corners show sky
    assert!((color[0] - 0.2).abs() < 1e-9);
    unsafe { fs_scene_free(handle) };
    unsafe { fs_scene_free(ptr::null_mut()) };
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(fs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/faithsplat.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["fs_render", "fs_eig_map", "fs_ledger_build", "fs_last_error_message", "FS_STATUS_BUFFER_TOO_SMALL"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
