use std::ffi::{CStr, CString};
use std::ptr;

use augsearch::policy::{self, DepthMode, EvalSettings, MagnitudeDist, PolicyParams};
use augsearch_ffi::*;

fn policy_json(k: usize) -> String {
    let params = PolicyParams::init(k, MagnitudeDist::Uniform, DepthMode::Categorical).unwrap();
    policy::serialize_policy(&params, EvalSettings { temperature_eval: 0.1, sinkhorn_iters: 20 }).unwrap()
}

fn load(k: usize) -> *mut FaugPolicy {
    let json = CString::new(policy_json(k)).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { faug_policy_from_json(json.as_ptr(), &mut h) }, FAUG_OK);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = faug_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image(h: usize, w: usize) -> Vec<f64> {
    (0..3 * h * w).map(|i| (i % 17) as f64 / 16.0).collect()
}

#[test]
fn dims_and_depth_probs() {
    let h = load(3);
    let (mut n, mut k) = (0usize, 0usize);
    unsafe {
        assert_eq!(faug_policy_dims(h, &mut n, &mut k), FAUG_OK);
        assert_eq!((n, k), (14, 3));
        let mut probs = [0.0; 4];
        assert_eq!(faug_policy_depth_probs(h, probs.as_mut_ptr(), 4), FAUG_OK);
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert_eq!(faug_policy_depth_probs(h, probs.as_mut_ptr(), 3), FAUG_ERR_INVALID_ARGUMENT);
        assert!(last_error().contains("need 4"));
        faug_policy_free(h);
    }
}

#[test]
fn augment_is_deterministic_in_seed() {
    let h = load(2);
    let x = image(8, 8);
    let mut a = vec![0.0; x.len()];
    let mut b = vec![0.0; x.len()];
    let mut depths = Vec::new();
    unsafe {
        for seed in 0..20u64 {
            let mut d = usize::MAX;
            assert_eq!(faug_augment_image(h, x.as_ptr(), 3, 8, 8, seed, a.as_mut_ptr(), &mut d), FAUG_OK);
            assert_eq!(faug_augment_image(h, x.as_ptr(), 3, 8, 8, seed, b.as_mut_ptr(), ptr::null_mut()), FAUG_OK);
            assert_eq!(a, b);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(d <= 2);
            depths.push(d);
        }
        faug_policy_free(h);
    }
    assert!(depths.iter().any(|&d| d != depths[0]), "depth never varied: {depths:?}");
}

#[test]
fn augment_in_place() {
    let h = load(1);
    let x = image(6, 5);
    let mut expected = vec![0.0; x.len()];
    let mut buf = x.clone();
    unsafe {
        assert_eq!(faug_augment_image(h, x.as_ptr(), 3, 6, 5, 7, expected.as_mut_ptr(), ptr::null_mut()), FAUG_OK);
        assert_eq!(faug_augment_image(h, buf.as_ptr(), 3, 6, 5, 7, buf.as_mut_ptr(), ptr::null_mut()), FAUG_OK);
        faug_policy_free(h);
    }
    assert_eq!(buf, expected);
}

#[test]
fn error_codes() {
    let h = load(1);
    let x = image(4, 4);
    let mut out = vec![0.0; x.len()];
    unsafe {
        let mut dummy = ptr::null_mut();
        assert_eq!(faug_policy_load(ptr::null(), &mut dummy), FAUG_ERR_NULL);
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/policy.json").unwrap();
        assert_eq!(faug_policy_load(missing.as_ptr(), &mut dummy), FAUG_ERR_IO);
        assert!(dummy.is_null());

        let bad = CString::new("{\"version\": 1}").unwrap();
        assert_eq!(faug_policy_from_json(bad.as_ptr(), &mut dummy), FAUG_ERR_PARSE);

        assert_eq!(faug_augment_image(h, x.as_ptr(), 1, 4, 4, 0, out.as_mut_ptr(), ptr::null_mut()), FAUG_ERR_INVALID_ARGUMENT);
        let mut neg = x.clone();
        neg[0] = -0.5;
        assert_eq!(faug_augment_image(h, neg.as_ptr(), 3, 4, 4, 0, out.as_mut_ptr(), ptr::null_mut()), FAUG_ERR_INVALID_ARGUMENT);
        assert_eq!(faug_augment_image(ptr::null(), x.as_ptr(), 3, 4, 4, 0, out.as_mut_ptr(), ptr::null_mut()), FAUG_ERR_NULL);

        let (mut n, mut k) = (0usize, 0usize);
        assert_eq!(faug_policy_dims(h, &mut n, &mut k), FAUG_OK);
        assert!(faug_last_error_message().is_null());
        faug_policy_free(h);
        faug_policy_free(ptr::null_mut());
    }
}

#[test]
fn load_from_file() {
    let dir = std::env::temp_dir().join(format!("faug-load-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("policy.json");
    std::fs::write(&path, policy_json(2)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(faug_policy_load(c.as_ptr(), &mut h), FAUG_OK);
        faug_policy_free(h);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn transform_names() {
    let names: Vec<String> = (0..14)
        .map(|i| unsafe { CStr::from_ptr(faug_transform_name(i)) }.to_str().unwrap().to_string())
        .collect();
    assert_eq!(names[0], "ShearX");
    assert_eq!(names[4], "Rotate");
    assert_eq!(names[13], "Equalize");
    assert!(faug_transform_name(14).is_null());
}

#[test]
fn header_is_current_and_valid_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/augsearch.h")).unwrap();
    for f in [
        "faug_policy_load",
        "faug_policy_from_json",
        "faug_policy_free",
        "faug_policy_dims",
        "faug_policy_depth_probs",
        "faug_transform_name",
        "faug_augment_image",
        "faug_last_error_message",
        "typedef struct FaugPolicy FaugPolicy",
        "#define FAUG_ERR_PANIC 6",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-include"])
        .arg(dir.join("include/augsearch.h"))
        .arg("/dev/null")
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
