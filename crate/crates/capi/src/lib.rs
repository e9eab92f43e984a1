//! C ABI for the marginal-correction library.
//!
//! Conventions:
//! - Every constructor returns a status code and writes an opaque handle
//!   through an out-pointer; handles are freed with the matching `_free`.
//! - Strings returned through out-pointers are UTF-8, NUL-terminated and
//!   owned by the caller; release them with [`rm_string_free`].
//! - On any non-OK status, [`rm_last_error_message`] returns a
//!   thread-local description valid until the next failing call on the
//!   same thread.
//!
//! The generated header lives at `include/remargin.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use remargin::continuity::EmpiricalOptions;
use remargin::correction::{multi_marginal_correct, CorrectionOptions, SweepOrder};
use remargin::coupling::{Coupling, MarginalDensity};
use remargin::error::ErrorKind;
use remargin::io;
use remargin::space::ProductSpace;
use remargin::SigmaProfile;

/// Status codes mirroring the CLI exit codes, plus FFI-specific failures.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    Io = 1,
    Validation = 2,
    /// Inputs valid but outside the theorem regime.
    Gate = 3,
    /// A certified bound was violated.
    Bound = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &remargin::Error) -> RmStatus {
    match e.kind() {
        ErrorKind::Io => RmStatus::Io,
        ErrorKind::Validation => RmStatus::Validation,
        ErrorKind::Gate => RmStatus::Gate,
        ErrorKind::Bound => RmStatus::Bound,
    }
}

fn fail(e: &remargin::Error) -> RmStatus {
    set_error(&e.to_string());
    status_of(e)
}

/// Last error message for this thread; empty string when no error has been
/// recorded. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn rm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Release a string returned through an out-pointer.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn rm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque product-space handle.
pub struct RmSpace {
    inner: Arc<ProductSpace>,
}

/// Opaque coupling handle.
pub struct RmCoupling {
    inner: Coupling,
}

/// Opaque marginal-density handle.
pub struct RmMarginal {
    inner: MarginalDensity,
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, RmStatus> {
    if ptr.is_null() {
        set_error("null path pointer");
        return Err(RmStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RmStatus::InvalidUtf8)
        }
    }
}

fn guard<F: FnOnce() -> RmStatus>(f: F) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            RmStatus::Panic
        }
    }
}

/// Load factor space files (in coordinate order) and assemble the product.
///
/// # Safety
/// `paths` must point to `n_paths` valid NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rm_space_load(
    paths: *const *const c_char,
    n_paths: usize,
    out: *mut *mut RmSpace,
) -> RmStatus {
    guard(|| {
        if paths.is_null() || out.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let mut files = Vec::with_capacity(n_paths);
        for i in 0..n_paths {
            match path_from(*paths.add(i)) {
                Ok(p) => files.push(p),
                Err(s) => return s,
            }
        }
        match io::load_product(&files) {
            Ok(space) => {
                *out = Box::into_raw(Box::new(RmSpace { inner: space }));
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `space` must be a live handle from [`rm_space_load`] (or null).
#[no_mangle]
pub unsafe extern "C" fn rm_space_free(space: *mut RmSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Number of factors of a product space; 0 on null.
///
/// # Safety
/// `space` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rm_space_factor_count(space: *const RmSpace) -> usize {
    if space.is_null() {
        return 0;
    }
    (*space).inner.factor_count()
}

/// Load a coupling file over the given product space.
///
/// # Safety
/// Pointer arguments must be valid; `space` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_load(
    path: *const c_char,
    space: *const RmSpace,
    out: *mut *mut RmCoupling,
) -> RmStatus {
    guard(|| {
        if space.is_null() || out.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let p = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match io::load_coupling(&p, (*space).inner.clone()) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(RmCoupling { inner: c }));
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Write a coupling in the structured file format.
///
/// # Safety
/// Pointer arguments must be valid; `coupling` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_save(
    coupling: *const RmCoupling,
    path: *const c_char,
) -> RmStatus {
    guard(|| {
        if coupling.is_null() {
            set_error("null coupling handle");
            return RmStatus::NullPointer;
        }
        let p = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match io::save_coupling(&p, &(*coupling).inner) {
            Ok(()) => RmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `coupling` must be a live handle from this library (or null).
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_free(coupling: *mut RmCoupling) {
    if !coupling.is_null() {
        drop(Box::from_raw(coupling));
    }
}

/// Number of grid cells of a coupling; 0 on null.
///
/// # Safety
/// `coupling` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_cell_count(coupling: *const RmCoupling) -> usize {
    if coupling.is_null() {
        return 0;
    }
    (*coupling).inner.values().len()
}

/// Copy the coupling values (canonical row-major order) into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` doubles; `coupling` must be live.
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_values(
    coupling: *const RmCoupling,
    buf: *mut c_double,
    len: usize,
) -> RmStatus {
    guard(|| {
        if coupling.is_null() || buf.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let values = (*coupling).inner.values();
        if len < values.len() {
            set_error(&format!(
                "buffer of {len} doubles too small for {} values",
                values.len()
            ));
            return RmStatus::Validation;
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        RmStatus::Ok
    })
}

/// Weighted total mass of a coupling; NaN on null.
///
/// # Safety
/// `coupling` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rm_coupling_total_mass(coupling: *const RmCoupling) -> c_double {
    if coupling.is_null() {
        return f64::NAN;
    }
    (*coupling).inner.total_mass()
}

/// Load a marginal file (CSV or structured) for factor `coord`.
///
/// # Safety
/// Pointer arguments must be valid; `space` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_marginal_load(
    path: *const c_char,
    space: *const RmSpace,
    coord: usize,
    out: *mut *mut RmMarginal,
) -> RmStatus {
    guard(|| {
        if space.is_null() || out.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let sp = &(*space).inner;
        if coord >= sp.factor_count() {
            return fail(&remargin::Error::CoordOutOfRange {
                index: coord,
                n: sp.factor_count(),
            });
        }
        let p = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match io::load_marginal(&p, sp.factor_arc(coord)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(RmMarginal { inner: m }));
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `marginal` must be a live handle from this library (or null).
#[no_mangle]
pub unsafe extern "C" fn rm_marginal_free(marginal: *mut RmMarginal) {
    if !marginal.is_null() {
        drop(Box::from_raw(marginal));
    }
}

fn parse_modulus(modulus_json: *const c_char) -> Result<remargin::ModulusConfig, RmStatus> {
    let text = if modulus_json.is_null() {
        r#"{"kind":"empirical"}"#.to_string()
    } else {
        match unsafe { CStr::from_ptr(modulus_json) }.to_str() {
            Ok(s) => s.to_string(),
            Err(_) => {
                set_error("modulus config is not valid UTF-8");
                return Err(RmStatus::InvalidUtf8);
            }
        }
    };
    io::parse_modulus_config(&text).map_err(|e| {
        set_error(&e.to_string());
        status_of(&e)
    })
}

/// Correct a coupling to the given targets (one per coordinate, in order).
///
/// `modulus_json` configures the schedule modulus (null means empirical);
/// `eps_override` replaces the automatic schedule when it is a finite
/// positive value (pass NaN to use the schedule). On success,
/// `out_coupling` receives the corrected coupling and, when
/// `out_report_json` is non-null, a JSON report string.
///
/// # Safety
/// Pointer arguments must be valid; `space`, `coupling` and all `targets`
/// must be live handles.
#[no_mangle]
pub unsafe extern "C" fn rm_correct(
    space: *const RmSpace,
    coupling: *const RmCoupling,
    targets: *const *const RmMarginal,
    n_targets: usize,
    modulus_json: *const c_char,
    eps_override: c_double,
    seed: u64,
    out_coupling: *mut *mut RmCoupling,
    out_report_json: *mut *mut c_char,
) -> RmStatus {
    guard(|| {
        if space.is_null() || coupling.is_null() || targets.is_null() || out_coupling.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let mut target_densities = Vec::with_capacity(n_targets);
        for i in 0..n_targets {
            let t = *targets.add(i);
            if t.is_null() {
                set_error(&format!("target {i} is null"));
                return RmStatus::NullPointer;
            }
            target_densities.push((*t).inner.clone());
        }
        let modulus = match parse_modulus(modulus_json) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let opts = CorrectionOptions {
            modulus,
            eps_override: if eps_override.is_finite() && eps_override > 0.0 {
                Some(eps_override)
            } else {
                None
            },
            order: SweepOrder::Ascending,
            measure_reverse: false,
            empirical: EmpiricalOptions {
                seed,
                ..EmpiricalOptions::default()
            },
        };
        match multi_marginal_correct(&(*coupling).inner, &target_densities, &opts) {
            Ok((corrected, report)) => {
                *out_coupling = Box::into_raw(Box::new(RmCoupling { inner: corrected }));
                if !out_report_json.is_null() {
                    let json = serde_json_string(&report);
                    *out_report_json = CString::new(json).unwrap_or_default().into_raw();
                }
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"serialize_error\":\"{e}\"}}"))
}

/// Evaluate the correction threshold sigma_j(eps) for one coordinate of a
/// coupling, writing the value through `out_sigma`.
///
/// # Safety
/// Pointer arguments must be valid; `space` and `coupling` must be live.
#[no_mangle]
pub unsafe extern "C" fn rm_sigma_eval(
    space: *const RmSpace,
    coupling: *const RmCoupling,
    modulus_json: *const c_char,
    coord: usize,
    eps: c_double,
    seed: u64,
    out_sigma: *mut c_double,
) -> RmStatus {
    guard(|| {
        if space.is_null() || coupling.is_null() || out_sigma.is_null() {
            set_error("null pointer argument");
            return RmStatus::NullPointer;
        }
        let config = match parse_modulus(modulus_json) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let opts = EmpiricalOptions {
            seed,
            ..EmpiricalOptions::default()
        };
        let inner = || -> Result<f64, remargin::Error> {
            let modulus = config.resolve(&(*coupling).inner, &opts)?;
            let marg = (*coupling).inner.marginal_values(coord)?;
            let profile = SigmaProfile::build(&(*space).inner, modulus, coord, &marg)?;
            profile.sigma(eps)
        };
        match inner() {
            Ok(s) => {
                *out_sigma = s;
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::path::Path;

    fn write_fixture(dir: &Path) -> (CString, CString, Vec<CString>) {
        use remargin::space::MarginalSpace;
        use remargin::synth::{perturbed_marginal, smooth_coupling, SmoothCouplingParams};

        let factor = Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 12).unwrap());
        let space = Arc::new(ProductSpace::new(vec![factor.clone(), factor.clone()]).unwrap());
        let p = smooth_coupling(space.clone(), 3, &SmoothCouplingParams::default()).unwrap();
        io::save_space(&dir.join("s0.json"), space.factor(0)).unwrap();
        io::save_space(&dir.join("s1.json"), space.factor(1)).unwrap();
        io::save_coupling(&dir.join("p.json"), &p).unwrap();
        let modulus = remargin::empirical_modulus(&p, &Default::default());
        let amp = (0..2)
            .map(|j| {
                let marg = p.marginal_values(j).unwrap();
                SigmaProfile::build(&space, modulus.clone(), j, &marg)
                    .unwrap()
                    .sigma(0.05)
                    .unwrap()
            })
            .fold(f64::INFINITY, f64::min)
            * 0.5;
        let mut targets = Vec::new();
        for j in 0..2 {
            let t = perturbed_marginal(&p, j, amp, 40 + j as u64).unwrap();
            let path = dir.join(format!("t{j}.csv"));
            io::save_marginal_csv(&path, &t).unwrap();
            targets.push(CString::new(path.to_str().unwrap()).unwrap());
        }
        (
            CString::new(dir.join("s0.json").to_str().unwrap()).unwrap(),
            CString::new(dir.join("p.json").to_str().unwrap()).unwrap(),
            targets,
        )
    }

    #[test]
    fn correct_round_trip_through_the_c_surface() {
        let dir = tempfile::tempdir().unwrap();
        let (s0, coupling_path, target_paths) = write_fixture(dir.path());
        let s1 = CString::new(dir.path().join("s1.json").to_str().unwrap()).unwrap();

        unsafe {
            let space_paths = [s0.as_ptr(), s1.as_ptr()];
            let mut space: *mut RmSpace = std::ptr::null_mut();
            assert_eq!(
                rm_space_load(space_paths.as_ptr(), 2, &mut space),
                RmStatus::Ok
            );
            assert_eq!(rm_space_factor_count(space), 2);

            let mut coupling: *mut RmCoupling = std::ptr::null_mut();
            assert_eq!(
                rm_coupling_load(coupling_path.as_ptr(), space, &mut coupling),
                RmStatus::Ok
            );
            assert!((rm_coupling_total_mass(coupling) - 1.0).abs() < 1e-10);

            let mut marginals: Vec<*mut RmMarginal> = Vec::new();
            for (j, t) in target_paths.iter().enumerate() {
                let mut m: *mut RmMarginal = std::ptr::null_mut();
                assert_eq!(
                    rm_marginal_load(t.as_ptr(), space, j, &mut m),
                    RmStatus::Ok
                );
                marginals.push(m);
            }
            let target_ptrs: Vec<*const RmMarginal> =
                marginals.iter().map(|m| *m as *const RmMarginal).collect();

            let mut sigma = 0.0f64;
            assert_eq!(
                rm_sigma_eval(space, coupling, std::ptr::null(), 0, 0.05, 0, &mut sigma),
                RmStatus::Ok
            );
            assert!(sigma > 0.0);

            let mut corrected: *mut RmCoupling = std::ptr::null_mut();
            let mut report: *mut c_char = std::ptr::null_mut();
            let status = rm_correct(
                space,
                coupling,
                target_ptrs.as_ptr(),
                target_ptrs.len(),
                std::ptr::null(),
                f64::NAN,
                0,
                &mut corrected,
                &mut report,
            );
            assert_eq!(status, RmStatus::Ok, "{:?}", {
                CStr::from_ptr(rm_last_error_message()).to_string_lossy()
            });
            assert!(!report.is_null());
            let text = CStr::from_ptr(report).to_str().unwrap();
            let parsed: serde_json::Value = serde_json::from_str(text).unwrap();
            assert!(parsed["max_marginal_residual"].as_f64().unwrap() <= 1e-10);

            let n = rm_coupling_cell_count(corrected);
            assert_eq!(n, 13 * 13);
            let mut buf = vec![0.0f64; n];
            assert_eq!(
                rm_coupling_values(corrected, buf.as_mut_ptr(), n),
                RmStatus::Ok
            );
            assert!(buf.iter().all(|v| *v >= 0.0));

            let out_path =
                CString::new(dir.path().join("corrected.json").to_str().unwrap()).unwrap();
            assert_eq!(rm_coupling_save(corrected, out_path.as_ptr()), RmStatus::Ok);

            rm_string_free(report);
            rm_coupling_free(corrected);
            for m in marginals {
                rm_marginal_free(m);
            }
            rm_coupling_free(coupling);
            rm_space_free(space);
        }
        assert!(dir.path().join("corrected.json").exists());
    }

    #[test]
    fn errors_surface_with_messages_and_codes() {
        unsafe {
            let bad = CString::new("/no/such/file.json").unwrap();
            let paths = [bad.as_ptr()];
            let mut space: *mut RmSpace = std::ptr::null_mut();
            let status = rm_space_load(paths.as_ptr(), 1, &mut space);
            assert_eq!(status, RmStatus::Io);
            let msg = CStr::from_ptr(rm_last_error_message()).to_string_lossy();
            assert!(msg.contains("no/such/file.json"), "{msg}");

            let mut out: *mut RmCoupling = std::ptr::null_mut();
            assert_eq!(
                rm_coupling_load(bad.as_ptr(), std::ptr::null(), &mut out),
                RmStatus::NullPointer
            );
        }
    }

    #[test]
    fn generated_header_exists_and_names_the_surface() {
        let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/remargin.h");
        let text = std::fs::read_to_string(&header).expect("header generated at build time");
        for symbol in [
            "rm_space_load",
            "rm_coupling_load",
            "rm_marginal_load",
            "rm_correct",
            "rm_sigma_eval",
            "rm_last_error_message",
            "RmStatus",
        ] {
            assert!(text.contains(symbol), "{symbol} missing from header");
        }
    }
}
