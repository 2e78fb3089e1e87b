//! C ABI over the simulator: opaque handles, integer error codes, no
//! panics across the boundary.
//!
//! Error codes: 0 ok, 1 invalid argument or config, 2 runtime failure,
//! 3 null pointer.

use csefsl::bounds::{client_bound, server_bound, BoundInputs};
use csefsl::config::ExperimentConfig;
use csefsl::ledger::{analytic_comm, analytic_storage, CostModel, Method};
use csefsl::split::{build_cifar10_arch, build_dense_arch, build_femnist_arch, AuxKind, SplitArchitecture};
use std::ffi::CStr;
use std::os::raw::{c_char, c_double, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};

pub const CSEFSL_OK: c_int = 0;
pub const CSEFSL_EINVAL: c_int = 1;
pub const CSEFSL_ERUNTIME: c_int = 2;
pub const CSEFSL_ENULL: c_int = 3;

/// Opaque architecture handle.
pub struct CsefslArch {
    inner: SplitArchitecture,
}

fn err_code(e: &csefsl::Error) -> c_int {
    match e {
        csefsl::Error::InvalidConfig(_) | csefsl::Error::Config { .. } | csefsl::Error::Plan(_) => {
            CSEFSL_EINVAL
        }
        _ => CSEFSL_ERUNTIME,
    }
}

fn guarded<F: FnOnce() -> c_int>(f: F) -> c_int {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(CSEFSL_ERUNTIME)
}

fn aux_kind(aux: c_int, channels: usize) -> Option<AuxKind> {
    match aux {
        0 => Some(AuxKind::Mlp),
        1 => Some(AuxKind::CnnMlp { channels }),
        _ => None,
    }
}

fn method_from(code: c_int) -> Option<Method> {
    match code {
        0 => Some(Method::FslMc),
        1 => Some(Method::FslOc),
        2 => Some(Method::FslAn),
        3 => Some(Method::CseFsl),
        _ => None,
    }
}

/// Builds an architecture. `kind`: 0 dense (uses `dim`, `cut`, `hidden`,
/// `classes`), 1 cifar10, 2 femnist. `aux`: 0 mlp, 1 cnn-mlp with
/// `aux_channels`. Returns null on invalid arguments.
#[no_mangle]
pub extern "C" fn csefsl_arch_new(
    kind: c_int,
    aux: c_int,
    aux_channels: usize,
    dim: usize,
    cut: usize,
    hidden: usize,
    classes: usize,
) -> *mut CsefslArch {
    let Some(aux) = aux_kind(aux, aux_channels) else {
        return std::ptr::null_mut();
    };
    let arch = match kind {
        0 => {
            if dim == 0 || cut == 0 || hidden == 0 || classes < 2 {
                return std::ptr::null_mut();
            }
            build_dense_arch(dim, cut, hidden, classes)
        }
        1 => build_cifar10_arch(aux),
        2 => build_femnist_arch(aux),
        _ => return std::ptr::null_mut(),
    };
    if arch.validate().is_err() {
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(CsefslArch { inner: arch }))
}

/// Frees a handle returned by `csefsl_arch_new`. Null is a no-op.
#[no_mangle]
pub extern "C" fn csefsl_arch_free(arch: *mut CsefslArch) {
    if !arch.is_null() {
        drop(unsafe { Box::from_raw(arch) });
    }
}

/// Parameter counts: `which` selects 0 client, 1 aux, 2 server, 3 cut size.
#[no_mangle]
pub extern "C" fn csefsl_arch_param_count(
    arch: *const CsefslArch,
    which: c_int,
    out: *mut usize,
) -> c_int {
    if arch.is_null() || out.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| {
        let a = unsafe { &(*arch).inner };
        let v = match which {
            0 => a.client_params(),
            1 => a.aux_params(),
            2 => a.server_params(),
            3 => a.cut_size(),
            _ => return CSEFSL_EINVAL,
        };
        unsafe { *out = v };
        CSEFSL_OK
    })
}

fn cost_model(q: f64, alpha: f64, w: f64, a: f64, d: f64, n: f64, h: f64) -> CostModel {
    CostModel { q, alpha, w_size: w, a_size: a, d_size: d, n, h }
}

/// Closed-form per-epoch communication. `method`: 0 fsl_mc, 1 fsl_oc,
/// 2 fsl_an, 3 cse_fsl.
#[no_mangle]
pub extern "C" fn csefsl_analytic_comm(
    method: c_int,
    q: c_double,
    alpha: c_double,
    w: c_double,
    a: c_double,
    d: c_double,
    n: c_double,
    h: c_double,
    out: *mut c_double,
) -> c_int {
    if out.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| {
        let Some(m) = method_from(method) else { return CSEFSL_EINVAL };
        match analytic_comm(m, &cost_model(q, alpha, w, a, d, n, h)) {
            Ok(v) => {
                unsafe { *out = v };
                CSEFSL_OK
            }
            Err(e) => err_code(&e),
        }
    })
}

/// Closed-form peak server storage; same encoding as `csefsl_analytic_comm`.
#[no_mangle]
pub extern "C" fn csefsl_analytic_storage(
    method: c_int,
    q: c_double,
    alpha: c_double,
    w: c_double,
    a: c_double,
    d: c_double,
    n: c_double,
    h: c_double,
    out: *mut c_double,
) -> c_int {
    if out.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| {
        let Some(m) = method_from(method) else { return CSEFSL_EINVAL };
        match analytic_storage(m, &cost_model(q, alpha, w, a, d, n, h)) {
            Ok(v) => {
                unsafe { *out = v };
                CSEFSL_OK
            }
            Err(e) => err_code(&e),
        }
    })
}

fn bound_inputs(
    l: f64,
    g1: f64,
    g2: f64,
    h: f64,
    n: f64,
    t: f64,
    delta_c: f64,
    delta_s: f64,
    d_sum: f64,
) -> BoundInputs {
    BoundInputs { l, g1, g2, h, n, t, delta_c, delta_s, d_sum }
}

/// Client-side convergence bound.
#[no_mangle]
pub extern "C" fn csefsl_client_bound(
    l: c_double,
    g1: c_double,
    h: c_double,
    t: c_double,
    delta_c: c_double,
    out: *mut c_double,
) -> c_int {
    if out.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| match client_bound(&bound_inputs(l, g1, 0.0, h, 1.0, t, delta_c, 0.0, 0.0)) {
        Ok(v) => {
            unsafe { *out = v };
            CSEFSL_OK
        }
        Err(e) => err_code(&e),
    })
}

/// Server-side convergence bound.
#[no_mangle]
pub extern "C" fn csefsl_server_bound(
    l: c_double,
    g2: c_double,
    n: c_double,
    t: c_double,
    delta_s: c_double,
    d_sum: c_double,
    out: *mut c_double,
) -> c_int {
    if out.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| match server_bound(&bound_inputs(l, 0.0, g2, 1.0, n, t, 0.0, delta_s, d_sum)) {
        Ok(v) => {
            unsafe { *out = v };
            CSEFSL_OK
        }
        Err(e) => err_code(&e),
    })
}

/// Runs a full experiment from a TOML config path. Writes nothing; returns
/// the final test accuracy, cumulative communication units, and peak
/// storage units. `seed_override` < 0 keeps the config's seed.
#[no_mangle]
pub extern "C" fn csefsl_run_config(
    config_path: *const c_char,
    seed_override: i64,
    out_top1: *mut c_double,
    out_comm: *mut c_double,
    out_storage: *mut c_double,
) -> c_int {
    if config_path.is_null() || out_top1.is_null() || out_comm.is_null() || out_storage.is_null() {
        return CSEFSL_ENULL;
    }
    guarded(|| {
        let path = match unsafe { CStr::from_ptr(config_path) }.to_str() {
            Ok(p) => p,
            Err(_) => return CSEFSL_EINVAL,
        };
        let mut cfg = match ExperimentConfig::from_path(std::path::Path::new(path)) {
            Ok(c) => c,
            Err(e) => return err_code(&e),
        };
        if seed_override >= 0 {
            cfg.run.seed = seed_override as u64;
        }
        let result = (|| -> csefsl::Result<(f64, f64, usize)> {
            let run_cfg = cfg.run_config()?;
            let arch = cfg.architecture();
            let (train, test) = cfg.load_datasets()?;
            let shards = cfg.shards(&train)?;
            let mut profiles = cfg.client_profiles(run_cfg.seed)?;
            let mut world = csefsl::algo::WorldState::init(arch, &run_cfg)?;
            let trace =
                csefsl::algo::run(&mut world, &run_cfg, &shards, &train, &test, &mut profiles)?;
            let last = trace.metrics.last().expect("rounds >= 1");
            Ok((last.test_top1, last.comm_cumulative_units, trace.peak_storage_units))
        })();
        match result {
            Ok((top1, comm, storage)) => {
                unsafe {
                    *out_top1 = top1;
                    *out_comm = comm;
                    *out_storage = storage as c_double;
                }
                CSEFSL_OK
            }
            Err(e) => err_code(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_handle_roundtrip() {
        let arch = csefsl_arch_new(1, 0, 0, 0, 0, 0, 0);
        assert!(!arch.is_null());
        let mut v = 0usize;
        assert_eq!(csefsl_arch_param_count(arch, 0, &mut v), CSEFSL_OK);
        assert_eq!(v, 107_328);
        assert_eq!(csefsl_arch_param_count(arch, 2, &mut v), CSEFSL_OK);
        assert_eq!(v, 960_970);
        csefsl_arch_free(arch);
    }

    #[test]
    fn null_and_invalid_codes() {
        assert!(csefsl_arch_new(9, 0, 0, 0, 0, 0, 0).is_null());
        let mut v = 0.0;
        assert_eq!(csefsl_client_bound(1.0, 1.0, 1.0, 100.0, 1.0, std::ptr::null_mut()), CSEFSL_ENULL);
        assert_eq!(csefsl_analytic_comm(7, 1.0, 0.5, 1.0, 0.0, 1.0, 1.0, 1.0, &mut v), CSEFSL_EINVAL);
        assert_eq!(csefsl_client_bound(0.0, 1.0, 1.0, 100.0, 1.0, &mut v), CSEFSL_EINVAL);
    }

    #[test]
    fn bound_hand_values() {
        let mut v = 0.0;
        assert_eq!(csefsl_client_bound(1.0, 1.0, 1.0, 100.0, 1.0, &mut v), CSEFSL_OK);
        assert!((v - 0.6).abs() < 1e-12);
        assert_eq!(csefsl_server_bound(1.0, 1.0, 1.0, 100.0, 1.0, 0.0, &mut v), CSEFSL_OK);
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn table_row_hand_value() {
        let mut v = 0.0;
        assert_eq!(
            csefsl_analytic_comm(3, 2.0, 0.5, 100.0, 10.0, 20.0, 5.0, 5.0, &mut v),
            CSEFSL_OK
        );
        assert_eq!(v, 590.0);
    }
}
