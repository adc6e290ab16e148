//! C interface to `duallqr`.
//!
//! Matrices cross the boundary as row-major `double` arrays. Every function
//! returns a [`DlqrStatus`]; on failure [`dlqr_last_error`] describes the
//! problem for the calling thread. Handles are owned by the caller and must be
//! released with the matching `_free` function.

use duallqr::evaluation::{evaluate_policy, CostMatrices, Policy};
use duallqr::linalg::{Matrix, SymMatrix};
use duallqr::lti::{IdProtocol, LtiSystem, RngStream};
use duallqr::riccati::{drde_cost, drde_solve};
use duallqr::synthesis::{synthesize_dual, synthesize_nominal, synthesize_robust, SynthesisError, SynthesisSpec};
use duallqr::sysid::{coarse_id, UncertaintyModel};
use duallqr::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlqrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// The optimizer did not reach an optimal point.
    SolverFailure = 4,
    /// Identification data could not determine the model.
    RankDeficient = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlqrProgram {
    Nominal = 0,
    Robust = 1,
    Dual = 2,
}

/// True plant `x_{t+1} = A x_t + B u_t + w_t`.
pub struct DlqrSystem(LtiSystem);

/// Nominal estimate plus ellipsoidal uncertainty.
pub struct DlqrModel(UncertaintyModel);

/// Time-varying gains and excitation covariances for `t = 1 … T-1`.
pub struct DlqrPolicy(Policy);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DlqrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        use duallqr::sysid::SysidError;
        let status = match &e {
            Error::Config(_) => DlqrStatus::InvalidArgument,
            Error::Sysid(SysidError::RankDeficient { .. }) => DlqrStatus::RankDeficient,
            Error::Synthesis(SynthesisError::NotSolved { .. } | SynthesisError::AllInfeasible { .. })
            | Error::Sdp(_) => DlqrStatus::SolverFailure,
            Error::Synthesis(SynthesisError::DimensionMismatch(_)) => DlqrStatus::DimensionMismatch,
            Error::Synthesis(SynthesisError::InvalidArgument(_)) => DlqrStatus::InvalidArgument,
            Error::Lti(duallqr::lti::LtiError::DimensionMismatch(_))
            | Error::Eval(duallqr::evaluation::EvalError::DimensionMismatch(_))
            | Error::Riccati(duallqr::riccati::RiccatiError::DimensionMismatch(_))
            | Error::Sysid(SysidError::DimensionMismatch(_)) => DlqrStatus::DimensionMismatch,
            Error::Lti(_) | Error::Eval(_) | Error::Sysid(_) => DlqrStatus::InvalidArgument,
            _ => DlqrStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

macro_rules! from_lib_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
from_lib_error!(
    duallqr::lti::LtiError,
    duallqr::evaluation::EvalError,
    duallqr::riccati::RiccatiError,
    duallqr::sysid::SysidError,
    SynthesisError
);

fn fail<T>(status: DlqrStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DlqrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DlqrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DlqrStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `rows * cols` readable doubles.
unsafe fn read_matrix(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<Matrix, Failure> {
    if p.is_null() {
        return fail(DlqrStatus::NullPointer, format!("{name} is null"));
    }
    let data = std::slice::from_raw_parts(p, rows * cols);
    if data.iter().any(|v| !v.is_finite()) {
        return fail(DlqrStatus::InvalidArgument, format!("{name} has non-finite entries"));
    }
    Ok(Matrix::from_row_slice(rows, cols, data))
}

unsafe fn read_sym(p: *const f64, n: usize, name: &str) -> Result<SymMatrix, Failure> {
    let m = read_matrix(p, n, n, name)?;
    SymMatrix::new(m).or_else(|e| fail(DlqrStatus::InvalidArgument, format!("{name}: {e}")))
}

unsafe fn write_matrix(m: &Matrix, out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return fail(DlqrStatus::NullPointer, "output buffer is null");
    }
    if len < m.len() {
        return fail(
            DlqrStatus::DimensionMismatch,
            format!("output buffer holds {len} doubles, need {}", m.len()),
        );
    }
    let out = std::slice::from_raw_parts_mut(out, m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(DlqrStatus::NullPointer, format!("{name} is null")), Ok)
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(DlqrStatus::NullPointer, "output handle pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dlqr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `a` holds `n_x * n_x` doubles, `b` holds `n_x * n_u`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dlqr_system_new(
    a: *const f64,
    b: *const f64,
    n_x: usize,
    n_u: usize,
    sigma_w2: f64,
    out: *mut *mut DlqrSystem,
) -> DlqrStatus {
    guard(|| {
        if n_x == 0 || n_u == 0 {
            return fail(DlqrStatus::InvalidArgument, "n_x and n_u must be >= 1");
        }
        let sys = LtiSystem::new(read_matrix(a, n_x, n_x, "a")?, read_matrix(b, n_x, n_u, "b")?, sigma_w2)?;
        store(out, DlqrSystem(sys))
    })
}

/// # Safety
/// `sys` is null or a handle from [`dlqr_system_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dlqr_system_free(sys: *mut DlqrSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Runs the identification protocol on `sys` and fits the model.
///
/// # Safety
/// `sys` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dlqr_identify(
    sys: *const DlqrSystem,
    n_rollouts: usize,
    rollout_len: usize,
    sigma_u2: f64,
    delta: f64,
    seed: u64,
    out: *mut *mut DlqrModel,
) -> DlqrStatus {
    guard(|| {
        let sys = deref(sys, "sys")?;
        let protocol = IdProtocol { n_rollouts, rollout_len, sigma_u2 };
        let (_, model) = coarse_id(&sys.0, &protocol, delta, &RngStream::new(seed, 0))?;
        store(out, DlqrModel(model))
    })
}

/// Model from explicit estimates; `d` is `(n_x + n_u)²` doubles.
///
/// # Safety
/// Arrays have the stated sizes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dlqr_model_new(
    a_hat: *const f64,
    b_hat: *const f64,
    d: *const f64,
    n_x: usize,
    n_u: usize,
    delta: f64,
    out: *mut *mut DlqrModel,
) -> DlqrStatus {
    guard(|| {
        if n_x == 0 || n_u == 0 {
            return fail(DlqrStatus::InvalidArgument, "n_x and n_u must be >= 1");
        }
        let model = UncertaintyModel::new(
            read_matrix(a_hat, n_x, n_x, "a_hat")?,
            read_matrix(b_hat, n_x, n_u, "b_hat")?,
            read_sym(d, n_x + n_u, "d")?,
            delta,
        )?;
        store(out, DlqrModel(model))
    })
}

/// Copies `Â` (`n_x²`), `B̂` (`n_x n_u`) and `D` (`(n_x+n_u)²`) into the
/// buffers that are non-null.
///
/// # Safety
/// `model` is a live handle; non-null buffers hold the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dlqr_model_matrices(
    model: *const DlqrModel,
    a_hat: *mut f64,
    b_hat: *mut f64,
    d: *mut f64,
) -> DlqrStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        if !a_hat.is_null() {
            write_matrix(&m.a_hat, a_hat, m.a_hat.len())?;
        }
        if !b_hat.is_null() {
            write_matrix(&m.b_hat, b_hat, m.b_hat.len())?;
        }
        if !d.is_null() {
            let dm = m.d.as_matrix();
            write_matrix(dm, d, dm.len())?;
        }
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dlqr_model_free(model: *mut DlqrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Solves one synthesis program on `model` with weights `q` (`n_x²`) and
/// `r` (`n_u²`). `cost` receives the program objective.
///
/// # Safety
/// Pointers are live and sized as stated; `out` and `cost` are writable.
#[no_mangle]
pub unsafe extern "C" fn dlqr_synthesize(
    model: *const DlqrModel,
    program: DlqrProgram,
    q: *const f64,
    r: *const f64,
    sigma_w2: f64,
    horizon: usize,
    out: *mut *mut DlqrPolicy,
    cost: *mut f64,
) -> DlqrStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        if cost.is_null() {
            return fail(DlqrStatus::NullPointer, "cost is null");
        }
        let cm = CostMatrices::new(read_sym(q, model.n_x(), "q")?, read_sym(r, model.n_u(), "r")?)?;
        let spec = SynthesisSpec::new(model.clone(), cm, sigma_w2, horizon);
        spec.validate()?;
        let res = match program {
            DlqrProgram::Nominal => synthesize_nominal(&spec)?,
            DlqrProgram::Robust => synthesize_robust(&spec)?,
            DlqrProgram::Dual => synthesize_dual(&spec)?,
        };
        *cost = res.j_wc;
        store(out, DlqrPolicy(res.policy))
    })
}

/// Riccati gains for the plant `sys` and the optimal expected cost.
///
/// # Safety
/// As for [`dlqr_synthesize`].
#[no_mangle]
pub unsafe extern "C" fn dlqr_riccati(
    sys: *const DlqrSystem,
    q: *const f64,
    r: *const f64,
    horizon: usize,
    out: *mut *mut DlqrPolicy,
    cost: *mut f64,
) -> DlqrStatus {
    guard(|| {
        let sys = &deref(sys, "sys")?.0;
        if cost.is_null() {
            return fail(DlqrStatus::NullPointer, "cost is null");
        }
        if horizon < 2 {
            return fail(DlqrStatus::InvalidArgument, "horizon must be >= 2");
        }
        let q = read_sym(q, sys.n_x(), "q")?;
        let r = read_sym(r, sys.n_u(), "r")?;
        let sol = drde_solve(&sys.a, &sys.b, &q, &r, horizon)?;
        *cost = drde_cost(&sol, sys.sigma_w2);
        store(out, DlqrPolicy(sol.policy()?))
    })
}

/// Exact expected cost of `policy` on `sys`.
///
/// # Safety
/// As for [`dlqr_synthesize`].
#[no_mangle]
pub unsafe extern "C" fn dlqr_evaluate(
    sys: *const DlqrSystem,
    policy: *const DlqrPolicy,
    q: *const f64,
    r: *const f64,
    cost: *mut f64,
) -> DlqrStatus {
    guard(|| {
        let sys = &deref(sys, "sys")?.0;
        let policy = &deref(policy, "policy")?.0;
        if cost.is_null() {
            return fail(DlqrStatus::NullPointer, "cost is null");
        }
        let cm = CostMatrices::new(read_sym(q, sys.n_x(), "q")?, read_sym(r, sys.n_u(), "r")?)?;
        *cost = evaluate_policy(sys, &cm, policy)?.j_total;
        Ok(())
    })
}

/// Number of decision steps `T - 1`; 0 for a null handle.
///
/// # Safety
/// `policy` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dlqr_policy_len(policy: *const DlqrPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.len())
}

fn check_step(policy: &Policy, t: usize) -> Result<(), Failure> {
    if t == 0 || t > policy.len() {
        return fail(DlqrStatus::InvalidArgument, format!("t = {t} outside 1..={}", policy.len()));
    }
    Ok(())
}

/// Writes `K_t` (`n_u × n_x`, row-major), `1 ≤ t ≤ len`.
///
/// # Safety
/// `policy` is live; `out` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dlqr_policy_gain(
    policy: *const DlqrPolicy,
    t: usize,
    out: *mut f64,
    len: usize,
) -> DlqrStatus {
    guard(|| {
        let p = &deref(policy, "policy")?.0;
        check_step(p, t)?;
        write_matrix(p.gain(t), out, len)
    })
}

/// Writes `S_t` (`n_u × n_u`), `1 ≤ t ≤ len`.
///
/// # Safety
/// `policy` is live; `out` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dlqr_policy_excitation(
    policy: *const DlqrPolicy,
    t: usize,
    out: *mut f64,
    len: usize,
) -> DlqrStatus {
    guard(|| {
        let p = &deref(policy, "policy")?.0;
        check_step(p, t)?;
        write_matrix(p.excitation(t).as_matrix(), out, len)
    })
}

/// # Safety
/// `policy` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dlqr_policy_free(policy: *mut DlqrPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
