//! C ABI over the coavoid library.
//!
//! Every fallible call returns a [`CoavoidStatus`]; on failure the message is
//! available from [`coavoid_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new` / `*_start` / `*_generate` and released
//! with the matching `*_free` / `*_stop`. Strings handed out by the library
//! must be released with [`coavoid_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::{Ipv4Addr, SocketAddr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use coavoid::devicelog::{validate_timestamp, DeviceLog, ExchangeRecord};
use coavoid::edgeserver::wire::{spawn, ServeConfig, ServerHandle};
use coavoid::edgeserver::EdgeState;
use coavoid::filter::{dedupe_policy, encode_upload, filter_and_recombine};
use coavoid::finematch::protocol::{
    decide, encrypt_anchor, make_diameter_pair, respond, AnchorSecrets, FixedPoint, Heading,
    Verdict,
};
use coavoid::finematch::{gen_params, FineGrainParams, FineMatchError, ParamSpec};
use coavoid::geocell::{CellDigest, CellIndexer, GeoPoint, HexGrid, Region};
use coavoid::keysched::{interval_of, CoarseTime, DailyTracingKey, Rpi};
use coavoid::sim::{self, FileConfig, SimConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoavoidStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ConstraintViolation = 3,
    Io = 4,
    Parse = 5,
    Internal = 6,
}

struct Fail(CoavoidStatus, String);

impl Fail {
    fn invalid(msg: impl ToString) -> Self {
        Fail(CoavoidStatus::InvalidArgument, msg.to_string())
    }
}

impl From<FineMatchError> for Fail {
    fn from(e: FineMatchError) -> Self {
        let code = match e {
            FineMatchError::ConstraintViolation { .. } | FineMatchError::UnsupportedSpec(_) => {
                CoavoidStatus::ConstraintViolation
            }
            FineMatchError::CoordinateOverflow => CoavoidStatus::InvalidArgument,
            _ => CoavoidStatus::Internal,
        };
        Fail(code, e.to_string())
    }
}

impl From<sim::SimError> for Fail {
    fn from(e: sim::SimError) -> Self {
        let code = match e {
            sim::SimError::Io(_) => CoavoidStatus::Io,
            sim::SimError::ConfigInvalid(_) | sim::SimError::ScenarioInvalid(_) => {
                CoavoidStatus::InvalidArgument
            }
            _ => CoavoidStatus::Internal,
        };
        Fail(code, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(CoavoidStatus::Io, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CoavoidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CoavoidStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside coavoid");
            CoavoidStatus::Internal
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| Fail(CoavoidStatus::NullArgument, format!("{what} is null")))
}

fn nonnull_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| Fail(CoavoidStatus::NullArgument, format!("{what} is null")))
}

fn read16(p: *const u8, what: &str) -> Result<[u8; 16], Fail> {
    nonnull(p, what)?;
    let mut out = [0u8; 16];
    unsafe { ptr::copy_nonoverlapping(p, out.as_mut_ptr(), 16) };
    Ok(out)
}

fn read32(p: *const u8, what: &str) -> Result<[u8; 32], Fail> {
    nonnull(p, what)?;
    let mut out = [0u8; 32];
    unsafe { ptr::copy_nonoverlapping(p, out.as_mut_ptr(), 32) };
    Ok(out)
}

fn write_bytes(dst: *mut u8, src: &[u8], what: &str) -> Result<(), Fail> {
    nonnull_mut(dst, what)?;
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) };
    Ok(())
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    nonnull(p, what)?;
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::invalid(format!("{what} is not UTF-8")))
}

fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    let slot = nonnull_mut(out, "out")?;
    let c = CString::new(s).map_err(|_| Fail(CoavoidStatus::Internal, "interior NUL".into()))?;
    *slot = c.into_raw();
    Ok(())
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    let slot = nonnull_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn drop_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn coavoid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn coavoid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned through an `out` parameter.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------- keys

/// Writes the 16-byte identifier broadcast in `interval` (1..=96) under the
/// daily key `dtk` (16 bytes).
///
/// # Safety
/// `dtk` must point to 16 readable bytes and `out` to 16 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn coavoid_rpi(dtk: *const u8, interval: u32, out: *mut u8) -> CoavoidStatus {
    guard(|| {
        let key = DailyTracingKey::from_bytes(0, read16(dtk, "dtk")?);
        let rpi = key.rpi_for(interval).map_err(Fail::invalid)?;
        write_bytes(out, rpi.rpi.as_bytes(), "out")
    })
}

/// Splits a UTC timestamp into a day index and an interval in 1..=96.
///
/// # Safety
/// `day` and `interval` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_interval_of(
    timestamp: u64,
    day: *mut u32,
    interval: *mut u32,
) -> CoavoidStatus {
    guard(|| {
        let (d, i) = interval_of(timestamp);
        *nonnull_mut(day, "day")? = d;
        *nonnull_mut(interval, "interval")? = i;
        Ok(())
    })
}

/// Sets `*valid` to whether an identifier issued for (`day`, `interval`)
/// may have been heard at `heard_at`.
///
/// # Safety
/// `valid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_validate_timestamp(
    heard_at: u64,
    day: u32,
    interval: u32,
    valid: *mut bool,
) -> CoavoidStatus {
    guard(|| {
        let claimed = CoarseTime::new(day, interval).map_err(Fail::invalid)?;
        let e = ExchangeRecord {
            timestamp: heard_at,
            rpi: Rpi([0; 16]),
            cell_digest: CellDigest([0; 32]),
            rssi: 0,
        };
        *nonnull_mut(valid, "valid")? = validate_timestamp(&e, claimed);
        Ok(())
    })
}

// ---------------------------------------------------------------- geocell

pub struct CoavoidGrid {
    grid: HexGrid,
}

/// Creates a hexagonal grid over a square region of `extent_deg` degrees.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_grid_new(
    lat: f64,
    lon: f64,
    extent_deg: f64,
    out: *mut *mut CoavoidGrid,
) -> CoavoidStatus {
    guard(|| {
        let c = GeoPoint::new(lat, lon).map_err(Fail::invalid)?;
        let region = Region::new(c, extent_deg).map_err(Fail::invalid)?;
        put(out, CoavoidGrid { grid: HexGrid::new(region) })
    })
}

/// # Safety
/// `grid` must come from `coavoid_grid_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_grid_free(grid: *mut CoavoidGrid) {
    drop_handle(grid)
}

/// Writes the 32-byte digest of the cell holding (`lat`, `lon`).
///
/// # Safety
/// `grid` must be a live handle and `out` must have 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn coavoid_grid_digest(
    grid: *const CoavoidGrid,
    lat: f64,
    lon: f64,
    resolution: u8,
    out: *mut u8,
) -> CoavoidStatus {
    guard(|| {
        let g = nonnull(grid, "grid")?;
        let p = GeoPoint::new(lat, lon).map_err(Fail::invalid)?;
        let d = g.grid.hide_location(&p, resolution).map_err(Fail::invalid)?;
        write_bytes(out, d.as_bytes(), "out")
    })
}

// ---------------------------------------------------------------- device log

pub struct CoavoidLog {
    log: DeviceLog,
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_new(out: *mut *mut CoavoidLog) -> CoavoidStatus {
    guard(|| put(out, CoavoidLog { log: DeviceLog::new() }))
}

/// # Safety
/// `log` must come from `coavoid_log_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_free(log: *mut CoavoidLog) {
    drop_handle(log)
}

/// Records one of the device's own broadcasts.
///
/// # Safety
/// `log` must be live; `rpi` must point to 16 bytes.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_broadcast(
    log: *mut CoavoidLog,
    timestamp: u64,
    rpi: *const u8,
) -> CoavoidStatus {
    guard(|| {
        let l = nonnull_mut(log, "log")?;
        l.log.record_broadcast(timestamp, Rpi(read16(rpi, "rpi")?));
        Ok(())
    })
}

/// Records a received beacon together with the cell it was heard in.
///
/// # Safety
/// `log` must be live; `rpi` must point to 16 bytes and `digest` to 32.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_exchange(
    log: *mut CoavoidLog,
    timestamp: u64,
    rpi: *const u8,
    digest: *const u8,
    rssi: i32,
) -> CoavoidStatus {
    guard(|| {
        let l = nonnull_mut(log, "log")?;
        let rpi = Rpi(read16(rpi, "rpi")?);
        let d = CellDigest(read32(digest, "digest")?);
        l.log.record_exchange(timestamp, rpi, d, rssi);
        Ok(())
    })
}

/// Number of records (broadcasts plus exchanges) currently held.
///
/// # Safety
/// `log` must be live and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_len(log: *const CoavoidLog, len: *mut usize) -> CoavoidStatus {
    guard(|| {
        *nonnull_mut(len, "len")? = nonnull(log, "log")?.log.len();
        Ok(())
    })
}

/// Builds the patient upload for this log: one line per distinct
/// (time, cell, own identifier). Release with `coavoid_string_free`.
///
/// # Safety
/// `log` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_log_upload(
    log: *const CoavoidLog,
    out: *mut *mut c_char,
) -> CoavoidStatus {
    guard(|| {
        let l = &nonnull(log, "log")?.log;
        let recs = filter_and_recombine(l.exchanges(), l.broadcasts())
            .map_err(|e| Fail(CoavoidStatus::InvalidArgument, e.to_string()))?;
        hand_out(encode_upload(&dedupe_policy(&recs)), out)
    })
}

// ---------------------------------------------------------------- fine match

pub struct CoavoidParams {
    params: FineGrainParams,
}

/// Generates fresh public parameters. Fails with
/// `COAVOID_STATUS_CONSTRAINT_VIOLATION` when the bit lengths cannot
/// guarantee recovery.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_params_generate(
    k1: u32,
    k2: u32,
    k3: u32,
    k4: u32,
    coord_bits: u32,
    seed: u64,
    out: *mut *mut CoavoidParams,
) -> CoavoidStatus {
    guard(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = gen_params(ParamSpec::new(k1, k2, k3, k4, coord_bits), &mut rng)?;
        put(out, CoavoidParams { params })
    })
}

/// # Safety
/// `params` must come from `coavoid_params_generate` or be null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_params_free(params: *mut CoavoidParams) {
    drop_handle(params)
}

/// Runs both sides of the encrypted point-in-circle check in process and
/// sets `*inside` when the user lies strictly within `radius` of the anchor.
/// Coordinates are non-negative fixed-point units below 2^coord_bits.
///
/// # Safety
/// `params` must be live and `inside` writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_fine_check(
    params: *const CoavoidParams,
    anchor_x: u64,
    anchor_y: u64,
    radius: u64,
    user_x: u64,
    user_y: u64,
    seed: u64,
    inside: *mut bool,
) -> CoavoidStatus {
    guard(|| {
        let p = &nonnull(params, "params")?.params;
        let slot = nonnull_mut(inside, "inside")?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pair = make_diameter_pair(
            FixedPoint::new(anchor_x, anchor_y),
            radius,
            Heading::EAST,
            p.spec.coord_bits,
        )?;
        let (anchor, key) = loop {
            match encrypt_anchor(p, AnchorSecrets::generate(p, &mut rng), &pair) {
                Err(FineMatchError::SanityCheckFailed) => continue,
                other => break other?,
            }
        };
        let (resp, _) = respond(p, &anchor, &FixedPoint::new(user_x, user_y), &mut rng)?;
        *slot = decide(p, &key, &resp)? == Verdict::Inside;
        Ok(())
    })
}

// ---------------------------------------------------------------- server

pub struct CoavoidServer {
    handle: ServerHandle,
}

/// Starts the edge server on `port` (0 picks a free port) on all
/// interfaces, publishing every `epoch_seconds`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coavoid_server_start(
    port: u16,
    epoch_seconds: u64,
    retention_days: u32,
    out: *mut *mut CoavoidServer,
) -> CoavoidStatus {
    guard(|| {
        if epoch_seconds == 0 {
            return Err(Fail::invalid("epoch_seconds must be positive"));
        }
        nonnull_mut(out, "out")?;
        let handle = spawn(
            Arc::new(EdgeState::new(retention_days)),
            ServeConfig {
                bind: SocketAddr::from((Ipv4Addr::UNSPECIFIED, port)),
                epoch_seconds,
            },
        )?;
        put(out, CoavoidServer { handle })
    })
}

/// Port the server is listening on, or 0 for a null handle.
///
/// # Safety
/// `server` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_server_port(server: *const CoavoidServer) -> u16 {
    server.as_ref().map_or(0, |s| s.handle.addr().port())
}

/// Stops the server and releases the handle.
///
/// # Safety
/// `server` must come from `coavoid_server_start` or be null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_server_stop(server: *mut CoavoidServer) {
    if !server.is_null() {
        Box::from_raw(server).handle.shutdown();
    }
}

// ---------------------------------------------------------------- simulation

/// Runs a simulation configured by the TOML file at `config_path` (null for
/// defaults), writes the metrics files into `out_dir` and hands back the
/// totals as JSON through `summary` (may be null).
///
/// # Safety
/// String arguments must be NUL-terminated; `summary` writable or null.
#[no_mangle]
pub unsafe extern "C" fn coavoid_sim_run(
    config_path: *const c_char,
    out_dir: *const c_char,
    summary: *mut *mut c_char,
) -> CoavoidStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            SimConfig::default()
        } else {
            FileConfig::load(Path::new(c_str(config_path, "config_path")?))
                .map_err(|e| Fail(CoavoidStatus::Parse, e.to_string()))?
                .sim_config()
        };
        let out = c_str(out_dir, "out_dir")?;
        let result = sim::simulate(&cfg)?;
        sim::emit_metrics(&result.report, Some(&result.timing), Path::new(out))?;
        if !summary.is_null() {
            let json = serde_json::to_string(&result.report.totals)
                .map_err(|e| Fail(CoavoidStatus::Internal, e.to_string()))?;
            hand_out(json, summary)?;
        }
        Ok(())
    })
}
