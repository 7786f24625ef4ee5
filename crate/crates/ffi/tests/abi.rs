use std::ffi::{CStr, CString};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::ptr;
use std::time::Duration;
use steerflow_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        sf_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn scene(json: &str) -> *mut SfScene {
    let text = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sf_scene_from_json(text.as_ptr(), &mut out) }, SfStatus::Ok);
    out
}

const PERIODIC: &str = r#"{"params":{"tau":0.8,"body_force":[1e-5,0.0],"inflow_velocity":[0,0]},
    "plan":{"base_resolution":[16,16]},"boundary":"periodic"}"#;

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn bad_json_reports_a_parse_error() {
    let text = CString::new("{not json").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sf_scene_from_json(text.as_ptr(), &mut out) }, SfStatus::ParseError);
    assert!(out.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { sf_scene_from_json(ptr::null(), &mut out) }, SfStatus::NullPointer);
}

#[test]
fn solver_conserves_mass_through_the_abi() {
    let sc = scene(PERIODIC);
    let mut solver = ptr::null_mut();
    unsafe {
        assert_eq!(sf_solver_new(sc, 0, &mut solver), SfStatus::Ok);
        let (mut nx, mut ny) = (0, 0);
        assert_eq!(sf_solver_size(solver, &mut nx, &mut ny), SfStatus::Ok);
        assert_eq!((nx, ny), (16, 16));
        let mut m0 = 0.0;
        sf_solver_total_mass(solver, &mut m0);
        assert_eq!(sf_solver_step(solver, 100), SfStatus::Ok);
        let mut m1 = 0.0;
        sf_solver_total_mass(solver, &mut m1);
        assert!(((m1 - m0) / m0).abs() < 1e-12);

        let mut ux = vec![0.0; nx * ny];
        assert_eq!(sf_solver_field(solver, 1, ux.as_mut_ptr(), ux.len()), SfStatus::Ok);
        assert!(ux.iter().all(|&v| v > 0.0));
        assert_eq!(sf_solver_field(solver, 1, ux.as_mut_ptr(), 3), SfStatus::BufferTooSmall);
        assert_eq!(sf_solver_field(solver, 9, ux.as_mut_ptr(), ux.len()), SfStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("ux.stlb").to_str().unwrap()).unwrap();
        assert_eq!(sf_solver_write_dump(solver, 1, path.as_ptr()), SfStatus::Ok);
        let bytes = std::fs::read(dir.path().join("ux.stlb")).unwrap();
        assert_eq!(&bytes[..4], b"STLB");
        assert_eq!(bytes.len(), 4 + 16 + 8 * nx * ny);

        sf_solver_free(solver);
        sf_scene_free(sc);
    }
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(sf_solver_step(ptr::null_mut(), 1), SfStatus::NullPointer);
        let mut m = 0.0;
        assert_eq!(sf_solver_total_mass(ptr::null(), &mut m), SfStatus::NullPointer);
        sf_solver_free(ptr::null_mut());
        sf_scene_free(ptr::null_mut());
        sf_server_free(ptr::null_mut());
    }
}

#[test]
fn server_starts_and_answers_http() {
    let sc = scene(r#"{"plan":{"base_resolution":[16,16],"max_level":0}}"#);
    let token = CString::new("secret").unwrap();
    let mut server = ptr::null_mut();
    unsafe {
        assert_eq!(sf_server_start(sc, 0, 0, 2, 1, token.as_ptr(), &mut server), SfStatus::Ok, "{}", last_error());
        let (mut port, mut ws_port) = (0, 0);
        sf_server_ports(server, &mut port, &mut ws_port);
        assert!(port != 0 && ws_port != 0);
        let mut http = TcpStream::connect(("127.0.0.1", ws_port)).unwrap();
        http.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        http.write_all(b"GET /steer?token=wrong HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n").unwrap();
        let mut reply = String::new();
        http.read_to_string(&mut reply).unwrap();
        assert!(reply.starts_with("HTTP/1.1 401"), "{reply}");
        sf_server_free(server);
        sf_scene_free(sc);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/steerflow.h")).unwrap();
    for name in [
        "SF_STATUS_OK",
        "typedef struct SfScene SfScene",
        "sf_scene_from_json",
        "sf_solver_new",
        "sf_solver_field",
        "sf_server_start",
        "sf_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
