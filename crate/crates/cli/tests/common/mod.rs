//! Helpers shared by the integration tests: running the binary and talking
//! HTTP/1.1 to an in-process server.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::process::{Command, Output};
use std::sync::mpsc;
use std::sync::Arc;

use seqmatch::recommend::Recommender;

pub fn cli(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqmatch"));
    cmd.args(args).env_remove("SEQMATCH_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run seqmatch binary")
}

/// Runs the binary and returns stdout, or stderr as the error.
pub fn run_cli(args: &[&str], env: &[(&str, &str)]) -> Result<String, String> {
    let out = cli(args, env);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("seqmatch {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Starts the service on an ephemeral port in a background thread.
pub fn spawn_server(rec: Arc<Recommender>) -> Result<SocketAddr, String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let _ = runtime.block_on(seqmatch_cli::serve(rec, addr, |bound| tx.send(bound).unwrap()));
    });
    rx.recv().map_err(|e| e.to_string())
}

fn exchange(addr: SocketAddr, request: &[u8]) -> Result<(u16, Vec<u8>), String> {
    let mut stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    stream.write_all(request).map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or("response without header terminator")?;
    let head = String::from_utf8_lossy(&raw[..split]);
    let status = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or("bad status line")?;
    Ok((status, raw[split + 4..].to_vec()))
}

pub fn post(addr: SocketAddr, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), String> {
    let mut req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .into_bytes();
    req.extend_from_slice(body);
    exchange(addr, &req)
}

pub fn get(addr: SocketAddr, path: &str) -> Result<(u16, Vec<u8>), String> {
    exchange(addr, format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes())
}
