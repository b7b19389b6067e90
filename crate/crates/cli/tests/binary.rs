use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_refrank");

fn refrank(args: &[&str], seed_env: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("REFRANK_SEED").env("RUST_LOG", "warn");
    if let Some(s) = seed_env {
        cmd.env("REFRANK_SEED", s);
    }
    cmd.output().unwrap()
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let base = ["eval", "--synth-items", "40", "--turns", "1"];
    let run = |extra: &[&str], env: Option<&str>, name: &str| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        let o = out(name);
        args.extend_from_slice(&["--out", &o]);
        let res = refrank(&args, env);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let config: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(Path::new(&o).join("config.json")).unwrap()).unwrap();
        (config["resolved"]["session"]["seed"].as_u64().unwrap(), std::fs::read(Path::new(&o).join("runs.jsonl")).unwrap())
    };
    let from_env = run(&[], Some("7"), "env");
    let from_flag = run(&["--seed", "7"], None, "flag");
    let default = run(&[], None, "default");
    assert_eq!(from_env, from_flag);
    assert_eq!((from_env.0, default.0), (7, 42));
    assert_ne!(from_env.1, default.1);
}

#[test]
fn bad_flags_fail_cleanly() {
    let res = refrank(&["eval", "--strategy", "afs", "--synth-items", "10"], None);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("--checkpoint"));
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[cfg(unix)]
#[test]
fn serve_answers_health_and_flushes_on_sigterm() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.json");
    let mut child = Command::new(BIN)
        .args(["serve", "--synth-items", "30", "--port", &port.to_string(), "--session-log", log.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let health = loop {
        if let Some(r) = get(port, "/healthz") {
            break r;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(health.starts_with("HTTP/1.1 200"));
    let item = get(port, "/items/img00002").unwrap();
    assert!(item.contains("img00002"));

    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    assert!(exit.success(), "{exit:?}");
    let flushed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(flushed, serde_json::json!([]));
}
