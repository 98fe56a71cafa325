use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flatproxy"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn mesh_toml() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/mesh.toml")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn csv_rows(out: &str) -> Vec<Vec<String>> {
    out.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn validate_accepts_the_shipped_config() {
    let o = run(&["validate", "--config", mesh_toml().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("ok:"));
}

#[test]
fn validate_rejects_dangling_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    let good = std::fs::read_to_string(mesh_toml()).unwrap();
    std::fs::write(&p, good.replace("cluster = \"svc\"", "cluster = \"ghost\"")).unwrap();
    let o = run(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("ghost"), "{}", text(&o.stderr));
}

#[test]
fn validate_rejects_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.toml");
    std::fs::write(&p, "").unwrap();
    let o = run(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("line 1"), "{}", text(&o.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["sim", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["sim", "--modes", "nginx"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn single_request_sim_reports_stage_sums() {
    let o = run(&["sim", "--modes", "envoy,flatproxy", "--layer", "l4", "--rate", "1"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rows = csv_rows(&text(&o.stdout));
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[0][4].parse::<f64>().unwrap()), ("envoy", 22000.0));
    assert_eq!((rows[1][0].as_str(), rows[1][4].parse::<f64>().unwrap()), ("flatproxy", 7600.0));
    assert!(text(&o.stderr).contains("headline"));
}

#[test]
fn default_sweep_covers_every_mode_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.csv");
    let o = run(&["sim", "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rows = csv_rows(&std::fs::read_to_string(&p).unwrap());
    assert_eq!(rows.len(), 20);
    for m in ["envoy", "sockmap", "toe", "flatproxy"] {
        assert_eq!(rows.iter().filter(|r| r[0] == m).count(), 5, "{m}");
    }
    let stdout = text(&o.stdout);
    assert!(stdout.contains("flatproxy: 5 points"), "{stdout}");

    let rep = run(&["report", "--in", p.to_str().unwrap()]);
    assert!(rep.status.success());
    assert_eq!(text(&rep.stdout), stdout);
}

#[test]
fn same_seed_same_bytes() {
    let args = ["sim", "--layer", "l7", "--rate", "50000,200000", "--seed", "7", "--jitter"];
    let (a, b) = (run(&args), run(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let mut other = args.to_vec();
    other[6] = "8";
    assert_ne!(run(&other).stdout, a.stdout);
}

fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: mesh.local\r\nConnection: close\r\nContent-Length: 0\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    let status = buf.split(' ').nth(1).and_then(|c| c.parse().ok()).unwrap_or(0);
    (status, buf)
}

#[test]
fn live_serves_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mesh.toml");
    let original = std::fs::read_to_string(mesh_toml()).unwrap();
    std::fs::write(&cfg, &original).unwrap();

    let mut child = bin()
        .args(["live", "--config", cfg.to_str().unwrap(), "--listen", "127.0.0.1:0", "--admin", "127.0.0.1:0"])
        .args(["--spawn-stubs", "2", "--duration", "20"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut field = |prefix: &str| -> SocketAddr {
        let l = lines.next().unwrap().unwrap();
        l.strip_prefix(prefix).unwrap_or_else(|| panic!("{l}")).trim().parse().unwrap()
    };
    let listen = field("listening ");
    let admin = field("admin ");

    let (status, body) = http_get(listen, "/api/x");
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("X-Stub: stub-"), "{body}");
    assert_eq!(http_get(listen, "/nowhere").0, 404);

    // Swap the prefix route and reload through the admin socket.
    std::fs::write(&cfg, original.replace("\"/api\"", "\"/v2\"")).unwrap();
    let o = run(&["reload", "--admin", &admin.to_string()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("OK"));
    assert_eq!(http_get(listen, "/api/x").0, 404);
    assert_eq!(http_get(listen, "/v2/x").0, 200);

    // A broken file is refused and the old rules stay.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "listeners = 3").unwrap();
    assert_eq!(run(&["reload", "--admin", &admin.to_string(), "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(http_get(listen, "/v2/x").0, 200);

    child.kill().unwrap();
    child.wait().unwrap();
}
