use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reach_avoid::cache;
use reach_avoid::export;
use reach_avoid::scenario::Scenario;
use reach_avoid::{Field, Grid};

fn ratube(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratube"))
        .args(args)
        .env("RATUBE_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// The default environment on grids small enough for a test.
fn small() -> Scenario {
    let mut s = Scenario::default_environment();
    s.solver.points_1v1 = 11;
    s.solver.points_2v1 = 6;
    s.solver.policy_points = 41;
    s.sim.max_time = 1.0;
    s
}

fn write_scenario(dir: &Path, name: &str, s: &Scenario) -> PathBuf {
    let p = dir.join(name);
    s.save(&p).unwrap();
    p
}

/// Scenario file plus solved 1v1 and 2v1 tubes.
fn solved(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let sc = write_scenario(dir, "game.toml", &small());
    let t11 = dir.join("t11.bin");
    let t21 = dir.join("t21.bin");
    let s = sc.to_str().unwrap();
    let o = ratube(&["solve", "--scenario", s, "--game", "1v1", "--out", t11.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ratube(&[
        "solve",
        "--scenario",
        s,
        "--game",
        "2v1",
        "--tube11",
        t11.to_str().unwrap(),
        "--out",
        t21.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (sc, t11, t21)
}

#[test]
fn solve_query_simulate_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, t11, t21) = solved(dir.path());
    let meta = cache::load_meta(&t11).unwrap();
    assert_eq!(meta.hash, small().tube_hash());
    assert!(meta.converged);
    assert_eq!(cache::load(&t21).unwrap().grid().dims(), 6);

    // Query agrees with a direct library evaluation.
    let tube = cache::load(&t11).unwrap();
    let x = [0.7, 0.2, -0.6, -0.6];
    let o = ratube(&["query", "--tube", t11.to_str().unwrap(), "--state", "0.7,0.2,-0.6,-0.6"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let want = tube.interpolate(&x);
    let verdict = if want <= 0.0 { "in" } else { "out" };
    assert!(out.starts_with(&format!("{verdict} phi={want:.6}")), "{out}");
    let o = ratube(&["query", "--tube", t11.to_str().unwrap(), "--state", "0.7,0.2"]);
    assert_eq!(code(&o), 2);

    // Simulation writes the trajectory, summary and frames.
    let run = dir.path().join("run");
    let o = ratube(&[
        "simulate",
        "--scenario",
        sc.to_str().unwrap(),
        "--tube11",
        t11.to_str().unwrap(),
        "--tube21",
        t21.to_str().unwrap(),
        "--method",
        "matching",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = export::parse_summary_json(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!(stdout(&o).starts_with(&format!(
        "captured {} arrived {}",
        summary.captured, summary.arrived
    )));
    let csv = fs::read_to_string(run.join("trajectory.csv")).unwrap();
    let states = export::parse_trajectory_csv(&csv).unwrap();
    assert_eq!(states.len(), summary.steps + 1);
    assert_eq!(export::trajectory_csv(&states), csv);
    let frames = fs::read_dir(run.join("frames")).unwrap().count();
    assert_eq!(frames, export::frame_indices(states.len(), 8).len());

    // Rendering is byte-deterministic.
    let traj = run.join("trajectory.csv");
    let render = |out: &Path| {
        ratube(&[
            "render",
            "--scenario",
            sc.to_str().unwrap(),
            "--trajectory",
            traj.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    assert_eq!(code(&render(&a)), 0);
    assert_eq!(code(&render(&b)), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let last = fs::read_dir(run.join("frames")).unwrap().map(|e| e.unwrap().path()).max().unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(last).unwrap());

    let slice = dir.path().join("slice.svg");
    let slice_csv = dir.path().join("slice.csv");
    let o = ratube(&[
        "render",
        "--scenario",
        sc.to_str().unwrap(),
        "--tube",
        t11.to_str().unwrap(),
        "--at",
        "_,_,0.3,-0.3",
        "--csv",
        slice_csv.to_str().unwrap(),
        "--out",
        slice.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(&slice).unwrap();
    assert!(svg.contains(r#"class="contour""#));
    assert_eq!(svg.matches(r#"class="defender""#).count(), 1);
    assert_eq!(fs::read_to_string(&slice_csv).unwrap().lines().count(), 1 + 11 * 11);
    let o = ratube(&[
        "render",
        "--scenario",
        sc.to_str().unwrap(),
        "--tube",
        t11.to_str().unwrap(),
        "--at",
        "_,0.1,0.3,-0.3",
        "--out",
        slice.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resolving_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.toml", &small());
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for out in [&a, &b] {
        let o = ratube(&["solve", "--scenario", sc.to_str().unwrap(), "--game", "1v1", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, t11, t21) = solved(dir.path());

    // Validation: unknown key and a player inside an obstacle.
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&sc).unwrap().replace("[sim]\n", "[sim]\nwind = 2\n")).unwrap();
    let o = ratube(&["solve", "--scenario", bad.to_str().unwrap(), "--game", "1v1", "--out", "x.bin"]);
    assert_eq!(code(&o), 2);
    let mut s = small();
    s.players.defenders = vec![[0.0, -0.5]];
    let bad = write_scenario(dir.path(), "inside.toml", &s);
    let o = ratube(&["solve", "--scenario", bad.to_str().unwrap(), "--game", "1v1", "--out", "x.bin"]);
    assert_eq!(code(&o), 2);
    let o = ratube(&["solve", "--scenario", sc.to_str().unwrap(), "--game", "2v1", "--out", "x.bin"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&ratube(&["solve", "--bogus"])), 2);

    // Non-convergence still writes the partial tube.
    let mut s = small();
    s.solver.max_steps = 5;
    let short = write_scenario(dir.path(), "short.toml", &s);
    let partial = dir.path().join("partial.bin");
    let o = ratube(&["solve", "--scenario", short.to_str().unwrap(), "--game", "1v1", "--out", partial.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(!cache::load_meta(&partial).unwrap().converged);

    // Hash mismatch is fatal unless forced.
    let mut s = small();
    s.players.capture_radius = 0.12;
    let other = write_scenario(dir.path(), "other.toml", &s);
    let args = |force: bool| {
        let mut v = vec![
            "simulate".to_string(),
            "--scenario".into(),
            other.to_str().unwrap().into(),
            "--tube11".into(),
            t11.to_str().unwrap().into(),
            "--tube21".into(),
            t21.to_str().unwrap().into(),
            "--out".into(),
            dir.path().join("forced").to_str().unwrap().into(),
            "--no-frames".into(),
        ];
        if force {
            v.push("--force".into());
        }
        v
    };
    let run = |force| {
        let a = args(force);
        ratube(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(code(&run(false)), 4);
    assert_eq!(code(&run(true)), 0);

    let o = Command::new(env!("CARGO_BIN_EXE_ratube"))
        .args(["query", "--tube", t11.to_str().unwrap(), "--state", "0,0,0,0"])
        .env("RATUBE_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_reports_one_row_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    solved(dir.path());
    let o = ratube(&["compare", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{out}");
    let cols: Vec<&str> = rows[0].split_whitespace().collect();
    assert_eq!(cols[0], "game");
    assert_eq!(&cols[1..3], ["2", "1"]);
    assert_eq!(cols[5], "yes");

    let empty = tempfile::tempdir().unwrap();
    fs::copy(dir.path().join("game.toml"), empty.path().join("game.toml")).unwrap();
    let o = ratube(&["compare", "--dir", empty.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn constant_positive_tube_renders_without_contour() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.toml", &small());
    let g = Grid::uniform(4, -1.0, 1.0, 5).unwrap();
    let tube = dir.path().join("pos.bin");
    cache::save(&Field::<f32>::constant(g, 1.0).unwrap(), &tube).unwrap();
    let out = dir.path().join("pos.svg");
    let o = ratube(&[
        "render",
        "--scenario",
        sc.to_str().unwrap(),
        "--tube",
        tube.to_str().unwrap(),
        "--at",
        "_,_,0.3,-0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(!fs::read_to_string(&out).unwrap().contains("<path"));
}
