use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use reach_avoid::cache::{self, TubeMeta};
use reach_avoid::engine::{Simulator, Summary};
use reach_avoid::export;
use reach_avoid::games::{self, GameTubes};
use reach_avoid::scenario::{Method, Scenario};
use reach_avoid::Field;

/// Worker threads for the data-parallel tube solves.
const WORKERS_ENV: &str = "RATUBE_WORKERS";

#[derive(Parser)]
#[command(name = "ratube", version, about = "Reach-avoid tubes, defender assignment and game simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Game {
    #[value(name = "1v1")]
    OneVsOne,
    #[value(name = "2v1")]
    TwoVsOne,
}

impl Game {
    fn label(self) -> &'static str {
        match self {
            Game::OneVsOne => "1v1",
            Game::TwoVsOne => "2v1",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mip,
    Matching,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Mip => Method::Mip,
            MethodArg::Matching => Method::Matching,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve a reach-avoid tube and write it to a cache file.
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        game: Game,
        #[arg(long)]
        out: PathBuf,
        /// Converged 1v1 tube, required for the 2v1 game.
        #[arg(long)]
        tube11: Option<PathBuf>,
    },
    /// Report tube membership and the interpolated value at a joint state.
    Query {
        #[arg(long)]
        tube: PathBuf,
        /// Comma-separated joint state: attackers first, then the defender.
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        /// Warn when the tube was built for a different scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run the game loop and write trajectory, summary and frames.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        tube11: PathBuf,
        #[arg(long)]
        tube21: PathBuf,
        /// Defaults to the scenario's method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        out: PathBuf,
        /// Proceed even when the tubes were built for another scenario.
        #[arg(long)]
        force: bool,
        /// Skip SVG frames.
        #[arg(long)]
        no_frames: bool,
    },
    /// Simulate every scenario in a directory with both methods.
    Compare {
        #[arg(long)]
        dir: PathBuf,
        /// Where to look for tube caches; defaults to `dir`.
        #[arg(long)]
        tubes: Option<PathBuf>,
    },
    /// Draw a tube slice or a trajectory frame as SVG.
    Render {
        #[arg(long)]
        scenario: PathBuf,
        /// Tube cache to slice.
        #[arg(long, conflicts_with = "trajectory", required_unless_present = "trajectory")]
        tube: Option<PathBuf>,
        /// Slice template: the joint state with `_` on the two free axes,
        /// e.g. `_,_,0.3,-0.3`.
        #[arg(long, allow_hyphen_values = true, requires = "tube")]
        at: Option<String>,
        /// Also write the slice values as CSV.
        #[arg(long, requires = "tube")]
        csv: Option<PathBuf>,
        /// Trajectory CSV written by `simulate`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Frame index; defaults to the last state.
        #[arg(long, requires = "trajectory")]
        frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Validation(String),
    NonConvergence(String),
    HashMismatch(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::HashMismatch(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::NonConvergence(m) => write!(f, "not converged: {m}"),
            CliError::HashMismatch(m) => write!(f, "hash mismatch: {m}"),
        }
    }
}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    use reach_avoid::scenario::ScenarioError;
    Scenario::load(path).map_err(|e| match e {
        ScenarioError::Io(_) => io_err(path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn load_tube(path: &Path) -> Result<(Field<f32>, Option<TubeMeta>), CliError> {
    use reach_avoid::cache::CacheError;
    let field = cache::load(path).map_err(|e| match e {
        CacheError::Io(_) => io_err(path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })?;
    let meta = match cache::load_meta(path) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("{}: no usable metadata ({e})", path.display());
            None
        }
    };
    Ok((field, meta))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn cmd_solve(scenario: &Path, game: Game, out: &Path, tube11: Option<&Path>) -> Result<(), CliError> {
    let sc = load_scenario(scenario)?;
    let hash = sc.tube_hash();
    let started = std::time::Instant::now();
    let (phi, status) = match game {
        Game::OneVsOne => {
            let sol = games::solve_1v1(&sc, |_| {}).map_err(invalid)?;
            let s = (sol.converged(), sol.steps, sol.time, sol.dt, sol.final_rate);
            (sol.phi.convert::<f32>(), s)
        }
        Game::TwoVsOne => {
            let path = tube11
                .ok_or_else(|| CliError::Validation("the 2v1 game needs --tube11".into()))?;
            let (t11, meta) = load_tube(path)?;
            check_hash(path, meta.as_ref(), &hash)?;
            let sol = games::solve_2v1(&sc, &t11, |_| {}).map_err(invalid)?;
            let s = (sol.converged(), sol.steps, sol.time, sol.dt, sol.final_rate);
            (sol.phi, s)
        }
    };
    let (converged, steps, time, dt, final_rate) = status;
    cache::save(&phi, out).map_err(|e| io_err(out, e))?;
    let meta = TubeMeta {
        hash,
        game: game.label().into(),
        converged,
        steps,
        time,
        dt,
        final_rate,
        seconds: started.elapsed().as_secs_f64(),
    };
    cache::save_meta(&meta, out).map_err(|e| io_err(out, e))?;
    let inside = phi.values().iter().filter(|v| **v <= 0.0).count() as f64 / phi.values().len() as f64;
    println!(
        "{} grid {} nodes, {steps} steps, t={time:.3}, dt={dt:.5}, final max-change/t={final_rate:.3e}, tube fraction {inside:.3}, {:.1}s",
        game.label(),
        phi.values().len(),
        meta.seconds
    );
    if !converged {
        return Err(CliError::NonConvergence(format!(
            "stopped after {steps} steps with max-change/t {final_rate:.3e}; partial tube written to {}",
            out.display()
        )));
    }
    Ok(())
}

fn check_hash(path: &Path, meta: Option<&TubeMeta>, expected: &str) -> Result<(), CliError> {
    match meta {
        Some(m) if m.hash == expected => Ok(()),
        Some(m) => Err(CliError::HashMismatch(format!(
            "{} was built for scenario {} but the scenario hashes to {}",
            path.display(),
            &m.hash[..m.hash.len().min(16)],
            &expected[..16]
        ))),
        None => Err(CliError::HashMismatch(format!(
            "{} has no scenario hash",
            path.display()
        ))),
    }
}

fn parse_coords(text: &str) -> Result<Vec<Option<f64>>, CliError> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            if s == "_" {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| CliError::Validation(format!("coordinate {s:?}: {e}")))
            }
        })
        .collect()
}

fn cmd_query(tube: &Path, state: &str, scenario: Option<&Path>) -> Result<(), CliError> {
    let (field, meta) = load_tube(tube)?;
    let x = parse_coords(state)?
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::Validation("query states cannot have free axes".into()))?;
    let dims = field.grid().dims();
    if x.len() != dims {
        return Err(CliError::Validation(format!(
            "state has {} coordinates for a {dims}-D tube",
            x.len()
        )));
    }
    if let Some(sp) = scenario {
        let sc = load_scenario(sp)?;
        if let Err(e) = check_hash(tube, meta.as_ref(), &sc.tube_hash()) {
            warn!("{e}");
        }
    }
    let s = field.sample(&x);
    let verdict = if s.value <= 0.0 { "in" } else { "out" };
    println!(
        "{verdict} phi={:.6} cell-spread={:.6}{}",
        s.value,
        field.cell_spread(&x),
        if s.clamped { " clamped" } else { "" }
    );
    Ok(())
}

fn load_tubes(
    sc: &Scenario,
    t11: &Path,
    t21: &Path,
    force: bool,
) -> Result<GameTubes, CliError> {
    let hash = sc.tube_hash();
    let (f11, m11) = load_tube(t11)?;
    let (f21, m21) = load_tube(t21)?;
    for (p, m) in [(t11, &m11), (t21, &m21)] {
        if let Err(e) = check_hash(p, m.as_ref(), &hash) {
            if !force {
                return Err(e);
            }
            warn!("{e}; continuing because of --force");
        }
    }
    let tube_hash = m11.map(|m| m.hash).unwrap_or_default();
    GameTubes::new(f11, f21, tube_hash).map_err(invalid)
}

fn summary_line(s: &Summary) -> String {
    let times = |v: &[Option<f64>]| {
        v.iter()
            .map(|t| t.map_or("-".to_string(), |t| format!("{t:.3}")))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "captured {} arrived {} active {} capture-times [{}] arrival-times [{}]{}",
        s.captured,
        s.arrived,
        s.active,
        times(&s.capture_times),
        times(&s.arrival_times),
        if s.timed_out { " timed-out" } else { "" }
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    scenario: &Path,
    tube11: &Path,
    tube21: &Path,
    method: Option<Method>,
    out: &Path,
    force: bool,
    frames: bool,
) -> Result<(), CliError> {
    let sc = load_scenario(scenario)?;
    let tubes = load_tubes(&sc, tube11, tube21, force)?;
    let sim = Simulator::unchecked(&sc, &tubes)
        .map_err(invalid)?
        .with_method(method.unwrap_or(sc.sim.method));
    let traj = sim.run().map_err(invalid)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("trajectory.csv"), export::trajectory_csv(&traj.states))?;
    write(
        &out.join("summary.json"),
        export::summary_json(&traj.summary).map_err(invalid)?,
    )?;
    if frames {
        let dir = out.join("frames");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for k in export::frame_indices(traj.states.len(), sc.sim.frame_stride) {
            let svg = export::frame_svg(&sc, &traj.states, k);
            write(&dir.join(format!("frame_{k:05}.svg")), svg)?;
        }
    }
    let d = &traj.summary.diagnostics;
    info!(
        "guarantee slack 1v1 {} ({} violations of {}), 2v1 {} ({} of {}), fallback steps {}, clamped moves {}",
        slack(d.single.worst_slack),
        d.single.violations,
        d.single.checks,
        slack(d.pair.worst_slack),
        d.pair.violations,
        d.pair.checks,
        d.fallback_steps,
        d.clamped_moves
    );
    println!("{}", summary_line(&traj.summary));
    Ok(())
}

fn slack(s: Option<f64>) -> String {
    s.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Cache files in `dir` whose metadata names `hash` and `game`.
fn find_tube(dir: &Path, hash: &str, game: &str) -> Result<Option<PathBuf>, CliError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            continue;
        }
        if let Ok(m) = cache::load_meta(&p) {
            if m.hash == hash && m.game == game && m.converged {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found.into_iter().next())
}

fn cmd_compare(dir: &Path, tubes: Option<&Path>) -> Result<(), CliError> {
    let tube_dir = tubes.unwrap_or(dir);
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!(
            "no scenario files in {}",
            dir.display()
        )));
    }
    println!("{:<24} {:>3} {:>3} {:>4} {:>9} {:>5}", "scenario", "M", "N", "mip", "matching", "ok");
    let mut all_ok = true;
    for f in files {
        let sc = load_scenario(&f)?;
        let hash = sc.tube_hash();
        let missing = |g| CliError::Validation(format!("no converged {g} tube for {} in {}", f.display(), tube_dir.display()));
        let t11 = find_tube(tube_dir, &hash, "1v1")?.ok_or_else(|| missing("1v1"))?;
        let t21 = find_tube(tube_dir, &hash, "2v1")?.ok_or_else(|| missing("2v1"))?;
        let tubes = load_tubes(&sc, &t11, &t21, false)?;
        let sim = Simulator::unchecked(&sc, &tubes).map_err(invalid)?;
        let mip = sim.with_method(Method::Mip).run().map_err(invalid)?.summary;
        let sim = Simulator::unchecked(&sc, &tubes).map_err(invalid)?;
        let mat = sim.with_method(Method::Matching).run().map_err(invalid)?.summary;
        let ok = mip.captured >= mat.captured;
        all_ok &= ok;
        let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!(
            "{name:<24} {:>3} {:>3} {:>4} {:>9} {:>5}",
            mip.attackers,
            mip.defenders,
            mip.captured,
            mat.captured,
            if ok { "yes" } else { "NO" }
        );
    }
    if !all_ok {
        warn!("matching captured more than the MIP in some scenario");
    }
    Ok(())
}

/// Players whose coordinates are both fixed in the template, split into
/// attackers and defenders. The last pair belongs to the defender.
fn markers(template: &[Option<f64>]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let players = template.len() / 2;
    let (mut a, mut d) = (Vec::new(), Vec::new());
    for p in 0..players {
        if let (Some(x), Some(y)) = (template[2 * p], template[2 * p + 1]) {
            if p + 1 == players {
                d.push([x, y]);
            } else {
                a.push([x, y]);
            }
        }
    }
    (a, d)
}

fn cmd_render_tube(
    sc: &Scenario,
    tube: &Path,
    at: Option<&str>,
    csv: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let (field, _) = load_tube(tube)?;
    let at = at.ok_or_else(|| CliError::Validation("rendering a tube needs --at".into()))?;
    let tpl = parse_coords(at)?;
    let dims = field.grid().dims();
    let free: Vec<usize> = (0..tpl.len()).filter(|&k| tpl[k].is_none()).collect();
    if tpl.len() != dims || free.len() != 2 {
        return Err(CliError::Validation(format!(
            "slice spec needs {dims} entries with exactly two `_`"
        )));
    }
    let template: Vec<f64> = tpl.iter().map(|v| v.unwrap_or(0.0)).collect();
    let slice = games::tube_slice(&field, &template, (free[0], free[1])).map_err(invalid)?;
    let (attackers, defenders) = markers(&tpl);
    write(out, export::slice_svg(sc, &slice, &attackers, &defenders))?;
    if let Some(p) = csv {
        write(p, export::slice_csv(&slice))?;
    }
    println!("{} contour polylines", slice.contour.len());
    Ok(())
}

fn cmd_render_frame(sc: &Scenario, trajectory: &Path, frame: Option<usize>, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(trajectory).map_err(|e| io_err(trajectory, e))?;
    let states = export::parse_trajectory_csv(&text).map_err(invalid)?;
    if states.is_empty() {
        return Err(CliError::Validation("empty trajectory".into()));
    }
    let k = frame.unwrap_or(states.len() - 1);
    if k >= states.len() {
        return Err(CliError::Validation(format!(
            "frame {k} out of range (trajectory has {} states)",
            states.len()
        )));
    }
    write(out, export::frame_svg(sc, &states, k))
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("{WORKERS_ENV}={v:?} is not a positive count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(invalid)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    match cli.command {
        Command::Solve {
            scenario,
            game,
            out,
            tube11,
        } => cmd_solve(&scenario, game, &out, tube11.as_deref()),
        Command::Query {
            tube,
            state,
            scenario,
        } => cmd_query(&tube, &state, scenario.as_deref()),
        Command::Simulate {
            scenario,
            tube11,
            tube21,
            method,
            out,
            force,
            no_frames,
        } => cmd_simulate(
            &scenario,
            &tube11,
            &tube21,
            method.map(Method::from),
            &out,
            force,
            !no_frames,
        ),
        Command::Compare { dir, tubes } => cmd_compare(&dir, tubes.as_deref()),
        Command::Render {
            scenario,
            tube,
            at,
            csv,
            trajectory,
            frame,
            out,
        } => {
            let sc = load_scenario(&scenario)?;
            match (tube, trajectory) {
                (Some(t), _) => cmd_render_tube(&sc, &t, at.as_deref(), csv.as_deref(), &out),
                (None, Some(tr)) => cmd_render_frame(&sc, &tr, frame, &out),
                (None, None) => Err(CliError::Validation("render needs --tube or --trajectory".into())),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
