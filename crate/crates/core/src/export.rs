//! Trajectory, summary and slice exports: CSV, JSON and SVG.
//!
//! SVG output is written with fixed-precision coordinates and a fixed element
//! order so identical inputs give identical bytes.

use std::fmt::Write as _;

use thiserror::Error;

use crate::assignment::AssignmentResult;
use crate::engine::{Event, SimState, Status, Summary};
use crate::games::Slice;
use crate::geometry::Shape;
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn csv_err(line: usize, msg: impl Into<String>) -> ExportError {
    ExportError::Csv {
        line,
        msg: msg.into(),
    }
}

/// Header row for a game with `m` attackers and `n` defenders.
pub fn trajectory_header(m: usize, n: usize) -> String {
    let mut cols = vec!["step".to_string(), "time".to_string()];
    for i in 0..m {
        cols.push(format!("a{i}_x"));
        cols.push(format!("a{i}_y"));
        cols.push(format!("a{i}_status"));
    }
    for j in 0..n {
        cols.push(format!("d{j}_x"));
        cols.push(format!("d{j}_y"));
    }
    cols.push("assignment".into());
    cols.join(",")
}

fn status_cell(state: &SimState, i: usize) -> String {
    match state.status[i] {
        Status::Active => "active".into(),
        Status::Arrived => "arrived".into(),
        Status::Captured => {
            let by = state.events.iter().find_map(|e| match *e {
                Event::Captured {
                    attacker, defender, ..
                } if attacker == i => Some(defender),
                _ => None,
            });
            format!("captured:{}", by.expect("capture event recorded"))
        }
    }
}

/// One row per state. Floats use the shortest round-tripping form, and the
/// assignment column lists `attacker:defender` pairs separated by `;`.
pub fn trajectory_csv(states: &[SimState]) -> String {
    let Some(first) = states.first() else {
        return String::new();
    };
    let (m, n) = (first.attackers.len(), first.defenders.len());
    let mut out = trajectory_header(m, n);
    out.push('\n');
    for s in states {
        let mut cols = vec![s.step.to_string(), s.time.to_string()];
        for i in 0..m {
            cols.push(s.attackers[i][0].to_string());
            cols.push(s.attackers[i][1].to_string());
            cols.push(status_cell(s, i));
        }
        for d in &s.defenders {
            cols.push(d[0].to_string());
            cols.push(d[1].to_string());
        }
        let pairs: Vec<String> = s
            .assignment
            .pairs()
            .iter()
            .map(|(i, j)| format!("{i}:{j}"))
            .collect();
        cols.push(pairs.join(";"));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Inverse of [`trajectory_csv`]. Events are rebuilt from status changes.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<SimState>, ExportError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').collect();
    let m = cols.iter().filter(|c| c.ends_with("_status")).count();
    let n = cols.iter().filter(|c| c.starts_with('d') && c.ends_with("_x")).count();
    if header != trajectory_header(m, n) {
        return Err(csv_err(1, "unrecognised header"));
    }
    let mut states: Vec<SimState> = Vec::new();
    for (k, line) in lines {
        let ln = k + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(csv_err(ln, format!("{} fields, expected {}", f.len(), cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| csv_err(ln, format!("{s:?}: {e}")));
        let step = f[0]
            .parse::<usize>()
            .map_err(|e| csv_err(ln, format!("step: {e}")))?;
        let time = num(f[1])?;
        let mut attackers = Vec::with_capacity(m);
        let mut status = Vec::with_capacity(m);
        let mut captors = Vec::with_capacity(m);
        for i in 0..m {
            let c = 2 + 3 * i;
            attackers.push([num(f[c])?, num(f[c + 1])?]);
            let (st, by) = match f[c + 2] {
                "active" => (Status::Active, None),
                "arrived" => (Status::Arrived, None),
                other => match other.strip_prefix("captured:").map(str::parse::<usize>) {
                    Some(Ok(j)) if j < n => (Status::Captured, Some(j)),
                    _ => return Err(csv_err(ln, format!("bad status {other:?}"))),
                },
            };
            status.push(st);
            captors.push(by);
        }
        let mut defenders = Vec::with_capacity(n);
        for j in 0..n {
            let c = 2 + 3 * m + 2 * j;
            defenders.push([num(f[c])?, num(f[c + 1])?]);
        }
        let mut assignment = AssignmentResult::empty(m, n);
        let cell = f[f.len() - 1];
        if !cell.is_empty() {
            for p in cell.split(';') {
                let (i, j) = p
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                    .filter(|&(i, j)| i < m && j < n)
                    .ok_or_else(|| csv_err(ln, format!("bad pair {p:?}")))?;
                assignment.e[i][j] = true;
                assignment.objective += 1;
            }
        }
        let mut events = states.last().map(|s| s.events.clone()).unwrap_or_default();
        let before: Vec<Status> = match states.last() {
            Some(s) => s.status.clone(),
            None => vec![Status::Active; m],
        };
        for i in 0..m {
            if before[i] == status[i] {
                continue;
            }
            if before[i] != Status::Active {
                return Err(csv_err(ln, format!("attacker {i} left a terminal status")));
            }
            events.push(match captors[i] {
                Some(defender) => Event::Captured {
                    time,
                    attacker: i,
                    defender,
                },
                None => Event::Arrived { time, attacker: i },
            });
        }
        states.push(SimState {
            time,
            step,
            attackers,
            defenders,
            status,
            assignment,
            events,
        });
    }
    Ok(states)
}

pub fn summary_json(summary: &Summary) -> Result<String, ExportError> {
    Ok(serde_json::to_string_pretty(summary)? + "\n")
}

pub fn parse_summary_json(text: &str) -> Result<Summary, ExportError> {
    Ok(serde_json::from_str(text)?)
}

/// Planar slice values as `x,y,value` rows.
pub fn slice_csv(slice: &Slice) -> String {
    let mut out = String::from("x,y,value\n");
    slice.field.grid().for_each_state(|flat, x| {
        let _ = writeln!(out, "{},{},{}", x[0], x[1], slice.field.get(flat));
    });
    out
}

const SIZE: f64 = 600.0;
const OBSTACLE: &str = "#808080";
const TARGET: &str = "#2e9e3e";
const EDGE: &str = "#1fbf3f";
const ATTACKER: &str = "#d62728";
const DEFENDER: &str = "#1f4fd6";

/// World-to-canvas map for the scenario's domain with `y` pointing up.
struct Canvas {
    lower: [f64; 2],
    upper: [f64; 2],
    body: String,
}

impl Canvas {
    fn new(scenario: &Scenario) -> Self {
        Canvas {
            lower: scenario.domain.lower,
            upper: scenario.domain.upper,
            body: String::new(),
        }
    }

    fn scale(&self) -> f64 {
        SIZE / (self.upper[0] - self.lower[0]).max(self.upper[1] - self.lower[1])
    }

    fn px(&self, x: [f64; 2]) -> (f64, f64) {
        let s = self.scale();
        ((x[0] - self.lower[0]) * s, (self.upper[1] - x[1]) * s)
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|p| {
                let (u, v) = self.px(*p);
                format!("{u:.2},{v:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn shape(&mut self, shape: &Shape, fill: &str) {
        let line = match shape {
            Shape::Circle { center, radius } => {
                let (u, v) = self.px(*center);
                format!(
                    r#"<circle cx="{u:.2}" cy="{v:.2}" r="{:.2}" fill="{fill}"/>"#,
                    radius * self.scale()
                )
            }
            Shape::Rectangle { min, max } => {
                let (u0, v0) = self.px([min[0], max[1]]);
                let (u1, v1) = self.px([max[0], min[1]]);
                format!(
                    r#"<rect x="{u0:.2}" y="{v0:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                    u1 - u0,
                    v1 - v0
                )
            }
            Shape::HalfSpace { normal, offset } => {
                let poly = clip_box(self.lower, self.upper, *normal, *offset);
                if poly.is_empty() {
                    return;
                }
                format!(r#"<polygon points="{}" fill="{fill}"/>"#, self.points(&poly))
            }
        };
        self.body.push_str(&line);
        self.body.push('\n');
    }

    fn scene(&mut self, scenario: &Scenario) {
        let target = scenario.target.clone();
        self.shape(&target, TARGET);
        for o in &scenario.obstacles {
            self.shape(o, OBSTACLE);
        }
    }

    fn polyline(&mut self, pts: &[[f64; 2]], stroke: &str, width: f64, extra: &str) {
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width:.1}"{extra}/>"#,
            self.points(pts)
        );
    }

    fn attacker(&mut self, x: [f64; 2], status: Status) {
        let (u, v) = self.px(x);
        let r = 8.0;
        let fill = match status {
            Status::Active => ATTACKER,
            Status::Captured | Status::Arrived => "none",
        };
        let _ = writeln!(
            self.body,
            r#"<polygon class="attacker" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}" stroke="{ATTACKER}" stroke-width="1.5"/>"#,
            u,
            v - r,
            u - r * 0.866,
            v + r * 0.5,
            u + r * 0.866,
            v + r * 0.5
        );
    }

    fn defender(&mut self, x: [f64; 2]) {
        let (u, v) = self.px(x);
        let r = 7.0;
        let _ = writeln!(
            self.body,
            r#"<rect class="defender" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{DEFENDER}"/>"#,
            u - r,
            v - r,
            2.0 * r,
            2.0 * r
        );
    }

    fn finish(self) -> String {
        let (w, h) = (
            (self.upper[0] - self.lower[0]) * self.scale(),
            (self.upper[1] - self.lower[1]) * self.scale(),
        );
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">\n\
             <rect width=\"{w:.2}\" height=\"{h:.2}\" fill=\"white\" stroke=\"black\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// The part of the box `[lower, upper]` with `normal . x <= offset`.
fn clip_box(lower: [f64; 2], upper: [f64; 2], normal: [f64; 2], offset: f64) -> Vec<[f64; 2]> {
    let corners = [
        lower,
        [upper[0], lower[1]],
        upper,
        [lower[0], upper[1]],
    ];
    let side = |p: [f64; 2]| normal[0] * p[0] + normal[1] * p[1] - offset;
    let mut out = Vec::new();
    for k in 0..4 {
        let (p, q) = (corners[k], corners[(k + 1) % 4]);
        let (sp, sq) = (side(p), side(q));
        if sp <= 0.0 {
            out.push(p);
        }
        if (sp <= 0.0) != (sq <= 0.0) {
            let t = sp / (sp - sq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// One animation frame: scene, trails up to `upto`, assignment edges and
/// player markers.
pub fn frame_svg(scenario: &Scenario, states: &[SimState], upto: usize) -> String {
    let mut c = Canvas::new(scenario);
    c.scene(scenario);
    let now = &states[upto];
    let trail = |f: &dyn Fn(&SimState) -> [f64; 2]| -> Vec<[f64; 2]> {
        states[..=upto].iter().map(f).collect()
    };
    for i in 0..now.attackers.len() {
        let t = trail(&|s: &SimState| s.attackers[i]);
        c.polyline(&t, ATTACKER, 1.0, r#" stroke-dasharray="4 3""#);
    }
    for j in 0..now.defenders.len() {
        let t = trail(&|s: &SimState| s.defenders[j]);
        c.polyline(&t, DEFENDER, 1.0, "");
    }
    for (i, j) in now.assignment.pairs() {
        if now.status[i] == Status::Active {
            c.polyline(&[now.defenders[j], now.attackers[i]], EDGE, 2.0, r#" class="edge""#);
        }
    }
    for (i, a) in now.attackers.iter().enumerate() {
        c.attacker(*a, now.status[i]);
    }
    for d in &now.defenders {
        c.defender(*d);
    }
    let _ = writeln!(
        c.body,
        r#"<text x="8" y="20" font-family="monospace" font-size="14">t = {:.3} s</text>"#,
        now.time
    );
    c.finish()
}

/// Frame indices for a stride of `k` steps, always including the last state.
pub fn frame_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..len).step_by(k.max(1)).collect();
    if *idx.last().expect("non-empty") != len - 1 {
        idx.push(len - 1);
    }
    idx
}

/// Tube slice drawing: scene, the zero contour(s), and optional markers.
/// Attacker markers are drawn at `attackers`, defender markers at
/// `defenders`.
pub fn slice_svg(
    scenario: &Scenario,
    slice: &Slice,
    attackers: &[[f64; 2]],
    defenders: &[[f64; 2]],
) -> String {
    let mut c = Canvas::new(scenario);
    c.scene(scenario);
    for line in &slice.contour {
        let path: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let (u, v) = c.px(*p);
                format!("{}{u:.2},{v:.2}", if k == 0 { 'M' } else { 'L' })
            })
            .collect();
        let _ = writeln!(
            c.body,
            r#"<path class="contour" d="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
            path.join(" ")
        );
    }
    for a in attackers {
        c.attacker(*a, Status::Active);
    }
    for d in defenders {
        c.defender(*d);
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, Grid};

    fn states() -> Vec<SimState> {
        let mut a = AssignmentResult::empty(2, 1);
        a.e[0][0] = true;
        a.e[1][0] = true;
        a.objective = 2;
        let s0 = SimState {
            time: 0.0,
            step: 0,
            attackers: vec![[-0.5, 0.0], [0.0, 0.8]],
            defenders: vec![[0.3, -0.3]],
            status: vec![Status::Active; 2],
            assignment: AssignmentResult::empty(2, 1),
            events: vec![],
        };
        let mut s1 = s0.clone();
        s1.step = 1;
        s1.time = 0.005;
        s1.attackers = vec![[-0.495, 0.001], [0.1 / 3.0, 0.795]];
        s1.assignment = a.clone();
        let mut s2 = s1.clone();
        s2.step = 2;
        s2.time = 0.01;
        s2.status = vec![Status::Active, Status::Captured];
        s2.events = vec![Event::Captured {
            time: 0.01,
            attacker: 1,
            defender: 0,
        }];
        let mut s3 = s2.clone();
        s3.step = 3;
        s3.time = 0.015;
        s3.status = vec![Status::Arrived, Status::Captured];
        s3.assignment = AssignmentResult::empty(2, 1);
        s3.events.push(Event::Arrived {
            time: 0.015,
            attacker: 0,
        });
        vec![s0, s1, s2, s3]
    }

    #[test]
    fn trajectory_csv_round_trips_exactly() {
        let st = states();
        let text = trajectory_csv(&st);
        assert!(text.starts_with("step,time,a0_x,a0_y,a0_status,a1_x"));
        assert!(text.lines().nth(3).unwrap().ends_with(",captured:0,0.3,-0.3,0:0;1:0"));
        assert_eq!(parse_trajectory_csv(&text).unwrap(), st);
    }

    #[test]
    fn trajectory_csv_rejects_bad_rows() {
        let text = trajectory_csv(&states());
        let bad = text.replace("captured:0", "captured:7");
        assert!(parse_trajectory_csv(&bad).is_err());
        let bad = text.replacen("0.005", "x", 1);
        assert!(parse_trajectory_csv(&bad).is_err());
        // A captured attacker cannot become active again.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(2, 3);
        assert!(parse_trajectory_csv(&lines.join("\n")).is_err());
    }

    #[test]
    fn frames_are_deterministic_and_follow_conventions() {
        let sc = Scenario::default_environment();
        let st = states();
        let a = frame_svg(&sc, &st, 1);
        assert_eq!(a, frame_svg(&sc, &st, 1));
        assert_eq!(a.matches(r#"class="edge""#).count(), 2);
        assert!(a.contains(&format!(r#"stroke="{EDGE}""#)));
        assert_eq!(a.matches(r#"class="attacker""#).count(), 2);
        assert_eq!(a.matches(r#"class="defender""#).count(), 1);
        assert_eq!(a.matches(&format!(r#"fill="{OBSTACLE}""#)).count(), 2);
        assert_eq!(a.matches(&format!(r#"fill="{TARGET}""#)).count(), 1);
        // Captured attackers lose their edge.
        assert_eq!(frame_svg(&sc, &st, 2).matches(r#"class="edge""#).count(), 1);
        assert_eq!(frame_indices(10, 4), vec![0, 4, 8, 9]);
        assert_eq!(frame_indices(9, 4), vec![0, 4, 8]);
    }

    #[test]
    fn slice_svg_has_no_contour_for_positive_fields() {
        let sc = Scenario::default_environment();
        let g = Grid::uniform(2, -1.0, 1.0, 21).unwrap();
        let pos = Slice {
            axes: (0, 1),
            field: Field::constant(g.clone(), 1.0).unwrap(),
            contour: vec![],
        };
        let svg = slice_svg(&sc, &pos, &[], &[[0.3, -0.3]]);
        assert!(!svg.contains("<path"));
        let field = Field::from_fn(g, |x| x[0].hypot(x[1]) - 0.5).unwrap();
        let contour = crate::games::zero_contour(&field);
        let circ = Slice {
            axes: (0, 1),
            field,
            contour,
        };
        let svg = slice_svg(&sc, &circ, &[], &[]);
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg, slice_svg(&sc, &circ, &[], &[]));
        let csv = slice_csv(&circ);
        assert_eq!(csv.lines().count(), 1 + 21 * 21);
        assert!(csv.starts_with("x,y,value\n-1,-1,"));
    }

    #[test]
    fn half_spaces_are_clipped_to_the_domain() {
        let poly = clip_box([-1.0, -1.0], [1.0, 1.0], [1.0, 0.0], 0.5);
        assert_eq!(poly, vec![[-1.0, -1.0], [0.5, -1.0], [0.5, 1.0], [-1.0, 1.0]]);
        assert!(clip_box([-1.0, -1.0], [1.0, 1.0], [1.0, 0.0], -2.0).is_empty());
    }
}
