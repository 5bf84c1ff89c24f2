//! Static SVG figures of recorded episodes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::config::write_atomic;
use crate::error::{Error, Result};
use crate::eval::EpisodeResult;
use crate::geometry::Vec2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderKind {
    Trajectory,
    Attention,
    Samples,
}

impl FromStr for RenderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(RenderKind::Trajectory),
            "attention" => Ok(RenderKind::Attention),
            "samples" => Ok(RenderKind::Samples),
            _ => Err(Error::Usage(format!("unknown render kind {s:?}"))),
        }
    }
}

const SIZE: f64 = 640.0;
const EXTENT: f64 = 5.5;
const HUMAN_COLORS: [&str; 10] = [
    "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#ff7f0e", "#393b79",
];
const ROBOT_COLOR: &str = "#d62728";

fn px(p: Vec2) -> (f64, f64) {
    let s = SIZE / (2.0 * EXTENT);
    ((p.x + EXTENT) * s, (EXTENT - p.y) * s)
}

fn scale(len: f64) -> f64 {
    len * SIZE / (2.0 * EXTENT)
}

struct Svg(String);

impl Svg {
    fn new(title: &str) -> Self {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{title}</text>"#);
        Svg(s)
    }

    fn circle(&mut self, c: Vec2, r: f64, fill: &str, stroke: &str, class: &str) {
        let (x, y) = px(c);
        let _ = writeln!(
            self.0,
            r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="{fill}" stroke="{stroke}"/>"#,
            scale(r)
        );
    }

    fn text(&mut self, at: Vec2, size: f64, class: &str, body: &str) {
        let (x, y) = px(at);
        let _ = writeln!(
            self.0,
            r#"<text class="{class}" x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="middle">{body}</text>"#
        );
    }

    fn polyline(&mut self, pts: &[Vec2], color: &str, class: &str) {
        let p: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            self.0,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    fn goal(&mut self, g: Vec2, color: &str) {
        let (x, y) = px(g);
        let _ = writeln!(
            self.0,
            r#"<path class="goal" d="M{:.2},{:.2} l8,8 m-8,0 l8,-8" stroke="{color}" stroke-width="2"/>"#,
            x - 4.0,
            y - 4.0
        );
    }

    fn finish(mut self) -> String {
        self.0.push_str("</svg>\n");
        self.0
    }
}

fn check_step(result: &EpisodeResult, step: usize, len: usize, what: &str) -> Result<()> {
    if len == 0 {
        return Err(Error::Render(format!(
            "episode {} has no {what}; record it with the learned policy",
            result.seed
        )));
    }
    if step >= len {
        return Err(Error::Render(format!(
            "step {step} out of range: the episode has {len} decisions"
        )));
    }
    Ok(())
}

/// Paths of all agents with positions marked and time-stamped once per second.
pub fn trajectory_svg(result: &EpisodeResult) -> Result<String> {
    let trace = &result.trace;
    if trace.records.is_empty() {
        return Err(Error::Render("trace has no records".into()));
    }
    let radius = 0.3;
    let mut svg = Svg::new(&format!(
        "seed {} - {} after {:.2} s",
        result.seed,
        result.outcome.label(),
        result.time
    ));
    let per_second = (1.0 / trace.time_step).round().max(1.0) as usize;
    let robot: Vec<Vec2> = trace.records.iter().map(|r| r.robot.position).collect();
    svg.polyline(&robot, ROBOT_COLOR, "robot-path");
    for i in 0..trace.n_humans() {
        let color = HUMAN_COLORS[i % HUMAN_COLORS.len()];
        let path: Vec<Vec2> = trace.records.iter().map(|r| r.humans[i].position).collect();
        svg.polyline(&path, color, "human-path");
        svg.goal(trace.human_goals[i], color);
    }
    svg.goal(trace.robot_goal, ROBOT_COLOR);
    for (k, r) in trace.records.iter().enumerate() {
        if k % per_second != 0 && k + 1 != trace.records.len() {
            continue;
        }
        svg.circle(r.robot.position, radius, "none", ROBOT_COLOR, "robot");
        svg.text(r.robot.position, 9.0, "time", &format!("{:.0}", r.t));
        for (i, h) in r.humans.iter().enumerate() {
            svg.circle(
                h.position,
                radius,
                "none",
                HUMAN_COLORS[i % HUMAN_COLORS.len()],
                "human",
            );
            svg.text(h.position, 9.0, "time", &format!("{:.0}", r.t));
        }
    }
    Ok(svg.finish())
}

/// Scene at decision `step`, humans shaded by the robot's attention weight.
pub fn attention_svg(result: &EpisodeResult, step: usize) -> Result<String> {
    check_step(result, step, result.attention.len(), "attention matrices")?;
    let att = &result.attention[step];
    let rec = &result.trace.records[step];
    let weights = att.row(0);
    let mut svg = Svg::new(&format!("attention at t = {:.2} s", rec.t));
    svg.goal(result.trace.robot_goal, ROBOT_COLOR);
    svg.circle(rec.robot.position, 0.3, "#ffd6d6", ROBOT_COLOR, "robot");
    svg.text(
        rec.robot.position + Vec2::new(0.0, 0.45),
        11.0,
        "weight",
        &format!("{:.3}", weights[0]),
    );
    let max = weights.iter().skip(1).cloned().fold(0.0, f64::max).max(1e-12);
    for (i, h) in rec.humans.iter().enumerate() {
        let w = weights[i + 1];
        let shade = (255.0 * (1.0 - w / max)).round() as u8;
        let fill = format!("rgb(255,{shade},{shade})");
        svg.circle(h.position, 0.3, &fill, "black", "human");
        svg.text(h.position + Vec2::new(0.0, 0.45), 11.0, "weight", &format!("{w:.3}"));
        svg.text(h.position - Vec2::new(0.0, 0.1), 10.0, "label", &format!("{}", i + 1));
    }
    Ok(svg.finish())
}

/// Scene at decision `step` with the sampled next positions; the executed one is highlighted.
pub fn samples_svg(result: &EpisodeResult, step: usize) -> Result<String> {
    check_step(result, step, result.candidates.len(), "candidate actions")?;
    let rec = &result.trace.records[step];
    let cands = &result.candidates[step];
    let sel = result.selected[step];
    let mut svg = Svg::new(&format!("sampled next positions at t = {:.2} s", rec.t));
    svg.goal(result.trace.robot_goal, ROBOT_COLOR);
    svg.circle(rec.robot.position, 0.3, "none", ROBOT_COLOR, "robot");
    for (i, h) in rec.humans.iter().enumerate() {
        let color = HUMAN_COLORS[i % HUMAN_COLORS.len()];
        svg.circle(h.position, 0.3, "none", color, "human");
        svg.circle(h.position, 0.5, "none", "#cccccc", "discomfort");
        svg.text(h.position - Vec2::new(0.0, 0.1), 10.0, "label", &format!("{}", i + 1));
    }
    for (k, a) in cands.iter().enumerate() {
        let p = rec.robot.position + a.as_vec();
        let (class, fill) = if k == sel {
            ("candidate selected", "#2ca02c")
        } else {
            ("candidate", "#999999")
        };
        svg.circle(p, 0.05, fill, "black", class);
        svg.text(p + Vec2::new(0.12, 0.08), 10.0, "label", &format!("{}", k + 1));
    }
    Ok(svg.finish())
}

pub fn render_svg(result: &EpisodeResult, kind: RenderKind, step: usize) -> Result<String> {
    match kind {
        RenderKind::Trajectory => trajectory_svg(result),
        RenderKind::Attention => attention_svg(result, step),
        RenderKind::Samples => samples_svg(result, step),
    }
}

/// Renders `kind` to `out_path` (SVG).
pub fn render_artifacts(result: &EpisodeResult, kind: RenderKind, step: usize, out_path: &Path) -> Result<()> {
    let svg = render_svg(result, kind, step)?;
    write_atomic(out_path, svg.as_bytes())
}
