use std::fmt::Write as _;
use std::path::Path;

use crate::envs::MazeWorld;
use crate::error::{Error, Result};

use super::config::RunConfig;

/// Parsed episode log rows needed for rendering.
#[derive(Clone, Debug)]
pub struct RenderRow {
    pub t: usize,
    pub obs: [f64; 2],
    pub plan: [f64; 2],
    pub score: Option<f64>,
    pub decision: String,
    pub action: String,
}

/// Read one episode's rows out of an episode-log CSV.
pub fn read_episode(path: &Path, episode: usize) -> Result<Vec<RenderRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::runtime("empty episode log"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::runtime(format!("log missing column `{name}`")))
    };
    let (c_ep, c_t) = (col("episode")?, col("t")?);
    let (c_ox, c_oy) = (col("obs_x")?, col("obs_y")?);
    let (c_px, c_py) = (col("plan_x")?, col("plan_y")?);
    let (c_score, c_dec, c_act) = (col("score")?, col("decision")?, col("action")?);

    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::runtime("ragged episode log row"));
        }
        if fields[c_ep].parse::<usize>().ok() != Some(episode) {
            continue;
        }
        rows.push(RenderRow {
            t: fields[c_t]
                .parse()
                .map_err(|_| Error::runtime("bad t field"))?,
            obs: [parse_f(fields[c_ox])?, parse_f(fields[c_oy])?],
            plan: [parse_f(fields[c_px])?, parse_f(fields[c_py])?],
            score: if fields[c_score].is_empty() {
                None
            } else {
                Some(parse_f(fields[c_score])?)
            },
            decision: fields[c_dec].to_string(),
            action: fields[c_act].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::runtime(format!("episode {episode} not in log")));
    }
    Ok(rows)
}

fn parse_f(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::runtime(format!("bad float field `{s}`")))
}

const SCALE: f64 = 40.0;

/// Top-down maze view: one rect per wall cell, door cells, goal disc, the
/// planned and executed trajectories as polylines, and one marker per
/// replan. Plan coordinates in the log are normalized; the caller passes a
/// denormalizer.
pub fn render_maze(
    world: &MazeWorld,
    rows: &[RenderRow],
    denorm_plan: impl Fn([f64; 2]) -> [f64; 2],
) -> String {
    let cs = world.dynamics.cell_size as f64;
    let w_px = world.width() as f64 * cs * SCALE;
    let h_px = world.height() as f64 * cs * SCALE;
    let px = |x: f64| x * SCALE;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" viewBox="0 0 {w_px} {h_px}">"##
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{w_px}" height="{h_px}" fill="#f8f8f5"/>"##
    );

    for r in 0..world.height() {
        for c in 0..world.width() {
            if world.is_wall(r, c) {
                let _ = writeln!(
                    s,
                    r##"<rect class="wall" x="{}" y="{}" width="{}" height="{}" fill="#3a3a3a"/>"##,
                    px(c as f64 * cs),
                    px(r as f64 * cs),
                    px(cs),
                    px(cs)
                );
            }
        }
    }
    for d in world.doors() {
        let (r, c) = d.cell;
        let _ = writeln!(
            s,
            r##"<rect class="door" x="{}" y="{}" width="{}" height="{}" fill="#d9912b" fill-opacity="0.55"/>"##,
            px(c as f64 * cs),
            px(r as f64 * cs),
            px(cs),
            px(cs)
        );
    }
    let _ = writeln!(
        s,
        r##"<circle class="goal" cx="{}" cy="{}" r="{}" fill="none" stroke="#2a9d2a" stroke-width="3"/>"##,
        px(world.goal[0] as f64),
        px(world.goal[1] as f64),
        px(world.goal_radius as f64)
    );

    let plan_pts: Vec<String> = rows
        .iter()
        .map(|r| {
            let p = denorm_plan(r.plan);
            format!("{:.2},{:.2}", px(p[0]), px(p[1]))
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="planned" points="{}" fill="none" stroke="#4477cc" stroke-width="2" stroke-dasharray="6 4"/>"##,
        plan_pts.join(" ")
    );
    let exec_pts: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.obs[0]), px(r.obs[1])))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="executed" points="{}" fill="none" stroke="#cc3333" stroke-width="2.5"/>"##,
        exec_pts.join(" ")
    );

    for r in rows.iter().filter(|r| r.action != "none") {
        let color = match r.action.as_str() {
            "scratch" => "#7a1fa2",
            "prev" => "#0a7d8c",
            _ => "#e0a800",
        };
        let _ = writeln!(
            s,
            r##"<circle class="replan" cx="{:.2}" cy="{:.2}" r="6" fill="{color}" fill-opacity="0.85"/>"##,
            px(r.obs[0]),
            px(r.obs[1])
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Score-vs-step curve with the two threshold lines and a marker at every
/// replan decision.
pub fn render_score_curve(
    rows: &[RenderRow],
    theta_future: f64,
    theta_scratch: f64,
) -> String {
    let w_px = 640.0;
    let h_px = 320.0;
    let margin = 40.0;
    let t_max = rows.last().map(|r| r.t).unwrap_or(1).max(1) as f64;
    let x = |t: usize| margin + (t as f64 / t_max) * (w_px - 2.0 * margin);
    let y = |v: f64| h_px - margin - v.clamp(0.0, 1.0) * (h_px - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" viewBox="0 0 {w_px} {h_px}">"##
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{w_px}" height="{h_px}" fill="#ffffff"/>"##
    );
    // axes
    let _ = writeln!(
        s,
        r##"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="#222" stroke-width="1"/>"##,
        h_px - margin,
        w_px - margin,
        h_px - margin
    );
    let _ = writeln!(
        s,
        r##"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="#222" stroke-width="1"/>"##,
        h_px - margin
    );
    for (theta, color, label) in [
        (theta_future, "#e0a800", "theta_future"),
        (theta_scratch, "#7a1fa2", "theta_scratch"),
    ] {
        let _ = writeln!(
            s,
            r##"<line class="threshold" x1="{margin}" y1="{0}" x2="{1}" y2="{0}" stroke="{color}" stroke-width="1" stroke-dasharray="4 3"/>"##,
            y(theta),
            w_px - margin
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-size="10" fill="{color}">{label}</text>"##,
            w_px - margin + 2.0,
            y(theta) + 3.0
        );
    }

    let pts: Vec<String> = rows
        .iter()
        .filter_map(|r| r.score.map(|v| format!("{:.2},{:.2}", x(r.t), y(v))))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="score" points="{}" fill="none" stroke="#4477cc" stroke-width="1.5"/>"##,
        pts.join(" ")
    );

    for r in rows.iter().filter(|r| r.action != "none") {
        let v = r.score.unwrap_or(0.0);
        let _ = writeln!(
            s,
            r##"<circle class="decision" cx="{:.2}" cy="{:.2}" r="4" fill="#cc3333"/>"##,
            x(r.t),
            y(v)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Render one episode from a log CSV into two SVG files.
pub fn cmd_render(config: &RunConfig, log_path: &Path, episode: usize) -> Result<()> {
    let world = MazeWorld::load(Path::new(&config.world))?;
    let rows = read_episode(log_path, episode)?;

    // plan coordinates are normalized; rebuild the affine map from the
    // checkpoint when present, else fall back to identity
    let denorm: Box<dyn Fn([f64; 2]) -> [f64; 2]> =
        match super::checkpoint::Checkpoint::load(Path::new(&config.checkpoint)) {
            Ok(ck) => {
                let norm = ck.model.norm.clone();
                Box::new(move |p: [f64; 2]| {
                    [
                        norm.denormalize_val(p[0] as f32, 0) as f64,
                        norm.denormalize_val(p[1] as f32, 1) as f64,
                    ]
                })
            }
            Err(_) => Box::new(|p| p),
        };

    std::fs::create_dir_all(&config.out_dir)?;
    let stem = log_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "episode".into());
    let maze_path = config.out_path(&format!("render_{stem}_ep{episode}_maze.svg"));
    let score_path = config.out_path(&format!("render_{stem}_ep{episode}_score.svg"));
    std::fs::write(&maze_path, render_maze(&world, &rows, denorm))?;
    std::fs::write(
        &score_path,
        render_score_curve(&rows, config.theta_future, config.theta_scratch),
    )?;
    println!("render -> {}", maze_path.display());
    println!("render -> {}", score_path.display());
    Ok(())
}
