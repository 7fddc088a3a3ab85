use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Point-mass integration constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynParams {
    pub dt: f32,
    pub damping: f32,
    pub max_accel: f32,
    pub max_speed: f32,
    pub cell_size: f32,
}

impl Default for DynParams {
    fn default() -> Self {
        DynParams {
            dt: 0.1,
            damping: 0.02,
            max_accel: 1.0,
            max_speed: 1.5,
            cell_size: 1.0,
        }
    }
}

/// A door occupies one cell and follows a toggle schedule of
/// (env step, open?) entries; open until the first entry says otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Door {
    pub id: usize,
    pub cell: (usize, usize),
    pub schedule: Vec<(usize, bool)>,
}

impl Door {
    pub fn open_at(&self, t: usize) -> bool {
        let mut open = true;
        for &(step, state) in &self.schedule {
            if step <= t {
                open = state;
            } else {
                break;
            }
        }
        open
    }
}

/// Occupancy grid plus doors, goal, stochasticity, and dynamics constants.
/// Immutable during an episode; eval clones it to set per-episode goals.
#[derive(Clone, Debug)]
pub struct MazeWorld {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    doors: Vec<Door>,
    pub dynamics: DynParams,
    pub epsilon: f32,
    pub goal: [f32; 2],
    pub goal_radius: f32,
    pub max_steps: usize,
    pub default_start: Option<(usize, usize)>,
    pub default_goal: Option<(usize, usize)>,
}

impl MazeWorld {
    /// Parse the world text format: whitespace-separated grid tokens
    /// (`#` wall, `.` free, `S`/`G` default start/goal, `D<n>` door), then
    /// `key = value` lines for door schedules and constants. Lines starting
    /// with `;` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid_rows: Vec<Vec<String>> = Vec::new();
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if line.contains('=') {
                let (k, v) = line.split_once('=').unwrap();
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                grid_rows.push(line.split_whitespace().map(|s| s.to_string()).collect());
            }
        }
        if grid_rows.is_empty() {
            return Err(Error::World("no grid rows found".into()));
        }
        let width = grid_rows[0].len();
        let height = grid_rows.len();
        if grid_rows.iter().any(|r| r.len() != width) {
            return Err(Error::World("ragged grid rows".into()));
        }

        let mut walls = vec![false; width * height];
        let mut door_cells: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut default_start = None;
        let mut default_goal = None;
        for (r, row) in grid_rows.iter().enumerate() {
            for (c, tok) in row.iter().enumerate() {
                match tok.as_str() {
                    "#" => walls[r * width + c] = true,
                    "." => {}
                    "S" => default_start = Some((r, c)),
                    "G" => default_goal = Some((r, c)),
                    t if t.starts_with('D') => {
                        let id: usize = t[1..].parse().map_err(|_| {
                            Error::World(format!("bad door token `{t}` at ({r}, {c})"))
                        })?;
                        if door_cells.insert(id, (r, c)).is_some() {
                            return Err(Error::World(format!("duplicate door id {id}")));
                        }
                    }
                    t => {
                        return Err(Error::World(format!(
                            "unknown grid token `{t}` at ({r}, {c})"
                        )))
                    }
                }
            }
        }

        let mut dynamics = DynParams::default();
        let mut epsilon = 0.0f32;
        let mut goal_radius = 0.4f32;
        let mut max_steps = 300usize;
        let mut doors: Vec<Door> = door_cells
            .iter()
            .map(|(&id, &cell)| Door {
                id,
                cell,
                schedule: Vec::new(),
            })
            .collect();

        for (k, v) in &kv {
            match k.as_str() {
                "dt" => dynamics.dt = parse_num(k, v)?,
                "damping" => dynamics.damping = parse_num(k, v)?,
                "max_accel" => dynamics.max_accel = parse_num(k, v)?,
                "max_speed" => dynamics.max_speed = parse_num(k, v)?,
                "cell_size" => dynamics.cell_size = parse_num(k, v)?,
                "epsilon" => epsilon = parse_num(k, v)?,
                "goal_radius" => goal_radius = parse_num(k, v)?,
                "max_steps" => {
                    max_steps = v
                        .parse()
                        .map_err(|_| Error::World(format!("bad value for {k}: `{v}`")))?
                }
                key if key.starts_with("door.") => {
                    let id: usize = key[5..]
                        .parse()
                        .map_err(|_| Error::World(format!("bad door key `{key}`")))?;
                    let door = doors
                        .iter_mut()
                        .find(|d| d.id == id)
                        .ok_or_else(|| Error::World(format!("schedule for unknown door {id}")))?;
                    for entry in v.split(',') {
                        let (step, state) = entry.trim().split_once(':').ok_or_else(|| {
                            Error::World(format!("bad schedule entry `{entry}`"))
                        })?;
                        let step: usize = step
                            .trim()
                            .parse()
                            .map_err(|_| Error::World(format!("bad schedule step `{step}`")))?;
                        let open = match state.trim() {
                            "open" => true,
                            "closed" => false,
                            s => {
                                return Err(Error::World(format!("bad door state `{s}`")))
                            }
                        };
                        door.schedule.push((step, open));
                    }
                    door.schedule.sort_by_key(|&(s, _)| s);
                }
                key => return Err(Error::World(format!("unknown key `{key}`"))),
            }
        }

        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::World(format!("epsilon {epsilon} outside [0, 1]")));
        }

        let cs = dynamics.cell_size;
        let goal = match default_goal {
            Some((r, c)) => [(c as f32 + 0.5) * cs, (r as f32 + 0.5) * cs],
            None => [0.0, 0.0],
        };

        let world = MazeWorld {
            width,
            height,
            walls,
            doors,
            dynamics,
            epsilon,
            goal,
            goal_radius,
            max_steps,
            default_start,
            default_goal,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        MazeWorld::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        for c in 0..self.width {
            if !self.is_wall(0, c) || !self.is_wall(self.height - 1, c) {
                return Err(Error::World("grid border must be fully walled".into()));
            }
        }
        for r in 0..self.height {
            if !self.is_wall(r, 0) || !self.is_wall(r, self.width - 1) {
                return Err(Error::World("grid border must be fully walled".into()));
            }
        }
        for (it, name) in [(self.default_start, "start"), (self.default_goal, "goal")] {
            if let Some(cell) = it {
                if self.blocked(0, cell.0 as i64, cell.1 as i64) {
                    return Err(Error::World(format!("default {name} cell not passable")));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn doors(&self) -> &[Door] {
        &self.doors
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls[r * self.width + c]
    }

    /// Count of `#` cells, border included.
    pub fn wall_count(&self) -> usize {
        self.walls.iter().filter(|&&w| w).count()
    }

    pub fn door_toggles_at(&self, t: usize) -> bool {
        self.doors
            .iter()
            .any(|d| d.schedule.iter().any(|&(s, _)| s == t))
    }

    /// Whether (r, c) blocks motion at env step t: out of bounds, a wall, or
    /// a closed door.
    pub fn blocked(&self, t: usize, r: i64, c: i64) -> bool {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            return true;
        }
        let (r, c) = (r as usize, c as usize);
        if self.walls[r * self.width + c] {
            return true;
        }
        self.doors
            .iter()
            .any(|d| d.cell == (r, c) && !d.open_at(t))
    }

    /// Passable for planning purposes: not a wall (doors count as passable;
    /// closures are runtime interventions).
    pub fn passable_cell(&self, r: usize, c: usize) -> bool {
        r < self.height && c < self.width && !self.walls[r * self.width + c]
    }

    /// All non-wall, non-door cells, in row-major order.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.is_wall(r, c) && !self.doors.iter().any(|d| d.cell == (r, c)) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn cell_center(&self, cell: (usize, usize)) -> [f32; 2] {
        let cs = self.dynamics.cell_size;
        [
            (cell.1 as f32 + 0.5) * cs,
            (cell.0 as f32 + 0.5) * cs,
        ]
    }

    pub fn cell_of(&self, pos: [f32; 2]) -> (i64, i64) {
        let cs = self.dynamics.cell_size as f64;
        (
            (pos[1] as f64 / cs).floor() as i64,
            (pos[0] as f64 / cs).floor() as i64,
        )
    }

    /// Amanatides–Woo traversal of the segment p0→p1. Returns the parameter
    /// s ∈ [0, 1] of the first entry into a blocked cell and that cell, or
    /// None if the whole segment is clear at env step `t`.
    pub fn segment_hit(
        &self,
        t: usize,
        p0: [f32; 2],
        p1: [f32; 2],
    ) -> Option<(f64, (usize, usize))> {
        let cs = self.dynamics.cell_size as f64;
        let x0 = p0[0] as f64 / cs;
        let y0 = p0[1] as f64 / cs;
        let x1 = p1[0] as f64 / cs;
        let y1 = p1[1] as f64 / cs;

        let mut cx = x0.floor() as i64;
        let mut cy = y0.floor() as i64;
        if self.blocked(t, cy, cx) {
            return Some((0.0, (cy.max(0) as usize, cx.max(0) as usize)));
        }
        let tx = x1.floor() as i64;
        let ty = y1.floor() as i64;
        if cx == tx && cy == ty {
            return None;
        }

        let dx = x1 - x0;
        let dy = y1 - y0;
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
        let mut t_max_x = if dx != 0.0 {
            let next = if dx > 0.0 { cx as f64 + 1.0 } else { cx as f64 };
            (next - x0) / dx
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy != 0.0 {
            let next = if dy > 0.0 { cy as f64 + 1.0 } else { cy as f64 };
            (next - y0) / dy
        } else {
            f64::INFINITY
        };
        let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };

        loop {
            let s;
            if (t_max_x - t_max_y).abs() < 1e-12 && t_max_x.is_finite() {
                // exact corner crossing: refuse to cut through if the
                // diagonal cell is blocked
                s = t_max_x;
                if s > 1.0 {
                    return None;
                }
                let diag = (cy + step_y, cx + step_x);
                if self.blocked(t, diag.0, diag.1)
                    || self.blocked(t, cy, cx + step_x)
                    || self.blocked(t, cy + step_y, cx)
                {
                    let hit = if self.blocked(t, cy, cx + step_x) {
                        (cy, cx + step_x)
                    } else if self.blocked(t, cy + step_y, cx) {
                        (cy + step_y, cx)
                    } else {
                        diag
                    };
                    return Some((s, (hit.0.max(0) as usize, hit.1.max(0) as usize)));
                }
                cx += step_x;
                cy += step_y;
                t_max_x += t_delta_x;
                t_max_y += t_delta_y;
            } else if t_max_x < t_max_y {
                s = t_max_x;
                if s > 1.0 {
                    return None;
                }
                cx += step_x;
                t_max_x += t_delta_x;
            } else {
                s = t_max_y;
                if s > 1.0 {
                    return None;
                }
                cy += step_y;
                t_max_y += t_delta_y;
            }
            if self.blocked(t, cy, cx) {
                return Some((s, (cy.max(0) as usize, cx.max(0) as usize)));
            }
            if cx == tx && cy == ty {
                return None;
            }
        }
    }

    /// Per-episode copy with a new goal position.
    pub fn with_goal(&self, goal_cell: (usize, usize)) -> MazeWorld {
        let mut w = self.clone();
        w.goal = self.cell_center(goal_cell);
        w.default_goal = Some(goal_cell);
        w
    }

    /// Per-episode copy with a different stochasticity knob.
    pub fn with_epsilon(&self, epsilon: f32) -> MazeWorld {
        let mut w = self.clone();
        w.epsilon = epsilon;
        w
    }

    /// Copy with all door schedules stripped (doors permanently open); the
    /// nominal world used for dataset generation and expert references.
    pub fn doors_open(&self) -> MazeWorld {
        let mut w = self.clone();
        for d in &mut w.doors {
            d.schedule.clear();
        }
        w
    }
}

fn parse_num(k: &str, v: &str) -> Result<f32> {
    v.parse()
        .map_err(|_| Error::World(format!("bad value for {k}: `{v}`")))
}
