use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Action, ActionSpace, ByteReader, ByteWriter, EnvError, EnvSnapshot, GoalEnv, Result,
    StepResult,
};

/// Grid cell as `(x, y)`: x grows east, y grows north.
pub type Cell = (usize, usize);

/// Action `i` moves by `COMPASS[i]`: N, NE, E, SE, S, SW, W, NW.
pub const COMPASS: [(i64, i64); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

/// Square obstacle map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridMap {
    size: usize,
    /// Indexed `y * size + x`.
    obstacles: Vec<bool>,
}

impl GridMap {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            obstacles: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn index(&self, (x, y): Cell) -> usize {
        y * self.size + x
    }

    pub fn cell(&self, index: usize) -> Cell {
        (index % self.size, index / self.size)
    }

    pub fn in_bounds(&self, (x, y): Cell) -> bool {
        x < self.size && y < self.size
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacles[self.index(c)]
    }

    pub fn set_obstacle(&mut self, c: Cell, blocked: bool) {
        let i = self.index(c);
        self.obstacles[i] = blocked;
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.is_obstacle(c)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.size * self.size)
            .filter(|&i| !self.obstacles[i])
            .map(|i| self.cell(i))
            .collect()
    }

    /// The cell reached by `action`, or `None` when it leaves the grid or
    /// hits an obstacle.
    pub fn neighbor(&self, (x, y): Cell, action: usize) -> Option<Cell> {
        let (dx, dy) = COMPASS[action];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 {
            return None;
        }
        let next = (nx as usize, ny as usize);
        self.is_free(next).then_some(next)
    }

    pub fn obstacle_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.obstacles.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }

    fn from_values(size: usize, values: &[f64]) -> Result<Self> {
        if values.len() != size * size {
            return Err(EnvError::InvalidState(format!(
                "expected {} obstacle flags, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Self {
            size,
            obstacles: values.iter().map(|v| *v != 0.0).collect(),
        })
    }
}

/// A map with optional fixed start and goal, as read from a text grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    pub map: GridMap,
    pub start: Option<Cell>,
    pub goal: Option<Cell>,
}

impl GridLayout {
    /// Parses rows of `.` (free), `#` (obstacle), `S` (start) and `G` (goal).
    /// The first row is the northernmost (largest y).
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let size = rows.len();
        if size == 0 {
            return Err(EnvError::Map("empty map".into()));
        }
        let mut map = GridMap::empty(size);
        let (mut start, mut goal) = (None, None);
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != size {
                return Err(EnvError::Map(format!(
                    "row {} has {} cells, map must be {size}x{size}",
                    r + 1,
                    row.chars().count()
                )));
            }
            let y = size - 1 - r;
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '.' => {}
                    '#' => map.set_obstacle((x, y), true),
                    'S' if start.is_none() => start = Some((x, y)),
                    'G' if goal.is_none() => goal = Some((x, y)),
                    'S' | 'G' => return Err(EnvError::Map(format!("duplicate '{ch}'"))),
                    other => {
                        return Err(EnvError::Map(format!(
                            "unexpected character {other:?} in row {}",
                            r + 1
                        )))
                    }
                }
            }
        }
        Ok(Self { map, start, goal })
    }
}

impl fmt::Display for GridLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.map.size;
        for y in (0..n).rev() {
            for x in 0..n {
                let ch = if Some((x, y)) == self.start {
                    'S'
                } else if Some((x, y)) == self.goal {
                    'G'
                } else if self.map.is_obstacle((x, y)) {
                    '#'
                } else {
                    '.'
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Unit-cost distances to `target` from every cell over 8-connected moves
/// (`None` for unreachable cells). Moves are reversible, so this is also the
/// distance from `target` to every cell.
pub fn bfs_distance_field(map: &GridMap, target: Cell) -> Vec<Option<usize>> {
    let mut dist = vec![None; map.size * map.size];
    if !map.is_free(target) {
        return dist;
    }
    let mut queue = VecDeque::new();
    dist[map.index(target)] = Some(0);
    queue.push_back(target);
    while let Some(c) = queue.pop_front() {
        let d = dist[map.index(c)].unwrap();
        for a in 0..COMPASS.len() {
            if let Some(n) = map.neighbor(c, a) {
                let i = map.index(n);
                if dist[i].is_none() {
                    dist[i] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
    }
    dist
}

/// Minimal number of 8-connected moves from `from` to `to` avoiding
/// obstacles.
pub fn bfs_shortest_steps(map: &GridMap, from: Cell, to: Cell) -> Option<usize> {
    if !map.is_free(from) || !map.is_free(to) {
        return None;
    }
    bfs_distance_field(map, to)[map.index(from)]
}

/// Network input layout for GridWorld states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridEncoding {
    /// Obstacle grid, one-hot agent cell; goal as a one-hot cell.
    Flat,
    /// `Flat` plus eight flags marking which compass moves are blocked from
    /// the agent's cell.
    FlatLocal,
    /// `FlatLocal` plus the goal's offset from the agent, scaled by the
    /// grid size.
    Relative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldConfig {
    pub size: usize,
    pub obstacle_prob: f64,
    pub horizon: usize,
    pub success_reward: f64,
    pub step_reward: f64,
    pub reward_scale: f64,
    pub encoding: GridEncoding,
    /// When set, every episode uses this map (and its start/goal if given).
    pub layout: Option<GridLayout>,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            size: 8,
            obstacle_prob: 0.3,
            horizon: 50,
            success_reward: 10.0,
            step_reward: -0.02,
            reward_scale: 1.0,
            encoding: GridEncoding::Flat,
            layout: None,
        }
    }
}

/// 8-connected navigation on a random obstacle map.
///
/// The state vector is the obstacle grid (row-major from y = 0) followed by
/// the agent's `x, y`; goals are `x, y` cells.
#[derive(Debug, Clone)]
pub struct GridWorldEnv {
    config: GridWorldConfig,
    map: GridMap,
    agent: Cell,
    goal: Cell,
    steps: usize,
}

impl GridWorldEnv {
    pub fn new(config: GridWorldConfig) -> Self {
        let size = config.layout.as_ref().map_or(config.size, |l| l.map.size);
        let config = GridWorldConfig { size, ..config };
        Self {
            map: GridMap::empty(size),
            config,
            agent: (0, 0),
            goal: (0, 0),
            steps: 0,
        }
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn goal_cell(&self) -> Cell {
        self.goal
    }

    /// Places the agent and goal on an explicit map.
    pub fn set_layout(&mut self, map: GridMap, agent: Cell, goal: Cell) -> Result<()> {
        if map.size != self.config.size {
            return Err(EnvError::Map(format!(
                "map is {}x{}, environment is {}x{}",
                map.size, map.size, self.config.size, self.config.size
            )));
        }
        if !map.is_free(agent) || !map.is_free(goal) {
            return Err(EnvError::InvalidState("agent or goal on obstacle".into()));
        }
        self.map = map;
        self.agent = agent;
        self.goal = goal;
        self.steps = 0;
        Ok(())
    }

    pub fn state_from_parts(map: &GridMap, agent: Cell) -> Vec<f64> {
        let mut s: Vec<f64> = map.obstacle_values().collect();
        s.push(agent.0 as f64);
        s.push(agent.1 as f64);
        s
    }

    pub fn cell_from_goal(goal: &[f64]) -> Cell {
        (goal[0] as usize, goal[1] as usize)
    }

    /// Splits a state vector into its map and agent cell.
    pub fn parts_from_state(&self, state: &[f64]) -> Result<(GridMap, Cell)> {
        let n = self.config.size * self.config.size;
        if state.len() != n + 2 {
            return Err(EnvError::InvalidState(format!(
                "state of length {} for a {}x{} grid",
                state.len(),
                self.config.size,
                self.config.size
            )));
        }
        let map = GridMap::from_values(self.config.size, &state[..n])?;
        Ok((map, (state[n] as usize, state[n + 1] as usize)))
    }

    fn agent_from_state(&self, state: &[f64]) -> Cell {
        let n = state.len();
        (state[n - 2] as usize, state[n - 1] as usize)
    }

    fn generate(&self, rng: &mut ChaCha8Rng) -> (GridMap, Cell, Cell) {
        let size = self.config.size;
        loop {
            let mut map = match &self.config.layout {
                Some(layout) => layout.map.clone(),
                None => {
                    let mut m = GridMap::empty(size);
                    for v in m.obstacles.iter_mut() {
                        *v = rng.gen_bool(self.config.obstacle_prob);
                    }
                    m
                }
            };
            let fixed_start = self.config.layout.as_ref().and_then(|l| l.start);
            let fixed_goal = self.config.layout.as_ref().and_then(|l| l.goal);
            for c in [fixed_start, fixed_goal].into_iter().flatten() {
                map.set_obstacle(c, false);
            }
            let free = map.free_cells();
            if free.len() < 2 {
                continue;
            }
            let start = fixed_start.unwrap_or_else(|| free[rng.gen_range(0..free.len())]);
            let goal = match fixed_goal {
                Some(g) => g,
                None => {
                    let candidates: Vec<Cell> =
                        free.iter().copied().filter(|&c| c != start).collect();
                    candidates[rng.gen_range(0..candidates.len())]
                }
            };
            if start != goal && bfs_shortest_steps(&map, start, goal).is_some() {
                return (map, start, goal);
            }
        }
    }
}

impl GoalEnv for GridWorldEnv {
    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (map, start, goal) = self.generate(&mut rng);
        self.map = map;
        self.agent = start;
        self.goal = goal;
        self.steps = 0;
        (self.state(), self.goal())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        let a = match action {
            Action::Discrete(a) if *a < COMPASS.len() => *a,
            other => return Err(EnvError::InvalidAction(format!("{other:?}"))),
        };
        if let Some(next) = self.map.neighbor(self.agent, a) {
            self.agent = next;
        }
        self.steps += 1;
        let success = self.agent == self.goal;
        let next_state = self.state();
        Ok(StepResult {
            reward: self.reward(&next_state, &self.goal()),
            next_state,
            done: success || self.steps >= self.config.horizon,
            success,
        })
    }

    fn state(&self) -> Vec<f64> {
        Self::state_from_parts(&self.map, self.agent)
    }

    fn goal(&self) -> Vec<f64> {
        vec![self.goal.0 as f64, self.goal.1 as f64]
    }

    fn set_goal(&mut self, goal: &[f64]) -> Result<()> {
        if goal.len() != 2 {
            return Err(EnvError::InvalidState(format!("goal {goal:?}")));
        }
        let cell = Self::cell_from_goal(goal);
        if !self.map.in_bounds(cell) {
            return Err(EnvError::InvalidState(format!("goal {goal:?} off grid")));
        }
        self.goal = cell;
        Ok(())
    }

    fn map_to_goal(&self, state: &[f64]) -> Vec<f64> {
        state[state.len() - 2..].to_vec()
    }

    fn goals_match(&self, achieved: &[f64], desired: &[f64]) -> bool {
        achieved == desired
    }

    fn reward(&self, next_state: &[f64], goal: &[f64]) -> f64 {
        let r = if self.is_success(next_state, goal) {
            self.config.success_reward
        } else {
            self.config.step_reward
        };
        r * self.config.reward_scale
    }

    fn snapshot(&self) -> EnvSnapshot {
        let mut w = ByteWriter::default();
        w.tag(b"GRID");
        w.u64(self.steps as u64);
        w.f64s(&self.state());
        w.f64s(&self.goal());
        w.finish()
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        let mut r = ByteReader::new(snapshot);
        r.expect_tag(b"GRID")?;
        let steps = r.u64()? as usize;
        let state = r.f64s()?;
        let goal = r.f64s()?;
        r.finish()?;
        let (map, agent) = self
            .parts_from_state(&state)
            .map_err(|e| EnvError::BadSnapshot(e.to_string()))?;
        if goal.len() != 2 {
            return Err(EnvError::BadSnapshot("goal".into()));
        }
        self.map = map;
        self.agent = agent;
        self.goal = Self::cell_from_goal(&goal);
        self.steps = steps;
        Ok(())
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(COMPASS.len())
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn encoding_widths(&self) -> (usize, usize) {
        let cells = self.config.size * self.config.size;
        let local = match self.config.encoding {
            GridEncoding::Flat => 0,
            GridEncoding::FlatLocal | GridEncoding::Relative => COMPASS.len(),
        };
        let offset = if self.config.encoding == GridEncoding::Relative { 2 } else { 0 };
        (2 * cells + local, cells + offset)
    }

    fn oracle_steps(&self, state: &[f64], goal: &[f64]) -> Option<Option<usize>> {
        let (map, agent) = self.parts_from_state(state).ok()?;
        Some(bfs_shortest_steps(&map, agent, Self::cell_from_goal(goal)))
    }

    fn encode_into(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        let size = self.config.size;
        let cells = size * size;
        let obstacles = &state[..cells];
        out.extend_from_slice(obstacles);
        let (ax, ay) = self.agent_from_state(state);
        let start = out.len();
        out.resize(start + cells, 0.0);
        out[start + ay * size + ax] = 1.0;
        if self.config.encoding != GridEncoding::Flat {
            for (dx, dy) in COMPASS {
                let nx = ax as i64 + dx;
                let ny = ay as i64 + dy;
                let blocked = nx < 0
                    || ny < 0
                    || nx >= size as i64
                    || ny >= size as i64
                    || obstacles[ny as usize * size + nx as usize] != 0.0;
                out.push(if blocked { 1.0 } else { 0.0 });
            }
        }
        let (gx, gy) = Self::cell_from_goal(goal);
        let start = out.len();
        out.resize(start + cells, 0.0);
        out[start + gy * size + gx] = 1.0;
        if self.config.encoding == GridEncoding::Relative {
            out.push((gx as f64 - ax as f64) / size as f64);
            out.push((gy as f64 - ay as f64) / size as f64);
        }
    }
}
