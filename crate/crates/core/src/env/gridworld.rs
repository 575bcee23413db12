//! Maze gridworlds with wall-indicator features.
//!
//! Cells are numbered row-major from the top-left corner, starting at 0. The
//! mazes are usually drawn with labels starting at 1, so label `k` is cell
//! `k - 1` here.
//!
//! The policy class is `π(a|s;w) ∝ exp(wᵀφ(s'))` where `s'` is the cell the
//! move leads to and `φ(s') ∈ {0,1}⁴` marks which of its four sides are walls.
//! At the goal every action pays the goal reward and teleports to the start
//! distribution; its feature columns are zero, so the policy there is
//! uniform and independent of `w`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;

use crate::calculus::TabularModel;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::{GibbsPolicy, TableFeatures};

/// Compass moves, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    fn opposite(self) -> Move {
        match self {
            Move::Up => Move::Down,
            Move::Down => Move::Up,
            Move::Left => Move::Right,
            Move::Right => Move::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Blocked `(cell, side)` pairs. Interior walls are stored from both sides.
    walls: BTreeSet<(usize, Move)>,
    pub starts: Vec<usize>,
    pub goal: usize,
    pub goal_reward: f64,
    pub discount: f64,
}

impl GridworldSpec {
    /// A maze with only the outer boundary walled. Defaults: goal reward 1, γ = 0.95.
    pub fn open(width: usize, height: usize, starts: Vec<usize>, goal: usize) -> Self {
        Self {
            width,
            height,
            walls: BTreeSet::new(),
            starts,
            goal,
            goal_reward: 1.0,
            discount: 0.95,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    fn neighbour(&self, cell: usize, side: Move) -> Option<usize> {
        let (r, c) = (cell / self.width, cell % self.width);
        match side {
            Move::Up if r > 0 => Some(cell - self.width),
            Move::Down if r + 1 < self.height => Some(cell + self.width),
            Move::Left if c > 0 => Some(cell - 1),
            Move::Right if c + 1 < self.width => Some(cell + 1),
            _ => None,
        }
    }

    /// Walls off `side` of `cell` (and the matching side of its neighbour).
    pub fn add_wall(&mut self, cell: usize, side: Move) {
        self.walls.insert((cell, side));
        if let Some(n) = self.neighbour(cell, side) {
            self.walls.insert((n, side.opposite()));
        }
    }

    pub fn is_blocked(&self, cell: usize, side: Move) -> bool {
        self.neighbour(cell, side).is_none() || self.walls.contains(&(cell, side))
    }

    /// Where `mv` leads from `cell`; bumping into a wall stays put.
    pub fn successor(&self, cell: usize, mv: Move) -> usize {
        if self.is_blocked(cell, mv) {
            cell
        } else {
            self.neighbour(cell, mv).expect("unblocked side has a neighbour")
        }
    }

    /// `φ(cell)`: 1 for every walled side, in [`Move::ALL`] order.
    pub fn wall_indicators(&self, cell: usize) -> [f64; 4] {
        Move::ALL.map(|m| if self.is_blocked(cell, m) { 1.0 } else { 0.0 })
    }

    fn check(&self) -> Result<()> {
        let n = self.num_cells();
        if n == 0 {
            return Err(Error::InvalidModel("gridworld has no cells".into()));
        }
        if self.goal >= n || self.starts.is_empty() || self.starts.iter().any(|&s| s >= n) {
            return Err(Error::InvalidModel("start or goal cell out of range".into()));
        }
        for &s in &self.starts {
            if !self.reachable_from(s).contains(&self.goal) {
                return Err(Error::InvalidModel(format!("goal {} unreachable from start {s}", self.goal)));
            }
        }
        Ok(())
    }

    fn reachable_from(&self, cell: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([cell]);
        let mut queue = VecDeque::from([cell]);
        while let Some(c) = queue.pop_front() {
            for m in Move::ALL {
                let next = self.successor(c, m);
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    pub fn build(&self) -> Result<Gridworld> {
        self.check()?;
        let n = self.num_cells();
        let mut start = vec![0.0; n];
        for &s in &self.starts {
            start[s] += 1.0 / self.starts.len() as f64;
        }
        let mut transition = Vec::with_capacity(n);
        let mut reward = Vec::with_capacity(n);
        let mut tables = Vec::with_capacity(n);
        for cell in 0..n {
            if cell == self.goal {
                transition.push(vec![start.clone(); 4]);
                reward.push(vec![self.goal_reward; 4]);
                tables.push(DMatrix::zeros(4, 4));
                continue;
            }
            let mut rows = Vec::with_capacity(4);
            let mut phi = DMatrix::zeros(4, 4);
            for m in Move::ALL {
                let next = self.successor(cell, m);
                let mut row = vec![0.0; n];
                row[next] = 1.0;
                rows.push(row);
                for (i, v) in self.wall_indicators(next).into_iter().enumerate() {
                    phi[(i, m.index())] = v;
                }
            }
            transition.push(rows);
            reward.push(vec![0.0; 4]);
            tables.push(phi);
        }
        let mdp = TabularMdp::new(transition, reward, start, self.discount)?;
        let features = TableFeatures::new(tables)?;
        Ok(Gridworld {
            spec: self.clone(),
            mdp,
            features,
        })
    }
}

/// A built maze: the MDP and the successor-wall features.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    pub mdp: TabularMdp,
    pub features: TableFeatures,
}

impl Gridworld {
    /// The exact model under the wall-feature Gibbs policy.
    pub fn gibbs_model(&self) -> TabularModel<GibbsPolicy<TableFeatures>> {
        TabularModel::new(self.mdp.clone(), GibbsPolicy::new(self.features.clone()))
            .expect("gridworld features cover all four actions")
    }
}

/// Five cells in a row; start at the left end, goal at the right end.
/// The three middle cells have identical wall features.
pub fn hallway_spec() -> GridworldSpec {
    GridworldSpec::open(5, 1, vec![0], 4)
}

pub fn build_hallway() -> Result<Gridworld> {
    hallway_spec().build()
}

/// A 3×3 maze: an open top row above three walled-in columns. Starts at the
/// bottom corners, goal at the bottom centre. The middle-row cells share a
/// feature vector although the best move is up in the outer two and down
/// in the centre.
pub fn mccallum_spec() -> GridworldSpec {
    let mut spec = GridworldSpec::open(3, 3, vec![6, 8], 7);
    for row in 1..3 {
        spec.add_wall(row * 3, Move::Right);
        spec.add_wall(row * 3 + 1, Move::Right);
    }
    spec
}

pub fn build_mccallum() -> Result<Gridworld> {
    mccallum_spec().build()
}
