//! Simplified Tetris.
//!
//! The falling piece is never steered: the player picks a rotation and a
//! column, the piece drops straight down to rest, full rows vanish and a new
//! piece is drawn uniformly from the seven tetrominoes. A game ends when a
//! placement leaves part of the piece above the top row.
//!
//! Row 0 is the bottom row. Each row is a bitmask with bit `c` for column `c`.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::ActionFeatures;

pub const NUM_PIECES: usize = 7;
pub const PIECE_NAMES: [char; NUM_PIECES] = ['I', 'O', 'T', 'S', 'Z', 'J', 'L'];

/// Extra rows above the visible board, enough to hold an overflowing piece.
const BUFFER_ROWS: usize = 4;
const MAX_WIDTH: usize = 32;

type Cells = [(u8, u8); 4];

/// Distinct orientations of every piece as `(row, column)` offsets from the
/// lower-left corner of the bounding box.
const ROTATIONS: [&[Cells]; NUM_PIECES] = [
    // I
    &[[(0, 0), (0, 1), (0, 2), (0, 3)], [(0, 0), (1, 0), (2, 0), (3, 0)]],
    // O
    &[[(0, 0), (0, 1), (1, 0), (1, 1)]],
    // T
    &[
        [(0, 0), (0, 1), (0, 2), (1, 1)],
        [(1, 0), (1, 1), (1, 2), (0, 1)],
        [(0, 0), (1, 0), (2, 0), (1, 1)],
        [(0, 1), (1, 1), (2, 1), (1, 0)],
    ],
    // S
    &[[(0, 0), (0, 1), (1, 1), (1, 2)], [(1, 0), (2, 0), (0, 1), (1, 1)]],
    // Z
    &[[(0, 1), (0, 2), (1, 0), (1, 1)], [(0, 0), (1, 0), (1, 1), (2, 1)]],
    // J
    &[
        [(0, 1), (1, 1), (2, 1), (0, 0)],
        [(1, 2), (1, 1), (1, 0), (0, 2)],
        [(2, 1), (2, 0), (1, 0), (0, 0)],
        [(0, 2), (0, 1), (0, 0), (1, 0)],
    ],
    // L
    &[
        [(0, 0), (1, 0), (2, 0), (0, 1)],
        [(1, 0), (1, 1), (1, 2), (0, 0)],
        [(2, 0), (2, 1), (1, 1), (0, 1)],
        [(0, 0), (0, 1), (0, 2), (1, 2)],
    ],
];

/// Cells of `piece` in orientation `rotation`.
pub fn piece_cells(piece: usize, rotation: usize) -> &'static Cells {
    &ROTATIONS[piece][rotation]
}

pub fn num_rotations(piece: usize) -> usize {
    ROTATIONS[piece].len()
}

fn piece_width(cells: &Cells) -> usize {
    cells.iter().map(|&(_, c)| c as usize).max().unwrap() + 1
}

/// A rotation and the column of the bounding box's left edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub rotation: u8,
    pub column: u8,
}

/// Every placement that keeps `piece` inside a board of this width, rotation-major.
pub fn legal_placements(piece: usize, width: usize) -> Vec<Placement> {
    let mut out = Vec::new();
    for (r, cells) in ROTATIONS[piece].iter().enumerate() {
        let pw = piece_width(cells);
        if pw > width {
            continue;
        }
        for c in 0..=width - pw {
            out.push(Placement {
                rotation: r as u8,
                column: c as u8,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TetrisBoard {
    width: usize,
    height: usize,
    rows: Vec<u32>,
    /// The piece waiting to be placed, in `0..7`.
    pub piece: usize,
    pub lines_cleared: u64,
}

/// What one placement did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceOutcome {
    pub board: TetrisBoard,
    pub lines: u32,
    pub terminal: bool,
}

impl TetrisBoard {
    pub fn empty(width: usize, height: usize, piece: usize) -> Result<Self> {
        if !(4..=MAX_WIDTH).contains(&width) || height < 4 {
            return Err(Error::InvalidModel(format!(
                "Tetris board must be 4..={MAX_WIDTH} wide and at least 4 high, got {width}x{height}"
            )));
        }
        if piece >= NUM_PIECES {
            return Err(Error::InvalidModel(format!("piece id {piece} out of range")));
        }
        Ok(Self {
            width,
            height,
            rows: vec![0; height + BUFFER_ROWS],
            piece,
            lines_cleared: 0,
        })
    }

    /// An empty board with a uniformly drawn first piece.
    pub fn new_game<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Result<Self> {
        Self::empty(width, height, rng.gen_range(0..NUM_PIECES))
    }

    /// Builds a board from text rows, top row first, `#` filled and `.` empty.
    pub fn from_rows(rows: &[&str], piece: usize) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut board = Self::empty(width, height, piece)?;
        for (i, line) in rows.iter().enumerate() {
            if line.len() != width {
                return Err(Error::InvalidModel("ragged Tetris board rows".into()));
            }
            let r = height - 1 - i;
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => board.rows[r] |= 1 << c,
                    '.' => {}
                    other => return Err(Error::InvalidModel(format!("bad board character {other:?}"))),
                }
            }
        }
        Ok(board)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_filled(&self, row: usize, col: usize) -> bool {
        self.rows[row] >> col & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|&r| r == 0)
    }

    fn full_mask(&self) -> u32 {
        if self.width == 32 {
            u32::MAX
        } else {
            (1u32 << self.width) - 1
        }
    }

    pub fn has_full_row(&self) -> bool {
        let full = self.full_mask();
        self.rows.iter().any(|&r| r == full)
    }

    /// Column height: one above the highest filled cell, 0 for an empty column.
    pub fn column_height(&self, col: usize) -> usize {
        (0..self.rows.len())
            .rev()
            .find(|&r| self.is_filled(r, col))
            .map_or(0, |r| r + 1)
    }

    pub fn legal_placements(&self) -> Vec<Placement> {
        legal_placements(self.piece, self.width)
    }

    /// Drops the current piece and clears full rows, without drawing the next piece.
    ///
    /// On overflow the piece is left in the buffer rows, nothing is cleared and
    /// `terminal` is set.
    pub fn drop_piece(&self, placement: Placement) -> Result<PlaceOutcome> {
        let rotation = placement.rotation as usize;
        let column = placement.column as usize;
        if rotation >= num_rotations(self.piece) {
            return Err(Error::InvalidModel(format!("rotation {rotation} illegal for piece {}", self.piece)));
        }
        let cells = piece_cells(self.piece, rotation);
        if column + piece_width(cells) > self.width {
            return Err(Error::InvalidModel(format!("column {column} illegal for this rotation")));
        }
        // Rest height: the lowest offset where every cell sits above its column.
        let base = cells
            .iter()
            .map(|&(r, c)| self.column_height(column + c as usize).saturating_sub(r as usize))
            .max()
            .unwrap();
        let mut next = self.clone();
        let mut top = 0;
        for &(r, c) in cells {
            let row = base + r as usize;
            next.rows[row] |= 1 << (column + c as usize);
            top = top.max(row);
        }
        if top >= self.height {
            return Ok(PlaceOutcome {
                board: next,
                lines: 0,
                terminal: true,
            });
        }
        let full = self.full_mask();
        let kept: Vec<u32> = next.rows.iter().copied().filter(|&r| r != full).collect();
        let lines = (next.rows.len() - kept.len()) as u32;
        next.rows = kept;
        next.rows.resize(self.height + BUFFER_ROWS, 0);
        next.lines_cleared += lines as u64;
        Ok(PlaceOutcome {
            board: next,
            lines,
            terminal: false,
        })
    }

    /// Plays action `index` of [`legal_placements`](Self::legal_placements) and,
    /// unless the game ended, draws the next piece.
    pub fn place<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<PlaceOutcome> {
        let actions = self.legal_placements();
        let placement = *actions.get(index).ok_or_else(|| {
            Error::InvalidModel(format!("action {index} out of range ({} legal)", actions.len()))
        })?;
        let mut out = self.drop_piece(placement)?;
        if !out.terminal {
            out.board.piece = rng.gen_range(0..NUM_PIECES);
        }
        Ok(out)
    }

    /// Column heights, `|h_c − h_{c+1}|`, maximum height and holes, in that order.
    pub fn features(&self) -> Vec<f64> {
        let heights: Vec<usize> = (0..self.width).map(|c| self.column_height(c)).collect();
        let mut out = Vec::with_capacity(feature_dim(self.width));
        out.extend(heights.iter().map(|&h| h as f64));
        out.extend(heights.windows(2).map(|p| p[0].abs_diff(p[1]) as f64));
        out.push(heights.iter().copied().max().unwrap_or(0) as f64);
        let holes: usize = (0..self.width)
            .map(|c| (0..heights[c]).filter(|&r| !self.is_filled(r, c)).count())
            .sum();
        out.push(holes as f64);
        out
    }
}

/// Length of [`TetrisBoard::features`] for a board of this width.
pub fn feature_dim(width: usize) -> usize {
    2 * width + 1
}

impl fmt::Display for TetrisBoard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "next: {}  lines: {}", PIECE_NAMES[self.piece], self.lines_cleared)?;
        for r in (0..self.height).rev() {
            let line: String = (0..self.width).map(|c| if self.is_filled(r, c) { '#' } else { '.' }).collect();
            writeln!(f, "|{line}|")?;
        }
        Ok(())
    }
}

/// Post-placement board features of every legal placement of the current piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementFeatures {
    pub width: usize,
}

impl ActionFeatures<TetrisBoard> for PlacementFeatures {
    fn dim(&self) -> usize {
        feature_dim(self.width)
    }

    fn num_actions(&self, s: &TetrisBoard) -> usize {
        s.legal_placements().len()
    }

    fn features(&self, s: &TetrisBoard) -> DMatrix<f64> {
        let actions = s.legal_placements();
        let mut out = DMatrix::zeros(self.dim(), actions.len());
        for (a, p) in actions.iter().enumerate() {
            let after = s.drop_piece(*p).expect("legal placement").board;
            for (i, v) in after.features().into_iter().enumerate() {
                out[(i, a)] = v;
            }
        }
        out
    }
}
