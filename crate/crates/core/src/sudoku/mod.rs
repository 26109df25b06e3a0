//! 9×9 Sudoku boards: validation, file format, solving and generation.
//!
//! Board files hold one board per line, `givens,solution`, each an 81-digit
//! row-major string; `0` marks a blank in the givens.

mod eval;

pub use eval::*;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CELLS: usize = 81;

/// Row, column and box index of a cell.
fn units(cell: usize) -> (usize, usize, usize) {
    let (r, c) = (cell / 9, cell % 9);
    (r, c, (r / 3) * 3 + c / 3)
}

/// Number of the 27 rows, columns and boxes that are not a permutation of 1-9.
pub fn violated_units(grid: &[u8; CELLS]) -> usize {
    let mut seen = [0u16; 27];
    for (cell, &d) in grid.iter().enumerate() {
        if (1..=9).contains(&d) {
            let (r, c, b) = units(cell);
            for u in [r, 9 + c, 18 + b] {
                seen[u] |= 1 << d;
            }
        }
    }
    seen.iter().filter(|&&m| m != 0b11_1111_1110).count()
}

/// Complete grid satisfying all 27 constraints.
pub fn is_valid_solution(grid: &[u8; CELLS]) -> bool {
    violated_units(grid) == 0
}

/// One puzzle with its reference solution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Board {
    pub givens: [u8; CELLS],
    pub solution: [u8; CELLS],
}

impl Board {
    pub fn new(givens: [u8; CELLS], solution: [u8; CELLS]) -> Result<Self> {
        if givens.iter().any(|&d| d > 9) {
            return Err(Error::Param("given digits must be 0-9".into()));
        }
        if !is_valid_solution(&solution) {
            return Err(Error::Param("solution violates the Sudoku constraints".into()));
        }
        if let Some(i) = (0..CELLS).find(|&i| givens[i] != 0 && givens[i] != solution[i]) {
            return Err(Error::Param(format!(
                "given {} at cell {i} contradicts solution digit {}",
                givens[i], solution[i]
            )));
        }
        Ok(Self { givens, solution })
    }

    pub fn given_count(&self) -> usize {
        self.givens.iter().filter(|&&d| d != 0).count()
    }

    /// `prediction` fills every cell, respects the givens and satisfies all constraints.
    pub fn accepts(&self, prediction: &[u8; CELLS]) -> bool {
        (0..CELLS).all(|i| self.givens[i] == 0 || self.givens[i] == prediction[i]) && is_valid_solution(prediction)
    }

    /// Token ids (the givens, 0 = blank).
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.givens.iter().map(|&d| d as usize)
    }

    /// Class targets `0..9` for digits `1..=9`.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.solution.iter().map(|&d| d as usize - 1)
    }

    pub fn to_line(&self) -> String {
        let s = |g: &[u8; CELLS]| g.iter().map(|d| char::from(b'0' + d)).collect::<String>();
        format!("{},{}", s(&self.givens), s(&self.solution))
    }
}

fn parse_digits(s: &str, line: usize) -> Result<[u8; CELLS]> {
    let s = s.trim();
    if s.len() != CELLS || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse {
            line,
            msg: format!("expected 81 digits, got {:?}", s),
        });
    }
    let mut out = [0u8; CELLS];
    for (o, b) in out.iter_mut().zip(s.bytes()) {
        *o = b - b'0';
    }
    Ok(out)
}

/// Parse one `givens,solution` line (1-based `line` for diagnostics).
pub fn parse_line(text: &str, line: usize) -> Result<Board> {
    let (g, s) = text.split_once(',').ok_or_else(|| Error::Parse {
        line,
        msg: "expected `givens,solution`".into(),
    })?;
    let board = Board::new(parse_digits(g, line)?, parse_digits(s, line)?);
    board.map_err(|e| Error::Parse { line, msg: e.to_string() })
}

/// Read a board file; blank lines are skipped.
pub fn load_boards(path: &Path) -> Result<Vec<Board>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut boards = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        boards.push(parse_line(&line, i + 1)?);
    }
    Ok(boards)
}

pub fn save_boards(path: &Path, boards: &[Board]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in boards {
        writeln!(f, "{}", b.to_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Candidate bitmasks (bits 1-9) for constraint propagation.
#[derive(Clone)]
struct Masks {
    rows: [u16; 9],
    cols: [u16; 9],
    boxes: [u16; 9],
}

impl Masks {
    fn from_grid(grid: &[u8; CELLS]) -> Option<Self> {
        let mut m = Masks {
            rows: [0; 9],
            cols: [0; 9],
            boxes: [0; 9],
        };
        for (cell, &d) in grid.iter().enumerate() {
            if d != 0 {
                if m.free(cell) & (1 << d) == 0 {
                    return None;
                }
                m.toggle(cell, d);
            }
        }
        Some(m)
    }

    fn free(&self, cell: usize) -> u16 {
        let (r, c, b) = units(cell);
        !(self.rows[r] | self.cols[c] | self.boxes[b]) & 0b11_1111_1110
    }

    fn toggle(&mut self, cell: usize, d: u8) {
        let (r, c, b) = units(cell);
        self.rows[r] ^= 1 << d;
        self.cols[c] ^= 1 << d;
        self.boxes[b] ^= 1 << d;
    }
}

/// Depth-first search with the most-constrained blank first.
///
/// Stops after `limit` solutions; `order` shuffles candidate digits when given.
fn search<R: Rng>(
    grid: &mut [u8; CELLS],
    masks: &mut Masks,
    limit: usize,
    found: &mut usize,
    first: &mut Option<[u8; CELLS]>,
    rng: &mut Option<&mut R>,
) {
    let mut best: Option<(usize, u16)> = None;
    for cell in 0..CELLS {
        if grid[cell] == 0 {
            let f = masks.free(cell);
            if best.is_none_or(|(_, bf)| f.count_ones() < bf.count_ones()) {
                best = Some((cell, f));
                if f.count_ones() <= 1 {
                    break;
                }
            }
        }
    }
    let Some((cell, free)) = best else {
        *found += 1;
        if first.is_none() {
            *first = Some(*grid);
        }
        return;
    };
    let mut digits: Vec<u8> = (1..=9).filter(|d| free & (1 << d) != 0).collect();
    if let Some(r) = rng.as_deref_mut() {
        digits.shuffle(r);
    }
    for d in digits {
        grid[cell] = d;
        masks.toggle(cell, d);
        search(grid, masks, limit, found, first, rng);
        masks.toggle(cell, d);
        grid[cell] = 0;
        if *found >= limit {
            return;
        }
    }
}

/// Number of solutions of `grid`, counting at most `limit`.
pub fn count_solutions(grid: &[u8; CELLS], limit: usize) -> usize {
    let Some(mut masks) = Masks::from_grid(grid) else {
        return 0;
    };
    let mut g = *grid;
    let mut found = 0;
    let mut first = None;
    search::<ChaCha8Rng>(&mut g, &mut masks, limit, &mut found, &mut first, &mut None);
    found
}

/// Some solution of `grid`, if any.
pub fn solve(grid: &[u8; CELLS]) -> Option<[u8; CELLS]> {
    let mut masks = Masks::from_grid(grid)?;
    let mut g = *grid;
    let mut found = 0;
    let mut first = None;
    search::<ChaCha8Rng>(&mut g, &mut masks, 1, &mut found, &mut first, &mut None);
    first
}

/// A uniformly shuffled search yields a random complete grid.
pub fn random_solution<R: Rng>(rng: &mut R) -> [u8; CELLS] {
    let mut g = [0u8; CELLS];
    let mut masks = Masks::from_grid(&g).expect("empty grid is consistent");
    let mut found = 0;
    let mut first = None;
    search(&mut g, &mut masks, 1, &mut found, &mut first, &mut Some(rng));
    first.expect("empty grid is solvable")
}

/// Remove cells from a full grid down to `target` givens.
///
/// Removal keeps the puzzle uniquely solvable while it can; once no single
/// removal preserves uniqueness, the remaining cells are removed at random.
fn carve<R: Rng>(solution: &[u8; CELLS], target: usize, rng: &mut R) -> [u8; CELLS] {
    let mut givens = *solution;
    let mut order: Vec<usize> = (0..CELLS).collect();
    order.shuffle(rng);
    let mut count = CELLS;
    let mut kept = Vec::new();
    for &cell in &order {
        if count == target {
            return givens;
        }
        let d = givens[cell];
        givens[cell] = 0;
        if count_solutions(&givens, 2) == 1 {
            count -= 1;
        } else {
            givens[cell] = d;
            kept.push(cell);
        }
    }
    for cell in kept {
        if count == target {
            break;
        }
        givens[cell] = 0;
        count -= 1;
    }
    givens
}

/// `n` boards with given counts drawn uniformly from `lo..=hi`.
pub fn generate_boards(n: usize, lo: usize, hi: usize, seed: u64) -> Result<Vec<Board>> {
    if lo < 17 || hi > CELLS || lo > hi {
        return Err(Error::Param(format!("given range {lo}-{hi} must lie within 17-81")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let solution = random_solution(&mut rng);
            let target = rng.random_range(lo..=hi);
            let givens = carve(&solution, target, &mut rng);
            Board::new(givens, solution)
        })
        .collect()
}
