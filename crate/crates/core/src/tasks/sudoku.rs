//! 4×4 Sudoku with 2×2 boxes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RewardBreakdown;
use crate::error::{Error, Result};

/// Row-major 4×4 grid; 0 is an empty cell.
pub type Grid = [[u8; 4]; 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuInstance {
    pub puzzle: Grid,
    pub solution: Grid,
}

fn grid_string(g: &Grid) -> String {
    g.iter().flatten().map(|&d| char::from(b'0' + d)).collect()
}

impl SudokuInstance {
    pub fn prompt(&self) -> String {
        format!("{}:", grid_string(&self.puzzle))
    }

    pub fn solution_string(&self) -> String {
        grid_string(&self.solution)
    }

    pub fn empty_cells(&self) -> usize {
        self.puzzle.iter().flatten().filter(|&&d| d == 0).count()
    }
}

fn allowed(g: &Grid, r: usize, c: usize, d: u8) -> bool {
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..4).all(|k| g[r][k] != d && g[k][c] != d) && (0..4).all(|k| g[br + k / 2][bc + k % 2] != d)
}

pub fn is_valid_solution(g: &Grid) -> bool {
    let full = |cells: [u8; 4]| {
        let mut seen = [false; 5];
        cells
            .iter()
            .all(|&d| (1..=4).contains(&d) && !std::mem::replace(&mut seen[d as usize], true))
    };
    (0..4).all(|i| {
        let (br, bc) = (i / 2 * 2, i % 2 * 2);
        full(g[i])
            && full([g[0][i], g[1][i], g[2][i], g[3][i]])
            && full([g[br][bc], g[br][bc + 1], g[br + 1][bc], g[br + 1][bc + 1]])
    })
}

/// Number of completions of `g`, counting no further than `limit`.
pub fn count_solutions(g: &Grid, limit: usize) -> usize {
    fn go(g: &mut Grid, limit: usize, found: &mut usize) {
        let Some(pos) = (0..16).find(|&i| g[i / 4][i % 4] == 0) else {
            *found += 1;
            return;
        };
        let (r, c) = (pos / 4, pos % 4);
        for d in 1..=4 {
            if *found >= limit {
                return;
            }
            if allowed(g, r, c, d) {
                g[r][c] = d;
                go(g, limit, found);
                g[r][c] = 0;
            }
        }
    }
    let mut work = *g;
    // givens must not already conflict
    for i in 0..16 {
        let d = work[i / 4][i % 4];
        if d != 0 {
            work[i / 4][i % 4] = 0;
            if !(1..=4).contains(&d) || !allowed(&work, i / 4, i % 4, d) {
                return 0;
            }
            work[i / 4][i % 4] = d;
        }
    }
    let mut found = 0;
    go(&mut work, limit, &mut found);
    found
}

fn random_solution<R: Rng + ?Sized>(rng: &mut R) -> Grid {
    fn fill<R: Rng + ?Sized>(g: &mut Grid, pos: usize, rng: &mut R) -> bool {
        if pos == 16 {
            return true;
        }
        let (r, c) = (pos / 4, pos % 4);
        let mut digits = [1u8, 2, 3, 4];
        digits.shuffle(rng);
        for d in digits {
            if allowed(g, r, c, d) {
                g[r][c] = d;
                if fill(g, pos + 1, rng) {
                    return true;
                }
                g[r][c] = 0;
            }
        }
        false
    }
    let mut g = [[0; 4]; 4];
    assert!(fill(&mut g, 0, rng), "a 4x4 sudoku always exists");
    g
}

/// Puzzles with a unique solution and 4–8 empty cells.
pub fn gen_sudoku<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<SudokuInstance>> {
    if n == 0 {
        return Err(Error::Input("n must be >= 1".into()));
    }
    const MAX_TRIES: usize = 100;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut made = None;
        for _ in 0..MAX_TRIES {
            let solution = random_solution(rng);
            let want = rng.gen_range(4..=8);
            let mut puzzle = solution;
            let mut order: Vec<usize> = (0..16).collect();
            order.shuffle(rng);
            let mut removed = 0;
            for cell in order {
                if removed == want {
                    break;
                }
                let keep = puzzle[cell / 4][cell % 4];
                puzzle[cell / 4][cell % 4] = 0;
                if count_solutions(&puzzle, 2) == 1 {
                    removed += 1;
                } else {
                    puzzle[cell / 4][cell % 4] = keep;
                }
            }
            if removed == want {
                made = Some(SudokuInstance { puzzle, solution });
                break;
            }
        }
        out.push(made.ok_or_else(|| Error::Generation("no unique sudoku puzzle found".into()))?);
    }
    Ok(out)
}

/// Fraction of the puzzle's empty cells that the first 16 digits of the
/// completion fill with the solution's value.
pub fn sudoku_reward(completion: &str, inst: &SudokuInstance) -> RewardBreakdown {
    let digits: Vec<u8> = completion
        .bytes()
        .filter(u8::is_ascii_digit)
        .take(16)
        .map(|b| b - b'0')
        .collect();
    let empty = inst.empty_cells();
    let correct = (0..16)
        .filter(|&i| {
            inst.puzzle[i / 4][i % 4] == 0 && digits.get(i) == Some(&inst.solution[i / 4][i % 4])
        })
        .count();
    let score = if empty == 0 {
        0.0
    } else {
        correct as f64 / empty as f64
    };
    RewardBreakdown::from_components(vec![("sudoku".into(), score)])
}
