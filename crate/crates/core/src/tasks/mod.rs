//! Toy reasoning tasks, their generators, and exact reward functions.

mod arithmetic;
mod countdown;
mod sudoku;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use arithmetic::{
    arithmetic_reward, arithmetic_reward_with, boxed_reward, extract_answer, gen_arithmetic,
    ArithmeticInstance, XML_PENALTY_CAP, XML_PENALTY_PER_CHAR, XML_TAG_REWARD,
};
pub use countdown::{
    countdown_reward, gen_countdown, parse_expression, random_expression, reachable_targets,
    CountdownInstance, ParsedExpr, REWARD_NUMBERS_ONLY, REWARD_SOLVED,
};
pub use sudoku::{
    count_solutions, gen_sudoku, is_valid_solution, sudoku_reward, Grid, SudokuInstance,
};

/// Named reward components and their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub components: Vec<(String, f64)>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn from_components(components: Vec<(String, f64)>) -> Self {
        let total = components.iter().fold(0.0, |acc, (_, v)| acc + v);
        RewardBreakdown { components, total }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Body of the last `<tag>…</tag>` pair in `text`.
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.rfind(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Countdown,
    Sudoku,
    Arithmetic,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "countdown" => Ok(TaskKind::Countdown),
            "sudoku" => Ok(TaskKind::Sudoku),
            "arithmetic" => Ok(TaskKind::Arithmetic),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected countdown, sudoku or arithmetic)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Countdown => "countdown",
            TaskKind::Sudoku => "sudoku",
            TaskKind::Arithmetic => "arithmetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Countdown(CountdownInstance),
    Sudoku(SudokuInstance),
    Arithmetic(ArithmeticInstance),
}

impl Instance {
    pub fn kind(&self) -> TaskKind {
        match self {
            Instance::Countdown(_) => TaskKind::Countdown,
            Instance::Sudoku(_) => TaskKind::Sudoku,
            Instance::Arithmetic(_) => TaskKind::Arithmetic,
        }
    }

    pub fn prompt(&self) -> String {
        match self {
            Instance::Countdown(i) => i.prompt(),
            Instance::Sudoku(i) => i.prompt(),
            Instance::Arithmetic(i) => i.prompt(),
        }
    }

    pub fn reward(&self, completion: &str) -> RewardBreakdown {
        match self {
            Instance::Countdown(i) => countdown_reward(completion, i),
            Instance::Sudoku(i) => sudoku_reward(completion, i),
            Instance::Arithmetic(i) => arithmetic_reward(completion, i.answer),
        }
    }

    /// Largest reward any completion can earn.
    pub fn max_reward(&self) -> f64 {
        match self {
            Instance::Countdown(_) => REWARD_SOLVED,
            Instance::Sudoku(_) => 1.0,
            Instance::Arithmetic(i) => arithmetic_reward(&i.gold_completion(), i.answer).total,
        }
    }

    /// A completion earning the maximum reward; used as supervised data.
    pub fn gold_completion(&self) -> String {
        match self {
            Instance::Countdown(i) => i.witness.clone(),
            Instance::Sudoku(i) => i.solution_string(),
            Instance::Arithmetic(i) => i.gold_completion(),
        }
    }

    /// A completion in the task's answer format with randomized content:
    /// a random expression over the numbers, random digits in the empty
    /// cells, or a well-formed block around a random answer.
    pub fn format_completion<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            Instance::Countdown(i) => random_expression(&i.numbers, rng),
            Instance::Sudoku(i) => i
                .puzzle
                .iter()
                .flatten()
                .map(|&c| if c == 0 { rng.gen_range(1..=4u8) } else { c })
                .map(|d| char::from(b'0' + d))
                .collect(),
            Instance::Arithmetic(i) => {
                let guess = rng.gen_range(0..=144);
                format!(
                    "<reasoning>\n{}{}{}={guess}\n</reasoning>\n<answer>\n{guess}\n</answer>\n",
                    i.a, i.op, i.b
                )
            }
        }
    }

    pub fn to_record(&self) -> DatasetRecord {
        let (payload, answer) = match self {
            Instance::Countdown(i) => (serde_json::to_value(i), i.target.to_string()),
            Instance::Sudoku(i) => (serde_json::to_value(i), i.solution_string()),
            Instance::Arithmetic(i) => (serde_json::to_value(i), i.answer.to_string()),
        };
        DatasetRecord {
            task: self.kind(),
            prompt: self.prompt(),
            payload: payload.expect("instances serialize"),
            answer,
        }
    }

    pub fn from_record(rec: &DatasetRecord) -> Result<Self> {
        let inst = match rec.task {
            TaskKind::Countdown => {
                Instance::Countdown(serde_json::from_value(rec.payload.clone())?)
            }
            TaskKind::Sudoku => Instance::Sudoku(serde_json::from_value(rec.payload.clone())?),
            TaskKind::Arithmetic => {
                Instance::Arithmetic(serde_json::from_value(rec.payload.clone())?)
            }
        };
        if inst.prompt() != rec.prompt {
            return Err(Error::Input(format!(
                "record prompt {:?} does not match its payload",
                rec.prompt
            )));
        }
        Ok(inst)
    }
}

pub fn generate<R: Rng + ?Sized>(kind: TaskKind, rng: &mut R, n: usize) -> Result<Vec<Instance>> {
    Ok(match kind {
        TaskKind::Countdown => gen_countdown(rng, n)?
            .into_iter()
            .map(Instance::Countdown)
            .collect(),
        TaskKind::Sudoku => gen_sudoku(rng, n)?
            .into_iter()
            .map(Instance::Sudoku)
            .collect(),
        TaskKind::Arithmetic => gen_arithmetic(rng, n)?
            .into_iter()
            .map(Instance::Arithmetic)
            .collect(),
    })
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task: TaskKind,
    pub prompt: String,
    pub payload: serde_json::Value,
    pub answer: String,
}

pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, &inst.to_record())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(Instance::from_record(&rec)?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "{} holds no instances",
            path.display()
        )));
    }
    Ok(out)
}
