use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::conditioning::Variant;

pub const RATINGS_HEADER: [&str; 5] = ["scene_id", "config", "question", "rater_id", "score"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Question {
    Identity,
    Control,
    Interaction,
}

impl Question {
    pub const ALL: [Question; 3] = [Question::Identity, Question::Control, Question::Interaction];

    pub fn column_label(self) -> &'static str {
        match self {
            Question::Identity => "Identity",
            Question::Control => "Controllable",
            Question::Interaction => "Interactions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub scene_id: String,
    pub config: Variant,
    pub question: Question,
    pub rater_id: String,
    pub score: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum RatingsError {
    #[error("ratings header must be `scene_id,config,question,rater_id,score`, found `{0}`")]
    Header(String),
    #[error("ratings line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("ratings line {line}: score {score} is not 0 or 1")]
    Score { line: usize, score: u8 },
}

/// Parses and validates a ratings CSV.
pub fn read_ratings(reader: impl Read) -> Result<Vec<RatingRecord>, RatingsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| RatingsError::Row { line: 1, message: e.to_string() })?.clone();
    if header.iter().ne(RATINGS_HEADER.iter().copied()) {
        return Err(RatingsError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RatingRecord>().enumerate() {
        let line = i + 2;
        let rec = row.map_err(|e| RatingsError::Row { line, message: e.to_string() })?;
        if rec.score > 1 {
            return Err(RatingsError::Score { line, score: rec.score });
        }
        out.push(rec);
    }
    Ok(out)
}

/// A percentage printed with at most one decimal: `61%`, `63.5%`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentage(pub f64);

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{:.1}", self.0);
        write!(f, "{}%", s.strip_suffix(".0").unwrap_or(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingCell {
    pub config: Variant,
    pub question: Question,
    pub responses: usize,
    pub percentage: f64,
    pub formatted: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RatingTable {
    pub cells: Vec<RatingCell>,
}

/// 100 times the mean score of every (config, question) group, sorted by
/// config then question.
pub fn aggregate_ratings(records: &[RatingRecord]) -> RatingTable {
    let mut groups: BTreeMap<(Variant, Question), (usize, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry((r.config, r.question)).or_default();
        g.0 += r.score as usize;
        g.1 += 1;
    }
    let cells = groups
        .into_iter()
        .map(|((config, question), (sum, n))| {
            let percentage = 100.0 * sum as f64 / n as f64;
            RatingCell { config, question, responses: n, percentage, formatted: Percentage(percentage).to_string() }
        })
        .collect();
    RatingTable { cells }
}

impl RatingTable {
    pub fn get(&self, config: Variant, question: Question) -> Option<&RatingCell> {
        self.cells.iter().find(|c| c.config == config && c.question == question)
    }

    /// Markdown table with one row per config and one column per question
    /// that has any responses. Empty cells print `N/A`.
    pub fn to_markdown(&self) -> String {
        let questions: Vec<Question> =
            Question::ALL.into_iter().filter(|q| self.cells.iter().any(|c| c.question == *q)).collect();
        let mut out = String::from("| Config |");
        for q in &questions {
            out += &format!(" {} |", q.column_label());
        }
        out += "\n|---|";
        out += &"---|".repeat(questions.len());
        out.push('\n');
        for v in Variant::ALL {
            if !self.cells.iter().any(|c| c.config == v) {
                continue;
            }
            out += &format!("| {} |", v.table_label());
            for q in &questions {
                let cell = self.get(v, *q).map_or("N/A", |c| c.formatted.as_str());
                out += &format!(" {cell} |");
            }
            out.push('\n');
        }
        out
    }
}
