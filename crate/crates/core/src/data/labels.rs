use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::N_AU;

pub const LABEL_HEADER: [&str; 16] = [
    "image", "valence", "arousal", "expression", "au1", "au2", "au4", "au6", "au7", "au10", "au12",
    "au15", "au23", "au24", "au25", "au26",
];

pub const VA_SENTINEL: f32 = -5.0;
pub const EXPR_SENTINEL: i32 = -1;
pub const AU_SENTINEL: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Expression {
    Neutral,
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
    Other,
}

impl Expression {
    pub const ALL: [Expression; 8] = [
        Expression::Neutral,
        Expression::Anger,
        Expression::Disgust,
        Expression::Fear,
        Expression::Happiness,
        Expression::Sadness,
        Expression::Surprise,
        Expression::Other,
    ];

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expression::Neutral => "neutral",
            Expression::Anger => "anger",
            Expression::Disgust => "disgust",
            Expression::Fear => "fear",
            Expression::Happiness => "happiness",
            Expression::Sadness => "sadness",
            Expression::Surprise => "surprise",
            Expression::Other => "other",
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    #[default]
    Annotated,
    Pseudo,
}

/// Provenance of each task's label group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSources {
    pub va: LabelSource,
    pub expr: LabelSource,
    pub au: LabelSource,
}

/// Labels of one image. `None` means the sentinel (invalid) value was given.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub id: String,
    pub va: Option<[f32; 2]>,
    pub expr: Option<Expression>,
    pub au: Option<[bool; N_AU]>,
    pub source: LabelSources,
}

impl LabelRecord {
    pub fn unlabeled(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            va: None,
            expr: None,
            au: None,
            source: LabelSources::default(),
        }
    }
}

fn parse_f32(field: &str, name: &str, line: usize) -> Result<f32> {
    field.trim().parse::<f32>().map_err(|_| Error::Label {
        line,
        message: format!("{name}: not a number: {field:?}"),
    })
}

fn parse_i32(field: &str, name: &str, line: usize) -> Result<i32> {
    let v = parse_f32(field, name, line)?;
    if v.fract() != 0.0 {
        return Err(Error::Label {
            line,
            message: format!("{name}: expected an integer, got {field:?}"),
        });
    }
    Ok(v as i32)
}

fn parse_record(fields: &csv::StringRecord, line: usize) -> Result<LabelRecord> {
    if fields.len() != LABEL_HEADER.len() {
        return Err(Error::Label {
            line,
            message: format!("expected {} fields, found {}", LABEL_HEADER.len(), fields.len()),
        });
    }
    let err = |message: String| Error::Label { line, message };
    let id = fields[0].trim().to_string();
    if id.is_empty() {
        return Err(err("empty image id".into()));
    }

    let valence = parse_f32(&fields[1], "valence", line)?;
    let arousal = parse_f32(&fields[2], "arousal", line)?;
    let va = match (valence == VA_SENTINEL, arousal == VA_SENTINEL) {
        (true, true) => None,
        (false, false) => {
            for (name, v) in [("valence", valence), ("arousal", arousal)] {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(err(format!("{name} {v} outside [-1, 1]")));
                }
            }
            Some([valence, arousal])
        }
        _ => return Err(err("valence and arousal must both be valid or both be -5".into())),
    };

    let code = parse_i32(&fields[3], "expression", line)?;
    let expr = if code == EXPR_SENTINEL {
        None
    } else {
        let e = usize::try_from(code).ok().and_then(Expression::from_code);
        Some(e.ok_or_else(|| err(format!("expression {code} outside 0..7")))?)
    };

    let mut au = [false; N_AU];
    let mut au_valid = true;
    for (u, slot) in au.iter_mut().enumerate() {
        let name = LABEL_HEADER[4 + u];
        match parse_i32(&fields[4 + u], name, line)? {
            0 => {}
            1 => *slot = true,
            AU_SENTINEL => au_valid = false,
            other => return Err(err(format!("{name} must be 0, 1 or -1, got {other}"))),
        }
    }

    Ok(LabelRecord {
        id,
        va,
        expr,
        au: au_valid.then_some(au),
        source: LabelSources::default(),
    })
}

pub fn parse_labels<R: std::io::Read>(reader: R) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<&str> = header.iter().collect();
    if found != LABEL_HEADER {
        return Err(Error::Label {
            line: 1,
            message: format!("header {found:?} does not match {LABEL_HEADER:?}"),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Label {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        out.push(parse_record(&row, line)?);
    }
    Ok(out)
}

/// Reads a label CSV, resolving sentinel values into invalid labels.
pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labels(file)
}

fn format_label_row(l: &LabelRecord) -> Vec<String> {
    let mut row = Vec::with_capacity(LABEL_HEADER.len());
    row.push(l.id.clone());
    match l.va {
        Some([v, a]) => {
            row.push(v.to_string());
            row.push(a.to_string());
        }
        None => {
            row.push("-5".into());
            row.push("-5".into());
        }
    }
    row.push(l.expr.map_or("-1".into(), |e| e.code().to_string()));
    match l.au {
        Some(au) => row.extend(au.iter().map(|&b| if b { "1" } else { "0" }.to_string())),
        None => row.extend(std::iter::repeat_n("-1".to_string(), N_AU)),
    }
    row
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LABEL_HEADER)?;
    for l in labels {
        w.write_record(format_label_row(l))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fills invalid label groups of `primary` from `pseudo`. Valid annotations are
/// never replaced. Returns the merged list (in `primary` order) and warnings for
/// pseudo records whose id is unknown.
pub fn merge_pseudo_labels(primary: &[LabelRecord], pseudo: &[LabelRecord]) -> (Vec<LabelRecord>, Vec<String>) {
    let index: HashMap<&str, usize> = primary.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let mut merged = primary.to_vec();
    let mut warnings = Vec::new();
    for p in pseudo {
        let Some(&i) = index.get(p.id.as_str()) else {
            warnings.push(format!("pseudo label for unknown id {:?} skipped", p.id));
            continue;
        };
        let m = &mut merged[i];
        if m.va.is_none() && p.va.is_some() {
            m.va = p.va;
            m.source.va = LabelSource::Pseudo;
        }
        if m.expr.is_none() && p.expr.is_some() {
            m.expr = p.expr;
            m.source.expr = LabelSource::Pseudo;
        }
        if m.au.is_none() && p.au.is_some() {
            m.au = p.au;
            m.source.au = LabelSource::Pseudo;
        }
    }
    (merged, warnings)
}
