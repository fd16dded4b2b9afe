use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutlierType {
    Hunger,
    Social,
    Work,
    None,
}

impl OutlierType {
    pub const ABNORMAL: [OutlierType; 3] = [OutlierType::Hunger, OutlierType::Social, OutlierType::Work];

    pub fn as_str(self) -> &'static str {
        match self {
            OutlierType::Hunger => "hunger",
            OutlierType::Social => "social",
            OutlierType::Work => "work",
            OutlierType::None => "none",
        }
    }
}

impl FromStr for OutlierType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hunger" => Ok(OutlierType::Hunger),
            "social" => Ok(OutlierType::Social),
            "work" => Ok(OutlierType::Work),
            "none" => Ok(OutlierType::None),
            other => Err(Error::Config(format!("unknown outlier type `{other}`"))),
        }
    }
}

impl fmt::Display for OutlierType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How often an outlier agent acts abnormally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intensity {
    Red,
    Orange,
    Yellow,
    None,
}

impl Intensity {
    pub const LEVELS: [Intensity; 3] = [Intensity::Red, Intensity::Orange, Intensity::Yellow];

    /// Daily probability of abnormal behavior: 100%, 50%, 20%.
    pub fn probability(self) -> f64 {
        match self {
            Intensity::Red => 1.0,
            Intensity::Orange => 0.5,
            Intensity::Yellow => 0.2,
            Intensity::None => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Red => "red",
            Intensity::Orange => "orange",
            Intensity::Yellow => "yellow",
            Intensity::None => "none",
        }
    }
}

impl FromStr for Intensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(Intensity::Red),
            "orange" => Ok(Intensity::Orange),
            "yellow" => Ok(Intensity::Yellow),
            "none" => Ok(Intensity::None),
            other => Err(Error::Config(format!("unknown intensity `{other}`"))),
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub is_outlier: bool,
    pub kind: OutlierType,
    pub intensity: Intensity,
}

impl Label {
    pub const NORMAL: Label = Label {
        is_outlier: false,
        kind: OutlierType::None,
        intensity: Intensity::None,
    };

    pub fn outlier(kind: OutlierType, intensity: Intensity) -> Self {
        Self {
            is_outlier: true,
            kind,
            intensity,
        }
    }
}

/// Ground truth per user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    pub labels: BTreeMap<String, Label>,
    /// Extra columns skipped while parsing.
    pub unknown_fields: usize,
}

impl LabelTable {
    pub fn get(&self, user: &str) -> Option<&Label> {
        self.labels.get(user)
    }

    pub fn is_outlier(&self, user: &str) -> bool {
        self.labels.get(user).is_some_and(|l| l.is_outlier)
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.values().filter(|l| l.is_outlier).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn parse_labels(text: &str, file: &str) -> Result<LabelTable> {
    let mut table = LabelTable::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() < 4 {
            return Err(Error::parse(file, line, "expected user_id,is_outlier,type,intensity"));
        }
        table.unknown_fields += cols.len() - 4;
        let is_outlier = match cols[1] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::parse(
                    file,
                    line,
                    format!("is_outlier must be 0 or 1, got `{other}`"),
                ))
            }
        };
        let kind: OutlierType = cols[2]
            .parse()
            .map_err(|e: Error| Error::parse(file, line, e.to_string()))?;
        let intensity: Intensity = cols[3]
            .parse()
            .map_err(|e: Error| Error::parse(file, line, e.to_string()))?;
        if !is_outlier && (kind != OutlierType::None || intensity != Intensity::None) {
            return Err(Error::parse(
                file,
                line,
                "normal users must have type and intensity `none`",
            ));
        }
        if is_outlier && (kind == OutlierType::None || intensity == Intensity::None) {
            return Err(Error::parse(file, line, "outliers need a type and an intensity"));
        }
        table.labels.insert(
            cols[0].to_string(),
            Label {
                is_outlier,
                kind,
                intensity,
            },
        );
    }
    if table.unknown_fields > 0 {
        log::warn!("{file}: ignored {} extra column(s)", table.unknown_fields);
    }
    Ok(table)
}

pub fn load_labels(path: &Path) -> Result<LabelTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

pub fn render_labels(table: &LabelTable) -> String {
    let mut out = String::new();
    for (user, l) in &table.labels {
        out.push_str(&format!(
            "{user},{},{},{}\n",
            u8::from(l.is_outlier),
            l.kind,
            l.intensity
        ));
    }
    out
}

pub fn write_labels(path: &Path, table: &LabelTable) -> Result<()> {
    std::fs::write(path, render_labels(table)).map_err(|e| Error::io(path, e))
}
