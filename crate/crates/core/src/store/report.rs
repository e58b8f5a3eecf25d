//! Saved report patterns: filter, projection, sort, and CSV/HTML output.
//!
//! Filter grammar:
//!
//! ```text
//! filter     := "" | condition ( "and" condition )*
//! condition  := column op literal
//! op         := "=" | "!=" | "<" | "<=" | ">" | ">=" | "contains"
//!             | "≠" | "≤" | "≥"
//! literal    := number | 'quoted' | "quoted" | word | true | false | null
//! ```

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::table::{ColumnType, Row, Schema, Table, Value};
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Html,
}

impl ReportFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Html => "html",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, StoreError> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "html" => Ok(ReportFormat::Html),
            _ => Err(StoreError::InvalidPattern(format!("unknown format `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortKey {
    pub column: String,
    #[serde(default)]
    pub descending: bool,
}

impl FromStr for SortKey {
    type Err = StoreError;

    /// `column` or `column asc|desc`
    fn from_str(s: &str) -> Result<Self, StoreError> {
        let mut words = s.split_whitespace();
        let column = words.next().ok_or_else(|| StoreError::InvalidPattern("empty sort key".into()))?;
        let descending = match words.next().map(str::to_ascii_lowercase).as_deref() {
            None | Some("asc") => false,
            Some("desc") => true,
            Some(other) => return Err(StoreError::InvalidPattern(format!("bad sort direction `{other}`"))),
        };
        if words.next().is_some() {
            return Err(StoreError::InvalidPattern(format!("bad sort key `{s}`")));
        }
        Ok(SortKey { column: column.to_string(), descending })
    }
}

impl std::fmt::Display for SortKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.column, if self.descending { " desc" } else { "" })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportPattern {
    pub name: String,
    pub source: String,
    #[serde(default)]
    pub filter: String,
    pub columns: Vec<String>,
    #[serde(default)]
    pub sort: Option<SortKey>,
    pub format: ReportFormat,
}

impl ReportPattern {
    pub fn to_row(&self) -> Row {
        vec![
            Value::text(&self.name),
            Value::text(&self.source),
            Value::text(&self.filter),
            Value::text(self.columns.join(",")),
            Value::opt_text(self.sort.as_ref().map(|s| s.to_string())),
            Value::text(self.format.as_str()),
        ]
    }

    pub fn from_row(row: &Row) -> Result<Self, StoreError> {
        let text = |i: usize| row.get(i).and_then(Value::as_text).unwrap_or_default().to_string();
        Ok(ReportPattern {
            name: text(0),
            source: text(1),
            filter: text(2),
            columns: text(3).split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect(),
            sort: match row.get(4).and_then(Value::as_text) {
                Some(s) => Some(s.parse()?),
                None => None,
            },
            format: text(5).parse()?,
        })
    }

    /// Checks the pattern against the source table's schema.
    pub fn validate(&self, schema: &Schema) -> Result<(), StoreError> {
        if self.name.is_empty() {
            return Err(StoreError::InvalidPattern("empty pattern name".into()));
        }
        if self.columns.is_empty() {
            return Err(StoreError::InvalidPattern("no columns selected".into()));
        }
        for c in &self.columns {
            schema.column(c)?;
        }
        if let Some(sort) = &self.sort {
            schema.column(&sort.column)?;
        }
        Filter::parse(&self.filter)?.bind(schema)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    /// Kept as written so text columns see leading zeros.
    Number(String),
    Text(String),
    Bool(bool),
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub column: String,
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filter {
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Quoted(String),
    Number(String),
    Op(CmpOp),
}

fn tokenize(src: &str) -> Result<Vec<Token>, StoreError> {
    let bad = |msg: String| StoreError::InvalidFilter(msg);
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        let (op, width) = match (c, next) {
            ('<', Some('=')) => (Some(CmpOp::Le), 2),
            ('>', Some('=')) => (Some(CmpOp::Ge), 2),
            ('!', Some('=')) | ('<', Some('>')) => (Some(CmpOp::Ne), 2),
            ('=', Some('=')) => (Some(CmpOp::Eq), 2),
            ('<', _) => (Some(CmpOp::Lt), 1),
            ('>', _) => (Some(CmpOp::Gt), 1),
            ('=', _) => (Some(CmpOp::Eq), 1),
            ('≤', _) => (Some(CmpOp::Le), 1),
            ('≥', _) => (Some(CmpOp::Ge), 1),
            ('≠', _) => (Some(CmpOp::Ne), 1),
            _ => (None, 0),
        };
        if let Some(op) = op {
            out.push(Token::Op(op));
            i += width;
            continue;
        }
        if c == '\'' || c == '"' {
            let start = i + 1;
            let end = chars[start..]
                .iter()
                .position(|&q| q == c)
                .ok_or_else(|| bad(format!("unterminated string at {i}")))?;
            out.push(Token::Quoted(chars[start..start + end].iter().collect()));
            i = start + end + 1;
            continue;
        }
        let numeric_start = c.is_ascii_digit() || (c == '-' && next.is_some_and(|n| n.is_ascii_digit()));
        let start = i;
        i += 1;
        while i < chars.len() {
            let d = chars[i];
            let cont = if numeric_start {
                d.is_ascii_alphanumeric() || d == '.'
            } else {
                d.is_alphanumeric() || d == '_' || d == '.' || d == '-' || d == ':'
            };
            if !cont {
                break;
            }
            i += 1;
        }
        let text: String = chars[start..i].iter().collect();
        if numeric_start {
            out.push(Token::Number(text));
        } else if c.is_alphanumeric() || c == '_' {
            out.push(Token::Word(text));
        } else {
            return Err(bad(format!("unexpected `{c}`")));
        }
    }
    Ok(out)
}

impl Filter {
    pub fn parse(src: &str) -> Result<Self, StoreError> {
        let tokens = tokenize(src)?;
        let mut conditions = Vec::new();
        let mut it = tokens.into_iter().peekable();
        while it.peek().is_some() {
            if !conditions.is_empty() {
                match it.next() {
                    Some(Token::Word(w)) if w.eq_ignore_ascii_case("and") => {}
                    other => return Err(StoreError::InvalidFilter(format!("expected `and`, got {other:?}"))),
                }
            }
            let column = match it.next() {
                Some(Token::Word(w)) => w,
                other => return Err(StoreError::InvalidFilter(format!("expected column, got {other:?}"))),
            };
            let op = match it.next() {
                Some(Token::Op(op)) => op,
                Some(Token::Word(w)) if w.eq_ignore_ascii_case("contains") => CmpOp::Contains,
                other => return Err(StoreError::InvalidFilter(format!("expected operator, got {other:?}"))),
            };
            let literal = match it.next() {
                Some(Token::Number(n)) => Literal::Number(n),
                Some(Token::Quoted(s)) => Literal::Text(s),
                Some(Token::Word(w)) => match w.to_ascii_lowercase().as_str() {
                    "true" => Literal::Bool(true),
                    "false" => Literal::Bool(false),
                    "null" => Literal::Null,
                    _ => Literal::Text(w),
                },
                other => return Err(StoreError::InvalidFilter(format!("expected literal, got {other:?}"))),
            };
            conditions.push(Condition { column, op, literal });
        }
        Ok(Filter { conditions })
    }

    /// Resolves columns and checks literal types against the schema.
    pub fn bind(&self, schema: &Schema) -> Result<BoundFilter, StoreError> {
        let mut bound = Vec::new();
        for cond in &self.conditions {
            let (index, col) = schema.column(&cond.column)?;
            let value = match (&cond.literal, col.ty) {
                (Literal::Null, _) => {
                    if !matches!(cond.op, CmpOp::Eq | CmpOp::Ne) {
                        return Err(StoreError::InvalidFilter(format!("`{}`: null only supports = and !=", col.name)));
                    }
                    Value::Null
                }
                (Literal::Number(n), ColumnType::Int | ColumnType::Real) => match n.parse::<i64>() {
                    Ok(i) if col.ty == ColumnType::Int => Value::Int(i),
                    _ => Value::Real(
                        n.parse::<f64>()
                            .ok()
                            .filter(|r| r.is_finite())
                            .ok_or_else(|| StoreError::InvalidFilter(format!("bad number `{n}`")))?,
                    ),
                },
                (Literal::Bool(b), ColumnType::Bool) => Value::Bool(*b),
                (Literal::Text(t) | Literal::Number(t), ColumnType::Text) => Value::Text(t.clone()),
                (Literal::Bool(b), ColumnType::Text) => Value::Text(b.to_string()),
                (Literal::Text(t) | Literal::Number(t), ColumnType::Bytes) => {
                    Value::Bytes(hex::decode(t).map_err(|_| StoreError::InvalidFilter(format!("`{t}` is not hex")))?)
                }
                (lit, ty) => {
                    return Err(StoreError::InvalidFilter(format!(
                        "`{}` is {ty:?}, cannot compare with {lit:?}",
                        col.name
                    )))
                }
            };
            if cond.op == CmpOp::Contains && !matches!(col.ty, ColumnType::Text | ColumnType::Bytes) {
                return Err(StoreError::InvalidFilter(format!("`{}`: contains needs text or bytes", col.name)));
            }
            bound.push((index, cond.op, value));
        }
        Ok(BoundFilter { conditions: bound })
    }
}

#[derive(Debug, Clone)]
pub struct BoundFilter {
    conditions: Vec<(usize, CmpOp, Value)>,
}

fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Real(y)) => (*x as f64).partial_cmp(y),
        (Value::Real(x), Value::Int(y)) => x.partial_cmp(&(*y as f64)),
        _ => Some(a.cmp(b)),
    }
}

impl BoundFilter {
    pub fn matches(&self, row: &Row) -> bool {
        self.conditions.iter().all(|(i, op, lit)| {
            let v = &row[*i];
            if lit.is_null() || v.is_null() {
                let same = lit.is_null() && v.is_null();
                return match op {
                    CmpOp::Eq => same,
                    CmpOp::Ne => !same,
                    _ => false,
                };
            }
            match op {
                CmpOp::Contains => match (v, lit) {
                    (Value::Text(h), Value::Text(n)) => h.contains(n.as_str()),
                    (Value::Bytes(h), Value::Bytes(n)) => n.is_empty() || h.windows(n.len()).any(|w| w == &n[..]),
                    _ => false,
                },
                op => match compare(v, lit) {
                    Some(ord) => match op {
                        CmpOp::Eq => ord == Ordering::Equal,
                        CmpOp::Ne => ord != Ordering::Equal,
                        CmpOp::Lt => ord == Ordering::Less,
                        CmpOp::Le => ord != Ordering::Greater,
                        CmpOp::Gt => ord == Ordering::Greater,
                        CmpOp::Ge => ord != Ordering::Less,
                        CmpOp::Contains => unreachable!(),
                    },
                    None => false,
                },
            }
        })
    }
}

/// Rows selected and projected by a pattern, in output order.
pub fn select(pattern: &ReportPattern, table: &Table) -> Result<Vec<Vec<Value>>, StoreError> {
    pattern.validate(&table.schema)?;
    let filter = Filter::parse(&pattern.filter)?.bind(&table.schema)?;
    let mut rows: Vec<(&_, &Row)> = table.entries().filter(|(_, r)| filter.matches(r)).collect();
    if let Some(sort) = &pattern.sort {
        let (i, _) = table.schema.column(&sort.column)?;
        rows.sort_by(|(ka, a), (kb, b)| {
            let ord = a[i].cmp(&b[i]);
            let ord = if sort.descending { ord.reverse() } else { ord };
            ord.then_with(|| ka.cmp(kb))
        });
    }
    let idx: Vec<usize> =
        pattern.columns.iter().map(|c| table.schema.column(c).map(|(i, _)| i)).collect::<Result<_, _>>()?;
    Ok(rows.into_iter().map(|(_, r)| idx.iter().map(|&i| r[i].clone()).collect()).collect())
}

pub fn render(pattern: &ReportPattern, table: &Table) -> Result<String, StoreError> {
    let rows = select(pattern, table)?;
    Ok(match pattern.format {
        ReportFormat::Csv => render_csv(&pattern.columns, &rows),
        ReportFormat::Html => render_html(&pattern.name, &pattern.columns, &rows),
    })
}

pub fn render_csv(columns: &[String], rows: &[Vec<Value>]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for row in rows {
        w.write_record(row.iter().map(Value::to_string)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_html(title: &str, columns: &[String], rows: &[Vec<Value>]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>");
    out.push_str(&escape_html(title));
    out.push_str("</title></head>\n<body>\n<table>\n<thead><tr>");
    for c in columns {
        let _ = write!(out, "<th>{}</th>", escape_html(c));
    }
    out.push_str("</tr></thead>\n<tbody>\n");
    for row in rows {
        out.push_str("<tr>");
        for v in row {
            let _ = write!(out, "<td>{}</td>", escape_html(&v.to_string()));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</tbody>\n</table>\n</body>\n</html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::table::{standard_schemas, EVENTS};

    fn events_table() -> Table {
        let schema = standard_schemas().into_iter().find(|s| s.name == EVENTS).unwrap();
        let mut t = Table::new(schema);
        let rows = [
            (3, 1, "TAG_ENTER", Some("E000000000000001"), 100),
            (3, 2, "TAG_LEAVE", Some("E000000000000001"), 200),
            (4, 1, "TAG_ENTER", Some("E000000000000002"), 150),
            (255, 1, "ALARM", Some("E000000000000002"), 150),
        ];
        for (st, seq, kind, uid, ts) in rows {
            t.put(vec![
                Value::Int(st),
                Value::Int(seq),
                Value::text(kind),
                Value::opt_text(uid),
                Value::Int(ts),
                Value::Int(0),
                Value::Null,
                Value::Null,
            ]);
        }
        t
    }

    fn pattern(filter: &str, sort: Option<&str>, format: ReportFormat) -> ReportPattern {
        ReportPattern {
            name: "p".into(),
            source: EVENTS.into(),
            filter: filter.into(),
            columns: vec!["station".into(), "seq".into(), "kind".into()],
            sort: sort.map(|s| s.parse().unwrap()),
            format,
        }
    }

    #[test]
    fn filter_parse_forms() {
        let f = Filter::parse("kind = TAG_ENTER and sim_timestamp ≥ 120 AND uid contains '02'").unwrap();
        assert_eq!(f.conditions.len(), 3);
        assert_eq!(f.conditions[1].op, CmpOp::Ge);
        assert_eq!(f.conditions[2].literal, Literal::Text("02".into()));
        let f = Filter::parse("uid = 0012").unwrap();
        assert_eq!(f.conditions[0].literal, Literal::Number("0012".into()));
        assert!(Filter::parse("kind =").is_err());
        assert!(Filter::parse("kind = 'x").is_err());
        assert!(Filter::parse("a = 1 b = 2").is_err());
        assert_eq!(Filter::parse("").unwrap().conditions.len(), 0);
    }

    #[test]
    fn select_filters_and_sorts() {
        let t = events_table();
        let p = pattern("kind = TAG_ENTER", Some("sim_timestamp desc"), ReportFormat::Csv);
        assert_eq!(render(&p, &t).unwrap(), "station,seq,kind\n4,1,TAG_ENTER\n3,1,TAG_ENTER\n");

        // ties on the sort key fall back to primary key order
        let p = pattern("sim_timestamp = 150", Some("sim_timestamp"), ReportFormat::Csv);
        assert_eq!(render(&p, &t).unwrap(), "station,seq,kind\n4,1,TAG_ENTER\n255,1,ALARM\n");

        let p = pattern("station != 3 and seq <= 1", None, ReportFormat::Csv);
        assert_eq!(render(&p, &t).unwrap(), "station,seq,kind\n4,1,TAG_ENTER\n255,1,ALARM\n");
    }

    #[test]
    fn bad_patterns_rejected() {
        let t = events_table();
        assert!(render(&pattern("nope = 1", None, ReportFormat::Csv), &t).is_err());
        assert!(render(&pattern("station = abc", None, ReportFormat::Csv), &t).is_err());
        assert!(render(&pattern("station contains 1", None, ReportFormat::Csv), &t).is_err());
        let mut p = pattern("", Some("ghost"), ReportFormat::Csv);
        assert!(render(&p, &t).is_err());
        p.sort = None;
        p.columns.clear();
        assert!(render(&p, &t).is_err());
    }

    #[test]
    fn null_comparisons() {
        let t = events_table();
        let p = pattern("detail = null and subject_station != 1", None, ReportFormat::Csv);
        assert_eq!(render(&p, &t).unwrap().lines().count(), 5);
        let p = pattern("detail != null", None, ReportFormat::Csv);
        assert_eq!(render(&p, &t).unwrap().lines().count(), 1);
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        let cols = vec!["a".to_string(), "b".to_string()];
        let rows = vec![vec![Value::text("x,y"), Value::text("say \"hi\"")], vec![Value::Null, Value::Int(2)]];
        assert_eq!(render_csv(&cols, &rows), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n,2\n");
    }

    #[test]
    fn html_escapes() {
        let out = render_html("<r>", &["c".into()], &[vec![Value::text("a&b")]]);
        assert!(out.contains("<title>&lt;r&gt;</title>"));
        assert!(out.contains("<td>a&amp;b</td>"));
    }

    #[test]
    fn pattern_row_roundtrip() {
        let p = pattern("kind = ALARM", Some("seq desc"), ReportFormat::Html);
        assert_eq!(ReportPattern::from_row(&p.to_row()).unwrap(), p);
    }
}
