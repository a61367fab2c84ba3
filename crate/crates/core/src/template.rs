//! `{{dotted.path}}` placeholder templates.
//!
//! A template is a list of literal and placeholder segments. Placeholders
//! hold a [`Path`] that is resolved against a JSON tree at render time.
//! There are no sections, partials or expressions.

use std::fmt;
use std::str::FromStr;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("UnbalancedBraces: '{{{{' at byte {0} is never closed")]
    UnbalancedBraces(usize),
    #[error("EmptyPlaceholder at byte {0}")]
    EmptyPlaceholder(usize),
    #[error("InvalidPath: {0}")]
    InvalidPath(String),
    #[error("MissingValue: {0}")]
    MissingValue(Path),
}

/// One step of a [`Path`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Step {
    Key(String),
    Index(usize),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Key(k) => f.write_str(k),
            Step::Index(i) => write!(f, "{i}"),
        }
    }
}

/// A non-empty dotted path such as `payload.current.weather_descriptions.0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    steps: Vec<Step>,
}

impl Path {
    pub fn new(steps: Vec<Step>) -> Result<Self, TemplateError> {
        if steps.is_empty() {
            return Err(TemplateError::InvalidPath("path has no steps".into()));
        }
        if steps
            .iter()
            .any(|s| matches!(s, Step::Key(k) if k.is_empty()))
        {
            return Err(TemplateError::InvalidPath("path has an empty key".into()));
        }
        Ok(Path { steps })
    }

    /// Single-key path.
    pub fn key(k: &str) -> Self {
        Path::new(vec![step_of(k)]).expect("non-empty key")
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn first_key(&self) -> Option<&str> {
        match &self.steps[0] {
            Step::Key(k) => Some(k),
            Step::Index(_) => None,
        }
    }

    /// The path without its first step, if any steps remain.
    pub fn tail(&self) -> Option<Path> {
        (self.steps.len() > 1).then(|| Path {
            steps: self.steps[1..].to_vec(),
        })
    }
}

fn step_of(text: &str) -> Step {
    if !text.is_empty() && text.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(i) = text.parse() {
            return Step::Index(i);
        }
    }
    Step::Key(text.to_string())
}

impl FromStr for Path {
    type Err = TemplateError;

    /// Steps are split on `.` and trimmed, so `payload. location.name` is
    /// the same path as `payload.location.name`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Err(TemplateError::InvalidPath("empty path".into()));
        }
        let mut steps = Vec::new();
        for part in trimmed.split('.') {
            let part = part.trim();
            if part.is_empty() {
                return Err(TemplateError::InvalidPath(format!(
                    "empty step in path '{trimmed}'"
                )));
            }
            steps.push(step_of(part));
        }
        Path::new(steps)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Walks `path` into `value`. Missing keys, out-of-range indexes and type
/// mismatches all yield `None`.
///
/// A numeric step indexes lists; on a map it is looked up as a key.
pub fn resolve_path<'a>(value: &'a Value, path: &Path) -> Option<&'a Value> {
    path.steps
        .iter()
        .try_fold(value, |cur, step| match (cur, step) {
            (Value::Object(m), Step::Key(k)) => m.get(k),
            (Value::Object(m), Step::Index(i)) => m.get(&i.to_string()),
            (Value::Array(a), Step::Index(i)) => a.get(*i),
            _ => None,
        })
}

/// Writes `new` at `path` inside `root`, creating intermediate maps.
///
/// Fails when an intermediate value is a scalar or an index is out of range.
pub fn assign_path(root: &mut Value, path: &Path, new: Value) -> Result<(), String> {
    let mut cur = root;
    for (depth, step) in path.steps.iter().enumerate() {
        let last = depth + 1 == path.steps.len();
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        cur = match (cur, step) {
            (Value::Object(m), step) => {
                let key = step.to_string();
                if last {
                    m.insert(key, new);
                    return Ok(());
                }
                m.entry(key).or_insert(Value::Null)
            }
            (Value::Array(a), Step::Index(i)) if *i < a.len() => {
                if last {
                    a[*i] = new;
                    return Ok(());
                }
                &mut a[*i]
            }
            (_, step) => {
                return Err(format!("cannot descend into '{step}' while writing {path}"));
            }
        };
    }
    unreachable!("paths are non-empty")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    /// `source` is the exact `{{ ... }}` text, braces included.
    Placeholder {
        path: Path,
        source: String,
    },
}

impl Segment {
    pub fn source(&self) -> &str {
        match self {
            Segment::Literal(s) => s,
            Segment::Placeholder { source, .. } => source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    #[default]
    Raw,
    /// Percent-encode substituted values (never the literals).
    UrlComponent,
}

/// A parsed template. Concatenating segment sources gives back `source`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateString {
    source: String,
    segments: Vec<Segment>,
}

impl FromStr for TemplateString {
    type Err = TemplateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_template(s)
    }
}

pub fn parse_template(text: &str) -> Result<TemplateString, TemplateError> {
    let mut segments = Vec::new();
    let mut rest = 0;
    while let Some(open_rel) = text[rest..].find("{{") {
        let open = rest + open_rel;
        let close = text[open + 2..]
            .find("}}")
            .map(|c| open + 2 + c)
            .ok_or(TemplateError::UnbalancedBraces(open))?;
        if open > rest {
            segments.push(Segment::Literal(text[rest..open].to_string()));
        }
        let inner = &text[open + 2..close];
        if inner.trim().split('.').all(|p| p.trim().is_empty()) {
            return Err(TemplateError::EmptyPlaceholder(open));
        }
        segments.push(Segment::Placeholder {
            path: inner.parse()?,
            source: text[open..close + 2].to_string(),
        });
        rest = close + 2;
    }
    if rest < text.len() {
        segments.push(Segment::Literal(text[rest..].to_string()));
    }
    Ok(TemplateString {
        source: text.to_string(),
        segments,
    })
}

/// Rendering result in lenient mode, with the placeholders that resolved to
/// nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub missing: Vec<Path>,
}

const URL_COMPONENT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

impl TemplateString {
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let source = segments.iter().map(Segment::source).collect();
        TemplateString { source, segments }
    }

    /// A template that renders to `text` verbatim.
    pub fn literal(text: &str) -> Self {
        let segments = if text.is_empty() {
            vec![]
        } else {
            vec![Segment::Literal(text.to_string())]
        };
        TemplateString {
            source: text.to_string(),
            segments,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Path> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder { path, .. } => Some(path),
            Segment::Literal(_) => None,
        })
    }

    /// Splits into two templates at a segment boundary.
    pub fn split_at(&self, segment: usize) -> (TemplateString, TemplateString) {
        let (a, b) = self.segments.split_at(segment);
        (
            TemplateString::from_segments(a.to_vec()),
            TemplateString::from_segments(b.to_vec()),
        )
    }

    /// Folds every placeholder whose first step is `prefix` into a literal,
    /// resolving it against `bound` (the value living under `prefix`).
    /// Folded text is never percent-encoded at render time.
    ///
    /// Returns the paths that could not be resolved.
    pub fn bind_prefix(&self, prefix: &str, bound: &Value) -> Result<TemplateString, Vec<Path>> {
        let mut missing = Vec::new();
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let folded = match seg {
                Segment::Placeholder { path, .. } if path.first_key() == Some(prefix) => {
                    let found = match path.tail() {
                        Some(rest) => resolve_path(bound, &rest),
                        None => Some(bound),
                    };
                    match found {
                        Some(v) => Segment::Literal(stringify(v)),
                        None => {
                            missing.push(path.clone());
                            continue;
                        }
                    }
                }
                other => other.clone(),
            };
            match (out.last_mut(), folded) {
                (Some(Segment::Literal(prev)), Segment::Literal(next)) => prev.push_str(&next),
                (_, seg) => out.push(seg),
            }
        }
        if missing.is_empty() {
            Ok(TemplateString::from_segments(out))
        } else {
            Err(missing)
        }
    }

    /// Lenient render that also reports unresolved placeholders.
    pub fn render_lenient(&self, value: &Value, mode: RenderMode) -> Rendered {
        let mut text = String::with_capacity(self.source.len());
        let mut missing = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => text.push_str(s),
                Segment::Placeholder { path, .. } => match resolve_path(value, path) {
                    Some(v) => push_value(&mut text, v, mode),
                    None => missing.push(path.clone()),
                },
            }
        }
        Rendered { text, missing }
    }

    pub fn render(
        &self,
        value: &Value,
        mode: RenderMode,
        strict: bool,
    ) -> Result<String, TemplateError> {
        render(self, value, mode, strict)
    }
}

impl fmt::Display for TemplateString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for TemplateString {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for TemplateString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_template(&s).map_err(serde::de::Error::custom)
    }
}

fn push_value(out: &mut String, v: &Value, mode: RenderMode) {
    let s = stringify(v);
    match mode {
        RenderMode::Raw => out.push_str(&s),
        RenderMode::UrlComponent => out.extend(utf8_percent_encode(&s, URL_COMPONENT)),
    }
}

/// Renders `tpl` against `value`.
///
/// Absent values become `""` unless `strict`, where they fail with
/// [`TemplateError::MissingValue`]. A present `null` renders as `""` in
/// both modes.
pub fn render(
    tpl: &TemplateString,
    value: &Value,
    mode: RenderMode,
    strict: bool,
) -> Result<String, TemplateError> {
    let r = tpl.render_lenient(value, mode);
    match r.missing.into_iter().next() {
        Some(path) if strict => Err(TemplateError::MissingValue(path)),
        _ => Ok(r.text),
    }
}

/// Text form of a value as substituted into templates.
pub fn stringify(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::String(s) => s.clone(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.to_string()
            } else if let Some(u) = n.as_u64() {
                u.to_string()
            } else {
                match n.as_f64() {
                    Some(f) if f.is_finite() => f.to_string(),
                    _ => n.to_string(),
                }
            }
        }
        Value::Array(_) | Value::Object(_) => v.to_string(),
    }
}
