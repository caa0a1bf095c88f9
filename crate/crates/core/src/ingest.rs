//! Tracking data model, CSV/JSONL readers and writers, and the per-frame
//! normalizations applied before formation discovery.
//!
//! # CSV layout
//!
//! One row per agent per frame, header required:
//!
//! ```text
//! frame_id,agent_id,x,y,is_event,attack_direction,team,game,period
//! 0,p00,-12.5,3.25,1,left_to_right,home,g01,1
//! 0,p01,4.0,-7.75,1,left_to_right,home,g01,1
//! ```
//!
//! `is_event` accepts `1/0/true/false`; `attack_direction` accepts
//! `left_to_right/right_to_left` (also `ltr/rtl`), case-insensitive.
//! Coordinates are meters with the pitch center at the origin.
//!
//! # JSONL layout
//!
//! One frame per line:
//!
//! ```text
//! {"frame_id":0,"is_event":true,"attack_direction":"left_to_right","team":"home","game":"g01","period":"1","positions":[{"agent_id":"p00","x":-12.5,"y":3.25}]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::{Error, Result};

pub const CSV_COLUMNS: [&str; 9] = [
    "frame_id",
    "agent_id",
    "x",
    "y",
    "is_event",
    "attack_direction",
    "team",
    "game",
    "period",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackDirection {
    LeftToRight,
    RightToLeft,
}

impl AttackDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackDirection::LeftToRight => "left_to_right",
            AttackDirection::RightToLeft => "right_to_left",
        }
    }
}

impl FromStr for AttackDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left_to_right" | "ltr" | "lefttoright" => Ok(AttackDirection::LeftToRight),
            "right_to_left" | "rtl" | "righttoleft" => Ok(AttackDirection::RightToLeft),
            other => Err(format!("unknown attack direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "ndjson" => Ok(Format::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

/// Context labels carried by every frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameMeta {
    pub team: String,
    pub game: String,
    pub period: String,
}

/// One time step. `positions[n]` belongs to the dataset's `agent_ids[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: i64,
    pub positions: Vec<Vec2>,
    pub is_event: bool,
    pub attack_direction: AttackDirection,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn centroid(&self) -> Vec2 {
        let n = self.positions.len() as f64;
        let (sx, sy) = self
            .positions
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }
}

/// `S` frames of `N` agents each, ordered by strictly increasing `frame_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    agent_ids: Vec<String>,
    frames: Vec<Frame>,
}

impl Dataset {
    pub fn new(agent_ids: Vec<String>, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySelection("dataset has no frames".into()));
        }
        if agent_ids.is_empty() {
            return Err(Error::invalid("dataset has no agents"));
        }
        let distinct: BTreeSet<&String> = agent_ids.iter().collect();
        if distinct.len() != agent_ids.len() {
            return Err(Error::invalid("agent ids must be distinct"));
        }
        let n = agent_ids.len();
        for (idx, f) in frames.iter().enumerate() {
            if f.positions.len() != n {
                return Err(Error::Roster {
                    frame_id: f.frame_id,
                    message: format!("has {} positions, roster has {n} agents", f.positions.len()),
                });
            }
            if f.positions.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(Error::invalid(format!("frame {} has a non-finite position", f.frame_id)));
            }
            if idx > 0 && frames[idx - 1].frame_id >= f.frame_id {
                return Err(Error::invalid(format!(
                    "frame ids must be strictly increasing ({} then {})",
                    frames[idx - 1].frame_id,
                    f.frame_id
                )));
            }
        }
        Ok(Self { agent_ids, frames })
    }

    pub fn agent_ids(&self) -> &[String] {
        &self.agent_ids
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_agents() * self.n_frames()
    }

    fn map_frames(&self, f: impl Fn(&Frame) -> Frame) -> Dataset {
        Dataset {
            agent_ids: self.agent_ids.clone(),
            frames: self.frames.iter().map(f).collect(),
        }
    }

    /// Keeps frames matching `pred`, in order.
    pub fn select(&self, pred: impl Fn(&Frame) -> bool) -> Option<Dataset> {
        let frames: Vec<Frame> = self.frames.iter().filter(|f| pred(f)).cloned().collect();
        (!frames.is_empty()).then(|| Dataset {
            agent_ids: self.agent_ids.clone(),
            frames,
        })
    }

    /// Frames at the given indices, in the given order (which must keep ids increasing).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("frame index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.agent_ids.clone(), frames)
    }

    /// Appends `other`'s frames, shifting its frame ids past the last id of `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.agent_ids != other.agent_ids {
            return Err(Error::invalid("cannot concatenate datasets with different rosters"));
        }
        let last = self.frames.last().map_or(0, |f| f.frame_id);
        let first = other.frames.first().map_or(0, |f| f.frame_id);
        let shift = last + 1 - first;
        let mut frames = self.frames.clone();
        frames.extend(other.frames.iter().map(|f| Frame {
            frame_id: f.frame_id + shift,
            ..f.clone()
        }));
        Dataset::new(self.agent_ids.clone(), frames)
    }

    /// Per-agent positions across all frames, agent-major.
    pub fn agent_tracks(&self) -> Vec<Vec<Vec2>> {
        (0..self.n_agents())
            .map(|n| self.frames.iter().map(|f| f.positions[n]).collect())
            .collect()
    }
}

/// How frames whose agent set differs from the roster are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RosterPolicy {
    /// Any frame whose agent set differs from the first frame's is an error.
    #[default]
    Strict,
    /// The most common agent set becomes the roster; other frames are dropped.
    DropFrames,
    /// Agents missing from any frame are removed everywhere.
    CommonAgents,
}

impl FromStr for RosterPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strict" => Ok(RosterPolicy::Strict),
            "drop-frames" => Ok(RosterPolicy::DropFrames),
            "common-agents" => Ok(RosterPolicy::CommonAgents),
            other => Err(format!("unknown roster policy `{other}`")),
        }
    }
}

struct PendingFrame {
    line: u64,
    is_event: bool,
    attack_direction: AttackDirection,
    meta: FrameMeta,
    agents: BTreeMap<String, Vec2>,
}

struct FrameCollector {
    frames: BTreeMap<i64, PendingFrame>,
}

impl FrameCollector {
    fn new() -> Self {
        Self {
            frames: BTreeMap::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        line: u64,
        frame_id: i64,
        agent_id: String,
        pos: Vec2,
        is_event: bool,
        attack_direction: AttackDirection,
        meta: FrameMeta,
    ) -> Result<()> {
        if !(pos[0].is_finite() && pos[1].is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("non-finite position for agent `{agent_id}`"),
            });
        }
        let entry = self.frames.entry(frame_id).or_insert_with(|| PendingFrame {
            line,
            is_event,
            attack_direction,
            meta: meta.clone(),
            agents: BTreeMap::new(),
        });
        if entry.is_event != is_event || entry.attack_direction != attack_direction || entry.meta != meta {
            return Err(Error::Parse {
                line,
                message: format!(
                    "frame {frame_id} has conflicting frame-level fields (first seen at line {})",
                    entry.line
                ),
            });
        }
        if entry.agents.insert(agent_id.clone(), pos).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate agent `{agent_id}` in frame {frame_id}"),
            });
        }
        Ok(())
    }

    fn finish(self, policy: RosterPolicy) -> Result<Dataset> {
        if self.frames.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no data rows".into(),
            });
        }
        let roster: Vec<String> = match policy {
            RosterPolicy::Strict => {
                let first = self.frames.values().next().expect("non-empty");
                first.agents.keys().cloned().collect()
            }
            RosterPolicy::DropFrames => {
                let mut counts: HashMap<Vec<&String>, usize> = HashMap::new();
                for f in self.frames.values() {
                    *counts.entry(f.agents.keys().collect()).or_default() += 1;
                }
                // Most frequent set; ties broken by the lexicographically smaller set.
                let best = counts
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                    .expect("non-empty");
                best.0.into_iter().cloned().collect()
            }
            RosterPolicy::CommonAgents => {
                let mut common: BTreeSet<&String> =
                    self.frames.values().next().expect("non-empty").agents.keys().collect();
                for f in self.frames.values() {
                    common.retain(|a| f.agents.contains_key(*a));
                }
                common.into_iter().cloned().collect()
            }
        };
        if roster.is_empty() {
            return Err(Error::EmptySelection("no agent is present in every frame".into()));
        }

        let mut frames = Vec::with_capacity(self.frames.len());
        for (frame_id, f) in self.frames {
            let same_set = f.agents.len() == roster.len() && roster.iter().all(|a| f.agents.contains_key(a));
            match policy {
                RosterPolicy::Strict if !same_set => {
                    let missing: Vec<&str> = roster
                        .iter()
                        .filter(|a| !f.agents.contains_key(*a))
                        .map(String::as_str)
                        .collect();
                    let extra: Vec<&str> = f
                        .agents
                        .keys()
                        .filter(|a| !roster.contains(a))
                        .map(String::as_str)
                        .collect();
                    return Err(Error::Roster {
                        frame_id,
                        message: format!("missing agents {missing:?}, unexpected agents {extra:?}"),
                    });
                }
                RosterPolicy::DropFrames if !same_set => continue,
                _ => {}
            }
            let positions = roster.iter().map(|a| f.agents[a]).collect();
            frames.push(Frame {
                frame_id,
                positions,
                is_event: f.is_event,
                attack_direction: f.attack_direction,
                meta: f.meta,
            });
        }
        Dataset::new(roster, frames)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}

/// Parses tracking data with the strict roster policy.
pub fn parse_tracking<R: Read>(source: R, format: Format) -> Result<Dataset> {
    parse_tracking_with(source, format, RosterPolicy::Strict)
}

pub fn parse_tracking_with<R: Read>(source: R, format: Format, policy: RosterPolicy) -> Result<Dataset> {
    let collector = match format {
        Format::Csv => collect_csv(source)?,
        Format::Jsonl => collect_jsonl(source)?,
    };
    collector.finish(policy)
}

fn collect_csv<R: Read>(source: R) -> Result<FrameCollector> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: format!("unreadable header: {e}"),
    })?;
    let mut col = [0usize; 9];
    for (slot, name) in CSV_COLUMNS.iter().enumerate() {
        col[slot] = headers.iter().position(|h| h == *name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })?;
    }

    let mut collector = FrameCollector::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |slot: usize| record.get(col[slot]).unwrap_or("");
        let bad = |what: &str, value: &str| Error::Parse {
            line,
            message: format!("invalid {what} `{value}`"),
        };
        let frame_id: i64 = field(0).parse().map_err(|_| bad("frame_id", field(0)))?;
        let agent_id = field(1).to_string();
        if agent_id.is_empty() {
            return Err(bad("agent_id", ""));
        }
        let x: f64 = field(2).parse().map_err(|_| bad("x", field(2)))?;
        let y: f64 = field(3).parse().map_err(|_| bad("y", field(3)))?;
        let is_event = parse_bool(field(4)).ok_or_else(|| bad("is_event", field(4)))?;
        let dir: AttackDirection = field(5).parse().map_err(|_| bad("attack_direction", field(5)))?;
        let meta = FrameMeta {
            team: field(6).to_string(),
            game: field(7).to_string(),
            period: field(8).to_string(),
        };
        collector.push(line, frame_id, agent_id, [x, y], is_event, dir, meta)?;
    }
    Ok(collector)
}

#[derive(Serialize, Deserialize)]
struct JsonAgent {
    agent_id: String,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonFrame {
    frame_id: i64,
    is_event: bool,
    attack_direction: AttackDirection,
    #[serde(default)]
    team: String,
    #[serde(default)]
    game: String,
    #[serde(default)]
    period: String,
    positions: Vec<JsonAgent>,
}

fn collect_jsonl<R: Read>(source: R) -> Result<FrameCollector> {
    let reader = std::io::BufReader::new(source);
    let mut collector = FrameCollector::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let frame: JsonFrame = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(frame.frame_id) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("frame {} appears on more than one line", frame.frame_id),
            });
        }
        let meta = FrameMeta {
            team: frame.team,
            game: frame.game,
            period: frame.period,
        };
        for a in frame.positions {
            collector.push(
                line_no,
                frame.frame_id,
                a.agent_id,
                [a.x, a.y],
                frame.is_event,
                frame.attack_direction,
                meta.clone(),
            )?;
        }
    }
    Ok(collector)
}

pub fn write_tracking<W: Write>(ds: &Dataset, format: Format, out: W) -> Result<()> {
    match format {
        Format::Csv => write_csv(ds, out),
        Format::Jsonl => write_jsonl(ds, out),
    }
}

pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for f in ds.frames() {
        for (id, p) in ds.agent_ids().iter().zip(&f.positions) {
            w.write_record([
                f.frame_id.to_string(),
                id.clone(),
                p[0].to_string(),
                p[1].to_string(),
                u8::from(f.is_event).to_string(),
                f.attack_direction.as_str().to_string(),
                f.meta.team.clone(),
                f.meta.game.clone(),
                f.meta.period.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for f in ds.frames() {
        let jf = JsonFrame {
            frame_id: f.frame_id,
            is_event: f.is_event,
            attack_direction: f.attack_direction,
            team: f.meta.team.clone(),
            game: f.meta.game.clone(),
            period: f.meta.period.clone(),
            positions: ds
                .agent_ids()
                .iter()
                .zip(&f.positions)
                .map(|(id, p)| JsonAgent {
                    agent_id: id.clone(),
                    x: p[0],
                    y: p[1],
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &jf)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Rotates right-to-left frames by 180° about the origin so every frame attacks left to right.
pub fn normalize_attack_direction(ds: &Dataset) -> Dataset {
    ds.map_frames(|f| match f.attack_direction {
        AttackDirection::LeftToRight => f.clone(),
        AttackDirection::RightToLeft => Frame {
            positions: f.positions.iter().map(|p| [-p[0], -p[1]]).collect(),
            attack_direction: AttackDirection::LeftToRight,
            ..f.clone()
        },
    })
}

/// Subtracts each frame's mean agent position.
pub fn center_normalize(ds: &Dataset) -> Dataset {
    ds.map_frames(|f| {
        let c = f.centroid();
        Frame {
            positions: f.positions.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect(),
            ..f.clone()
        }
    })
}

/// Keeps only frames flagged as events.
pub fn filter_key_frames(ds: &Dataset) -> Result<Dataset> {
    ds.select(|f| f.is_event)
        .ok_or_else(|| Error::EmptySelection("no frame is flagged as an event".into()))
}

/// Attack-direction normalization, centering and the optional key-frame filter, in that order.
pub fn prepare(ds: &Dataset, key_frames_only: bool) -> Result<Dataset> {
    let centered = center_normalize(&normalize_attack_direction(ds));
    if key_frames_only {
        filter_key_frames(&centered)
    } else {
        Ok(centered)
    }
}

/// `(S·N) × 2` point matrix, frame-major: row `s·N + n` is agent `n` in frame `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPoints {
    n_frames: usize,
    n_agents: usize,
    points: Vec<Vec2>,
}

impl FlatPoints {
    pub fn from_points(points: Vec<Vec2>) -> Self {
        Self {
            n_frames: points.len(),
            n_agents: 1,
            points,
        }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Inverse of [`flatten`]: writes the points back into `like`'s frames.
    pub fn unflatten(&self, like: &Dataset) -> Result<Dataset> {
        if like.n_frames() != self.n_frames || like.n_agents() != self.n_agents {
            return Err(Error::invalid(format!(
                "flat points are {}×{}, dataset is {}×{}",
                self.n_frames,
                self.n_agents,
                like.n_frames(),
                like.n_agents()
            )));
        }
        let frames = like
            .frames()
            .iter()
            .zip(self.points.chunks_exact(self.n_agents))
            .map(|(f, pts)| Frame {
                positions: pts.to_vec(),
                ..f.clone()
            })
            .collect();
        Dataset::new(like.agent_ids().to_vec(), frames)
    }
}

pub fn flatten(ds: &Dataset) -> FlatPoints {
    FlatPoints {
        n_frames: ds.n_frames(),
        n_agents: ds.n_agents(),
        points: ds.frames().iter().flat_map(|f| f.positions.iter().copied()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FilterField {
    Team,
    Game,
    Period,
    Event,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Clause {
    field: FilterField,
    negate: bool,
    value: String,
}

/// Conjunction of `key=value` / `key!=value` clauses over frame metadata.
///
/// Keys: `team`, `game`, `period`, `event` (`true`/`false`). Clauses are
/// separated by `,` or `&&`. The empty expression and `*` match everything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterExpr {
    source: String,
    clauses: Vec<Clause>,
}

impl FilterExpr {
    pub fn all() -> Self {
        Self {
            source: "*".into(),
            clauses: Vec::new(),
        }
    }

    pub fn parse(expr: &str) -> Result<Self> {
        let trimmed = expr.trim();
        if trimmed.is_empty() || trimmed == "*" {
            return Ok(Self::all());
        }
        let mut clauses = Vec::new();
        for part in trimmed.split("&&").flat_map(|p| p.split(',')) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value, negate) = if let Some((k, v)) = part.split_once("!=") {
                (k, v, true)
            } else if let Some((k, v)) = part.split_once('=') {
                (k, v.strip_prefix('=').unwrap_or(v), false)
            } else {
                return Err(Error::invalid(format!("filter clause `{part}` is not key=value")));
            };
            let field = match key.trim() {
                "team" => FilterField::Team,
                "game" => FilterField::Game,
                "period" => FilterField::Period,
                "event" | "is_event" => FilterField::Event,
                other => return Err(Error::invalid(format!("unknown filter key `{other}`"))),
            };
            let value = value.trim().to_string();
            if field == FilterField::Event && parse_bool(&value).is_none() {
                return Err(Error::invalid(format!("event filter needs a boolean, got `{value}`")));
            }
            clauses.push(Clause { field, negate, value });
        }
        Ok(Self {
            source: trimmed.to_string(),
            clauses,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, f: &Frame) -> bool {
        self.clauses.iter().all(|c| {
            let hit = match c.field {
                FilterField::Team => f.meta.team == c.value,
                FilterField::Game => f.meta.game == c.value,
                FilterField::Period => f.meta.period == c.value,
                FilterField::Event => parse_bool(&c.value) == Some(f.is_event),
            };
            hit != c.negate
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        ds.select(|f| self.matches(f))
            .ok_or_else(|| Error::EmptySelection(format!("filter `{}` matched no frames", self.source)))
    }
}
