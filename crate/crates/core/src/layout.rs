//! Cross-layer sharing layouts.
//!
//! A layout assigns each stack position a parameter group. The textual form
//! lists group ids in stack order, with `GxN` as shorthand for `N`
//! consecutive positions in group `G`: `(0x3,1x3)` is `(0,0,0,1,1,1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Upper bound on the number of stack positions a layout may describe.
pub const MAX_LAYERS: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("layout must be wrapped in parentheses")]
    MissingParens,
    #[error("empty layout")]
    Empty,
    #[error("malformed item {0:?}")]
    BadItem(String),
    #[error("zero repeat count in item {0:?}")]
    ZeroRepeat(String),
    #[error("gap in group ids: group {0} never appears")]
    GapInGroupIds(usize),
    #[error("layout has {0} layers, more than the maximum of {MAX_LAYERS}")]
    TooManyLayers(usize),
}

/// Expanded stack-position → group assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShareLayout {
    assignment: Vec<usize>,
    num_independent: usize,
}

impl ShareLayout {
    pub fn new(assignment: Vec<usize>) -> Result<Self, LayoutError> {
        if assignment.is_empty() {
            return Err(LayoutError::Empty);
        }
        if assignment.len() > MAX_LAYERS {
            return Err(LayoutError::TooManyLayers(assignment.len()));
        }
        let num_independent = assignment.iter().max().map_or(0, |&m| m + 1);
        let mut seen = vec![false; num_independent];
        for &g in &assignment {
            seen[g] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LayoutError::GapInGroupIds(missing));
        }
        Ok(ShareLayout {
            assignment,
            num_independent,
        })
    }

    /// `(0,1,...,n-1)`: no sharing.
    pub fn independent(num_layers: usize) -> Result<Self, LayoutError> {
        Self::new((0..num_layers).collect())
    }

    /// `(0xn)`: one group across every position.
    pub fn all_shared(num_layers: usize) -> Result<Self, LayoutError> {
        Self::new(vec![0; num_layers])
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_layers(&self) -> usize {
        self.assignment.len()
    }

    pub fn independent_count(&self) -> usize {
        self.num_independent
    }

    pub fn group_of(&self, position: usize) -> usize {
        self.assignment[position]
    }

    /// Stack positions using `group`.
    pub fn positions_of(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&p| self.assignment[p] == group)
            .collect()
    }
}

pub fn parse_layout(text: &str) -> Result<ShareLayout, LayoutError> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = compact
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or(LayoutError::MissingParens)?;
    if inner.is_empty() {
        return Err(LayoutError::Empty);
    }
    let mut assignment = Vec::new();
    for item in inner.split(',') {
        let parse_num = |s: &str| -> Result<usize, LayoutError> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return Err(LayoutError::BadItem(item.to_string()));
            }
            s.parse().map_err(|_| LayoutError::BadItem(item.to_string()))
        };
        let (group, repeat) = match item.split_once('x') {
            Some((g, n)) => (parse_num(g)?, parse_num(n)?),
            None => (parse_num(item)?, 1),
        };
        if repeat == 0 {
            return Err(LayoutError::ZeroRepeat(item.to_string()));
        }
        if assignment.len() + repeat > MAX_LAYERS {
            return Err(LayoutError::TooManyLayers(assignment.len() + repeat));
        }
        assignment.extend(std::iter::repeat(group).take(repeat));
    }
    ShareLayout::new(assignment)
}

/// Canonical run-length form; runs of one are written without `x1`.
pub fn format_layout(layout: &ShareLayout) -> String {
    let mut items = Vec::new();
    let mut rest = layout.assignment.as_slice();
    while let Some(&group) = rest.first() {
        let run = rest.iter().take_while(|&&g| g == group).count();
        if run >= 2 {
            items.push(format!("{group}x{run}"));
        } else {
            items.push(group.to_string());
        }
        rest = &rest[run..];
    }
    format!("({})", items.join(","))
}

impl fmt::Display for ShareLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_layout(self))
    }
}

impl FromStr for ShareLayout {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_layout(s)
    }
}

impl Serialize for ShareLayout {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_layout(self))
    }
}

impl<'de> Deserialize<'de> for ShareLayout {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_layout(&text).map_err(serde::de::Error::custom)
    }
}
