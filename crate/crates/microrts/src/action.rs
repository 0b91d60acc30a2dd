use std::fmt;
use std::str::FromStr;

use crate::error::EnvError;

pub const NUM_ACTION_TYPES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionType {
    NoOp,
    Stop,
    Move,
    Attack,
    Build,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    None,
    Unit,
    Location,
}

impl ActionType {
    pub const ALL: [ActionType; NUM_ACTION_TYPES] =
        [ActionType::NoOp, ActionType::Stop, ActionType::Move, ActionType::Attack, ActionType::Build];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ActionType> {
        Self::ALL.get(i).copied()
    }

    pub fn selects_units(self) -> bool {
        self != ActionType::NoOp
    }

    pub fn target(self) -> TargetKind {
        match self {
            ActionType::Attack => TargetKind::Unit,
            ActionType::Move | ActionType::Build => TargetKind::Location,
            _ => TargetKind::None,
        }
    }

    pub fn queueable(self) -> bool {
        matches!(self, ActionType::Move | ActionType::Attack)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionType::NoOp => "noop",
            ActionType::Stop => "stop",
            ActionType::Move => "move",
            ActionType::Attack => "attack",
            ActionType::Build => "build",
        }
    }
}

/// A structured action. Unit ids are game ids; `target_location` is a
/// (row, col) pixel of the acting player's minimap.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArgsAction {
    pub action_type: ActionType,
    pub delay: usize,
    pub queue: bool,
    pub selected_units: Vec<u32>,
    pub target_unit: Option<u32>,
    pub target_location: Option<(usize, usize)>,
}

impl ArgsAction {
    pub fn noop() -> Self {
        ArgsAction {
            action_type: ActionType::NoOp,
            delay: 1,
            queue: false,
            selected_units: Vec::new(),
            target_unit: None,
            target_location: None,
        }
    }
}

impl fmt::Display for ArgsAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.action_type.name(), self.delay, self.queue as u8)?;
        if !self.selected_units.is_empty() {
            let ids: Vec<String> = self.selected_units.iter().map(|u| u.to_string()).collect();
            write!(f, " u={}", ids.join(","))?;
        }
        if let Some(t) = self.target_unit {
            write!(f, " t={t}")?;
        }
        if let Some((r, c)) = self.target_location {
            write!(f, " l={r},{c}")?;
        }
        Ok(())
    }
}

impl FromStr for ArgsAction {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || EnvError::Parse(s.to_string());
        let mut parts = s.split_whitespace();
        let name = parts.next().ok_or_else(err)?;
        let action_type =
            ActionType::ALL.iter().copied().find(|t| t.name() == name).ok_or_else(err)?;
        let delay = parts.next().and_then(|d| d.parse().ok()).ok_or_else(err)?;
        let queue = match parts.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(err()),
        };
        let mut action = ArgsAction {
            action_type,
            delay,
            queue,
            selected_units: Vec::new(),
            target_unit: None,
            target_location: None,
        };
        for field in parts {
            let (key, value) = field.split_once('=').ok_or_else(err)?;
            match key {
                "u" => {
                    action.selected_units = value
                        .split(',')
                        .map(|v| v.parse().map_err(|_| err()))
                        .collect::<Result<_, _>>()?
                }
                "t" => action.target_unit = Some(value.parse().map_err(|_| err())?),
                "l" => {
                    let (r, c) = value.split_once(',').ok_or_else(err)?;
                    action.target_location =
                        Some((r.parse().map_err(|_| err())?, c.parse().map_err(|_| err())?));
                }
                _ => return Err(err()),
            }
        }
        Ok(action)
    }
}
