use microrts::{coord_to_index, index_to_coord, ActionType, ArgsAction, Observation, TargetKind, UnitKind};

use serde::{Deserialize, Serialize};

use crate::config::NUM_HEADS;
use crate::error::CoreError;

/// An action in network index space: entity slots instead of unit ids and a
/// flat minimap index instead of coordinates. `delay` is zero based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetAction {
    pub action_type: usize,
    pub delay: usize,
    pub queue: bool,
    pub units: Vec<usize>,
    pub target_unit: Option<usize>,
    pub location: Option<usize>,
}

impl NetAction {
    pub fn kind(&self) -> ActionType {
        ActionType::from_index(self.action_type).expect("action type index in range")
    }

    pub fn to_args(&self, obs: &Observation, minimap: usize) -> Result<ArgsAction, CoreError> {
        let id = |slot: usize| {
            obs.entity_ids
                .get(slot)
                .copied()
                .flatten()
                .ok_or_else(|| CoreError::Invalid(format!("entity slot {slot} is empty")))
        };
        Ok(ArgsAction {
            action_type: self.kind(),
            delay: self.delay + 1,
            queue: self.queue,
            selected_units: self.units.iter().map(|s| id(*s)).collect::<Result<_, _>>()?,
            target_unit: self.target_unit.map(id).transpose()?,
            target_location: self.location.map(|i| index_to_coord(i, minimap)),
        })
    }

    pub fn from_args(a: &ArgsAction, obs: &Observation, minimap: usize) -> Result<NetAction, CoreError> {
        let slot = |id: u32| {
            obs.slot_of(id).ok_or_else(|| CoreError::Invalid(format!("unit {id} is not in the entity list")))
        };
        if a.delay == 0 {
            return Err(CoreError::Invalid("delay must be at least 1".into()));
        }
        Ok(NetAction {
            action_type: a.action_type.index(),
            delay: a.delay - 1,
            queue: a.queue,
            units: a.selected_units.iter().map(|u| slot(*u)).collect::<Result<_, _>>()?,
            target_unit: a.target_unit.map(slot).transpose()?,
            location: a.target_location.map(|(r, c)| coord_to_index(r, c, minimap)),
        })
    }
}

/// Unit kinds that can carry out an action type (worker, fighter, base).
pub fn accepted_kinds(t: ActionType) -> [f32; 3] {
    let mut v = [0.0; 3];
    let kinds: &[UnitKind] = match t {
        ActionType::NoOp => &[],
        ActionType::Stop | ActionType::Move => &[UnitKind::Worker, UnitKind::Fighter],
        ActionType::Attack => &[UnitKind::Fighter],
        ActionType::Build => &[UnitKind::Worker],
    };
    for k in kinds {
        v[k.index()] = 1.0;
    }
    v
}

/// Masks actually applied to each head for one step. Unit-selection rows
/// have `max_entities + 1` entries, the last being the end-of-selection slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadMasks {
    pub action_type: Vec<bool>,
    pub delay: Vec<bool>,
    pub queue: Vec<bool>,
    pub units: Vec<Vec<bool>>,
    pub target_unit: Vec<bool>,
    pub location: Vec<bool>,
    /// Whether each head takes part in this action.
    pub used: [bool; NUM_HEADS],
}

/// Selection sequence as slot indices with the end slot (`n`) appended when
/// the head would emit it.
pub fn unit_choices(units: &[usize], base: &[bool], max_selected: usize) -> Vec<usize> {
    let n = base.len();
    let mut seq = units.to_vec();
    let remaining = base.iter().enumerate().filter(|(i, ok)| **ok && !units.contains(i)).count();
    if units.len() < max_selected && remaining > 0 {
        seq.push(n);
    }
    seq
}

/// Mask for selection step `k` given the earlier choices.
pub fn unit_step_mask(base: &[bool], chosen: &[usize]) -> Vec<bool> {
    let mut m: Vec<bool> = base.iter().enumerate().map(|(i, ok)| *ok && !chosen.contains(&i)).collect();
    m.push(!chosen.is_empty());
    m
}

impl HeadMasks {
    /// Masks for `action` taken in `obs`.
    pub fn for_action(obs: &Observation, action: &NetAction, max_delay: usize, max_selected: usize) -> HeadMasks {
        let t = action.kind();
        let ti = t.index();
        let m = &obs.masks;
        let n = obs.entity_valid.len();
        let units = if t.selects_units() {
            let seq = unit_choices(&action.units, &m.units[ti], max_selected);
            (0..seq.len()).map(|k| unit_step_mask(&m.units[ti], &seq[..k])).collect()
        } else {
            Vec::new()
        };
        HeadMasks {
            action_type: m.action_type.clone(),
            delay: vec![true; max_delay],
            queue: vec![true, m.queue[ti]],
            units,
            target_unit: if t.target() == TargetKind::Unit { m.target_unit[ti].clone() } else { vec![false; n] },
            location: if t.target() == TargetKind::Location {
                m.location[ti].clone()
            } else {
                vec![false; m.location[ti].len()]
            },
            used: [
                true,
                true,
                true,
                t.selects_units(),
                t.target() == TargetKind::Unit,
                t.target() == TargetKind::Location,
            ],
        }
    }
}

/// Head logits as plain numbers, already divided by the head temperature.
/// Heads an action does not use hold all-zero sentinel rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLogitsData {
    pub action_type: Vec<f32>,
    pub delay: Vec<f32>,
    pub queue: Vec<f32>,
    /// One row per selection step, `max_entities + 1` wide.
    pub units: Vec<Vec<f32>>,
    pub target_unit: Vec<f32>,
    pub location: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_slot_follows_selection() {
        let base = [true, false, true, true];
        assert_eq!(unit_choices(&[0], &base, 4), vec![0, 4]);
        assert_eq!(unit_choices(&[0, 2, 3], &base, 4), vec![0, 2, 3]);
        assert_eq!(unit_choices(&[0, 2], &base, 2), vec![0, 2]);
        assert_eq!(unit_step_mask(&base, &[]), vec![true, false, true, true, false]);
        assert_eq!(unit_step_mask(&base, &[2]), vec![true, false, false, true, true]);
    }
}
