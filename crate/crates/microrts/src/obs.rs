use serde::{Deserialize, Serialize};

use crate::action::{ActionType, TargetKind, NUM_ACTION_TYPES};
use crate::env::{Env, UnitKind};
use crate::rules::*;

/// Per-entity feature width: own, enemy, worker, fighter, base, row, col,
/// health, cooldown, has order, queue length, pending delayed command.
pub const ENTITY_FEATURES: usize = 12;

/// Spatial planes: height, visibility, own kinds (3), enemy kinds (3), own
/// health, enemy health, own cooldown, enemy cooldown, own busy units, build
/// zone, empty cells, own move targets, own attack targets, game progress.
pub const NUM_PLANES: usize = 18;

/// One named element of the scalar vector. `context` elements are also fed
/// to the scalar context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarField {
    pub name: &'static str,
    pub width: usize,
    pub context: bool,
}

pub const SCALAR_LAYOUT: [ScalarField; 6] = [
    ScalarField { name: "minerals", width: 1, context: false },
    ScalarField { name: "supply", width: 1, context: false },
    ScalarField { name: "frame", width: 1, context: false },
    ScalarField { name: "available_actions", width: NUM_ACTION_TYPES, context: true },
    ScalarField { name: "own_unit_counts", width: 3, context: true },
    ScalarField { name: "enemy_unit_counts", width: 3, context: true },
];

pub const SCALAR_SIZE: usize = 14;

pub fn coord_to_index(row: usize, col: usize, size: usize) -> usize {
    row * size + col
}

pub fn index_to_coord(index: usize, size: usize) -> (usize, usize) {
    (index / size, index % size)
}

/// Masks indexed by action type. Unit masks are over entity slots, location
/// masks over minimap pixels (only the canonical top-left pixel of each
/// allowed cell is set).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMasks {
    pub action_type: Vec<bool>,
    pub queue: Vec<bool>,
    pub units: Vec<Vec<bool>>,
    pub target_unit: Vec<Vec<bool>>,
    pub location: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub player: usize,
    /// `max_entities × ENTITY_FEATURES`, zero in invalid slots.
    pub entities: Vec<f32>,
    pub entity_valid: Vec<bool>,
    pub entity_ids: Vec<Option<u32>>,
    pub scalar: Vec<f32>,
    /// `NUM_PLANES × minimap × minimap`.
    pub spatial: Vec<f32>,
    pub masks: ActionMasks,
}

impl Observation {
    pub fn slot_of(&self, id: u32) -> Option<usize> {
        self.entity_ids.iter().position(|s| *s == Some(id))
    }

    pub fn num_valid(&self) -> usize {
        self.entity_valid.iter().filter(|v| **v).count()
    }

    /// Feature vector of one slot.
    pub fn entity(&self, slot: usize) -> &[f32] {
        &self.entities[slot * ENTITY_FEATURES..(slot + 1) * ENTITY_FEATURES]
    }

    pub fn plane(&self, index: usize) -> &[f32] {
        let n = self.spatial.len() / NUM_PLANES;
        &self.spatial[index * n..(index + 1) * n]
    }
}

pub(crate) fn compute_masks(env: &Env, player: usize, slots: &[u32]) -> ActionMasks {
    let cfg = env.config();
    let n = cfg.max_entities;
    let m = cfg.minimap_size;
    let b = cfg.board_size;
    let mut masks = ActionMasks {
        action_type: vec![false; NUM_ACTION_TYPES],
        queue: ActionType::ALL.iter().map(|t| t.queueable()).collect(),
        units: vec![vec![false; n]; NUM_ACTION_TYPES],
        target_unit: vec![vec![false; n]; NUM_ACTION_TYPES],
        location: vec![vec![false; m * m]; NUM_ACTION_TYPES],
    };
    for (s, id) in slots.iter().enumerate() {
        let u = env.unit(*id).expect("slot refers to a live unit");
        if u.owner == player {
            if u.kind.mobile() {
                masks.units[ActionType::Stop.index()][s] = true;
                masks.units[ActionType::Move.index()][s] = true;
            }
            if u.kind == UnitKind::Fighter {
                masks.units[ActionType::Attack.index()][s] = true;
            }
            if u.kind == UnitKind::Worker {
                masks.units[ActionType::Build.index()][s] = true;
            }
        } else {
            masks.target_unit[ActionType::Attack.index()][s] = true;
        }
    }
    let mut set_cell = |t: ActionType, abs: (usize, usize)| {
        let (r, c) = env.cell_to_pixel(env.to_ego(player, abs));
        masks.location[t.index()][coord_to_index(r, c, m)] = true;
    };
    for r in 0..b {
        for c in 0..b {
            if env.is_empty_cell((r, c)) {
                set_cell(ActionType::Move, (r, c));
            }
        }
    }
    let can_build = env.minerals(player) >= FIGHTER_COST && env.supply(player) < SUPPLY_CAP;
    if can_build {
        for cell in env.build_zone(player) {
            set_cell(ActionType::Build, cell);
        }
    }
    for t in ActionType::ALL {
        let ti = t.index();
        let units_ok = !t.selects_units() || masks.units[ti].iter().any(|v| *v);
        let target_ok = match t.target() {
            TargetKind::None => true,
            TargetKind::Unit => masks.target_unit[ti].iter().any(|v| *v),
            TargetKind::Location => masks.location[ti].iter().any(|v| *v),
        };
        masks.action_type[ti] = units_ok && target_ok;
    }
    masks
}

pub(crate) fn observe(env: &Env, player: usize) -> Observation {
    let cfg = env.config();
    let (n, m, b) = (cfg.max_entities, cfg.minimap_size, cfg.board_size);
    let slots = env.entity_slots(player);
    let masks = compute_masks(env, player, &slots);

    let mut entities = vec![0.0f32; n * ENTITY_FEATURES];
    let mut entity_valid = vec![false; n];
    let mut entity_ids = vec![None; n];
    let edge = (b - 1) as f32;
    for (s, id) in slots.iter().enumerate() {
        let u = env.unit(*id).expect("slot refers to a live unit");
        let (r, c) = env.to_ego(player, u.pos());
        let f = &mut entities[s * ENTITY_FEATURES..(s + 1) * ENTITY_FEATURES];
        f[if u.owner == player { 0 } else { 1 }] = 1.0;
        f[2 + u.kind.index()] = 1.0;
        f[5] = r as f32 / edge;
        f[6] = c as f32 / edge;
        f[7] = u.health as f32 / u.kind.max_health() as f32;
        f[8] = u.weapon_cooldown as f32 / ATTACK_COOLDOWN as f32;
        f[9] = if u.queued_orders() > 0 { 1.0 } else { 0.0 };
        f[10] = (u.queued_orders().min(QUEUE_NORM)) as f32 / QUEUE_NORM as f32;
        f[11] = if env.has_scheduled(u.id) { 1.0 } else { 0.0 };
        entity_valid[s] = true;
        entity_ids[s] = Some(*id);
    }

    let enemy = 1 - player;
    let mut scalar = Vec::with_capacity(SCALAR_SIZE);
    scalar.push((env.minerals(player) as f32 / MINERAL_NORM).min(1.0));
    scalar.push(env.supply(player) as f32 / SUPPLY_CAP as f32);
    scalar.push(env.frame() as f32 / cfg.max_game_frames as f32);
    scalar.extend(masks.action_type.iter().map(|v| if *v { 1.0 } else { 0.0 }));
    for p in [player, enemy] {
        scalar.extend(UnitKind::ALL.iter().map(|k| env.count(p, *k) as f32 / SUPPLY_CAP as f32));
    }
    debug_assert_eq!(scalar.len(), SCALAR_SIZE);

    // Render at board resolution in the ego frame, then upsample.
    let mut cells = vec![0.0f32; NUM_PLANES * b * b];
    let mut put = |plane: usize, (r, c): (usize, usize), v: f32| cells[plane * b * b + r * b + c] = v;
    let progress = env.frame() as f32 / cfg.max_game_frames as f32;
    for r in 0..b {
        for c in 0..b {
            let ego = env.to_ego(player, (r, c));
            put(0, ego, env.height((r, c)));
            put(1, ego, 1.0);
            put(17, ego, progress);
            if env.is_empty_cell((r, c)) {
                put(14, ego, 1.0);
            }
        }
    }
    for u in env.units() {
        let ego = env.to_ego(player, u.pos());
        let own = u.owner == player;
        put(if own { 2 } else { 5 } + u.kind.index(), ego, 1.0);
        put(if own { 8 } else { 9 }, ego, u.health as f32 / u.kind.max_health() as f32);
        put(if own { 10 } else { 11 }, ego, u.weapon_cooldown as f32 / ATTACK_COOLDOWN as f32);
        if own {
            if u.queued_orders() > 0 || env.has_scheduled(u.id) {
                put(12, ego, 1.0);
            }
            if let Some(cell) = u.move_target() {
                put(15, env.to_ego(player, cell), 1.0);
            }
            if let Some(t) = u.attack_target().and_then(|t| env.unit(t)) {
                put(16, env.to_ego(player, t.pos()), 1.0);
            }
        }
    }
    for cell in env.build_zone(player) {
        put(13, env.to_ego(player, cell), 1.0);
    }
    let f = cfg.scale();
    let mut spatial = vec![0.0f32; NUM_PLANES * m * m];
    for plane in 0..NUM_PLANES {
        for pr in 0..m {
            for pc in 0..m {
                spatial[plane * m * m + pr * m + pc] = cells[plane * b * b + (pr / f) * b + pc / f];
            }
        }
    }

    Observation { player, entities, entity_valid, entity_ids, scalar, spatial, masks }
}

