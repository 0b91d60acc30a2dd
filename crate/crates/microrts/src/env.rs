use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::action::{ActionType, ArgsAction, TargetKind};
use crate::config::EnvConfig;
use crate::error::EnvError;
use crate::obs::{self, ActionMasks, Observation};
use crate::rules::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Worker,
    Fighter,
    Base,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::Worker, UnitKind::Fighter, UnitKind::Base];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn max_health(self) -> u32 {
        match self {
            UnitKind::Worker => WORKER_HEALTH,
            UnitKind::Fighter => FIGHTER_HEALTH,
            UnitKind::Base => BASE_HEALTH,
        }
    }

    pub fn mobile(self) -> bool {
        self != UnitKind::Base
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Order {
    Move((usize, usize)),
    Attack(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unit {
    pub id: u32,
    pub owner: usize,
    pub kind: UnitKind,
    pub row: usize,
    pub col: usize,
    pub health: u32,
    pub weapon_cooldown: u32,
    pub(crate) orders: VecDeque<Order>,
}

impl Unit {
    pub fn pos(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    pub fn queued_orders(&self) -> usize {
        self.orders.len()
    }

    /// Cell this unit is currently walking to, if any.
    pub fn move_target(&self) -> Option<(usize, usize)> {
        match self.orders.front() {
            Some(Order::Move(cell)) => Some(*cell),
            _ => None,
        }
    }

    pub fn attack_target(&self) -> Option<u32> {
        match self.orders.front() {
            Some(Order::Attack(id)) => Some(*id),
            _ => None,
        }
    }
}

/// A command waiting for its delay to elapse. Coordinates are absolute.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Scheduled {
    fire_frame: u32,
    player: usize,
    action_type: ActionType,
    units: Vec<u32>,
    queue: bool,
    target_unit: Option<u32>,
    target_cell: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: [Observation; 2],
    /// Reward per player; nonzero only on the final step.
    pub rewards: [f32; 2],
    pub is_final: bool,
}

pub(crate) fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    config: EnvConfig,
    seed: u64,
    frame: u32,
    units: Vec<Unit>,
    next_id: u32,
    minerals: [u32; 2],
    height: Vec<f32>,
    scheduled: Vec<Scheduled>,
    /// Final reward of player 0 once the game is over.
    outcome: Option<i32>,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Env, EnvError> {
        config.validate()?;
        let mut env = Env {
            config,
            seed,
            frame: 0,
            units: Vec::new(),
            next_id: 0,
            minerals: [0; 2],
            height: Vec::new(),
            scheduled: Vec::new(),
            outcome: None,
        };
        env.reset(seed);
        Ok(env)
    }

    /// Restarts the game. The seed picks the start position inside the
    /// top-left quadrant and a height map; player 1 gets the point mirror.
    pub fn reset(&mut self, seed: u64) -> [Observation; 2] {
        let b = self.config.board_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quadrant = b / 2 - 1;
        let base = (rng.gen_range(0..quadrant), rng.gen_range(0..quadrant));
        let mut height = vec![0.0f32; b * b];
        for r in 0..b {
            for c in 0..b {
                let (mr, mc) = (b - 1 - r, b - 1 - c);
                if r * b + c <= mr * b + mc {
                    let h = rng.gen_range(0..3) as f32 / 2.0;
                    height[r * b + c] = h;
                    height[mr * b + mc] = h;
                }
            }
        }
        self.seed = seed;
        self.frame = 0;
        self.units.clear();
        self.next_id = 0;
        self.minerals = [0; 2];
        self.height = height;
        self.scheduled.clear();
        self.outcome = None;
        let layout = [
            (UnitKind::Base, (0, 0)),
            (UnitKind::Worker, (1, 0)),
            (UnitKind::Fighter, (0, 1)),
            (UnitKind::Fighter, (1, 1)),
        ];
        for (kind, (dr, dc)) in layout {
            for player in 0..2 {
                let cell = self.to_ego(player, (base.0 + dr, base.1 + dc));
                self.spawn(player, kind, cell);
            }
        }
        [self.observe(0), self.observe(1)]
    }

    fn spawn(&mut self, owner: usize, kind: UnitKind, (row, col): (usize, usize)) {
        self.units.push(Unit {
            id: self.next_id,
            owner,
            kind,
            row,
            col,
            health: kind.max_health(),
            weapon_cooldown: 0,
            orders: VecDeque::new(),
        });
        self.next_id += 1;
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame(&self) -> u32 {
        self.frame
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, id: u32) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == id)
    }

    pub fn minerals(&self, player: usize) -> u32 {
        self.minerals[player]
    }

    pub fn height(&self, cell: (usize, usize)) -> f32 {
        self.height[cell.0 * self.config.board_size + cell.1]
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    /// +1 if player 0 won, −1 if it lost, 0 for a draw or truncation.
    pub fn outcome(&self) -> Option<i32> {
        self.outcome
    }

    pub fn total_health(&self, player: usize) -> u32 {
        self.units.iter().filter(|u| u.owner == player).map(|u| u.health).sum()
    }

    pub fn count(&self, player: usize, kind: UnitKind) -> usize {
        self.units.iter().filter(|u| u.owner == player && u.kind == kind).count()
    }

    pub fn supply(&self, player: usize) -> usize {
        self.units.iter().filter(|u| u.owner == player).count()
    }

    /// Whether any scheduled command still refers to `id`.
    pub fn has_scheduled(&self, id: u32) -> bool {
        self.scheduled.iter().any(|s| s.units.contains(&id))
    }

    /// Maps an absolute cell to `player`'s frame and back (the map is a
    /// point reflection, so the transform is its own inverse).
    pub fn to_ego(&self, player: usize, (r, c): (usize, usize)) -> (usize, usize) {
        let b = self.config.board_size;
        if player == 0 {
            (r, c)
        } else {
            (b - 1 - r, b - 1 - c)
        }
    }

    /// Canonical minimap pixel of an ego cell.
    pub fn cell_to_pixel(&self, (r, c): (usize, usize)) -> (usize, usize) {
        let f = self.config.scale();
        (r * f, c * f)
    }

    pub fn pixel_to_cell(&self, (r, c): (usize, usize)) -> (usize, usize) {
        let f = self.config.scale();
        (r / f, c / f)
    }

    pub(crate) fn occupant(&self, cell: (usize, usize)) -> Option<&Unit> {
        self.units.iter().find(|u| u.pos() == cell)
    }

    pub fn is_empty_cell(&self, cell: (usize, usize)) -> bool {
        self.occupant(cell).is_none()
    }

    /// Empty cells next to one of `player`'s bases (absolute coordinates).
    pub fn build_zone(&self, player: usize) -> Vec<(usize, usize)> {
        let b = self.config.board_size;
        let mut cells = Vec::new();
        for r in 0..b {
            for c in 0..b {
                let near_base = self.units.iter().any(|u| {
                    u.owner == player && u.kind == UnitKind::Base && chebyshev(u.pos(), (r, c)) == 1
                });
                if near_base && self.is_empty_cell((r, c)) {
                    cells.push((r, c));
                }
            }
        }
        cells
    }

    /// Unit ids in entity-slot order for `player`: own units first, then
    /// enemies, each sorted by id, truncated to `max_entities`.
    pub fn entity_slots(&self, player: usize) -> Vec<u32> {
        let n = self.config.max_entities;
        let own: Vec<u32> = self.units.iter().filter(|u| u.owner == player).map(|u| u.id).collect();
        let enemy: Vec<u32> = self.units.iter().filter(|u| u.owner != player).map(|u| u.id).collect();
        let own_take = own.len().min((n / 2).max(n.saturating_sub(enemy.len())));
        let enemy_take = enemy.len().min(n - own_take);
        own[..own_take].iter().chain(&enemy[..enemy_take]).copied().collect()
    }

    pub fn action_masks(&self, player: usize) -> ActionMasks {
        obs::compute_masks(self, player, &self.entity_slots(player))
    }

    pub fn observe(&self, player: usize) -> Observation {
        obs::observe(self, player)
    }

    /// Hex digest of the full game state.
    pub fn digest(&self) -> String {
        let text = format!(
            "{:?}|{}|{:?}|{}|{:?}|{:?}|{:?}",
            self.config, self.frame, self.units, self.next_id, self.minerals, self.scheduled, self.outcome
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        for v in &self.height {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Checks an action against the masks `player` currently observes.
    pub fn validate(&self, player: usize, action: &ArgsAction) -> Result<(), EnvError> {
        let reject = |mask: &'static str, detail: String| Err(EnvError::Rejected { player, mask, detail });
        let slots = self.entity_slots(player);
        let masks = obs::compute_masks(self, player, &slots);
        let t = action.action_type;
        let ti = t.index();
        if !masks.action_type[ti] {
            return reject("type_mask", format!("{} unavailable", t.name()));
        }
        if action.delay == 0 || action.delay > self.config.max_delay {
            return reject("delay_range", format!("delay {} outside 1..={}", action.delay, self.config.max_delay));
        }
        if action.queue && !masks.queue[ti] {
            return reject("queue_mask", format!("{} cannot be queued", t.name()));
        }
        let slot_of = |id: u32| slots.iter().position(|s| *s == id);
        if t.selects_units() {
            if action.selected_units.is_empty() || action.selected_units.len() > self.config.max_selected {
                return reject("unit_selection_mask", format!("{} units selected", action.selected_units.len()));
            }
            for (k, id) in action.selected_units.iter().enumerate() {
                if action.selected_units[..k].contains(id) {
                    return reject("unit_selection_mask", format!("unit {id} selected twice"));
                }
                match slot_of(*id) {
                    Some(s) if masks.units[ti][s] => {}
                    _ => return reject("unit_selection_mask", format!("unit {id} not selectable")),
                }
            }
        } else if !action.selected_units.is_empty() {
            return reject("unit_selection_mask", "action selects no units".into());
        }
        match (t.target(), action.target_unit, action.target_location) {
            (TargetKind::None, None, None) => {}
            (TargetKind::Unit, Some(id), None) => match slot_of(id) {
                Some(s) if masks.target_unit[ti][s] => {}
                _ => return reject("target_unit_mask", format!("unit {id} not targetable")),
            },
            (TargetKind::Location, None, Some((r, c))) => {
                let m = self.config.minimap_size;
                if r >= m || c >= m || !masks.location[ti][obs::coord_to_index(r, c, m)] {
                    return reject("location_mask", format!("location ({r}, {c}) not allowed"));
                }
            }
            (TargetKind::Unit, ..) => return reject("target_unit_mask", "exactly one target unit required".into()),
            (TargetKind::Location, ..) => return reject("location_mask", "exactly one location required".into()),
            (TargetKind::None, ..) => return reject("target_unit_mask", "action takes no target".into()),
        }
        Ok(())
    }

    /// Advances one frame with one action per player. Both actions are
    /// validated before anything changes.
    pub fn step(&mut self, actions: [&ArgsAction; 2]) -> Result<StepResult, EnvError> {
        if self.is_finished() {
            return Err(EnvError::Finished);
        }
        for (p, a) in actions.iter().enumerate() {
            self.validate(p, a)?;
        }
        for (p, a) in actions.iter().enumerate() {
            self.schedule(p, a);
        }
        self.advance();
        let rewards = match self.outcome {
            Some(o) => [o as f32, -o as f32],
            None => [0.0, 0.0],
        };
        Ok(StepResult { observations: [self.observe(0), self.observe(1)], rewards, is_final: self.is_finished() })
    }

    fn schedule(&mut self, player: usize, a: &ArgsAction) {
        if a.action_type == ActionType::NoOp {
            return;
        }
        let target_cell = a.target_location.map(|px| self.to_ego(player, self.pixel_to_cell(px)));
        self.scheduled.push(Scheduled {
            fire_frame: self.frame + a.delay as u32 - 1,
            player,
            action_type: a.action_type,
            units: a.selected_units.clone(),
            queue: a.queue,
            target_unit: a.target_unit,
            target_cell,
        });
    }

    fn priority(&self) -> [usize; 2] {
        if self.frame % 2 == 0 {
            [0, 1]
        } else {
            [1, 0]
        }
    }

    /// Indices into `units` in resolution order.
    fn unit_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.units.len());
        for p in self.priority() {
            order.extend((0..self.units.len()).filter(|&i| self.units[i].owner == p));
        }
        order
    }

    fn advance(&mut self) {
        for u in &mut self.units {
            u.weapon_cooldown = u.weapon_cooldown.saturating_sub(1);
        }
        let builds = self.fire_due();
        self.move_phase();
        self.attack_phase();
        self.build_phase(builds);
        for p in 0..2 {
            self.minerals[p] += WORKER_INCOME * self.count(p, UnitKind::Worker) as u32;
        }
        self.cleanup();
        self.frame += 1;
        let bases = [self.count(0, UnitKind::Base), self.count(1, UnitKind::Base)];
        self.outcome = match bases {
            [0, 0] => Some(0),
            [0, _] => Some(-1),
            [_, 0] => Some(1),
            _ if self.frame >= self.config.max_game_frames => Some(0),
            _ => None,
        };
    }

    /// Applies unit orders that are due this frame; returns due builds.
    fn fire_due(&mut self) -> Vec<Scheduled> {
        let frame = self.frame;
        let (mut due, rest): (Vec<_>, Vec<_>) = self.scheduled.drain(..).partition(|s| s.fire_frame == frame);
        self.scheduled = rest;
        let prio = self.priority();
        due.sort_by_key(|s| prio.iter().position(|p| *p == s.player));
        let mut builds = Vec::new();
        for s in due {
            let order = match s.action_type {
                ActionType::Build => {
                    builds.push(s);
                    continue;
                }
                ActionType::Move => s.target_cell.map(Order::Move),
                ActionType::Attack => match s.target_unit {
                    Some(t) if self.unit(t).is_some() => Some(Order::Attack(t)),
                    _ => continue,
                },
                _ => None,
            };
            for u in self.units.iter_mut().filter(|u| u.owner == s.player && s.units.contains(&u.id)) {
                if !s.queue {
                    u.orders.clear();
                }
                if let Some(o) = order {
                    u.orders.push_back(o);
                }
            }
        }
        builds
    }

    fn position_of(&self, id: u32) -> Option<(usize, usize)> {
        self.unit(id).map(|u| u.pos())
    }

    /// King-move step to the empty neighbour closest to `to` (Chebyshev,
    /// then Manhattan). Stays put unless the step strictly improves.
    fn step_toward(&self, from: (usize, usize), to: (usize, usize)) -> Option<(usize, usize)> {
        let b = self.config.board_size as isize;
        let score = |c: (usize, usize)| (chebyshev(c, to), c.0.abs_diff(to.0) + c.1.abs_diff(to.1));
        let mut best: Option<((usize, usize), (usize, usize))> = None;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (r, c) = (from.0 as isize + dr, from.1 as isize + dc);
                if (dr, dc) == (0, 0) || r < 0 || c < 0 || r >= b || c >= b {
                    continue;
                }
                let cell = (r as usize, c as usize);
                if !self.is_empty_cell(cell) {
                    continue;
                }
                let s = score(cell);
                if best.map_or(true, |(bs, _)| s < bs) {
                    best = Some((s, cell));
                }
            }
        }
        best.filter(|(s, _)| *s < score(from)).map(|(_, cell)| cell)
    }

    fn move_phase(&mut self) {
        for i in self.unit_order() {
            let dest = loop {
                let u = &self.units[i];
                match u.orders.front().copied() {
                    Some(Order::Move(cell)) if u.pos() == cell => {
                        self.units[i].orders.pop_front();
                    }
                    Some(Order::Move(cell)) => break Some(cell),
                    Some(Order::Attack(t)) => match self.position_of(t) {
                        None => {
                            self.units[i].orders.pop_front();
                        }
                        Some(p) if chebyshev(u.pos(), p) <= ATTACK_RANGE => break None,
                        Some(p) => break Some(p),
                    },
                    None => break None,
                }
            };
            if let Some(dest) = dest {
                if let Some(next) = self.step_toward(self.units[i].pos(), dest) {
                    let u = &mut self.units[i];
                    u.row = next.0;
                    u.col = next.1;
                    if u.orders.front() == Some(&Order::Move(next)) {
                        u.orders.pop_front();
                    }
                }
            }
        }
    }

    fn attack_phase(&mut self) {
        let mut hits: Vec<u32> = Vec::new();
        for i in self.unit_order() {
            let u = &self.units[i];
            if u.kind != UnitKind::Fighter || u.weapon_cooldown > 0 {
                continue;
            }
            if let Some(t) = u.attack_target() {
                if let Some(p) = self.position_of(t) {
                    if chebyshev(u.pos(), p) <= ATTACK_RANGE {
                        hits.push(t);
                        self.units[i].weapon_cooldown = ATTACK_COOLDOWN;
                    }
                }
            }
        }
        for t in hits {
            if let Some(u) = self.units.iter_mut().find(|u| u.id == t) {
                u.health = u.health.saturating_sub(ATTACK_DAMAGE);
            }
        }
    }

    fn build_phase(&mut self, builds: Vec<Scheduled>) {
        for s in builds {
            let p = s.player;
            let has_builder = self
                .units
                .iter()
                .any(|u| u.owner == p && u.kind == UnitKind::Worker && u.health > 0 && s.units.contains(&u.id));
            let Some(cell) = s.target_cell else { continue };
            let affordable = self.minerals[p] >= FIGHTER_COST && self.supply(p) < SUPPLY_CAP;
            let placeable = self.build_zone(p).contains(&cell);
            if has_builder && affordable && placeable {
                self.minerals[p] -= FIGHTER_COST;
                self.spawn(p, UnitKind::Fighter, cell);
            }
        }
    }

    fn cleanup(&mut self) {
        self.units.retain(|u| u.health > 0);
        let alive: Vec<u32> = self.units.iter().map(|u| u.id).collect();
        for u in &mut self.units {
            u.orders.retain(|o| match o {
                Order::Attack(t) => alive.contains(t),
                Order::Move(_) => true,
            });
        }
        for s in &mut self.scheduled {
            s.units.retain(|id| alive.contains(id));
        }
        self.scheduled.retain(|s| !s.units.is_empty());
    }
}
