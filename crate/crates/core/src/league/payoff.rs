use std::collections::BTreeMap;

use super::PlayerId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Record {
    pub wins: u64,
    pub draws: u64,
    pub losses: u64,
}

impl Record {
    pub fn games(&self) -> u64 {
        self.wins + self.draws + self.losses
    }
}

/// Win, draw and loss counts per ordered pair. Every report updates both
/// directions so that the two entries mirror each other.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PayoffMatrix {
    entries: BTreeMap<(PlayerId, PlayerId), Record>,
}

impl PayoffMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// `outcome` is from `a`'s side: positive win, zero draw, negative loss.
    /// A self-play report counts twice on the diagonal, once per side.
    pub fn report(&mut self, a: PlayerId, b: PlayerId, outcome: i32) {
        match outcome.signum() {
            1 => {
                self.entries.entry((a, b)).or_default().wins += 1;
                self.entries.entry((b, a)).or_default().losses += 1;
            }
            0 => {
                self.entries.entry((a, b)).or_default().draws += 1;
                self.entries.entry((b, a)).or_default().draws += 1;
            }
            _ => {
                self.entries.entry((a, b)).or_default().losses += 1;
                self.entries.entry((b, a)).or_default().wins += 1;
            }
        }
    }

    pub fn record(&self, a: PlayerId, b: PlayerId) -> Record {
        self.entries.get(&(a, b)).copied().unwrap_or_default()
    }

    pub fn games(&self, a: PlayerId, b: PlayerId) -> u64 {
        self.record(a, b).games()
    }

    /// (wins + draws / 2) / games, or 0.5 before any game.
    pub fn win_rate(&self, a: PlayerId, b: PlayerId) -> f64 {
        let r = self.record(a, b);
        if r.games() == 0 {
            return 0.5;
        }
        (r.wins as f64 + 0.5 * r.draws as f64) / r.games() as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = ((PlayerId, PlayerId), Record)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn total_games(&self) -> u64 {
        self.entries.values().map(Record::games).sum::<u64>() / 2
    }

    pub(crate) fn insert(&mut self, a: PlayerId, b: PlayerId, r: Record) {
        self.entries.insert((a, b), r);
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|((a, b), r)| {
            let o = self.record(*b, *a);
            o.wins == r.losses && o.losses == r.wins && o.draws == r.draws
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("player,opponent,wins,draws,losses\n");
        for ((a, b), r) in &self.entries {
            s.push_str(&format!("{a},{b},{},{},{}\n", r.wins, r.draws, r.losses));
        }
        s
    }
}
