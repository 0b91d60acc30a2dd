use sha2::{Digest, Sha256};

use crate::error::EnvError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvConfig {
    /// Side length of the square board in cells.
    pub board_size: usize,
    /// Side length of the rendered spatial observation. Must be a multiple of
    /// `board_size`; each cell is drawn as a square block of pixels.
    pub minimap_size: usize,
    pub max_entities: usize,
    pub max_selected: usize,
    pub max_delay: usize,
    pub max_game_frames: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            board_size: 8,
            minimap_size: 16,
            max_entities: 8,
            max_selected: 4,
            max_delay: 4,
            max_game_frames: 512,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.board_size < 6 {
            return bad("board_size must be at least 6");
        }
        if self.minimap_size < self.board_size || self.minimap_size % self.board_size != 0 {
            return bad("minimap_size must be a positive multiple of board_size");
        }
        if self.max_entities < 2 {
            return bad("max_entities must be at least 2");
        }
        if self.max_selected == 0 || self.max_delay == 0 || self.max_game_frames == 0 {
            return bad("max_selected, max_delay and max_game_frames must be positive");
        }
        Ok(())
    }

    /// Pixels per board cell along one axis.
    pub fn scale(&self) -> usize {
        self.minimap_size / self.board_size
    }

    /// Short stable digest used to tie replay files to a configuration.
    pub fn hash(&self) -> String {
        let text = format!(
            "board={} minimap={} entities={} selected={} delay={} frames={}",
            self.board_size,
            self.minimap_size,
            self.max_entities,
            self.max_selected,
            self.max_delay,
            self.max_game_frames
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
