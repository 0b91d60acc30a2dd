//! Network dimensions.

use microrts::{EnvConfig, NUM_PLANES, SCALAR_LAYOUT};

use crate::error::CoreError;

/// Number of autoregressive heads: type, delay, queue, units, target unit,
/// location.
pub const NUM_HEADS: usize = 6;
pub const HEAD_NAMES: [&str; NUM_HEADS] = ["action_type", "delay", "queue", "units", "target_unit", "location"];

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub race: String,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub max_entities: usize,
    pub max_selected: usize,
    pub minimap_size: usize,
    pub embedding_size: usize,
    pub map_channels: usize,
    /// Widths of the full scalar list and of the context list.
    pub scalar_encoder_fc_input: [usize; 2],
    /// Raw scalar feature width of the original game; informational only.
    pub scalar_feature_size: usize,
    pub entity_embedding_size: usize,
    pub lstm_hidden_dim: usize,
    pub lstm_layers: usize,
    pub n_resblocks: usize,
    pub original_1024: usize,
    pub original_512: usize,
    pub original_256: usize,
    pub original_128: usize,
    pub original_64: usize,
    pub original_32: usize,
    pub context_size: usize,
    pub location_head_max_map_channels: usize,
    pub autoregressive_embedding_size: usize,
    pub baseline_input_size: usize,
    pub league_learner_num: usize,
    pub actorloop_num: usize,

    pub max_delay: usize,
    pub board_size: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_dropout: f64,
    /// Sampling temperature per head, in `HEAD_NAMES` order.
    pub temperature: [f64; NUM_HEADS],
}

impl NetConfig {
    /// The mini-AlphaStar column of the hyper-parameter table.
    pub fn mini() -> Self {
        NetConfig {
            race: "Protoss".into(),
            batch_size: 96,
            sequence_length: 64,
            max_entities: 32,
            max_selected: 384,
            minimap_size: 64,
            embedding_size: 1543,
            map_channels: 18,
            scalar_encoder_fc_input: [864, 448],
            scalar_feature_size: 7327,
            entity_embedding_size: 64,
            lstm_hidden_dim: 128,
            lstm_layers: 1,
            n_resblocks: 4,
            original_1024: 256,
            original_512: 128,
            original_256: 64,
            original_128: 48,
            original_64: 32,
            original_32: 16,
            context_size: 128,
            location_head_max_map_channels: 32,
            autoregressive_embedding_size: 256,
            baseline_input_size: 1152,
            league_learner_num: 4,
            actorloop_num: 512,
            max_delay: 8,
            board_size: 8,
            transformer_layers: 3,
            transformer_heads: 2,
            transformer_dropout: 0.0,
            temperature: [1.0; NUM_HEADS],
        }
    }

    /// Small dimensions for tests and desk-scale training.
    pub fn tiny() -> Self {
        NetConfig {
            batch_size: 4,
            sequence_length: 8,
            max_entities: 8,
            max_selected: 4,
            minimap_size: 16,
            embedding_size: 64,
            scalar_encoder_fc_input: [48, 24],
            scalar_feature_size: microrts::SCALAR_SIZE,
            entity_embedding_size: 16,
            lstm_hidden_dim: 32,
            n_resblocks: 1,
            original_1024: 64,
            original_512: 32,
            original_256: 16,
            original_128: 12,
            original_64: 8,
            original_32: 8,
            context_size: 16,
            location_head_max_map_channels: 8,
            autoregressive_embedding_size: 32,
            baseline_input_size: 96,
            league_learner_num: 3,
            actorloop_num: 2,
            max_delay: 4,
            ..NetConfig::mini()
        }
    }

    pub fn profile(name: &str) -> Result<Self, CoreError> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "mini" => Ok(Self::mini()),
            _ => Err(CoreError::Config(format!("unknown profile {name}"))),
        }
    }

    /// Width of the embedded scalar vector: what remains of
    /// `embedding_size` after the entity and spatial embeddings.
    pub fn embedded_scalar_size(&self) -> usize {
        self.embedding_size.saturating_sub(2 * self.original_256)
    }

    /// Width of each player's observation features in the baseline.
    pub fn baseline_feature_size(&self) -> usize {
        self.baseline_input_size.saturating_sub(self.lstm_hidden_dim) / 2
    }

    /// Spatial side of `map_skip` after three stride-2 convolutions.
    pub fn map_skip_size(&self) -> usize {
        self.minimap_size / 8
    }

    /// Embedding widths of every scalar element, and whether each feeds the
    /// context. Context elements share the second fc width evenly, the
    /// others share the rest of the first.
    pub fn scalar_element_widths(&self) -> Vec<(usize, bool)> {
        let [total, context] = self.scalar_encoder_fc_input;
        let n_ctx = SCALAR_LAYOUT.iter().filter(|f| f.context).count();
        let n_other = SCALAR_LAYOUT.len() - n_ctx;
        let ctx = split_even(context, n_ctx);
        let other = split_even(total - context, n_other);
        let (mut ci, mut oi) = (0, 0);
        SCALAR_LAYOUT
            .iter()
            .map(|f| {
                if f.context {
                    ci += 1;
                    (ctx[ci - 1], true)
                } else {
                    oi += 1;
                    (other[oi - 1], false)
                }
            })
            .collect()
    }

    pub fn env_config(&self, max_game_frames: u32) -> EnvConfig {
        EnvConfig {
            board_size: self.board_size,
            minimap_size: self.minimap_size,
            max_entities: self.max_entities,
            max_selected: self.max_selected,
            max_delay: self.max_delay,
            max_game_frames,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::Config(m));
        let positive = [
            ("batch_size", self.batch_size),
            ("sequence_length", self.sequence_length),
            ("max_entities", self.max_entities),
            ("max_selected", self.max_selected),
            ("minimap_size", self.minimap_size),
            ("embedding_size", self.embedding_size),
            ("map_channels", self.map_channels),
            ("entity_embedding_size", self.entity_embedding_size),
            ("lstm_hidden_dim", self.lstm_hidden_dim),
            ("lstm_layers", self.lstm_layers),
            ("original_1024", self.original_1024),
            ("original_512", self.original_512),
            ("original_256", self.original_256),
            ("original_128", self.original_128),
            ("original_64", self.original_64),
            ("original_32", self.original_32),
            ("context_size", self.context_size),
            ("location_head_max_map_channels", self.location_head_max_map_channels),
            ("autoregressive_embedding_size", self.autoregressive_embedding_size),
            ("baseline_input_size", self.baseline_input_size),
            ("max_delay", self.max_delay),
            ("transformer_layers", self.transformer_layers),
            ("transformer_heads", self.transformer_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.map_channels != NUM_PLANES {
            return bad(format!("map_channels must be {NUM_PLANES}, the number of rendered planes"));
        }
        if self.minimap_size % 8 != 0 {
            return bad("minimap_size must be divisible by 8".into());
        }
        if self.embedded_scalar_size() == 0 {
            return bad("embedding_size must exceed the entity and spatial embeddings".into());
        }
        let [total, context] = self.scalar_encoder_fc_input;
        let n_ctx = SCALAR_LAYOUT.iter().filter(|f| f.context).count();
        if context < n_ctx || total < context + (SCALAR_LAYOUT.len() - n_ctx) {
            return bad("scalar_encoder_fc_input too small for the scalar layout".into());
        }
        if self.baseline_input_size <= self.lstm_hidden_dim
            || (self.baseline_input_size - self.lstm_hidden_dim) % 2 != 0
        {
            return bad("baseline_input_size minus lstm_hidden_dim must be positive and even".into());
        }
        if self.entity_embedding_size % self.transformer_heads != 0 {
            return bad("entity_embedding_size must be divisible by transformer_heads".into());
        }
        if !(0.0..1.0).contains(&self.transformer_dropout) {
            return bad("transformer_dropout must be in [0, 1)".into());
        }
        if self.temperature.iter().any(|t| !(*t > 0.0)) {
            return bad("temperatures must be positive".into());
        }
        self.env_config(1).validate().map_err(|e| CoreError::Config(e.to_string()))
    }

    /// `(name, value)` for every field, in declaration order. Used for
    /// config files and conformance checks.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let temps: Vec<String> = self.temperature.iter().map(|t| t.to_string()).collect();
        vec![
            ("race", self.race.clone()),
            ("batch_size", self.batch_size.to_string()),
            ("sequence_length", self.sequence_length.to_string()),
            ("max_entities", self.max_entities.to_string()),
            ("max_selected", self.max_selected.to_string()),
            ("minimap_size", self.minimap_size.to_string()),
            ("embedding_size", self.embedding_size.to_string()),
            ("map_channels", self.map_channels.to_string()),
            (
                "scalar_encoder_fc_input",
                format!("{},{}", self.scalar_encoder_fc_input[0], self.scalar_encoder_fc_input[1]),
            ),
            ("scalar_feature_size", self.scalar_feature_size.to_string()),
            ("entity_embedding_size", self.entity_embedding_size.to_string()),
            ("lstm_hidden_dim", self.lstm_hidden_dim.to_string()),
            ("lstm_layers", self.lstm_layers.to_string()),
            ("n_resblocks", self.n_resblocks.to_string()),
            ("original_1024", self.original_1024.to_string()),
            ("original_512", self.original_512.to_string()),
            ("original_256", self.original_256.to_string()),
            ("original_128", self.original_128.to_string()),
            ("original_64", self.original_64.to_string()),
            ("original_32", self.original_32.to_string()),
            ("context_size", self.context_size.to_string()),
            ("location_head_max_map_channels", self.location_head_max_map_channels.to_string()),
            ("autoregressive_embedding_size", self.autoregressive_embedding_size.to_string()),
            ("baseline_input_size", self.baseline_input_size.to_string()),
            ("league_learner_num", self.league_learner_num.to_string()),
            ("actorloop_num", self.actorloop_num.to_string()),
            ("max_delay", self.max_delay.to_string()),
            ("board_size", self.board_size.to_string()),
            ("transformer_layers", self.transformer_layers.to_string()),
            ("transformer_heads", self.transformer_heads.to_string()),
            ("transformer_dropout", self.transformer_dropout.to_string()),
            ("temperature", temps.join(",")),
        ]
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CoreError> {
        let bad = || CoreError::Config(format!("invalid value `{value}` for net.{key}"));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        match key {
            "race" => self.race = value.to_string(),
            "scalar_encoder_fc_input" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(bad());
                }
                self.scalar_encoder_fc_input = [int(parts[0])?, int(parts[1])?];
            }
            "transformer_dropout" => self.transformer_dropout = value.trim().parse().map_err(|_| bad())?,
            "temperature" => {
                let temps: Vec<f64> =
                    value.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                self.temperature = match temps.len() {
                    1 => [temps[0]; NUM_HEADS],
                    NUM_HEADS => temps.try_into().expect("length checked"),
                    _ => return Err(bad()),
                };
            }
            _ => {
                let v = int(value)?;
                let slot = match key {
                    "batch_size" => &mut self.batch_size,
                    "sequence_length" => &mut self.sequence_length,
                    "max_entities" => &mut self.max_entities,
                    "max_selected" => &mut self.max_selected,
                    "minimap_size" => &mut self.minimap_size,
                    "embedding_size" => &mut self.embedding_size,
                    "map_channels" => &mut self.map_channels,
                    "scalar_feature_size" => &mut self.scalar_feature_size,
                    "entity_embedding_size" => &mut self.entity_embedding_size,
                    "lstm_hidden_dim" => &mut self.lstm_hidden_dim,
                    "lstm_layers" => &mut self.lstm_layers,
                    "n_resblocks" => &mut self.n_resblocks,
                    "original_1024" => &mut self.original_1024,
                    "original_512" => &mut self.original_512,
                    "original_256" => &mut self.original_256,
                    "original_128" => &mut self.original_128,
                    "original_64" => &mut self.original_64,
                    "original_32" => &mut self.original_32,
                    "context_size" => &mut self.context_size,
                    "location_head_max_map_channels" => &mut self.location_head_max_map_channels,
                    "autoregressive_embedding_size" => &mut self.autoregressive_embedding_size,
                    "baseline_input_size" => &mut self.baseline_input_size,
                    "league_learner_num" => &mut self.league_learner_num,
                    "actorloop_num" => &mut self.actorloop_num,
                    "max_delay" => &mut self.max_delay,
                    "board_size" => &mut self.board_size,
                    "transformer_layers" => &mut self.transformer_layers,
                    "transformer_heads" => &mut self.transformer_heads,
                    _ => return Err(CoreError::Config(format!("unknown config key net.{key}"))),
                };
                *slot = v;
            }
        }
        Ok(())
    }
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        NetConfig::tiny().validate().unwrap();
        NetConfig::mini().validate().unwrap();
    }

    #[test]
    fn scalar_widths_sum_to_fc_inputs() {
        for cfg in [NetConfig::tiny(), NetConfig::mini()] {
            let w = cfg.scalar_element_widths();
            assert_eq!(w.iter().map(|(x, _)| x).sum::<usize>(), cfg.scalar_encoder_fc_input[0]);
            assert_eq!(w.iter().filter(|(_, c)| *c).map(|(x, _)| x).sum::<usize>(), cfg.scalar_encoder_fc_input[1]);
        }
    }

    #[test]
    fn set_roundtrips_fields() {
        let mini = NetConfig::mini();
        let mut cfg = NetConfig::tiny();
        for (k, v) in mini.fields() {
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, mini);
        assert!(cfg.set("bogus", "1").is_err());
    }
}
