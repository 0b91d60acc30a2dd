use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("player {player}: action rejected by {mask}: {detail}")]
    Rejected { player: usize, mask: &'static str, detail: String },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("game already finished")]
    Finished,
    #[error("no valid action for player {0}")]
    NoValidAction(usize),
    #[error("replay: {0}")]
    Replay(String),
    #[error("cannot parse action `{0}`")]
    Parse(String),
}
