use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use microrts::Observation;

use crate::error::CoreError;
use crate::net::{HeadLogitsData, HiddenState, NetAction};

/// One acting step as seen by the behaviour policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    /// The opponent's view at the same frame, used by the baseline.
    pub opp_obs: Observation,
    pub action: NetAction,
    /// Logits of the snapshot that acted, recorded when acting.
    pub behavior: HeadLogitsData,
    pub reward: f32,
    pub is_final: bool,
}

/// The step after a cut trajectory; only its value estimate is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub obs: Observation,
    pub opp_obs: Observation,
    pub action: NetAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub player: usize,
    /// Parameter version of the acting snapshot.
    pub version: u64,
    pub initial_hidden: HiddenState,
    pub steps: Vec<Step>,
    /// `None` when the last step ended the game.
    pub bootstrap: Option<Bootstrap>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn ends_game(&self) -> bool {
        self.steps.last().map_or(false, |s| s.is_final)
    }
}

const MAGIC: &[u8; 8] = b"MASTRAJ\0";
const WIRE_VERSION: u16 = 1;

/// Writes one framed record: magic, format version, payload length, payload.
pub fn write_trajectory(t: &Trajectory, w: &mut impl Write) -> Result<(), CoreError> {
    let payload = bincode::serialize(t).map_err(|e| CoreError::Wire(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&WIRE_VERSION.to_le_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    Ok(())
}

/// Reads one record. Returns `Ok(None)` at a clean end of stream.
pub fn read_trajectory(r: &mut impl Read) -> Result<Option<Trajectory>, CoreError> {
    let mut magic = [0u8; 8];
    let mut got = 0;
    while got < magic.len() {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < magic.len() || &magic != MAGIC {
        return Err(CoreError::Wire("bad record header".into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != WIRE_VERSION {
        return Err(CoreError::Wire(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|_| CoreError::Wire("truncated record".into()))?;
    bincode::deserialize(&payload).map(Some).map_err(|e| CoreError::Wire(e.to_string()))
}
