//! Binary checkpoint format.
//!
//! Layout: magic, version, config as JSON, schema, actor (online, target,
//! Adam), capture pair, optional obstacle pair, counters, then a SHA-256 of
//! everything before it. Replay buffers are not stored.

use super::{AgentError, AgentSchema, CriticPair, Td3Agent, Td3Config};
use crate::nn::codec::{self, Reader};
use crate::nn::{Mlp, NnError};
use sha2::{Digest, Sha256};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FFSMTD3\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Agent plus the training counters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub agent: Td3Agent,
    pub episodes: u64,
    pub lambda: f64,
    pub psi: f64,
    pub shortfall: u64,
}

fn corrupt(e: NnError) -> AgentError {
    match e {
        NnError::Corrupt(m) => AgentError::CheckpointCorrupt(m),
        other => AgentError::CheckpointCorrupt(other.to_string()),
    }
}

fn put_pair(out: &mut Vec<u8>, pair: &CriticPair) {
    codec::put_u32(out, pair.frozen as u32);
    for k in 0..2 {
        codec::put_mlp(out, &pair.online[k]);
        codec::put_mlp(out, &pair.target[k]);
        codec::put_adam(out, &pair.optim[k]);
    }
}

fn read_flag(r: &mut Reader) -> Result<bool, AgentError> {
    match r.u32().map_err(corrupt)? {
        0 => Ok(false),
        1 => Ok(true),
        t => Err(AgentError::CheckpointCorrupt(format!("invalid flag {t}"))),
    }
}

fn same_shape(a: &Mlp, b: &Mlp) -> bool {
    a.sizes() == b.sizes() && a.output_activation() == b.output_activation()
}

fn read_pair(r: &mut Reader, input: usize) -> Result<CriticPair, AgentError> {
    let frozen = read_flag(r)?;
    let mut nets = Vec::with_capacity(6);
    for _ in 0..2 {
        let online = codec::read_mlp(r).map_err(corrupt)?;
        let target = codec::read_mlp(r).map_err(corrupt)?;
        let optim = codec::read_adam(r, &online).map_err(corrupt)?;
        if online.input_dim() != input || online.output_dim() != 1 || !same_shape(&online, &target) {
            return Err(AgentError::CheckpointCorrupt("critic shape does not match schema".into()));
        }
        nets.push((online, target, optim));
    }
    let (o2, t2, a2) = nets.pop().expect("two critics");
    let (o1, t1, a1) = nets.pop().expect("two critics");
    Ok(CriticPair {
        online: [o1, o2],
        target: [t1, t2],
        optim: [a1, a2],
        frozen,
    })
}

/// SHA-256 (hex) of the encoded capture pair; identifies the critics a
/// second-task run was started from.
pub fn critic_pair_hash(pair: &CriticPair) -> String {
    let mut out = Vec::new();
    put_pair(&mut out, pair);
    hex::encode(Sha256::digest(&out))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let a = &self.agent;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        codec::put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&a.config).expect("config serializes");
        codec::put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        codec::put_u64(&mut out, a.schema.capture_dim as u64);
        codec::put_u64(&mut out, a.schema.obstacle_dim as u64);
        codec::put_u32(&mut out, a.schema.actor_sees_obstacle as u32);
        codec::put_mlp(&mut out, &a.actor);
        codec::put_mlp(&mut out, &a.actor_target);
        codec::put_adam(&mut out, &a.actor_optim);
        put_pair(&mut out, &a.capture);
        match &a.obstacle {
            None => codec::put_u32(&mut out, 0),
            Some(p) => {
                codec::put_u32(&mut out, 1);
                put_pair(&mut out, p);
            }
        }
        codec::put_u64(&mut out, a.updates);
        codec::put_u64(&mut out, self.episodes);
        codec::put_f64(&mut out, self.lambda);
        codec::put_f64(&mut out, self.psi);
        codec::put_u64(&mut out, self.shortfall);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AgentError> {
        let bad = |m: &str| AgentError::CheckpointCorrupt(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if body[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader::new(&body[8..]);
        let version = r.u32().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(AgentError::CheckpointCorrupt(format!("unsupported version {version}")));
        }
        let json_len = r.len_prefix(1).map_err(corrupt)?;
        let config: Td3Config = serde_json::from_slice(r.take(json_len).map_err(corrupt)?)
            .map_err(|e| AgentError::CheckpointCorrupt(format!("config: {e}")))?;
        config.validate().map_err(|e| AgentError::CheckpointCorrupt(e.to_string()))?;
        let dim = |r: &mut Reader| -> Result<usize, AgentError> {
            let v = r.u64().map_err(corrupt)?;
            usize::try_from(v).ok().filter(|&d| d < 1 << 20).ok_or_else(|| bad("implausible dimension"))
        };
        let schema = AgentSchema {
            capture_dim: dim(&mut r)?,
            obstacle_dim: dim(&mut r)?,
            actor_sees_obstacle: read_flag(&mut r)?,
        };
        let actor = codec::read_mlp(&mut r).map_err(corrupt)?;
        let actor_target = codec::read_mlp(&mut r).map_err(corrupt)?;
        let actor_optim = codec::read_adam(&mut r, &actor).map_err(corrupt)?;
        if actor.input_dim() != schema.actor_input() || actor.output_dim() != 6 || !same_shape(&actor, &actor_target) {
            return Err(bad("actor shape does not match schema"));
        }
        let capture = read_pair(&mut r, schema.capture_dim + 6)?;
        let obstacle = if read_flag(&mut r)? {
            Some(read_pair(&mut r, schema.obstacle_dim + 6)?)
        } else {
            None
        };
        if schema.actor_sees_obstacle != obstacle.is_some() {
            return Err(bad("obstacle pair presence does not match schema"));
        }
        let updates = r.u64().map_err(corrupt)?;
        let episodes = r.u64().map_err(corrupt)?;
        let lambda = r.f64().map_err(corrupt)?;
        let psi = r.f64().map_err(corrupt)?;
        let shortfall = r.u64().map_err(corrupt)?;
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            agent: Td3Agent {
                config,
                schema,
                actor,
                actor_target,
                actor_optim,
                capture,
                obstacle,
                updates,
            },
            episodes,
            lambda,
            psi,
            shortfall,
        })
    }
}
