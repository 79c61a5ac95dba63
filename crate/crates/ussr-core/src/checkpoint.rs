//! Bit-exact model state container. A custom little-endian layout instead
//! of a generic serializer: freeze checks in the expansion module compare
//! parameter bytes directly, so the file must preserve every f64 bit and
//! reject anything it does not fully understand.

use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bipartite::SegmentRegistry;
use crate::bytes::{ByteReader, ByteWriter};
use crate::encoding::FeatureStats;
use crate::error::{CoreError, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"USSRCKPT";

/// Resumable generator position: key, stream id, and word offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self, w: &mut ByteWriter) {
        w.put_bytes(&self.seed);
        w.put_u64(self.stream);
        w.put_u64(self.word_pos as u64);
        w.put_u64((self.word_pos >> 64) as u64);
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<RngState> {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take_bytes(32)?);
        let stream = r.take_u64()?;
        let lo = r.take_u64()? as u128;
        let hi = r.take_u64()? as u128;
        Ok(RngState { seed, stream, word_pos: (hi << 64) | lo })
    }
}

/// Everything a run needs to continue or predict: preprocessing state, the
/// current cluster count, every parameter tensor, the segment registry with
/// its stored representations, and the training noise position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stats: FeatureStats,
    pub k: usize,
    pub params: ParamSet,
    pub registry: SegmentRegistry,
    pub rng: RngState,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_bytes(MAGIC);
        w.put_u32(Self::VERSION);
        self.stats.encode(&mut w);
        w.put_u64(self.k as u64);
        let names: Vec<&str> = self.params.names().collect();
        w.put_u32(names.len() as u32);
        for name in names {
            let t = self.params.get(name).expect("iterated name");
            w.put_str(name);
            w.put_u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.put_u64(d as u64);
            }
            for &v in t.data() {
                w.put_f64(v);
            }
        }
        self.registry.encode(&mut w);
        self.rng.encode(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(MAGIC)?;
        let version = r.take_u32()?;
        if version != Self::VERSION {
            return Err(CoreError::decode(alloc::format!(
                "checkpoint version {version}, expected {}",
                Self::VERSION
            )));
        }
        let stats = FeatureStats::decode(&mut r)?;
        let k = r.take_u64()? as usize;
        let n_params = r.take_u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let name = r.take_str()?;
            let rank = r.take_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = r.take_u64()? as usize;
                len = len
                    .checked_mul(d)
                    .ok_or(CoreError::decode("tensor shape overflows"))?;
                shape.push(d);
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.take_f64()?);
            }
            if params.get(&name).is_some() {
                return Err(CoreError::decode(alloc::format!("duplicate tensor {name}")));
            }
            params.insert(&name, Tensor::new(shape, data)?);
        }
        let registry = SegmentRegistry::decode(&mut r)?;
        let rng = RngState::decode(&mut r)?;
        r.finish()?;
        Ok(Checkpoint { stats, k, params, registry, rng })
    }
}
