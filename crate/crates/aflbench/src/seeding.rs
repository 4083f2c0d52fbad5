//! Seed derivation.
//!
//! All randomness in a run flows from a single master seed. Independent
//! streams (data generation, partitioning, per-client delays, per-client
//! training batches) are derived by mixing stream and index tags into the
//! master seed with splitmix64, so adding a stream never perturbs the
//! others.

/// Named rng streams hanging off the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    DataGen,
    Partition,
    ClientDelay(u64),
    ClientTrain(u64),
}

impl Stream {
    fn tag(self) -> (u64, u64) {
        match self {
            Stream::DataGen => (1, 0),
            Stream::Partition => (2, 0),
            Stream::ClientDelay(id) => (3, id),
            Stream::ClientTrain(id) => (4, id),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one of the named streams of `master`.
pub fn derive_stream(master: u64, stream: Stream) -> u64 {
    let (kind, id) = stream.tag();
    splitmix64(splitmix64(master ^ kind.wrapping_mul(0xa076_1d64_78bd_642f)) ^ id)
}

/// Per-round seed within a stream (e.g. one client training round).
pub fn derive_round(stream_seed: u64, round: u64) -> u64 {
    splitmix64(stream_seed ^ round.wrapping_mul(0xe703_7ed1_a0b4_28db))
}
