/// FNV-1a over bytes. Used to derive per-task RNG streams from a master seed;
/// must stay stable across runs and platforms, unlike `DefaultHasher`.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed for an episode-local RNG stream: master seed mixed with the task id.
pub fn episode_seed(master: u64, task_id: &str) -> u64 {
    let mut buf = master.to_le_bytes().to_vec();
    buf.extend_from_slice(task_id.as_bytes());
    stable_hash64(&buf)
}
