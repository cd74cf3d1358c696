//! Two-tier (host/device) block storage with a hard device-byte budget.
//!
//! The device tier is a map of resident blocks with byte accounting; the
//! host tier is an in-memory pool by default, or one little-endian file
//! per array tag in file-backed mode. Fetches of blocks already resident
//! return without a copy; everything else is counted as an H2D or D2H
//! transfer, optionally charged a synthetic per-byte wall-time cost so
//! queue-overlap effects are measurable without real devices.
//!
//! Eviction is explicit and caller-driven: the schedulers know block
//! lifetimes, so the store never picks victims on its own. Blocks held by
//! a lease cannot be evicted.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which logical array a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArrayTag {
    A,
    U,
    V,
    B,
    Scratch,
}

impl std::fmt::Display for ArrayTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArrayTag::A => "a",
            ArrayTag::U => "u",
            ArrayTag::V => "v",
            ArrayTag::B => "b",
            ArrayTag::Scratch => "scratch",
        };
        f.write_str(s)
    }
}

/// Identity of one logical block: array tag plus batch/tile indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub tag: ArrayTag,
    pub i: usize,
    pub j: usize,
}

impl BlockId {
    pub fn new(tag: ArrayTag, i: usize, j: usize) -> Self {
        Self { tag, i, j }
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{},{}]", self.tag, self.i, self.j)
    }
}

/// Counter snapshot. All counters are monotone; `device_used` and
/// `peak_device_used` never exceed `device_budget`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub device_budget: u64,
    pub device_used: u64,
    pub peak_device_used: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_count: u64,
    pub d2h_count: u64,
}

struct DeviceBlock {
    data: Arc<RwLock<Vec<f64>>>,
    bytes: u64,
    leases: usize,
}

enum HostTier {
    Memory(BTreeMap<BlockId, Vec<f64>>),
    File {
        dir: PathBuf,
        index: BTreeMap<BlockId, (u64, usize)>,
        ends: BTreeMap<ArrayTag, u64>,
    },
}

impl HostTier {
    fn contains(&self, id: &BlockId) -> bool {
        match self {
            HostTier::Memory(m) => m.contains_key(id),
            HostTier::File { index, .. } => index.contains_key(id),
        }
    }

    fn get(&self, id: &BlockId) -> Result<Option<Vec<f64>>> {
        match self {
            HostTier::Memory(m) => Ok(m.get(id).cloned()),
            HostTier::File { dir, index, .. } => {
                let Some(&(offset, len)) = index.get(id) else {
                    return Ok(None);
                };
                let mut f = OpenOptions::new().read(true).open(tag_path(dir, id.tag))?;
                f.seek(SeekFrom::Start(offset))?;
                let mut buf = vec![0u8; len * 8];
                f.read_exact(&mut buf)?;
                let mut out = Vec::with_capacity(len);
                for c in buf.chunks_exact(8) {
                    out.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
                Ok(Some(out))
            }
        }
    }

    fn put(&mut self, id: BlockId, data: &[f64]) -> Result<()> {
        match self {
            HostTier::Memory(m) => {
                m.insert(id, data.to_vec());
                Ok(())
            }
            HostTier::File { dir, index, ends } => {
                // Reuse the block's region when the length is unchanged;
                // otherwise append a fresh region and move the index entry.
                let offset = match index.get(&id) {
                    Some(&(off, len)) if len == data.len() => off,
                    _ => {
                        let end = ends.entry(id.tag).or_insert(0);
                        let off = *end;
                        *end += data.len() as u64 * 8;
                        index.insert(id, (off, data.len()));
                        off
                    }
                };
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .read(true)
                    .open(tag_path(dir, id.tag))?;
                f.seek(SeekFrom::Start(offset))?;
                let mut buf = Vec::with_capacity(data.len() * 8);
                for x in data {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                f.write_all(&buf)?;
                Ok(())
            }
        }
    }

    fn remove(&mut self, id: &BlockId) {
        match self {
            HostTier::Memory(m) => {
                m.remove(id);
            }
            HostTier::File { index, .. } => {
                index.remove(id);
            }
        }
    }
}

fn tag_path(dir: &std::path::Path, tag: ArrayTag) -> PathBuf {
    dir.join(format!("host_{tag}.blk"))
}

struct StoreState {
    device_used: u64,
    peak_device_used: u64,
    h2d_bytes: u64,
    d2h_bytes: u64,
    h2d_count: u64,
    d2h_count: u64,
    resident: BTreeMap<BlockId, DeviceBlock>,
    host: HostTier,
}

struct StoreInner {
    device_budget: u64,
    transfer_cost_ns_per_byte: u64,
    state: Mutex<StoreState>,
}

/// Shared handle to one rank's tiered store. Cloning is cheap; all
/// mutating operations are atomic with respect to each other.
#[derive(Clone)]
pub struct TieredStore {
    inner: Arc<StoreInner>,
}

impl TieredStore {
    pub fn new(device_budget: u64) -> Self {
        Self::build(device_budget, 0, HostTier::Memory(BTreeMap::new()))
    }

    pub fn with_transfer_cost(device_budget: u64, ns_per_byte: u64) -> Self {
        Self::build(device_budget, ns_per_byte, HostTier::Memory(BTreeMap::new()))
    }

    /// Host tier backed by one raw little-endian file per array tag under
    /// `dir`, for desk tests that want true out-of-core staging.
    pub fn with_file_backed_host(
        device_budget: u64,
        ns_per_byte: u64,
        dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self::build(
            device_budget,
            ns_per_byte,
            HostTier::File {
                dir,
                index: BTreeMap::new(),
                ends: BTreeMap::new(),
            },
        ))
    }

    fn build(device_budget: u64, ns_per_byte: u64, host: HostTier) -> Self {
        Self {
            inner: Arc::new(StoreInner {
                device_budget,
                transfer_cost_ns_per_byte: ns_per_byte,
                state: Mutex::new(StoreState {
                    device_used: 0,
                    peak_device_used: 0,
                    h2d_bytes: 0,
                    d2h_bytes: 0,
                    h2d_count: 0,
                    d2h_count: 0,
                    resident: BTreeMap::new(),
                    host: HostTier::Memory(BTreeMap::new()),
                }),
            }),
        }
        .replace_host(host)
    }

    fn replace_host(self, host: HostTier) -> Self {
        self.inner.state.lock().unwrap().host = host;
        self
    }

    pub fn device_budget(&self) -> u64 {
        self.inner.device_budget
    }

    /// Brings a block onto the device tier, preferring (in order) an
    /// already-resident copy, the host-tier copy, then `provider`.
    pub fn fetch_with(
        &self,
        id: BlockId,
        provider: impl FnOnce() -> Vec<f64>,
    ) -> Result<BlockLease> {
        // Fast path: already resident, no copy.
        {
            let mut st = self.inner.state.lock().unwrap();
            if let Some(lease) = self.lease_resident(&mut st, id) {
                return Ok(lease);
            }
            if let Some(data) = st.host.get(&id)? {
                return self.admit(st, id, data);
            }
        }
        // Materialize outside the lock; another task may win the race.
        let data = provider();
        let mut st = self.inner.state.lock().unwrap();
        if let Some(lease) = self.lease_resident(&mut st, id) {
            return Ok(lease);
        }
        if let Some(pooled) = st.host.get(&id)? {
            return self.admit(st, id, pooled);
        }
        self.admit(st, id, data)
    }

    /// Fetch that requires the block to exist on one of the tiers already.
    pub fn fetch_pooled(&self, id: BlockId) -> Result<BlockLease> {
        let mut st = self.inner.state.lock().unwrap();
        if let Some(lease) = self.lease_resident(&mut st, id) {
            return Ok(lease);
        }
        match st.host.get(&id)? {
            Some(data) => self.admit(st, id, data),
            None => Err(Error::Store(format!("block {id} is on neither tier"))),
        }
    }

    /// Creates a device-born block (no H2D transfer), e.g. a Gram tile
    /// about to be computed on device.
    pub fn alloc(&self, id: BlockId, len: usize) -> Result<BlockLease> {
        let bytes = len as u64 * 8;
        let mut st = self.inner.state.lock().unwrap();
        if st.resident.contains_key(&id) {
            return Err(Error::Store(format!("alloc of already-resident block {id}")));
        }
        self.check_budget(&st, id, bytes)?;
        let data = Arc::new(RwLock::new(vec![0.0; len]));
        st.resident.insert(
            id,
            DeviceBlock {
                data: Arc::clone(&data),
                bytes,
                leases: 1,
            },
        );
        st.device_used += bytes;
        st.peak_device_used = st.peak_device_used.max(st.device_used);
        drop(st);
        Ok(BlockLease {
            id,
            data,
            store: self.clone(),
        })
    }

    /// Copies a resident block back to the host tier (D2H).
    pub fn writeback(&self, id: BlockId) -> Result<()> {
        let (data, bytes) = {
            let st = self.inner.state.lock().unwrap();
            let block = st
                .resident
                .get(&id)
                .ok_or_else(|| Error::Store(format!("writeback of non-resident block {id}")))?;
            (Arc::clone(&block.data), block.bytes)
        };
        let snapshot = data.read().unwrap().clone();
        {
            let mut st = self.inner.state.lock().unwrap();
            st.host.put(id, &snapshot)?;
            st.d2h_bytes += bytes;
            st.d2h_count += 1;
        }
        self.charge_transfer(bytes);
        Ok(())
    }

    /// Frees a resident, unleased block from the device tier.
    pub fn evict(&self, id: BlockId) -> Result<()> {
        let mut st = self.inner.state.lock().unwrap();
        let block = st
            .resident
            .get(&id)
            .ok_or_else(|| Error::Store(format!("evict of non-resident block {id}")))?;
        if block.leases > 0 {
            return Err(Error::Store(format!(
                "evict of block {id} with {} active lease(s)",
                block.leases
            )));
        }
        let bytes = block.bytes;
        st.resident.remove(&id);
        st.device_used -= bytes;
        Ok(())
    }

    /// Evicts when resident and idle; reports whether anything was freed.
    pub fn evict_if_idle(&self, id: BlockId) -> bool {
        let mut st = self.inner.state.lock().unwrap();
        match st.resident.get(&id) {
            Some(b) if b.leases == 0 => {
                let bytes = b.bytes;
                st.resident.remove(&id);
                st.device_used -= bytes;
                true
            }
            _ => false,
        }
    }

    /// Writes a block straight into the host tier, bypassing the device.
    pub fn host_put(&self, id: BlockId, data: &[f64]) -> Result<()> {
        self.inner.state.lock().unwrap().host.put(id, data)
    }

    pub fn host_contains(&self, id: BlockId) -> bool {
        self.inner.state.lock().unwrap().host.contains(&id)
    }

    pub fn host_remove(&self, id: BlockId) {
        self.inner.state.lock().unwrap().host.remove(&id);
    }

    /// Pins `bytes` of device memory for the lifetime of the returned
    /// reservation, modeling arrays cached on device for the whole run.
    pub fn reserve(&self, label: &str, bytes: u64) -> Result<Reservation> {
        let mut st = self.inner.state.lock().unwrap();
        if bytes > self.inner.device_budget {
            return Err(Error::Degree2(format!(
                "cached array `{label}` of {bytes} B exceeds the device budget {} B",
                self.inner.device_budget
            )));
        }
        if st.device_used + bytes > self.inner.device_budget {
            return Err(Error::Capacity(format!(
                "cached array `{label}` of {bytes} B does not fit beside {} B in use \
                 (budget {} B)",
                st.device_used, self.inner.device_budget
            )));
        }
        st.device_used += bytes;
        st.peak_device_used = st.peak_device_used.max(st.device_used);
        Ok(Reservation {
            store: self.clone(),
            bytes,
        })
    }

    pub fn stats(&self) -> StoreStats {
        let st = self.inner.state.lock().unwrap();
        StoreStats {
            device_budget: self.inner.device_budget,
            device_used: st.device_used,
            peak_device_used: st.peak_device_used,
            h2d_bytes: st.h2d_bytes,
            d2h_bytes: st.d2h_bytes,
            h2d_count: st.h2d_count,
            d2h_count: st.d2h_count,
        }
    }

    fn lease_resident(&self, st: &mut StoreState, id: BlockId) -> Option<BlockLease> {
        st.resident.get_mut(&id).map(|block| {
            block.leases += 1;
            BlockLease {
                id,
                data: Arc::clone(&block.data),
                store: self.clone(),
            }
        })
    }

    fn check_budget(&self, st: &StoreState, id: BlockId, bytes: u64) -> Result<()> {
        if bytes > self.inner.device_budget {
            return Err(Error::Degree2(format!(
                "block {id} of {bytes} B exceeds the device budget {} B on its own",
                self.inner.device_budget
            )));
        }
        if st.device_used + bytes > self.inner.device_budget {
            return Err(Error::Capacity(format!(
                "block {id} of {bytes} B does not fit beside {} B in use (budget {} B)",
                st.device_used, self.inner.device_budget
            )));
        }
        Ok(())
    }

    fn admit(
        &self,
        mut st: std::sync::MutexGuard<'_, StoreState>,
        id: BlockId,
        data: Vec<f64>,
    ) -> Result<BlockLease> {
        let bytes = data.len() as u64 * 8;
        self.check_budget(&st, id, bytes)?;
        let data = Arc::new(RwLock::new(data));
        st.resident.insert(
            id,
            DeviceBlock {
                data: Arc::clone(&data),
                bytes,
                leases: 1,
            },
        );
        st.device_used += bytes;
        st.peak_device_used = st.peak_device_used.max(st.device_used);
        st.h2d_bytes += bytes;
        st.h2d_count += 1;
        drop(st);
        self.charge_transfer(bytes);
        Ok(BlockLease {
            id,
            data,
            store: self.clone(),
        })
    }

    /// Synthetic wall-time charge for a transfer, taken outside the store
    /// lock so concurrent tasks overlap their charges.
    fn charge_transfer(&self, bytes: u64) {
        let ns = self.inner.transfer_cost_ns_per_byte;
        if ns > 0 {
            std::thread::sleep(Duration::from_nanos(ns * bytes));
        }
    }

    fn release(&self, id: BlockId) {
        let mut st = self.inner.state.lock().unwrap();
        if let Some(block) = st.resident.get_mut(&id) {
            block.leases = block.leases.saturating_sub(1);
        }
    }
}

/// Pin on a resident block. The block cannot be evicted while any lease
/// is alive; dropping the lease releases the pin.
pub struct BlockLease {
    id: BlockId,
    data: Arc<RwLock<Vec<f64>>>,
    store: TieredStore,
}

impl std::fmt::Debug for BlockLease {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BlockLease({})", self.id)
    }
}

impl BlockLease {
    pub fn id(&self) -> BlockId {
        self.id
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.data.read().unwrap()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.data.write().unwrap()
    }
}

impl Drop for BlockLease {
    fn drop(&mut self) {
        self.store.release(self.id);
    }
}

/// Device bytes pinned for a run; released on drop.
pub struct Reservation {
    store: TieredStore,
    bytes: u64,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        let mut st = self.store.inner.state.lock().unwrap();
        st.device_used = st.device_used.saturating_sub(self.bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIB: usize = 128; // 128 f64 = 1 KiB

    fn id(tag: ArrayTag, i: usize, j: usize) -> BlockId {
        BlockId::new(tag, i, j)
    }

    #[test]
    fn fetch_counts_bytes_once() {
        let store = TieredStore::new(1 << 20);
        let b = id(ArrayTag::A, 0, 0);
        let lease = store.fetch_with(b, || vec![1.0; KIB]).unwrap();
        let s = store.stats();
        assert_eq!(s.h2d_bytes, 1024);
        assert_eq!(s.h2d_count, 1);
        assert_eq!(s.device_used, 1024);
        drop(lease);

        // Second fetch of a resident block adds nothing.
        let lease = store.fetch_with(b, || panic!("must not re-materialize")).unwrap();
        let s = store.stats();
        assert_eq!(s.h2d_bytes, 1024);
        assert_eq!(s.h2d_count, 1);
        drop(lease);
    }

    #[test]
    fn oversized_block_is_degree_two() {
        let store = TieredStore::new(1 << 20);
        let r = store.fetch_with(id(ArrayTag::A, 0, 0), || vec![0.0; 2 << 17]); // 2 MiB
        assert!(matches!(r, Err(Error::Degree2(_))), "{r:?}");
    }

    #[test]
    fn exhausted_budget_is_capacity_error() {
        let store = TieredStore::new(2048);
        let _a = store.fetch_with(id(ArrayTag::A, 0, 0), || vec![0.0; KIB]).unwrap();
        let _b = store.fetch_with(id(ArrayTag::A, 0, 1), || vec![0.0; KIB]).unwrap();
        let r = store.fetch_with(id(ArrayTag::A, 0, 2), || vec![0.0; 1]);
        assert!(matches!(r, Err(Error::Capacity(_))), "{r:?}");
    }

    #[test]
    fn writeback_counts_and_requires_residency() {
        let store = TieredStore::new(1 << 20);
        let b = id(ArrayTag::B, 1, 2);
        let lease = store.fetch_with(b, || vec![2.0; KIB]).unwrap();
        store.writeback(b).unwrap();
        let s = store.stats();
        assert_eq!(s.d2h_bytes, 1024);
        assert_eq!(s.d2h_count, 1);
        drop(lease);

        assert!(matches!(
            store.writeback(id(ArrayTag::B, 9, 9)),
            Err(Error::Store(_))
        ));
    }

    #[test]
    fn mutate_writeback_evict_fetch_round_trips() {
        let store = TieredStore::new(1 << 20);
        let b = id(ArrayTag::V, 0, 3);
        let lease = store.fetch_with(b, || vec![1.0, 2.0, 3.0]).unwrap();
        lease.write()[1] = 42.0;
        store.writeback(b).unwrap();
        drop(lease);
        store.evict(b).unwrap();

        let lease = store.fetch_with(b, || panic!("host tier must win")).unwrap();
        assert_eq!(&*lease.read(), &[1.0, 42.0, 3.0]);
    }

    #[test]
    fn evict_frees_exactly_the_block_size() {
        let store = TieredStore::new(1 << 20);
        let b = id(ArrayTag::A, 0, 0);
        let lease = store.fetch_with(b, || vec![0.0; 100]).unwrap();
        drop(lease);
        assert_eq!(store.stats().device_used, 800);
        store.evict(b).unwrap();
        assert_eq!(store.stats().device_used, 0);
        assert_eq!(store.stats().peak_device_used, 800);
    }

    #[test]
    fn fresh_store_stats_are_zero() {
        let s = TieredStore::new(4096).stats();
        assert_eq!(s.device_used, 0);
        assert_eq!(s.peak_device_used, 0);
        assert_eq!(s.h2d_bytes + s.d2h_bytes + s.h2d_count + s.d2h_count, 0);
    }

    #[test]
    fn leased_block_cannot_be_evicted() {
        let store = TieredStore::new(1 << 20);
        let b = id(ArrayTag::A, 0, 0);
        let lease = store.fetch_with(b, || vec![0.0; 8]).unwrap();
        assert!(matches!(store.evict(b), Err(Error::Store(_))));
        assert!(!store.evict_if_idle(b));
        drop(lease);
        assert!(store.evict_if_idle(b));
    }

    #[test]
    fn reservation_pins_bytes_until_drop() {
        let store = TieredStore::new(4096);
        let r = store.reserve("cached", 4000).unwrap();
        assert!(matches!(
            store.fetch_with(id(ArrayTag::A, 0, 0), || vec![0.0; 64]),
            Err(Error::Capacity(_))
        ));
        drop(r);
        assert!(store.fetch_with(id(ArrayTag::A, 0, 0), || vec![0.0; 64]).is_ok());
        assert_eq!(store.stats().peak_device_used, 4000);
    }

    #[test]
    fn file_backed_host_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = TieredStore::with_file_backed_host(1 << 20, 0, dir.path()).unwrap();
        let b = id(ArrayTag::V, 2, 0);
        let lease = store.fetch_with(b, || vec![0.5, -1.5, 2.25]).unwrap();
        lease.write()[0] = 9.75;
        store.writeback(b).unwrap();
        drop(lease);
        store.evict(b).unwrap();

        let lease = store.fetch_pooled(b).unwrap();
        assert_eq!(&*lease.read(), &[9.75, -1.5, 2.25]);
        drop(lease);

        // Re-registering the block with a new length appends a region.
        store.evict(b).unwrap();
        store.host_put(b, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let lease = store.fetch_pooled(b).unwrap();
        assert_eq!(&*lease.read(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn randomized_ops_never_exceed_budget() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let budget = 64 * 1024;
        let store = TieredStore::new(budget);
        let mut live: Vec<BlockLease> = Vec::new();
        for step in 0..2000 {
            let action: u8 = rng.random_range(0..3);
            match action {
                0 => {
                    let blk = id(ArrayTag::Scratch, step % 17, step % 5);
                    let len = rng.random_range(1..2048);
                    match store.fetch_with(blk, || vec![0.0; len]) {
                        Ok(lease) => live.push(lease),
                        Err(Error::Capacity(_)) | Err(Error::Store(_)) => {}
                        Err(e) => panic!("unexpected error {e:?}"),
                    }
                }
                1 => {
                    if !live.is_empty() {
                        let idx = rng.random_range(0..live.len());
                        let lease = live.swap_remove(idx);
                        let blk = lease.id();
                        drop(lease);
                        store.evict_if_idle(blk);
                    }
                }
                _ => {
                    if let Some(lease) = live.last() {
                        let _ = store.writeback(lease.id());
                    }
                }
            }
            let s = store.stats();
            assert!(
                s.device_used <= s.device_budget,
                "budget exceeded at step {step}: {} > {}",
                s.device_used,
                s.device_budget
            );
            assert!(s.peak_device_used <= s.device_budget);
        }
    }
}
