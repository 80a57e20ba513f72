//! First-fit guest heap over `[start, end)` of a region.
//!
//! Metadata lives outside guest memory, so a guest cannot corrupt it.

use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone)]
pub struct HeapAllocator {
    start: u64,
    end: u64,
    bump: u64,
    free: BTreeMap<u64, u64>,
    live: HashMap<u64, u64>,
}

const MIN_ALIGN: u64 = 8;

fn align_up(v: u64, align: u64) -> u64 {
    (v + align - 1) & !(align - 1)
}

impl HeapAllocator {
    pub fn new(start: u64, end: u64) -> Self {
        HeapAllocator {
            start,
            end,
            bump: start,
            free: BTreeMap::new(),
            live: HashMap::new(),
        }
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    /// Highest offset ever handed out (exclusive).
    pub fn high_water(&self) -> u64 {
        self.bump
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.live.values().sum()
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.live.iter().map(|(&o, &s)| (o, s))
    }

    pub fn alloc(&mut self, size: u64, align: u64) -> Option<u64> {
        let align = align.max(MIN_ALIGN);
        if !align.is_power_of_two() || size > self.end - self.start {
            return None;
        }
        let size = align_up(size.max(1), MIN_ALIGN);

        let fit = self.free.iter().find_map(|(&off, &len)| {
            let at = align_up(off, align);
            (at + size <= off + len).then_some((off, len, at))
        });
        let at = if let Some((off, len, at)) = fit {
            self.free.remove(&off);
            if at > off {
                self.free.insert(off, at - off);
            }
            if off + len > at + size {
                self.free.insert(at + size, off + len - at - size);
            }
            at
        } else {
            let at = align_up(self.bump, align);
            if at.checked_add(size)? > self.end {
                return None;
            }
            if at > self.bump {
                self.release(self.bump, at - self.bump);
            }
            self.bump = at + size;
            at
        };
        self.live.insert(at, size);
        Some(at)
    }

    /// Returns false for double frees and offsets never handed out.
    pub fn free(&mut self, offset: u64) -> bool {
        match self.live.remove(&offset) {
            Some(size) => {
                self.release(offset, size);
                true
            }
            None => false,
        }
    }

    fn release(&mut self, mut off: u64, mut len: u64) {
        if let Some((&p, &plen)) = self.free.range(..off).next_back() {
            if p + plen == off {
                self.free.remove(&p);
                off = p;
                len += plen;
            }
        }
        if let Some(nlen) = self.free.remove(&(off + len)) {
            len += nlen;
        }
        if off + len == self.bump {
            self.bump = off;
        } else {
            self.free.insert(off, len);
        }
    }
}
