//! Size-aligned memory regions that hold all guest-reachable data.
//!
//! A region of `size` bytes (a power of two) is always mapped at a base
//! address that is a multiple of `size`, with an inaccessible guard page on
//! each side. Host code reaches it through bounds-checked accessors; emulated
//! guest code reaches it through masking accessors that can never leave it.

use std::io;
use std::os::fd::RawFd;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crate::error::TaintError;
use crate::taint::{GuestScalar, SandboxId};

pub const MIN_REGION_SIZE: usize = 1 << 20;
pub const DEFAULT_REGION_SIZE: usize = 1 << 26;

/// Bytes at the start of every region that never belong to the guest heap.
/// Offset 0 stays the null pointer; the process backend keeps its message
/// channel here.
pub const RESERVED_PREFIX: u32 = 64 * 1024;

pub fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p <= 0 {
        4096
    } else {
        p as usize
    }
}

pub fn validate_region_size(size: usize) -> Result<(), String> {
    if !size.is_power_of_two() {
        return Err(format!("region size {size} is not a power of two"));
    }
    if size < MIN_REGION_SIZE {
        return Err(format!("region size {size} is below the minimum {MIN_REGION_SIZE}"));
    }
    if size > 1usize << 32 {
        return Err(format!("region size {size} exceeds 32-bit guest addressing"));
    }
    Ok(())
}

/// An mmap'd, size-aligned range with guard pages on both sides.
pub struct Mapping {
    base: usize,
    size: usize,
    guard: usize,
}

// SAFETY: the mapping is a plain address range; all access goes through raw
// pointer operations that tolerate concurrent mutation.
unsafe impl Send for Mapping {}
unsafe impl Sync for Mapping {}

impl Mapping {
    /// Private zero-filled region.
    pub fn anonymous(size: usize) -> io::Result<Mapping> {
        let m = Self::reserve(size)?;
        // SAFETY: [base, base+size) lies inside our PROT_NONE reservation.
        let rc = unsafe {
            libc::mprotect(
                m.base as *mut libc::c_void,
                size,
                libc::PROT_READ | libc::PROT_WRITE,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(m)
    }

    /// Maps `size` bytes of a shared-memory object over an aligned base.
    pub fn shared(fd: RawFd, size: usize) -> io::Result<Mapping> {
        let m = Self::reserve(size)?;
        // SAFETY: MAP_FIXED replaces part of our own reservation only.
        let p = unsafe {
            libc::mmap(
                m.base as *mut libc::c_void,
                size,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED | libc::MAP_FIXED,
                fd,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        Ok(m)
    }

    fn reserve(size: usize) -> io::Result<Mapping> {
        validate_region_size(size).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let guard = page_size();
        let len = size
            .checked_mul(2)
            .and_then(|l| l.checked_add(2 * guard))
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "region too large"))?;
        // SAFETY: fresh anonymous reservation, no fixed address.
        let start = unsafe {
            libc::mmap(
                ptr::null_mut(),
                len,
                libc::PROT_NONE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if start == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        let start = start as usize;
        let base = (start + guard + size - 1) & !(size - 1);
        let keep_lo = base - guard;
        let keep_hi = base + size + guard;
        // SAFETY: trimming the excess of our own reservation.
        unsafe {
            if keep_lo > start {
                libc::munmap(start as *mut libc::c_void, keep_lo - start);
            }
            if start + len > keep_hi {
                libc::munmap(keep_hi as *mut libc::c_void, start + len - keep_hi);
            }
        }
        Ok(Mapping { base, size, guard })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: unmaps exactly the range kept by `reserve`.
        unsafe {
            libc::munmap(
                (self.base - self.guard) as *mut libc::c_void,
                self.size + 2 * self.guard,
            );
        }
    }
}

/// A sandbox region shared by the runtime and every reference into it.
///
/// References hold an `Arc<Region>`, so the memory stays mapped while any of
/// them exists; a destroyed sandbox only flips `alive`, which every access
/// checks.
pub struct Region {
    id: SandboxId,
    mapping: Mapping,
    alive: AtomicBool,
}

pub type RegionHandle = Arc<Region>;

impl Region {
    pub fn new(id: SandboxId, mapping: Mapping) -> RegionHandle {
        Arc::new(Region {
            id,
            mapping,
            alive: AtomicBool::new(true),
        })
    }

    pub fn anonymous(id: SandboxId, size: usize) -> io::Result<RegionHandle> {
        Ok(Self::new(id, Mapping::anonymous(size)?))
    }

    pub fn id(&self) -> SandboxId {
        self.id
    }

    pub fn base(&self) -> usize {
        self.mapping.base()
    }

    pub fn size(&self) -> usize {
        self.mapping.size()
    }

    pub fn mask(&self) -> usize {
        self.mapping.size() - 1
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub(crate) fn mark_dead(&self) {
        self.alive.store(false, Ordering::Release);
    }

    pub fn contains_host(&self, addr: usize) -> bool {
        addr >= self.base() && addr - self.base() < self.size()
    }

    /// Bounds check for `len` bytes at `offset`; returns the host address.
    pub fn check_range(&self, offset: u64, len: u64) -> Result<usize, TaintError> {
        if !self.is_alive() {
            return Err(TaintError::SandboxDead(self.id));
        }
        let size = self.size() as u64;
        match offset.checked_add(len) {
            Some(end) if end <= size => Ok(self.base() + offset as usize),
            _ => Err(TaintError::Bounds { offset, len, size }),
        }
    }

    pub fn read_bytes(&self, offset: u64, out: &mut [u8]) -> Result<(), TaintError> {
        let addr = self.check_range(offset, out.len() as u64)?;
        // SAFETY: range checked above; the mapping outlives `self`.
        unsafe { ptr::copy_nonoverlapping(addr as *const u8, out.as_mut_ptr(), out.len()) };
        Ok(())
    }

    pub fn write_bytes(&self, offset: u64, data: &[u8]) -> Result<(), TaintError> {
        let addr = self.check_range(offset, data.len() as u64)?;
        // SAFETY: range checked above.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), addr as *mut u8, data.len()) };
        Ok(())
    }

    pub fn read_scalar<V: GuestScalar>(&self, offset: u64) -> Result<V, TaintError> {
        let addr = self.check_range(offset, V::SIZE as u64)?;
        // SAFETY: range checked above.
        Ok(V::from_raw(unsafe { load_raw(addr, V::SIZE) }))
    }

    pub fn write_scalar<V: GuestScalar>(&self, offset: u64, value: V) -> Result<(), TaintError> {
        let addr = self.check_range(offset, V::SIZE as u64)?;
        // SAFETY: range checked above.
        unsafe { store_raw(addr, V::SIZE, value.to_raw()) };
        Ok(())
    }

    /// Effective host address of a guest offset under SFI masking.
    #[inline]
    pub fn masked_addr(&self, offset: u64) -> usize {
        self.base() | (offset as usize & self.mask())
    }

    /// Loads `width` (≤ 8) bytes at `offset`, wrapping inside the region.
    #[inline]
    pub fn masked_load(&self, offset: u64, width: usize) -> u64 {
        debug_assert!(width <= 8);
        let start = offset as usize & self.mask();
        if start + width <= self.size() {
            // SAFETY: fully in-region.
            unsafe { load_raw(self.base() + start, width) }
        } else {
            let mut v = 0u64;
            for i in 0..width {
                let a = self.masked_addr(offset.wrapping_add(i as u64));
                // SAFETY: masked address is in-region.
                v |= (unsafe { ptr::read_volatile(a as *const u8) } as u64) << (8 * i);
            }
            v
        }
    }

    #[inline]
    pub fn masked_store(&self, offset: u64, width: usize, value: u64) {
        debug_assert!(width <= 8);
        let start = offset as usize & self.mask();
        if start + width <= self.size() {
            // SAFETY: fully in-region.
            unsafe { store_raw(self.base() + start, width, value) }
        } else {
            for i in 0..width {
                let a = self.masked_addr(offset.wrapping_add(i as u64));
                // SAFETY: masked address is in-region.
                unsafe { ptr::write_volatile(a as *mut u8, (value >> (8 * i)) as u8) };
            }
        }
    }

    pub fn masked_read(&self, offset: u64, out: &mut [u8]) {
        let mut done = 0;
        while done < out.len() {
            let start = (offset as usize).wrapping_add(done) & self.mask();
            let n = (self.size() - start).min(out.len() - done);
            // SAFETY: [start, start+n) is in-region.
            unsafe {
                ptr::copy_nonoverlapping(
                    (self.base() + start) as *const u8,
                    out[done..].as_mut_ptr(),
                    n,
                )
            };
            done += n;
        }
    }

    pub fn masked_write(&self, offset: u64, data: &[u8]) {
        let mut done = 0;
        while done < data.len() {
            let start = (offset as usize).wrapping_add(done) & self.mask();
            let n = (self.size() - start).min(data.len() - done);
            // SAFETY: [start, start+n) is in-region.
            unsafe {
                ptr::copy_nonoverlapping(data[done..].as_ptr(), (self.base() + start) as *mut u8, n)
            };
            done += n;
        }
    }

    /// Single-copy atomic load of an aligned scalar of 1, 2, 4 or 8 bytes.
    pub(crate) fn atomic_load(&self, addr: usize, width: usize) -> u64 {
        debug_assert!(self.contains_host(addr) && addr.is_multiple_of(width));
        // SAFETY: aligned, in-region, and the region outlives the call.
        unsafe {
            match width {
                1 => AtomicU8::from_ptr(addr as *mut u8).load(Ordering::SeqCst) as u64,
                2 => AtomicU16::from_ptr(addr as *mut u16).load(Ordering::SeqCst) as u64,
                4 => AtomicU32::from_ptr(addr as *mut u32).load(Ordering::SeqCst) as u64,
                _ => AtomicU64::from_ptr(addr as *mut u64).load(Ordering::SeqCst),
            }
        }
    }

    pub(crate) fn atomic_store(&self, addr: usize, width: usize, value: u64) {
        debug_assert!(self.contains_host(addr) && addr.is_multiple_of(width));
        // SAFETY: aligned, in-region.
        unsafe {
            match width {
                1 => AtomicU8::from_ptr(addr as *mut u8).store(value as u8, Ordering::SeqCst),
                2 => AtomicU16::from_ptr(addr as *mut u16).store(value as u16, Ordering::SeqCst),
                4 => AtomicU32::from_ptr(addr as *mut u32).store(value as u32, Ordering::SeqCst),
                _ => AtomicU64::from_ptr(addr as *mut u64).store(value, Ordering::SeqCst),
            }
        }
    }

    /// Volatile load at an already validated host address.
    pub(crate) fn load_at(&self, addr: usize, width: usize) -> Result<u64, TaintError> {
        if !self.is_alive() {
            return Err(TaintError::SandboxDead(self.id));
        }
        debug_assert!(self.contains_host(addr) && self.contains_host(addr + width - 1));
        // SAFETY: callers validated the address range against this region.
        Ok(unsafe { load_raw(addr, width) })
    }

    pub(crate) fn store_at(&self, addr: usize, width: usize, value: u64) -> Result<(), TaintError> {
        if !self.is_alive() {
            return Err(TaintError::SandboxDead(self.id));
        }
        debug_assert!(self.contains_host(addr) && self.contains_host(addr + width - 1));
        // SAFETY: as in `load_at`.
        unsafe { store_raw(addr, width, value) };
        Ok(())
    }
}

/// # Safety
/// `addr..addr+width` must be mapped and readable.
#[inline]
pub(crate) unsafe fn load_raw(addr: usize, width: usize) -> u64 {
    let mut buf = [0u8; 8];
    match width {
        1 => buf[0] = ptr::read_volatile(addr as *const u8),
        2 => buf[..2].copy_from_slice(&ptr::read_volatile(addr as *const [u8; 2])),
        4 => buf[..4].copy_from_slice(&ptr::read_volatile(addr as *const [u8; 4])),
        8 => buf = ptr::read_volatile(addr as *const [u8; 8]),
        _ => {
            for (i, b) in buf.iter_mut().take(width).enumerate() {
                *b = ptr::read_volatile((addr + i) as *const u8);
            }
        }
    }
    u64::from_le_bytes(buf)
}

/// # Safety
/// `addr..addr+width` must be mapped and writable.
#[inline]
pub(crate) unsafe fn store_raw(addr: usize, width: usize, value: u64) {
    let bytes = value.to_le_bytes();
    match width {
        1 => ptr::write_volatile(addr as *mut u8, bytes[0]),
        2 => ptr::write_volatile(addr as *mut [u8; 2], [bytes[0], bytes[1]]),
        4 => ptr::write_volatile(addr as *mut [u8; 4], [bytes[0], bytes[1], bytes[2], bytes[3]]),
        8 => ptr::write_volatile(addr as *mut [u8; 8], bytes),
        _ => {
            for (i, b) in bytes.iter().take(width).enumerate() {
                ptr::write_volatile((addr + i) as *mut u8, *b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(size: usize) -> RegionHandle {
        Region::anonymous(SandboxId::HOST, size).unwrap()
    }

    #[test]
    fn base_is_size_aligned_and_zeroed() {
        let r = region(1 << 20);
        assert_eq!(r.base() % r.size(), 0);
        let mut buf = [0xAAu8; 64];
        r.read_bytes(r.size() as u64 - 64, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Mapping::anonymous(3 << 20).is_err());
        assert!(Mapping::anonymous(1 << 19).is_err());
    }

    #[test]
    fn checked_access_rejects_overflowing_ranges() {
        let r = region(1 << 20);
        assert!(r.check_range(r.size() as u64, 1).is_err());
        assert!(r.check_range(u64::MAX, 2).is_err());
        assert!(r.check_range(r.size() as u64 - 4, 4).is_ok());
    }

    #[test]
    fn masked_access_wraps_inside_region() {
        let r = region(1 << 20);
        r.masked_store(r.size() as u64 + 4, 4, 0xDEADBEEF);
        assert_eq!(r.read_scalar::<u32>(4).unwrap(), 0xDEADBEEF);
        // straddling the end wraps byte-wise to the start
        r.masked_store(r.size() as u64 - 2, 4, 0x11223344);
        assert_eq!(r.masked_load(r.size() as u64 - 2, 4), 0x11223344);
        assert_eq!(r.read_scalar::<u16>(0).unwrap(), 0x1122);
    }

    #[test]
    fn dead_region_rejects_access() {
        let r = region(1 << 20);
        r.mark_dead();
        assert_eq!(r.read_scalar::<u32>(0), Err(TaintError::SandboxDead(SandboxId::HOST)));
    }
}
