//! Context-free pointer swizzling over size-aligned regions.
//!
//! Because every region base is a multiple of its power-of-two size, a host
//! address splits into `base | offset`: the low bits are the guest offset and
//! the high bits identify the region. Any in-region host address can serve as
//! the example pointer that recovers the base.

use crate::error::TaintError;

/// Guest offset of an in-region host address: `addr AND (size-1)`.
#[inline]
pub fn swizzle_to_guest(host_addr: usize, size: usize) -> u32 {
    debug_assert!(size.is_power_of_two());
    (host_addr & (size - 1)) as u32
}

/// Like [`swizzle_to_guest`] but rejects addresses outside `[base, base+size)`.
pub fn swizzle_to_guest_checked(host_addr: usize, base: usize, size: usize) -> Result<u32, TaintError> {
    if host_addr < base || host_addr - base >= size {
        return Err(TaintError::Bounds {
            offset: host_addr.wrapping_sub(base) as u64,
            len: 0,
            size: size as u64,
        });
    }
    Ok(swizzle_to_guest(host_addr, size))
}

/// Host address of `guest_off`, taking the region base from any non-null
/// in-region `example_host_addr`: `(example AND NOT(size-1)) OR (guest_off AND (size-1))`.
#[inline]
pub fn swizzle_to_host(guest_off: u32, example_host_addr: usize, size: usize) -> usize {
    debug_assert!(size.is_power_of_two());
    let mask = size - 1;
    (example_host_addr & !mask) | (guest_off as usize & mask)
}
