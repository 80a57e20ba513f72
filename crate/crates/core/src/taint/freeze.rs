use std::marker::PhantomData;

use super::guest_ref::{IntoGuestValue, TaintedGuestRef};
use super::scalar::GuestScalar;
use super::tainted::Tainted;
use crate::error::TaintError;
use crate::memory::RegionHandle;

/// A guest-resident scalar guarded against double fetches.
///
/// Unfrozen, its value cannot be read at all. Freezing copies the guest value
/// into host memory; every later read returns that copy and at the same time
/// compares it with the live guest value, reporting a tamper violation on any
/// divergence. The comparison is one atomic load of the whole scalar.
pub struct FreezableCell<V: GuestScalar> {
    region: RegionHandle,
    addr: usize,
    frozen: Option<u64>,
    _marker: super::ThreadBound<V>,
}

impl<V: GuestScalar> FreezableCell<V> {
    pub(crate) fn at(region: RegionHandle, addr: usize) -> Result<Self, TaintError> {
        if !addr.is_multiple_of(V::SIZE) {
            return Err(TaintError::Misaligned {
                offset: (addr - region.base()) as u64,
                align: V::SIZE,
            });
        }
        Ok(FreezableCell {
            region,
            addr,
            frozen: None,
            _marker: PhantomData,
        })
    }

    /// Wraps a standalone guest scalar.
    pub fn from_ref(r: &TaintedGuestRef<V>) -> Result<Self, TaintError> {
        let addr = r
            .region()
            .check_range(r.raw_offset() as u64, V::SIZE as u64)?;
        Self::at(r.region().clone(), addr)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    fn live(&self) -> Result<u64, TaintError> {
        if !self.region.is_alive() {
            return Err(TaintError::SandboxDead(self.region.id()));
        }
        Ok(self.region.atomic_load(self.addr, V::SIZE))
    }

    pub fn freeze(&mut self) -> Result<(), TaintError> {
        if self.frozen.is_some() {
            return Err(TaintError::AlreadyFrozen);
        }
        self.frozen = Some(self.live()?);
        Ok(())
    }

    /// The frozen copy, provided the guest has not changed the original.
    pub fn frozen_read(&self) -> Result<Tainted<V>, TaintError> {
        let copy = self.frozen.ok_or(TaintError::ReadWhileUnfrozen)?;
        if self.live()? != copy {
            return Err(TaintError::Tamper);
        }
        Ok(Tainted::with_origin(V::from_raw(copy), self.region.id()))
    }

    /// Host write; when frozen, updates both the guest value and the copy.
    pub fn write<X: IntoGuestValue<V>>(&mut self, value: X) -> Result<(), TaintError> {
        if !self.region.is_alive() {
            return Err(TaintError::SandboxDead(self.region.id()));
        }
        let raw = value.into_guest_raw(&self.region)?;
        self.region.atomic_store(self.addr, V::SIZE, raw);
        if self.frozen.is_some() {
            self.frozen = Some(raw);
        }
        Ok(())
    }

    /// Drops the copy; the cell can be frozen again later.
    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Region;
    use crate::taint::SandboxId;

    fn cell_with(value: u32) -> (RegionHandle, FreezableCell<u32>) {
        let region = Region::anonymous(SandboxId(77), 1 << 20).unwrap();
        region.write_scalar(0x100, value).unwrap();
        let r = TaintedGuestRef::<u32>::resolve(&region, 0x100).unwrap();
        let cell = FreezableCell::from_ref(&r).unwrap();
        (region, cell)
    }

    fn open(t: Tainted<u32>) -> u32 {
        t.verify(Ok::<u32, &str>).unwrap()
    }

    #[test]
    fn read_requires_freeze() {
        let (_r, cell) = cell_with(7);
        assert_eq!(cell.frozen_read().unwrap_err(), TaintError::ReadWhileUnfrozen);
    }

    #[test]
    fn frozen_read_returns_copy_while_untouched() {
        let (_r, mut cell) = cell_with(7);
        cell.freeze().unwrap();
        assert_eq!(open(cell.frozen_read().unwrap()), 7);
        assert_eq!(cell.freeze(), Err(TaintError::AlreadyFrozen));
    }

    #[test]
    fn guest_mutation_is_a_tamper_violation() {
        let (region, mut cell) = cell_with(7);
        cell.freeze().unwrap();
        region.write_scalar(0x100, 9u32).unwrap();
        assert_eq!(cell.frozen_read().unwrap_err(), TaintError::Tamper);
    }

    #[test]
    fn host_write_updates_guest_and_copy() {
        let (region, mut cell) = cell_with(7);
        cell.freeze().unwrap();
        cell.write(11u32).unwrap();
        assert_eq!(region.read_scalar::<u32>(0x100).unwrap(), 11);
        assert_eq!(open(cell.frozen_read().unwrap()), 11);
    }

    #[test]
    fn refreeze_after_unfreeze_sees_new_value() {
        let (region, mut cell) = cell_with(7);
        cell.freeze().unwrap();
        cell.unfreeze();
        region.write_scalar(0x100, 12u32).unwrap();
        cell.freeze().unwrap();
        assert_eq!(open(cell.frozen_read().unwrap()), 12);
    }

    #[test]
    fn misaligned_cells_are_rejected() {
        let region = Region::anonymous(SandboxId(78), 1 << 20).unwrap();
        let r = TaintedGuestRef::<u32>::resolve(&region, 0x102).unwrap();
        assert!(matches!(FreezableCell::from_ref(&r), Err(TaintError::Misaligned { .. })));
    }
}
