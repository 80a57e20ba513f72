use std::fmt;
use std::marker::PhantomData;
use std::sync::Arc;

use super::audit;
use super::freeze::FreezableCell;
use super::record::{record_layout, GuestRecord, RecordLayoutDescriptor};
use super::scalar::{GuestPtr, GuestScalar, HostCopyable};
use super::tainted::{reject, SandboxId, Tainted};
use crate::error::TaintError;
use crate::memory::{Region, RegionHandle};
use crate::runtime::swizzle::{swizzle_to_guest_checked, swizzle_to_host};

/// Guest-model size and alignment of a type a guest reference can point at.
pub trait GuestLayout: 'static {
    fn guest_layout() -> Result<(usize, usize), TaintError>;
}

impl<T: GuestScalar> GuestLayout for T {
    fn guest_layout() -> Result<(usize, usize), TaintError> {
        Ok((T::SIZE, T::SIZE.max(1)))
    }
}

/// A bounds-checked reference to a `T` inside one sandbox's region.
///
/// Construction verifies that the whole `T` lies inside the region; every
/// access re-checks that the sandbox is still alive.
pub struct TaintedGuestRef<T> {
    region: RegionHandle,
    offset: u32,
    _target: PhantomData<fn() -> T>,
}

impl<T> Clone for TaintedGuestRef<T> {
    fn clone(&self) -> Self {
        TaintedGuestRef {
            region: self.region.clone(),
            offset: self.offset,
            _target: PhantomData,
        }
    }
}

impl<T> fmt::Debug for TaintedGuestRef<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TaintedGuestRef<{}>({} @ {:#x})",
            std::any::type_name::<T>(),
            self.region.id(),
            self.offset
        )
    }
}

/// Index operands: host integers or tainted guest integers.
pub trait IndexOperand {
    fn index_value(self) -> u64;
}

macro_rules! index_operand {
    ($($t:ty),*) => {$(
        impl IndexOperand for $t {
            fn index_value(self) -> u64 { self as u64 }
        }
        impl IndexOperand for Tainted<$t> {
            // Only bounds are checked; the index needs no further validation.
            fn index_value(self) -> u64 { self.into_inner() as u64 }
        }
    )*};
}

index_operand!(u8, u16, u32, u64, usize);

impl<T: GuestLayout> TaintedGuestRef<T> {
    /// Resolves a guest offset in `region`; null and out-of-range offsets are
    /// rejected.
    pub(crate) fn resolve(region: &RegionHandle, offset: u64) -> Result<Self, TaintError> {
        if offset == 0 {
            return Err(TaintError::NullPointer);
        }
        let (size, _) = T::guest_layout()?;
        region.check_range(offset, size as u64)?;
        Ok(TaintedGuestRef {
            region: region.clone(),
            offset: offset as u32,
            _target: PhantomData,
        })
    }

    /// A reference to `offset` in `region`, for host code that knows the
    /// guest layout. Null and out-of-range offsets are rejected.
    pub fn at(region: &RegionHandle, offset: u32) -> Result<Self, TaintError> {
        Self::resolve(region, offset as u64)
    }

    /// Element `i` of the array starting at this reference, as a reference.
    pub fn element<I: IndexOperand>(&self, i: I) -> Result<TaintedGuestRef<T>, TaintError> {
        let (size, _) = T::guest_layout()?;
        let i = i.index_value();
        let off = i
            .checked_mul(size as u64)
            .and_then(|d| d.checked_add(self.offset as u64))
            .ok_or(TaintError::Bounds {
                offset: u64::MAX,
                len: size as u64,
                size: self.region.size() as u64,
            })?;
        Self::resolve(&self.region, off)
    }
}

impl<T> TaintedGuestRef<T> {
    pub fn origin(&self) -> SandboxId {
        self.region.id()
    }

    /// The guest offset, tainted: it came from (or is visible to) the guest.
    pub fn offset(&self) -> Tainted<u32> {
        Tainted::with_origin(self.offset, self.region.id())
    }

    pub(crate) fn raw_offset(&self) -> u32 {
        self.offset
    }

    pub(crate) fn region(&self) -> &RegionHandle {
        &self.region
    }

    pub(crate) fn host_addr(&self) -> usize {
        self.region.base() + self.offset as usize
    }

    /// Guest-model pointer value for this reference.
    pub fn to_guest_ptr(&self) -> GuestPtr<T> {
        GuestPtr::from_offset(self.offset)
    }

    /// Reinterprets the target type; the new type must still fit.
    pub fn cast<U: GuestLayout>(&self) -> Result<TaintedGuestRef<U>, TaintError> {
        TaintedGuestRef::resolve(&self.region, self.offset as u64)
    }

    /// Host address of the target with no checks. Emits an audit record.
    pub fn unsafe_unverified(&self, label: &str) -> *mut T {
        audit::record(self.region.id(), label);
        self.host_addr() as *mut T
    }

    /// Copies `len` raw bytes at the target out of guest memory with no
    /// validation. Emits an audit record.
    pub fn unsafe_unverified_bytes(&self, len: usize, label: &str) -> Result<Vec<u8>, TaintError> {
        let mut out = vec![0u8; len];
        self.region.read_bytes(self.offset as u64, &mut out)?;
        audit::record(self.region.id(), label);
        Ok(out)
    }
}

impl<V: GuestScalar> TaintedGuestRef<V> {
    pub fn deref(&self) -> Result<TaintedVolatile<V>, TaintError> {
        let addr = self.region.check_range(self.offset as u64, V::SIZE as u64)?;
        Ok(TaintedVolatile::new(self.region.clone(), addr))
    }

    /// Volatile view of element `i`; `offset + i*size` must stay in-region.
    pub fn index<I: IndexOperand>(&self, i: I) -> Result<TaintedVolatile<V>, TaintError> {
        self.element(i)?.deref()
    }

    /// Writes host values into the guest array starting here.
    pub fn write_slice(&self, values: &[V]) -> Result<(), TaintError> {
        let mut bytes = Vec::with_capacity(values.len() * V::SIZE);
        for v in values {
            bytes.extend_from_slice(&v.to_raw().to_le_bytes()[..V::SIZE]);
        }
        self.region.write_bytes(self.offset as u64, &bytes)
    }
}

impl<V: HostCopyable> TaintedGuestRef<V> {
    /// Copies the value into host memory, then validates the copy.
    pub fn copy_and_verify<U, E: fmt::Display>(
        &self,
        check: impl FnOnce(V) -> Result<U, E>,
    ) -> Result<U, TaintError> {
        let v: V = self.region.read_scalar(self.offset as u64)?;
        check(v).map_err(|e| reject(e.to_string()))
    }

    /// Copies `count` elements into host memory, then validates them as one
    /// unit.
    pub fn copy_and_verify_array<U, E: fmt::Display>(
        &self,
        count: usize,
        check: impl FnOnce(Vec<V>) -> Result<U, E>,
    ) -> Result<U, TaintError> {
        let bytes_len = (count as u64).checked_mul(V::SIZE as u64).ok_or(TaintError::Bounds {
            offset: self.offset as u64,
            len: u64::MAX,
            size: self.region.size() as u64,
        })?;
        self.region.check_range(self.offset as u64, bytes_len)?;
        let mut raw = vec![0u8; bytes_len as usize];
        self.region.read_bytes(self.offset as u64, &mut raw)?;
        let values: Vec<V> = if V::SIZE == 1 {
            raw.into_iter().map(|b| V::from_raw(b as u64)).collect()
        } else {
            raw.chunks_exact(V::SIZE)
                .map(|c| {
                    let mut b = [0u8; 8];
                    b[..V::SIZE].copy_from_slice(c);
                    V::from_raw(u64::from_le_bytes(b))
                })
                .collect()
        };
        check(values).map_err(|e| reject(e.to_string()))
    }
}

impl TaintedGuestRef<u8> {
    /// Copies a NUL-terminated string of at most `max_len` bytes (terminator
    /// included) and validates it.
    pub fn copy_and_verify_string<U, E: fmt::Display>(
        &self,
        max_len: usize,
        check: impl FnOnce(&str) -> Result<U, E>,
    ) -> Result<U, TaintError> {
        let avail = self.region.size() - self.offset as usize;
        let window = max_len.min(avail);
        let mut buf = vec![0u8; window];
        self.region.read_bytes(self.offset as u64, &mut buf)?;
        let Some(nul) = buf.iter().position(|&b| b == 0) else {
            return Err(if window < max_len {
                TaintError::Bounds {
                    offset: self.offset as u64,
                    len: max_len as u64,
                    size: self.region.size() as u64,
                }
            } else {
                TaintError::UnterminatedString(max_len)
            });
        };
        buf.truncate(nul);
        let s = String::from_utf8(buf).map_err(|_| reject("string is not valid UTF-8".into()))?;
        check(&s).map_err(|e| reject(e.to_string()))
    }
}

impl<R: GuestRecord> TaintedGuestRef<R> {
    fn lookup_field(
        &self,
        desc: &RecordLayoutDescriptor,
        name: &str,
        kind: super::ValueKind,
    ) -> Result<(usize, bool), TaintError> {
        if desc.name() != R::NAME {
            return Err(TaintError::UnknownRecord(desc.name().to_string()));
        }
        let registered = record_layout(R::NAME)?;
        if *registered != *desc {
            return Err(TaintError::UnknownRecord(desc.name().to_string()));
        }
        let f = desc.field(name).ok_or_else(|| TaintError::UnknownField {
            record: R::NAME.to_string(),
            field: name.to_string(),
        })?;
        if !f.kind.compatible(kind) {
            return Err(TaintError::KindMismatch {
                field: name.to_string(),
                actual: f.kind,
                requested: kind,
            });
        }
        let off = self.offset as u64 + f.offset as u64;
        let addr = self.region.check_range(off, f.kind.guest_size() as u64)?;
        Ok((addr, f.freezable))
    }

    /// Volatile view of a named field using the registered layout.
    pub fn field<K: GuestScalar>(&self, name: &str) -> Result<TaintedVolatile<K>, TaintError> {
        let desc = record_layout(R::NAME)?;
        self.field_in(&desc, name)
    }

    /// Volatile view of a named field using an explicit descriptor, which
    /// must be the one registered for `R`.
    pub fn field_in<K: GuestScalar>(
        &self,
        desc: &RecordLayoutDescriptor,
        name: &str,
    ) -> Result<TaintedVolatile<K>, TaintError> {
        let (addr, freezable) = self.lookup_field(desc, name, K::KIND)?;
        if freezable {
            return Err(TaintError::FreezableField(name.to_string()));
        }
        Ok(TaintedVolatile::new(self.region.clone(), addr))
    }

    /// A freezable field; its value is only readable once frozen.
    pub fn freezable<K: GuestScalar>(&self, name: &str) -> Result<FreezableCell<K>, TaintError> {
        let desc = record_layout(R::NAME)?;
        let (addr, freezable) = self.lookup_field(&desc, name, K::KIND)?;
        if !freezable {
            return Err(TaintError::NotFreezable(name.to_string()));
        }
        FreezableCell::at(self.region.clone(), addr)
    }
}

/// A transient view of a value that lives in guest memory.
///
/// Reads copy into host memory and come back tainted; writes store into the
/// guest, swizzling references to 32-bit offsets. Views cannot leave the
/// thread that created them.
pub struct TaintedVolatile<V> {
    region: RegionHandle,
    addr: usize,
    _marker: super::ThreadBound<V>,
}

impl<V> fmt::Debug for TaintedVolatile<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TaintedVolatile<{}>({} @ {:#x})",
            std::any::type_name::<V>(),
            self.region.id(),
            self.addr - self.region.base()
        )
    }
}

/// Values the host may store into a guest slot of kind `V`.
pub trait IntoGuestValue<V> {
    fn into_guest_raw(self, dest: &Region) -> Result<u64, TaintError>;
}

impl<V: GuestScalar> IntoGuestValue<V> for V {
    fn into_guest_raw(self, _dest: &Region) -> Result<u64, TaintError> {
        Ok(self.to_raw())
    }
}

impl<V: GuestScalar> IntoGuestValue<V> for Tainted<V> {
    fn into_guest_raw(self, _dest: &Region) -> Result<u64, TaintError> {
        Ok(self.into_inner().to_raw())
    }
}

impl<T: 'static> IntoGuestValue<GuestPtr<T>> for &TaintedGuestRef<T> {
    fn into_guest_raw(self, dest: &Region) -> Result<u64, TaintError> {
        if self.region.id() != dest.id() {
            return Err(TaintError::OriginMismatch {
                expected: dest.id(),
                actual: self.region.id(),
            });
        }
        swizzle_to_guest_checked(self.host_addr(), dest.base(), dest.size()).map(u64::from)
    }
}

impl<T: 'static> IntoGuestValue<GuestPtr<T>> for TaintedGuestRef<T> {
    fn into_guest_raw(self, dest: &Region) -> Result<u64, TaintError> {
        (&self).into_guest_raw(dest)
    }
}

impl<V: GuestScalar> TaintedVolatile<V> {
    pub(crate) fn new(region: RegionHandle, addr: usize) -> Self {
        TaintedVolatile {
            region,
            addr,
            _marker: PhantomData,
        }
    }

    pub fn origin(&self) -> SandboxId {
        self.region.id()
    }

    pub fn read(&self) -> Result<Tainted<V>, TaintError> {
        let raw = self.region.load_at(self.addr, V::SIZE)?;
        Ok(Tainted::with_origin(V::from_raw(raw), self.region.id()))
    }

    pub fn write<X: IntoGuestValue<V>>(&self, value: X) -> Result<(), TaintError> {
        let raw = value.into_guest_raw(&self.region)?;
        self.region.store_at(self.addr, V::SIZE, raw)
    }
}

impl<T: GuestLayout> TaintedVolatile<GuestPtr<T>> {
    /// Reads a guest pointer field and resolves it in-region.
    ///
    /// The base comes from this view's own host address (context-free
    /// swizzling); offsets at or past the region size are rejected rather
    /// than masked. Null yields `None`.
    pub fn read_ref(&self) -> Result<Option<TaintedGuestRef<T>>, TaintError> {
        let guest_off = self.region.load_at(self.addr, 4)? as u32;
        if guest_off == 0 {
            return Ok(None);
        }
        let size = self.region.size();
        if guest_off as u64 >= size as u64 {
            return Err(TaintError::Bounds {
                offset: guest_off as u64,
                len: 0,
                size: size as u64,
            });
        }
        let host = swizzle_to_host(guest_off, self.addr, size);
        TaintedGuestRef::resolve(&self.region, (host - self.region.base()) as u64).map(Some)
    }
}

/// Resolves tainted guest pointers against a region.
pub trait ResolveIn {
    type Target;
    fn resolve_in(self, region: &Arc<Region>) -> Result<Self::Target, TaintError>;
}

impl<T: GuestLayout> ResolveIn for Tainted<GuestPtr<T>> {
    type Target = TaintedGuestRef<T>;
    fn resolve_in(self, region: &Arc<Region>) -> Result<TaintedGuestRef<T>, TaintError> {
        if self.origin() != region.id() && self.origin() != SandboxId::HOST {
            return Err(TaintError::OriginMismatch {
                expected: region.id(),
                actual: self.origin(),
            });
        }
        TaintedGuestRef::resolve(region, self.into_inner().offset() as u64)
    }
}
