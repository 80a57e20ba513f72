use std::fmt;
use std::marker::PhantomData;

/// Guest-model kind of a value that crosses the sandbox boundary.
///
/// The guest compiles against ILP32: `int`, `long` and pointers are all four
/// bytes wide, little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ValueKind {
    Void = 0,
    Bool = 1,
    U8 = 2,
    I8 = 3,
    U16 = 4,
    I16 = 5,
    U32 = 6,
    I32 = 7,
    /// C `long` in the guest model (4 bytes).
    Long = 8,
    /// C `unsigned long` in the guest model (4 bytes).
    ULong = 9,
    U64 = 10,
    I64 = 11,
    /// Guest pointer: a 32-bit offset into the sandbox region.
    Ptr = 12,
    /// Callback trampoline index.
    Callback = 13,
}

impl ValueKind {
    pub const fn guest_size(self) -> usize {
        match self {
            ValueKind::Void => 0,
            ValueKind::Bool | ValueKind::U8 | ValueKind::I8 => 1,
            ValueKind::U16 | ValueKind::I16 => 2,
            ValueKind::U32
            | ValueKind::I32
            | ValueKind::Long
            | ValueKind::ULong
            | ValueKind::Ptr
            | ValueKind::Callback => 4,
            ValueKind::U64 | ValueKind::I64 => 8,
        }
    }

    pub const fn guest_align(self) -> usize {
        self.guest_size()
    }

    pub const fn is_signed(self) -> bool {
        matches!(
            self,
            ValueKind::I8 | ValueKind::I16 | ValueKind::I32 | ValueKind::Long | ValueKind::I64
        )
    }

    pub const fn is_reference(self) -> bool {
        matches!(self, ValueKind::Ptr | ValueKind::Callback)
    }

    /// Inclusive range of host integers representable in this kind.
    pub fn integer_range(self) -> Option<(i128, i128)> {
        let bits = (self.guest_size() * 8) as u32;
        match self {
            ValueKind::Void | ValueKind::Ptr | ValueKind::Callback => None,
            ValueKind::Bool => Some((0, 1)),
            k if k.is_signed() => Some((-(1i128 << (bits - 1)), (1i128 << (bits - 1)) - 1)),
            _ => Some((0, (1i128 << bits) - 1)),
        }
    }

    /// Two kinds share a representation at the boundary.
    pub fn compatible(self, other: ValueKind) -> bool {
        use ValueKind::*;
        self == other
            || matches!(
                (self, other),
                (I32, Long) | (Long, I32) | (U32, ULong) | (ULong, U32)
            )
    }

    pub fn from_u32(raw: u32) -> Option<ValueKind> {
        use ValueKind::*;
        Some(match raw {
            0 => Void,
            1 => Bool,
            2 => U8,
            3 => I8,
            4 => U16,
            5 => I16,
            6 => U32,
            7 => I32,
            8 => Long,
            9 => ULong,
            10 => U64,
            11 => I64,
            12 => Ptr,
            13 => Callback,
            _ => return None,
        })
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A value with a fixed little-endian guest representation of at most
/// eight bytes.
pub trait GuestScalar: Copy + Send + Sync + 'static {
    const KIND: ValueKind;
    const SIZE: usize = Self::KIND.guest_size();

    /// Zero-extended little-endian bits of the guest representation.
    fn to_raw(self) -> u64;

    /// Reinterprets the low `SIZE` bytes of `raw`.
    fn from_raw(raw: u64) -> Self;
}

/// Scalars that may be released to the host by `verify`.
///
/// Reference kinds are deliberately absent: a guest pointer has to be
/// resolved and copied, never verified into a host value.
pub trait HostCopyable: GuestScalar {}

macro_rules! int_scalar {
    ($($t:ty => $kind:ident),* $(,)?) => {$(
        impl GuestScalar for $t {
            const KIND: ValueKind = ValueKind::$kind;
            #[inline]
            fn to_raw(self) -> u64 {
                // Sign bits beyond the guest width are dropped.
                (self as u64) & width_mask(Self::SIZE)
            }
            #[inline]
            fn from_raw(raw: u64) -> Self {
                raw as $t
            }
        }
        impl HostCopyable for $t {}
    )*};
}

int_scalar!(u8 => U8, i8 => I8, u16 => U16, i16 => I16, u32 => U32, i32 => I32, u64 => U64, i64 => I64);

impl GuestScalar for bool {
    const KIND: ValueKind = ValueKind::Bool;
    fn to_raw(self) -> u64 {
        self as u64
    }
    fn from_raw(raw: u64) -> Self {
        raw & 0xFF != 0
    }
}
impl HostCopyable for bool {}

#[inline]
pub(crate) const fn width_mask(size: usize) -> u64 {
    if size >= 8 {
        u64::MAX
    } else {
        (1u64 << (size * 8)) - 1
    }
}

/// A guest pointer as stored in guest memory: a 32-bit region offset.
///
/// Holding one grants nothing; it must be resolved against a region to obtain
/// a bounds-checked [`TaintedGuestRef`](crate::taint::TaintedGuestRef).
#[repr(transparent)]
pub struct GuestPtr<T> {
    offset: u32,
    _target: PhantomData<fn() -> T>,
}

impl<T> GuestPtr<T> {
    pub const NULL: GuestPtr<T> = GuestPtr::from_offset(0);

    pub(crate) const fn from_offset(offset: u32) -> Self {
        GuestPtr {
            offset,
            _target: PhantomData,
        }
    }

    pub(crate) fn offset(self) -> u32 {
        self.offset
    }
}

impl<T> Clone for GuestPtr<T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for GuestPtr<T> {}

impl<T> fmt::Debug for GuestPtr<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GuestPtr({:#x})", self.offset)
    }
}

impl<T: 'static> GuestScalar for GuestPtr<T> {
    const KIND: ValueKind = ValueKind::Ptr;
    fn to_raw(self) -> u64 {
        self.offset as u64
    }
    fn from_raw(raw: u64) -> Self {
        GuestPtr::from_offset(raw as u32)
    }
}

/// Guest-visible form of a registered callback: a trampoline slot index.
#[derive(Clone, Copy, PartialEq, Eq)]
#[repr(transparent)]
pub struct CallbackSlot(pub(crate) u32);

impl fmt::Debug for CallbackSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CallbackSlot({})", self.0)
    }
}

impl GuestScalar for CallbackSlot {
    const KIND: ValueKind = ValueKind::Callback;
    fn to_raw(self) -> u64 {
        self.0 as u64
    }
    fn from_raw(raw: u64) -> Self {
        CallbackSlot(raw as u32)
    }
}

/// Integer scalars with guest-width wrap-around arithmetic.
pub trait GuestInt: HostCopyable + PartialOrd + PartialEq {
    const ZERO: Self;
    fn wrapping_add(self, rhs: Self) -> Self;
    fn wrapping_sub(self, rhs: Self) -> Self;
    fn wrapping_mul(self, rhs: Self) -> Self;
    /// `None` on division by zero.
    fn guest_div(self, rhs: Self) -> Option<Self>;
    fn guest_rem(self, rhs: Self) -> Option<Self>;
    fn bit_and(self, rhs: Self) -> Self;
    fn bit_or(self, rhs: Self) -> Self;
    fn bit_xor(self, rhs: Self) -> Self;
    fn bit_not(self) -> Self;
    fn wrapping_neg(self) -> Self;
    fn wrapping_shl(self, rhs: u32) -> Self;
    fn wrapping_shr(self, rhs: u32) -> Self;
}

macro_rules! guest_int {
    ($($t:ty),*) => {$(
        impl GuestInt for $t {
            const ZERO: Self = 0;
            #[inline] fn wrapping_add(self, rhs: Self) -> Self { <$t>::wrapping_add(self, rhs) }
            #[inline] fn wrapping_sub(self, rhs: Self) -> Self { <$t>::wrapping_sub(self, rhs) }
            #[inline] fn wrapping_mul(self, rhs: Self) -> Self { <$t>::wrapping_mul(self, rhs) }
            #[inline] fn guest_div(self, rhs: Self) -> Option<Self> {
                if rhs == 0 { None } else { Some(<$t>::wrapping_div(self, rhs)) }
            }
            #[inline] fn guest_rem(self, rhs: Self) -> Option<Self> {
                if rhs == 0 { None } else { Some(<$t>::wrapping_rem(self, rhs)) }
            }
            #[inline] fn bit_and(self, rhs: Self) -> Self { self & rhs }
            #[inline] fn bit_or(self, rhs: Self) -> Self { self | rhs }
            #[inline] fn bit_xor(self, rhs: Self) -> Self { self ^ rhs }
            #[inline] fn bit_not(self) -> Self { !self }
            #[inline] fn wrapping_neg(self) -> Self { <$t>::wrapping_neg(self) }
            #[inline] fn wrapping_shl(self, rhs: u32) -> Self { <$t>::wrapping_shl(self, rhs) }
            #[inline] fn wrapping_shr(self, rhs: u32) -> Self { <$t>::wrapping_shr(self, rhs) }
        }
    )*};
}

guest_int!(u8, i8, u16, i16, u32, i32, u64, i64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        assert_eq!(i32::from_raw((-5i32).to_raw()), -5);
        assert_eq!((-1i32).to_raw(), 0xFFFF_FFFF);
        assert_eq!((-1i8).to_raw(), 0xFF);
        assert_eq!(u64::from_raw(u64::MAX.to_raw()), u64::MAX);
        assert!(bool::from_raw(true.to_raw()));
    }

    #[test]
    fn integer_ranges_follow_guest_widths() {
        assert_eq!(ValueKind::Long.integer_range(), Some((i32::MIN as i128, i32::MAX as i128)));
        assert_eq!(ValueKind::ULong.integer_range(), Some((0, u32::MAX as i128)));
        assert_eq!(ValueKind::U64.integer_range(), Some((0, u64::MAX as i128)));
        assert_eq!(ValueKind::Ptr.integer_range(), None);
    }

    #[test]
    fn kind_codes_round_trip() {
        for raw in 0..14 {
            assert_eq!(ValueKind::from_u32(raw).unwrap() as u32, raw);
        }
        assert!(ValueKind::from_u32(14).is_none());
    }
}
