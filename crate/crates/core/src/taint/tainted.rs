use std::fmt;
use std::ops::{Add, BitAnd, BitOr, BitXor, Div, Mul, Neg, Not, Rem, Shl, Shr, Sub};
use std::sync::atomic::{AtomicU8, Ordering};

use super::audit;
use super::scalar::{GuestInt, GuestScalar, HostCopyable};
use crate::error::TaintError;

/// Identity of the sandbox a tainted value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SandboxId(pub u32);

impl SandboxId {
    /// Tag for values the host tainted itself.
    pub const HOST: SandboxId = SandboxId(0);
}

impl fmt::Display for SandboxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sb{}", self.0)
    }
}

/// What happens when a validator rejects a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationPolicy {
    /// Return a typed validation error (default).
    ReturnError,
    /// Abort the host process.
    Abort,
}

static POLICY: AtomicU8 = AtomicU8::new(0);

pub fn set_validation_policy(policy: ValidationPolicy) {
    POLICY.store(
        match policy {
            ValidationPolicy::ReturnError => 0,
            ValidationPolicy::Abort => 1,
        },
        Ordering::SeqCst,
    );
}

pub fn validation_policy() -> ValidationPolicy {
    match POLICY.load(Ordering::SeqCst) {
        0 => ValidationPolicy::ReturnError,
        _ => ValidationPolicy::Abort,
    }
}

/// Routes every validator rejection through the configured policy.
pub(crate) fn reject(reason: String) -> TaintError {
    if validation_policy() == ValidationPolicy::Abort {
        log::error!("validation failed under abort policy: {reason}");
        eprintln!("sandcage: validation failed: {reason}");
        std::process::abort();
    }
    TaintError::Validation(reason)
}

/// A value that originated in a sandbox.
///
/// The payload is only reachable through [`Tainted::verify`] or
/// [`Tainted::unsafe_unverified`]. Arithmetic and comparisons stay tainted.
/// `Tainted` deliberately implements neither `PartialEq` nor `PartialOrd`,
/// so it cannot steer host control flow.
#[derive(Clone, Copy)]
pub struct Tainted<V> {
    value: V,
    origin: SandboxId,
    fault: bool,
}

impl<V> Tainted<V> {
    /// Taints a host value (origin [`SandboxId::HOST`]).
    pub fn new(value: V) -> Self {
        Tainted {
            value,
            origin: SandboxId::HOST,
            fault: false,
        }
    }

    pub fn with_origin(value: V, origin: SandboxId) -> Self {
        Tainted {
            value,
            origin,
            fault: false,
        }
    }

    pub fn origin(&self) -> SandboxId {
        self.origin
    }

    /// Removes the taint without any check. Emits an audit record when
    /// auditing is on.
    pub fn unsafe_unverified(self, label: &str) -> V {
        audit::record(self.origin, label);
        self.value
    }

    pub(crate) fn into_inner(self) -> V {
        self.value
    }

    pub(crate) fn map_tainted<U>(self, f: impl FnOnce(V) -> U) -> Tainted<U> {
        Tainted {
            value: f(self.value),
            origin: self.origin,
            fault: self.fault,
        }
    }
}

impl<V: HostCopyable> Tainted<V> {
    /// Runs `check` on the payload and releases its result to the host.
    ///
    /// `check` may project to a different type. A value produced by a faulting
    /// operation (division by a tainted zero) is rejected before `check` runs.
    pub fn verify<U, E: fmt::Display>(
        self,
        check: impl FnOnce(V) -> Result<U, E>,
    ) -> Result<U, TaintError> {
        if self.fault {
            return Err(reject("arithmetic fault in tainted computation".into()));
        }
        check(self.value).map_err(|e| reject(e.to_string()))
    }

    /// Tainted flag telling whether an arithmetic fault occurred.
    pub fn faulted(&self) -> Tainted<bool> {
        Tainted {
            value: self.fault,
            origin: self.origin,
            fault: false,
        }
    }
}

impl<V> fmt::Debug for Tainted<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tainted<{}>(from {})", std::any::type_name::<V>(), self.origin)
    }
}

/// Right-hand operands accepted by tainted arithmetic: plain scalars or
/// other tainted values.
pub trait TaintedOperand<V> {
    fn into_parts(self) -> (V, Option<SandboxId>, bool);
}

impl<V: GuestScalar> TaintedOperand<V> for V {
    fn into_parts(self) -> (V, Option<SandboxId>, bool) {
        (self, None, false)
    }
}

impl<V: GuestScalar> TaintedOperand<V> for Tainted<V> {
    fn into_parts(self) -> (V, Option<SandboxId>, bool) {
        (self.value, Some(self.origin), self.fault)
    }
}

impl<V> Tainted<V> {
    fn combine(self, rhs_origin: Option<SandboxId>, rhs_fault: bool) -> (SandboxId, bool) {
        let origin = if self.origin == SandboxId::HOST {
            rhs_origin.unwrap_or(self.origin)
        } else {
            self.origin
        };
        (origin, self.fault || rhs_fault)
    }
}

macro_rules! tainted_binop {
    ($trait:ident, $method:ident, $op:ident) => {
        impl<V: GuestInt, R: TaintedOperand<V>> $trait<R> for Tainted<V> {
            type Output = Tainted<V>;
            #[inline]
            fn $method(self, rhs: R) -> Tainted<V> {
                let (r, ro, rf) = rhs.into_parts();
                let (origin, fault) = self.combine(ro, rf);
                Tainted {
                    value: self.value.$op(r),
                    origin,
                    fault,
                }
            }
        }
    };
}

tainted_binop!(Add, add, wrapping_add);
tainted_binop!(Sub, sub, wrapping_sub);
tainted_binop!(Mul, mul, wrapping_mul);
tainted_binop!(BitAnd, bitand, bit_and);
tainted_binop!(BitOr, bitor, bit_or);
tainted_binop!(BitXor, bitxor, bit_xor);

macro_rules! tainted_divop {
    ($trait:ident, $method:ident, $op:ident) => {
        impl<V: GuestInt, R: TaintedOperand<V>> $trait<R> for Tainted<V> {
            type Output = Tainted<V>;
            #[inline]
            fn $method(self, rhs: R) -> Tainted<V> {
                let (r, ro, rf) = rhs.into_parts();
                let (origin, fault) = self.combine(ro, rf);
                match self.value.$op(r) {
                    Some(value) => Tainted {
                        value,
                        origin,
                        fault,
                    },
                    None => Tainted {
                        value: V::ZERO,
                        origin,
                        fault: true,
                    },
                }
            }
        }
    };
}

tainted_divop!(Div, div, guest_div);
tainted_divop!(Rem, rem, guest_rem);

impl<V: GuestInt> Shl<u32> for Tainted<V> {
    type Output = Tainted<V>;
    fn shl(self, rhs: u32) -> Tainted<V> {
        self.map_tainted(|v| v.wrapping_shl(rhs))
    }
}

impl<V: GuestInt> Shr<u32> for Tainted<V> {
    type Output = Tainted<V>;
    fn shr(self, rhs: u32) -> Tainted<V> {
        self.map_tainted(|v| v.wrapping_shr(rhs))
    }
}

impl<V: GuestInt> Neg for Tainted<V> {
    type Output = Tainted<V>;
    fn neg(self) -> Tainted<V> {
        self.map_tainted(GuestInt::wrapping_neg)
    }
}

impl<V: GuestInt> Not for Tainted<V> {
    type Output = Tainted<V>;
    fn not(self) -> Tainted<V> {
        self.map_tainted(GuestInt::bit_not)
    }
}

// Host scalar on the left: `3 + tainted`.
macro_rules! host_lhs {
    ($($t:ty),*) => {$(
        impl Add<Tainted<$t>> for $t {
            type Output = Tainted<$t>;
            fn add(self, rhs: Tainted<$t>) -> Tainted<$t> { Tainted::with_origin(self, rhs.origin) + rhs }
        }
        impl Sub<Tainted<$t>> for $t {
            type Output = Tainted<$t>;
            fn sub(self, rhs: Tainted<$t>) -> Tainted<$t> { Tainted::with_origin(self, rhs.origin) - rhs }
        }
        impl Mul<Tainted<$t>> for $t {
            type Output = Tainted<$t>;
            fn mul(self, rhs: Tainted<$t>) -> Tainted<$t> { Tainted::with_origin(self, rhs.origin) * rhs }
        }
        impl Div<Tainted<$t>> for $t {
            type Output = Tainted<$t>;
            fn div(self, rhs: Tainted<$t>) -> Tainted<$t> { Tainted::with_origin(self, rhs.origin) / rhs }
        }
    )*};
}

host_lhs!(u8, i8, u16, i16, u32, i32, u64, i64);

impl BitAnd for Tainted<bool> {
    type Output = Tainted<bool>;
    fn bitand(self, rhs: Tainted<bool>) -> Tainted<bool> {
        let (origin, fault) = self.combine(Some(rhs.origin), rhs.fault);
        Tainted {
            value: self.value & rhs.value,
            origin,
            fault,
        }
    }
}

impl BitOr for Tainted<bool> {
    type Output = Tainted<bool>;
    fn bitor(self, rhs: Tainted<bool>) -> Tainted<bool> {
        let (origin, fault) = self.combine(Some(rhs.origin), rhs.fault);
        Tainted {
            value: self.value | rhs.value,
            origin,
            fault,
        }
    }
}

impl Not for Tainted<bool> {
    type Output = Tainted<bool>;
    fn not(self) -> Tainted<bool> {
        self.map_tainted(|b| !b)
    }
}

impl<V: GuestScalar + PartialOrd> Tainted<V> {
    fn compare<R: TaintedOperand<V>>(self, rhs: R, f: impl FnOnce(&V, &V) -> bool) -> Tainted<bool> {
        let (r, ro, rf) = rhs.into_parts();
        let (origin, fault) = self.combine(ro, rf);
        Tainted {
            value: f(&self.value, &r),
            origin,
            fault,
        }
    }

    pub fn lt<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a < b)
    }

    pub fn le<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a <= b)
    }

    pub fn gt<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a > b)
    }

    pub fn ge<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a >= b)
    }

    pub fn eq<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a == b)
    }

    pub fn ne<R: TaintedOperand<V>>(self, rhs: R) -> Tainted<bool> {
        self.compare(rhs, |a, b| a != b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open<V: HostCopyable>(t: Tainted<V>) -> V {
        t.verify(Ok::<V, &str>).unwrap()
    }

    #[test]
    fn verify_membership() {
        let allowed = |v: i32| if [0, 1, 2].contains(&v) { Ok(v) } else { Err("not a status") };
        assert_eq!(Tainted::new(1).verify(allowed), Ok(1));
        assert!(matches!(
            Tainted::new(7).verify(allowed),
            Err(TaintError::Validation(_))
        ));
    }

    #[test]
    fn verify_may_project() {
        let t = Tainted::new(300u32);
        let as_u8: Result<u8, _> = t.verify(|v| u8::try_from(v).map_err(|e| e.to_string()));
        assert!(as_u8.is_err());
        assert_eq!(Tainted::new(3u32).verify(|v| Ok::<_, String>(v as usize * 2)), Ok(6));
    }

    #[test]
    fn arithmetic_stays_tainted_and_wraps_at_guest_width() {
        assert_eq!(open(Tainted::new(2u32) + 3), 5);
        assert_eq!(open(Tainted::new(0xFFFF_FFFFu32) + 1), 0);
        assert_eq!(open(Tainted::new(4u32) * Tainted::new(5u32)), 20);
        assert_eq!(open(3u32 + Tainted::new(4u32)), 7);
        assert_eq!(open(Tainted::new(i32::MIN) / -1), i32::MIN);
        assert_eq!(open(-Tainted::new(5i32)), -5);
        assert_eq!(open(Tainted::new(1u32) << 31), 0x8000_0000);
    }

    #[test]
    fn division_by_tainted_zero_is_a_faulted_sentinel() {
        let q = Tainted::new(10u32) / Tainted::with_origin(0u32, SandboxId(9));
        assert_eq!(q.origin(), SandboxId(9));
        assert!(open(q.faulted()));
        assert!(q.verify(Ok::<u32, &str>).is_err());
        assert_eq!(q.unsafe_unverified("test"), 0);
        // faults are sticky through further arithmetic
        assert!((q + 1).verify(Ok::<u32, &str>).is_err());
    }

    #[test]
    fn comparisons_produce_tainted_bools() {
        let c = Tainted::new(3i32).lt(5);
        assert!(open(c));
        assert!(!open(Tainted::new(3i32).ge(Tainted::new(5))));
        assert!(open(Tainted::new(3i32).eq(3) & !Tainted::new(1u8).ne(1)));
    }

    #[test]
    fn origin_propagates_from_guest_operand() {
        let g = Tainted::with_origin(1u32, SandboxId(4));
        assert_eq!((Tainted::new(1u32) + g).origin(), SandboxId(4));
        assert_eq!((g + Tainted::with_origin(1u32, SandboxId(5))).origin(), SandboxId(4));
    }
}
