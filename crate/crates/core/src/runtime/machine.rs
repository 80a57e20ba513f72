use crate::error::Error;
use crate::taint::{SandboxId, ValueKind};

/// Scalar widths on both sides of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineModel {
    pub guest_int: usize,
    pub guest_long: usize,
    pub guest_ptr: usize,
    pub guest_little_endian: bool,
    pub host_int: usize,
    pub host_long: usize,
    pub host_ptr: usize,
}

impl MachineModel {
    /// ILP32 little-endian guest on the current host.
    pub const ILP32: MachineModel = MachineModel {
        guest_int: 4,
        guest_long: 4,
        guest_ptr: 4,
        guest_little_endian: true,
        host_int: std::mem::size_of::<i32>(),
        host_long: std::mem::size_of::<std::ffi::c_long>(),
        host_ptr: std::mem::size_of::<usize>(),
    };
}

impl Default for MachineModel {
    fn default() -> Self {
        MachineModel::ILP32
    }
}

/// A host-side argument before translation to the guest model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgValue {
    /// Host integer, widened losslessly.
    Int(i128),
    /// A tainted value handed back to the guest unchanged.
    Tainted { raw: u64, kind: ValueKind, origin: SandboxId },
    /// A guest reference as a region offset.
    Ref { origin: SandboxId, offset: u32 },
    /// A registered callback as its trampoline slot.
    Callback { origin: SandboxId, slot: u32 },
}

fn as_integer(raw: u64, kind: ValueKind) -> i128 {
    let bits = kind.guest_size() as u32 * 8;
    if bits == 0 {
        return 0;
    }
    if kind.is_signed() {
        let shift = 64 - bits;
        (((raw << shift) as i64) >> shift) as i128
    } else if bits == 64 {
        raw as i128
    } else {
        (raw & ((1u64 << bits) - 1)) as i128
    }
}

impl MachineModel {
    /// Translates one argument to its guest representation, rejecting any
    /// value the guest parameter cannot hold.
    pub fn narrow(&self, index: usize, param: ValueKind, arg: ArgValue, sandbox: SandboxId) -> Result<u64, Error> {
        let mismatch = |what: &str| Err(Error::ArgMismatch(format!("argument {index}: {what} passed for guest {param}")));
        let check_origin = |origin: SandboxId| {
            if origin == sandbox || origin == SandboxId::HOST {
                Ok(())
            } else {
                Err(Error::ArgMismatch(format!(
                    "argument {index}: value from sandbox {origin} passed to sandbox {sandbox}"
                )))
            }
        };
        match (param, arg) {
            (ValueKind::Void, _) => mismatch("value"),
            (ValueKind::Ptr, ArgValue::Ref { origin, offset }) => {
                check_origin(origin)?;
                Ok(offset as u64)
            }
            (ValueKind::Ptr, ArgValue::Int(0)) => Ok(0),
            (ValueKind::Ptr, ArgValue::Tainted { raw, kind: ValueKind::Ptr, origin }) => {
                check_origin(origin)?;
                Ok(raw & 0xFFFF_FFFF)
            }
            (ValueKind::Ptr, _) => mismatch("non-pointer"),
            (ValueKind::Callback, ArgValue::Callback { origin, slot }) => {
                if origin != sandbox {
                    return mismatch("callback registered with another sandbox");
                }
                Ok(slot as u64)
            }
            (ValueKind::Callback, _) => mismatch("non-callback"),
            (_, ArgValue::Ref { .. }) => mismatch("guest reference"),
            (_, ArgValue::Callback { .. }) => mismatch("callback"),
            (kind, ArgValue::Int(v)) => self.fit(index, kind, v),
            (kind, ArgValue::Tainted { raw, kind: from, origin }) => {
                if from.is_reference() {
                    return mismatch("tainted reference");
                }
                check_origin(origin)?;
                self.fit(index, kind, as_integer(raw, from))
            }
        }
    }

    fn fit(&self, index: usize, kind: ValueKind, v: i128) -> Result<u64, Error> {
        let (lo, hi) = kind
            .integer_range()
            .ok_or_else(|| Error::ArgMismatch(format!("argument {index}: no integer form for {kind}")))?;
        if v < lo || v > hi {
            return Err(Error::WidthOverflow { index, value: v, kind });
        }
        let bits = kind.guest_size() * 8;
        Ok(if bits == 64 { v as u64 } else { (v as u64) & ((1u64 << bits) - 1) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SB: SandboxId = SandboxId(3);

    #[test]
    fn narrowing_rejects_value_loss() {
        let m = MachineModel::ILP32;
        assert_eq!(m.narrow(0, ValueKind::Long, ArgValue::Int(-1), SB), Ok(0xFFFF_FFFF));
        assert!(matches!(
            m.narrow(1, ValueKind::Long, ArgValue::Int(1 << 40), SB),
            Err(Error::WidthOverflow { index: 1, .. })
        ));
        assert!(m.narrow(0, ValueKind::U8, ArgValue::Int(256), SB).is_err());
        assert!(m.narrow(0, ValueKind::U32, ArgValue::Int(-1), SB).is_err());
        assert_eq!(m.narrow(0, ValueKind::I64, ArgValue::Int(-2), SB), Ok((-2i64) as u64));
    }

    #[test]
    fn tainted_values_are_reinterpreted_by_their_kind() {
        let m = MachineModel::ILP32;
        let neg = ArgValue::Tainted { raw: 0xFFFF_FFFF, kind: ValueKind::I32, origin: SB };
        assert_eq!(m.narrow(0, ValueKind::I64, neg, SB), Ok(u64::MAX));
        assert!(m.narrow(0, ValueKind::U32, neg, SB).is_err());
        let big = ArgValue::Tainted { raw: 1 << 33, kind: ValueKind::U64, origin: SB };
        assert!(matches!(m.narrow(0, ValueKind::U32, big, SB), Err(Error::WidthOverflow { .. })));
    }

    #[test]
    fn references_only_fit_pointer_params_of_their_sandbox() {
        let m = MachineModel::ILP32;
        let r = ArgValue::Ref { origin: SB, offset: 0x100 };
        assert_eq!(m.narrow(0, ValueKind::Ptr, r, SB), Ok(0x100));
        assert!(m.narrow(0, ValueKind::U32, r, SB).is_err());
        assert!(m.narrow(0, ValueKind::Ptr, r, SandboxId(4)).is_err());
        assert!(m.narrow(0, ValueKind::Ptr, ArgValue::Int(0x100), SB).is_err());
        let cb = ArgValue::Callback { origin: SB, slot: 2 };
        assert_eq!(m.narrow(0, ValueKind::Callback, cb, SB), Ok(2));
    }
}
