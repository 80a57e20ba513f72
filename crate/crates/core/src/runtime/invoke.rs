use super::callback::Callback;
use super::machine::ArgValue;
use crate::error::TaintError;
use crate::memory::Region;
use crate::taint::{CallbackSlot, GuestScalar, IntoGuestValue, SandboxId, Tainted, TaintedGuestRef, ValueKind};

/// A resolved guest export bound to one sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRef {
    pub(crate) sandbox: SandboxId,
    pub(crate) name: String,
    pub(crate) index: u32,
    pub(crate) params: Vec<ValueKind>,
    pub(crate) ret: ValueKind,
}

impl FunctionRef {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[ValueKind] {
        &self.params
    }

    pub fn ret(&self) -> ValueKind {
        self.ret
    }
}

/// A value the host may pass into a guest call.
///
/// Implemented for host integers, tainted values, guest references and
/// callback registrations. Host references and raw pointers have no
/// implementation, so passing one does not compile.
pub trait InvokeArg {
    fn to_arg(self) -> ArgValue;
}

macro_rules! int_arg {
    ($($t:ty),*) => {$(
        impl InvokeArg for $t {
            fn to_arg(self) -> ArgValue { ArgValue::Int(self as i128) }
        }
    )*};
}

int_arg!(i8, i16, i32, i64, isize, u8, u16, u32, u64, usize);

impl InvokeArg for bool {
    fn to_arg(self) -> ArgValue {
        ArgValue::Int(self as i128)
    }
}

impl<V: GuestScalar> InvokeArg for Tainted<V> {
    fn to_arg(self) -> ArgValue {
        let origin = self.origin();
        ArgValue::Tainted {
            raw: self.into_inner().to_raw(),
            kind: V::KIND,
            origin,
        }
    }
}

impl<T> InvokeArg for &TaintedGuestRef<T> {
    fn to_arg(self) -> ArgValue {
        ArgValue::Ref {
            origin: self.origin(),
            offset: self.raw_offset(),
        }
    }
}

impl<T> InvokeArg for TaintedGuestRef<T> {
    fn to_arg(self) -> ArgValue {
        (&self).to_arg()
    }
}

impl InvokeArg for &Callback {
    fn to_arg(self) -> ArgValue {
        ArgValue::Callback {
            origin: self.origin(),
            slot: self.slot(),
        }
    }
}

impl IntoGuestValue<CallbackSlot> for &Callback {
    fn into_guest_raw(self, dest: &Region) -> Result<u64, TaintError> {
        if self.origin() != dest.id() {
            return Err(TaintError::OriginMismatch {
                expected: dest.id(),
                actual: self.origin(),
            });
        }
        Ok(self.slot() as u64)
    }
}

/// Argument lists: tuples of [`InvokeArg`].
pub trait InvokeArgs {
    fn to_args(self) -> Vec<ArgValue>;
}

macro_rules! invoke_args {
    ($($name:ident),*) => {
        impl<$($name: InvokeArg),*> InvokeArgs for ($($name,)*) {
            #[allow(non_snake_case)]
            fn to_args(self) -> Vec<ArgValue> {
                let ($($name,)*) = self;
                vec![$($name.to_arg()),*]
            }
        }
    };
}

invoke_args!();
invoke_args!(A);
invoke_args!(A, B);
invoke_args!(A, B, C);
invoke_args!(A, B, C, D);
invoke_args!(A, B, C, D, E);
invoke_args!(A, B, C, D, E, F);
invoke_args!(A, B, C, D, E, F, G);
invoke_args!(A, B, C, D, E, F, G, H);
