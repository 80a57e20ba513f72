//! Guest record layouts.
//!
//! Record types are registered explicitly with a [`RecordLayoutDescriptor`];
//! registration audits offsets, alignment and total size against the guest
//! machine model.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use super::scalar::ValueKind;
use crate::error::TaintError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDescriptor {
    pub name: String,
    pub offset: u32,
    pub kind: ValueKind,
    /// Host reads must go through freeze.
    pub freezable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordLayoutDescriptor {
    name: String,
    fields: Vec<FieldDescriptor>,
    size: u32,
}

impl RecordLayoutDescriptor {
    /// Explicit layout; fails unless offsets are strictly increasing,
    /// naturally aligned, unique by name and within `size`.
    pub fn new(
        name: impl Into<String>,
        fields: Vec<FieldDescriptor>,
        size: u32,
    ) -> Result<Self, TaintError> {
        let desc = RecordLayoutDescriptor {
            name: name.into(),
            fields,
            size,
        };
        desc.self_check()?;
        Ok(desc)
    }

    /// Lays fields out in order with natural guest alignment.
    pub fn builder(name: impl Into<String>) -> RecordBuilder {
        RecordBuilder {
            name: name.into(),
            fields: Vec::new(),
            cursor: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn align(&self) -> u32 {
        self.fields
            .iter()
            .map(|f| f.kind.guest_align() as u32)
            .max()
            .unwrap_or(1)
    }

    pub fn fields(&self) -> &[FieldDescriptor] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.name == name)
    }

    fn self_check(&self) -> Result<(), TaintError> {
        let bad = |msg: String| Err(TaintError::Layout(format!("{}: {}", self.name, msg)));
        if self.size == 0 {
            return bad("zero-sized record".into());
        }
        let mut prev_end: Option<u64> = None;
        for (i, f) in self.fields.iter().enumerate() {
            let width = f.kind.guest_size() as u64;
            if width == 0 {
                return bad(format!("field `{}` has no size", f.name));
            }
            if !(f.offset as u64).is_multiple_of(f.kind.guest_align() as u64) {
                return bad(format!("field `{}` misaligned at {}", f.name, f.offset));
            }
            if let Some(end) = prev_end {
                if (f.offset as u64) < end {
                    return bad(format!("field `{}` overlaps or precedes its predecessor", f.name));
                }
            }
            let end = f.offset as u64 + width;
            if end > self.size as u64 {
                return bad(format!("field `{}` ends at {end}, past size {}", f.name, self.size));
            }
            if self.fields[..i].iter().any(|g| g.name == f.name) {
                return bad(format!("duplicate field `{}`", f.name));
            }
            prev_end = Some(end);
        }
        Ok(())
    }
}

pub struct RecordBuilder {
    name: String,
    fields: Vec<FieldDescriptor>,
    cursor: u32,
}

impl RecordBuilder {
    fn push(mut self, name: &str, kind: ValueKind, freezable: bool) -> Self {
        let align = kind.guest_align().max(1) as u32;
        let offset = self.cursor.div_ceil(align) * align;
        self.cursor = offset + kind.guest_size() as u32;
        self.fields.push(FieldDescriptor {
            name: name.to_string(),
            offset,
            kind,
            freezable,
        });
        self
    }

    pub fn field(self, name: &str, kind: ValueKind) -> Self {
        self.push(name, kind, false)
    }

    pub fn freezable_field(self, name: &str, kind: ValueKind) -> Self {
        self.push(name, kind, true)
    }

    pub fn build(self) -> Result<RecordLayoutDescriptor, TaintError> {
        let align = self
            .fields
            .iter()
            .map(|f| f.kind.guest_align() as u32)
            .max()
            .unwrap_or(1);
        let size = self.cursor.div_ceil(align) * align;
        RecordLayoutDescriptor::new(self.name, self.fields, size)
    }
}

type Registry = RwLock<HashMap<String, Arc<RecordLayoutDescriptor>>>;

fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(Default::default)
}

/// Registers a layout process-wide. Re-registering an identical layout is a
/// no-op; a conflicting one is rejected.
pub fn register_record(desc: RecordLayoutDescriptor) -> Result<Arc<RecordLayoutDescriptor>, TaintError> {
    desc.self_check()?;
    let mut reg = registry().write().unwrap_or_else(|p| p.into_inner());
    if let Some(existing) = reg.get(desc.name()) {
        if **existing == desc {
            return Ok(existing.clone());
        }
        return Err(TaintError::Layout(format!(
            "record `{}` already registered with a different layout",
            desc.name()
        )));
    }
    let desc = Arc::new(desc);
    reg.insert(desc.name().to_string(), desc.clone());
    Ok(desc)
}

pub fn record_layout(name: &str) -> Result<Arc<RecordLayoutDescriptor>, TaintError> {
    registry()
        .read()
        .unwrap_or_else(|p| p.into_inner())
        .get(name)
        .cloned()
        .ok_or_else(|| TaintError::UnknownRecord(name.to_string()))
}

/// A record type living in guest memory. Implement with [`guest_record!`].
pub trait GuestRecord: 'static {
    const NAME: &'static str;
}

/// Declares an uninhabited marker type for a guest record whose layout is
/// registered at runtime under the type's name.
#[macro_export]
macro_rules! guest_record {
    ($(#[$meta:meta])* $vis:vis $name:ident) => {
        $(#[$meta])*
        $vis enum $name {}

        impl $crate::taint::GuestRecord for $name {
            const NAME: &'static str = stringify!($name);
        }

        impl $crate::taint::GuestLayout for $name {
            fn guest_layout() -> ::std::result::Result<(usize, usize), $crate::TaintError> {
                $crate::taint::record_layout(stringify!($name))
                    .map(|d| (d.size() as usize, d.align() as usize))
            }
        }
    };
}
