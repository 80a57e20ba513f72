//! The demo guest: a streaming run-length image decoder shaped like a
//! classic callback-driven image library, its fault-injection variants, and
//! the migrated host-side consumer.

pub mod codec;
pub mod format;
pub mod host;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use crate::abi::GuestLibrary;
use crate::error::Error;
use crate::taint::{register_record, RecordLayoutDescriptor, ValueKind};

pub use host::{decode_image, decode_in, DecodeOptions, DecodeOutcome, DecodedImage, PixelPath};

/// Which build of the guest library a sandbox runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GuestVariant {
    #[default]
    Clean,
    /// Reports an `output_scanline` far past the image height.
    M1,
    /// Points `next_input_offset` outside the region before asking for input.
    M2,
    /// Calls a trampoline slot the host never registered.
    M3,
    /// Calls back into the host before any decode state exists.
    M4,
    /// Races a mutator thread against host reads of `output_scanline`.
    M5,
    /// Plants guessed host addresses in shared memory.
    M6,
    /// Hands back another invocation's client tag.
    M7,
}

impl GuestVariant {
    pub const ALL: [GuestVariant; 8] = [
        GuestVariant::Clean,
        GuestVariant::M1,
        GuestVariant::M2,
        GuestVariant::M3,
        GuestVariant::M4,
        GuestVariant::M5,
        GuestVariant::M6,
        GuestVariant::M7,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            GuestVariant::Clean => "clean",
            GuestVariant::M1 => "m1",
            GuestVariant::M2 => "m2",
            GuestVariant::M3 => "m3",
            GuestVariant::M4 => "m4",
            GuestVariant::M5 => "m5",
            GuestVariant::M6 => "m6",
            GuestVariant::M7 => "m7",
        }
    }
}

impl fmt::Display for GuestVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuestVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        GuestVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown guest variant `{s}`")))
    }
}

crate::guest_record!(
    /// The decoder's shared state record.
    pub RliInfo
);

/// Registers the guest record layouts (idempotent).
pub fn register_layouts() {
    static DONE: OnceLock<()> = OnceLock::new();
    DONE.get_or_init(|| {
        let info = RecordLayoutDescriptor::builder("RliInfo")
            .field("width", ValueKind::U32)
            .field("height", ValueKind::U32)
            .freezable_field("output_scanline", ValueKind::U32)
            .field("bytes_in_buffer", ValueKind::U32)
            .field("next_input_offset", ValueKind::Ptr)
            .field("status", ValueKind::U32)
            .field("client_slot", ValueKind::U32)
            .build()
            .expect("RliInfo layout");
        debug_assert_eq!(info.size(), codec::INFO_SIZE);
        register_record(info).expect("RliInfo registration");
    });
}

/// The guest library for `variant`.
pub fn library(variant: GuestVariant) -> Arc<GuestLibrary> {
    static LIBS: OnceLock<Vec<Arc<GuestLibrary>>> = OnceLock::new();
    register_layouts();
    LIBS.get_or_init(|| {
        GuestVariant::ALL
            .iter()
            .map(|v| Arc::new(codec::build_variant(v.index())))
            .collect()
    })[variant.index() as usize]
        .clone()
}
