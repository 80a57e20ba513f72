//! Indexing a host array with a guest-supplied index.
//! expect: E0277

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let load = sb.lookup("test_load_u32")?;
    let palette = [0u8; 16];
    let idx: Tainted<u32> = sb.invoke(&load, (0x10000u32,))?;
    let colour = palette[idx];
    let _ = colour;
    Ok(())
}
