//! Branching on a tainted boolean.
//! expect: E0308

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let load = sb.lookup("test_load_u32")?;
    let v: Tainted<u32> = sb.invoke(&load, (0x10000u32,))?;
    if v.eq(7u32) {
        println!("seven");
    }
    Ok(())
}
