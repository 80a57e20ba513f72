//! Using guest arithmetic as a host loop bound. Fixed.

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let load = sb.lookup("test_load_u32")?;
    let v: Tainted<u32> = sb.invoke(&load, (0x10000u32,))?;
    let rows = (v * 2u32).verify(|r| if r <= 64 { Ok(r) } else { Err("too many rows") })?;
    for row in 0..rows {
        println!("{row}");
    }
    Ok(())
}
