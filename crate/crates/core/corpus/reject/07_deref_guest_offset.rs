//! Dereferencing a guest pointer that was never resolved.
//! expect: E0614

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::taint::ResolveIn;
use sandcage::GuestPtr;

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let malloc = sb.lookup("test_malloc")?;
    let p: Tainted<GuestPtr<u8>> = sb.invoke(&malloc, (16u32,))?;
    let first: u8 = *p;
    let _ = first;
    Ok(())
}
