//! Reading a freezable field without freezing it first. Fixed.

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::guest::{register_layouts, RliInfo};
use sandcage::taint::ResolveIn;
use sandcage::GuestPtr;

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    register_layouts();
    let create = sb.lookup("rli_create")?;
    let info: Tainted<GuestPtr<RliInfo>> = sb.invoke(&create, ())?;
    let info = info.resolve_in(sb.region())?;
    let mut scan = info.freezable::<u32>("output_scanline")?;
    scan.freeze()?;
    let line: Tainted<u32> = scan.frozen_read()?;
    let _ = line;
    Ok(())
}
