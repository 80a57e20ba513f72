//! Verifying a pointer to a guest-resident record as a whole. Fixed.

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
    let width = info
        .field::<u32>("width")?
        .read()?
        .verify(|w| if w <= 4096 { Ok(w) } else { Err("width") })?;
    let _ = width;
    Ok(())
}
