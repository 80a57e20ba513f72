//! Verifying a pointer to a guest-resident record as a whole.
//! expect: E0599

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::guest::{register_layouts, RliInfo};
use sandcage::taint::ResolveIn;
use sandcage::GuestPtr;

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    register_layouts();
    let create = sb.lookup("rli_create")?;
    let info: Tainted<GuestPtr<RliInfo>> = sb.invoke(&create, ())?;
    let checked = info.verify(|p| Ok::<_, &str>(p))?;
    let _ = checked;
    Ok(())
}
