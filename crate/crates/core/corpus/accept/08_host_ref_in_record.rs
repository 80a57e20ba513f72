//! Storing a host reference into a guest record field. Fixed.

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
    let input = vec![0u8; 64];
    let buf = sb.malloc_bytes(64)?;
    buf.write_slice(&input)?;
    info.field::<GuestPtr<u8>>("next_input_offset")?.write(&buf)?;
    Ok(())
}
