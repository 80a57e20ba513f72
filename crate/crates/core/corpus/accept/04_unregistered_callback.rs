//! Handing the guest a plain host function instead of a registered callback. Fixed.

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::guest::{register_layouts, RliInfo};
use sandcage::taint::ResolveIn;
use sandcage::{Error, GuestPtr, TaintedGuestRef};

fn fill(_sb: &Sandbox, (_info,): (TaintedGuestRef<RliInfo>,)) -> Result<u32, Error> {
    Ok(0)
}

fn skip(_sb: &Sandbox, (_info, _n): (TaintedGuestRef<RliInfo>, Tainted<u32>)) -> Result<(), Error> {
    Ok(())
}

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    register_layouts();
    let create = sb.lookup("rli_create")?;
    let info: Tainted<GuestPtr<RliInfo>> = sb.invoke(&create, ())?;
    let info = info.resolve_in(sb.region())?;
    let set_source = sb.lookup("rli_set_source")?;
    let fill_cb = sb.register_callback(fill)?;
    let skip_cb = sb.register_callback(skip)?;
    let _: Tainted<i32> = sb.invoke(&set_source, (&info, &fill_cb, &skip_cb))?;
    Ok(())
}
