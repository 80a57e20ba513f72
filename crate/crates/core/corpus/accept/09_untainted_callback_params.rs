//! A callback that takes guest arguments as trusted values. Fixed.

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::Error;

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let cb = sb.register_callback(|_sb: &Sandbox, (n,): (Tainted<u32>,)| {
        Ok::<u32, Error>(n.verify(|n| n.checked_add(1).ok_or("overflow"))?)
    })?;
    let _ = cb;
    Ok(())
}
