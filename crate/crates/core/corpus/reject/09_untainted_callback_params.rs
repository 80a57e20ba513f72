//! A callback that takes guest arguments as trusted values.
//! expect: E0277

use sandcage::{BackendKind, Sandbox, SandboxConfig, Tainted};
use sandcage::Error;

fn main() -> Result<(), sandcage::Error> {
    let sb = Sandbox::create(SandboxConfig::new(BackendKind::EmuSfi).region_size(1 << 20))?;
    let cb = sb.register_callback(|_sb: &Sandbox, (n,): (u32,)| Ok::<u32, Error>(n + 1))?;
    let _ = cb;
    Ok(())
}
